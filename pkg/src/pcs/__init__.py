"""Full-image convolutional compressive sensing, trainable with either a
pixel-space or a feature-space (perceptual) squared-error loss."""

from .errors import (ConfigError, ContractError, DataError, DivergenceError,
                     FormatError, GeometryError, PcsError, ShapeError)
from .tensor import (ConvSpec, Tensor, add, conv2d, conv2d_transposed, grad_check,
                     maxpool2, mul, relu, replicate_channels, scale, sub, sum_all)
from .model import ModelConfig, ModelParams, build_model, load_params, measure, recover, recover_image, save_params
from .losses import (FeatureExtractor, LossSpec, feature_extract, load_extractor,
                     perceptual_loss, pixel_loss, random_extractor, save_extractor)
from .train import CropSampler, TrainConfig, TrainState, load_dataset, train, train_step
from .metrics import MetricReport, MetricRow, blockiness, evaluate, psnr, ssim
from .netpbm import read_image, to_grayscale, write_image

__version__ = "0.1.0"
