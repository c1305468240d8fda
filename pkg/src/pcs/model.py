"""The sensing/recovery network: an overlapping strided convolution takes the
measurements, a transposed convolution brings them back to image resolution,
and residual blocks plus an output convolution refine the result.

Measurement rate accounting: a stride-s measurement conv with m output
channels produces m values per s*s pixel footprint, so the achieved rate is
m / s**2. Integer channel counts mean the achieved rate rarely equals the
nominal target exactly; both are always reported side by side.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import weights as weights_io
from .errors import ConfigError, FormatError, GeometryError, ShapeError
from .tensor import ConvSpec, Tensor, add, conv2d, conv2d_transposed, relu

log = logging.getLogger(__name__)

CONFIG_RECORD = "__config"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters, all derived from the measurement plan."""

    measurement_stride: int
    measurement_channels: int
    measurement_kernel: int = 0  # 0 means the default 2 * stride
    recovery_channels: int = 64
    res_blocks: int = 1
    target_mr: float = 0.0  # 0 means "achieved rate is the target"

    def __post_init__(self):
        if self.measurement_stride < 2:
            raise ConfigError("measurement_stride must be >= 2")
        if self.measurement_channels < 1:
            raise ConfigError("measurement_channels must be >= 1")
        if self.measurement_kernel == 0:
            object.__setattr__(self, "measurement_kernel", 2 * self.measurement_stride)
        if self.measurement_kernel <= self.measurement_stride:
            raise ConfigError(
                f"measurement kernel ({self.measurement_kernel}) must exceed the stride "
                f"({self.measurement_stride}) so footprints overlap"
            )
        if (self.measurement_kernel - self.measurement_stride) % 2:
            raise ConfigError("kernel - stride must be even for symmetric padding")
        if self.recovery_channels < 1:
            raise ConfigError("recovery_channels must be >= 1")
        if self.res_blocks < 0:
            raise ConfigError("res_blocks must be >= 0")
        if self.target_mr == 0.0:
            object.__setattr__(self, "target_mr", self.achieved_mr)
        if not 0.0 < self.target_mr <= 1.0:
            raise ConfigError("target_mr must lie in (0, 1]")

    @classmethod
    def from_rate(cls, target_mr, stride, **kwargs):
        """Pick the channel count closest to a nominal measurement rate."""
        if not 0.0 < target_mr <= 1.0:
            raise ConfigError("target_mr must lie in (0, 1]")
        m = max(1, round(target_mr * stride * stride))
        return cls(measurement_stride=stride, measurement_channels=m,
                   target_mr=target_mr, **kwargs)

    @property
    def achieved_mr(self):
        return self.measurement_channels / self.measurement_stride**2

    @property
    def measurement_pad(self):
        return (self.measurement_kernel - self.measurement_stride) // 2

    def mr_report(self):
        return (
            f"achieved_mr = {self.measurement_channels}/{self.measurement_stride}^2 "
            f"= {self.achieved_mr:.4%} (target {self.target_mr:.2%}, "
            f"delta {abs(self.achieved_mr - self.target_mr):.4%})"
        )

    def param_shapes(self):
        """Fixed-order (name, shape) pairs of every learnable tensor."""
        s, k, m = self.measurement_stride, self.measurement_kernel, self.measurement_channels
        rc = self.recovery_channels
        shapes = [
            ("meas.w", (m, 1, k, k)),
            ("meas.b", (1, m, 1, 1)),
            ("deconv.w", (m, rc, k, k)),
            ("deconv.b", (1, rc, 1, 1)),
        ]
        for i in range(1, self.res_blocks + 1):
            shapes += [
                (f"res{i}.conv1.w", (rc, rc, 3, 3)),
                (f"res{i}.conv1.b", (1, rc, 1, 1)),
                (f"res{i}.conv2.w", (rc, rc, 3, 3)),
                (f"res{i}.conv2.b", (1, rc, 1, 1)),
            ]
        shapes += [("out.w", (1, rc, 3, 3)), ("out.b", (1, 1, 1, 1))]
        return shapes


@dataclass
class ModelParams:
    """All learnable weights, keyed by the names in ``ModelConfig.param_shapes``."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def named(self):
        return [(name, self.tensors[name]) for name, _ in self.config.param_shapes()]

    def zero_grads(self):
        for _, t in self.named():
            t.zero_grad()


def build_model(config, seed, dtype=np.float32):
    """Deterministically initialize weights: zero-mean Gaussians with
    std sqrt(2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3] if not name.startswith("deconv") else shape[0] * shape[2] * shape[3]
            std = math.sqrt(2.0 / fan_in)
            data = (rng.standard_normal(shape) * std).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    log.info("built model: %s", config.mr_report())
    return ModelParams(config, tensors)


def _measure_spec(config):
    return ConvSpec(
        in_channels=1,
        out_channels=config.measurement_channels,
        kernel_h=config.measurement_kernel,
        kernel_w=config.measurement_kernel,
        stride_h=config.measurement_stride,
        stride_w=config.measurement_stride,
        pad_h=config.measurement_pad,
        pad_w=config.measurement_pad,
    )


def _deconv_spec(config):
    return ConvSpec(
        in_channels=config.measurement_channels,
        out_channels=config.recovery_channels,
        kernel_h=config.measurement_kernel,
        kernel_w=config.measurement_kernel,
        stride_h=config.measurement_stride,
        stride_w=config.measurement_stride,
        pad_h=config.measurement_pad,
        pad_w=config.measurement_pad,
        transposed=True,
    )


def _conv3_spec(in_c, out_c):
    return ConvSpec(in_channels=in_c, out_channels=out_c, kernel_h=3, kernel_w=3, pad_h=1, pad_w=1)


def measure(params, image):
    """Sense a (n, 1, h, w) image; h and w must be stride multiples. Returns
    (n, m, h/s, w/s) measurements."""
    cfg = params.config
    n, c, h, w = image.data.shape
    if c != 1:
        raise ShapeError(f"measure expects single-channel images, got {c} channels")
    s = cfg.measurement_stride
    if h % s or w % s:
        raise GeometryError(
            f"image {h}x{w} is not divisible by the measurement stride {s}; pad or crop first"
        )
    t = params.tensors
    return conv2d(image, t["meas.w"], t["meas.b"], _measure_spec(cfg))


def recover(params, measurements):
    """Reconstruct the image from measurements produced by ``measure``."""
    cfg = params.config
    if measurements.data.shape[1] != cfg.measurement_channels:
        raise ShapeError(
            f"measurements have {measurements.data.shape[1]} channels, "
            f"model produces {cfg.measurement_channels}"
        )
    t = params.tensors
    x = conv2d_transposed(measurements, t["deconv.w"], t["deconv.b"], _deconv_spec(cfg))
    rc = cfg.recovery_channels
    for i in range(1, cfg.res_blocks + 1):
        y = conv2d(x, t[f"res{i}.conv1.w"], t[f"res{i}.conv1.b"], _conv3_spec(rc, rc))
        y = relu(y)
        y = conv2d(y, t[f"res{i}.conv2.w"], t[f"res{i}.conv2.b"], _conv3_spec(rc, rc))
        x = add(x, y)
    return conv2d(x, t["out.w"], t["out.b"], _conv3_spec(rc, 1))


def recover_image(params, image, pad_policy="reflect"):
    """measure + recover for a single-channel image of any size.

    With ``pad_policy="reflect"`` the image is reflect-padded up to the next
    stride multiple and the reconstruction is center-cropped back; with
    ``"error"`` non-divisible sizes raise GeometryError.
    """
    if pad_policy not in ("reflect", "error"):
        raise ConfigError(f"pad_policy must be 'reflect' or 'error', got {pad_policy!r}")
    s = params.config.measurement_stride
    n, c, h, w = image.data.shape
    if c != 1:
        raise ShapeError(f"recover_image expects single-channel images, got {c} channels")
    need_h = (-h) % s
    need_w = (-w) % s
    if (need_h or need_w) and pad_policy == "error":
        raise GeometryError(f"image {h}x{w} is not divisible by stride {s}")
    if need_h or need_w:
        top, left = need_h // 2, need_w // 2
        padded = np.pad(
            image.data,
            ((0, 0), (0, 0), (top, need_h - top), (left, need_w - left)),
            mode="reflect",
        )
        recon = recover(params, measure(params, Tensor._wrap(padded)))
        return Tensor._wrap(
            np.ascontiguousarray(recon.data[:, :, top : top + h, left : left + w])
        )
    return recover(params, measure(params, image))


def _config_record(config):
    return np.array(
        [
            config.measurement_stride,
            config.measurement_kernel,
            config.measurement_channels,
            config.recovery_channels,
            config.res_blocks,
            config.target_mr,
        ],
        dtype=np.float32,
    )


def _config_from_record(rec, path):
    if rec.shape != (6,):
        raise FormatError(f"{path}: malformed {CONFIG_RECORD} record")
    return ModelConfig(
        measurement_stride=int(round(float(rec[0]))),
        measurement_kernel=int(round(float(rec[1]))),
        measurement_channels=int(round(float(rec[2]))),
        recovery_channels=int(round(float(rec[3]))),
        res_blocks=int(round(float(rec[4]))),
        target_mr=float(rec[5]),
    )


def save_params(params, path):
    """Write weights (plus the architecture record) as a ".pcsw" file."""
    out = {CONFIG_RECORD: _config_record(params.config)}
    for name, t in params.named():
        out[name] = t.data
    weights_io.write_pcsw(path, out)


def load_params(path, expected_config=None):
    """Load weights saved by ``save_params``. With ``expected_config`` the
    file must match that architecture exactly; otherwise the architecture is
    rebuilt from the stored config record."""
    tensors, _ = weights_io.read_pcsw(path)
    if expected_config is not None:
        config = expected_config
    else:
        if CONFIG_RECORD not in tensors:
            raise FormatError(f"{path}: missing {CONFIG_RECORD} record; pass expected_config")
        config = _config_from_record(tensors[CONFIG_RECORD], path)
    loaded = {}
    for name, shape in config.param_shapes():
        if name not in tensors:
            raise ShapeError(f"{path}: tensor {name!r} missing from weight file")
        arr = tensors[name]
        if arr.shape != shape:
            raise ShapeError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}"
            )
        loaded[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, loaded)
