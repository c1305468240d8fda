"""Dataset sampling, SGD-with-momentum training and checkpointing.

Every source of randomness is derived from the config seed: model init uses
it directly, and the crop batch for iteration i is drawn from a generator
seeded with (seed, spawn_key=(i,)). A checkpoint therefore only needs
(seed, iteration) to resume bit-exactly, which is what the 16-byte RNG state
in the checkpoint trailer stores.
"""

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from . import model as model_mod
from . import netpbm
from . import weights as weights_io
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    iterations: int
    seed: int
    loss: losses_mod.LossSpec
    model: model_mod.ModelConfig
    dataset_dir: str
    crop_size: int
    checkpoint_every: int
    out_dir: str
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.crop_size % self.model.measurement_stride:
            raise ConfigError(
                f"crop_size {self.crop_size} is not divisible by the measurement "
                f"stride {self.model.measurement_stride}"
            )
        if self.loss.kind == "perceptual":
            factor = losses_mod.tap_pool_factor(self.loss.tap)
            if self.crop_size % factor:
                raise ConfigError(
                    f"crop_size {self.crop_size} is not divisible by tap "
                    f"{self.loss.tap!r}'s pool factor {factor}"
                )


class CropSampler:
    """Deterministic stream of random grayscale crops from a directory of
    PGM/PPM images. Batch i is fully determined by (seed, i)."""

    def __init__(self, images, names, crop_size, seed):
        self.images = images  # list of 2-D float32 arrays in [0, 1]
        self.names = names
        self.crop_size = crop_size
        self.seed = seed

    def batch(self, iteration, batch_size):
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(iteration,)))
        c = self.crop_size
        out = np.empty((batch_size, 1, c, c), dtype=np.float32)
        for k in range(batch_size):
            img = self.images[rng.integers(len(self.images))]
            top = int(rng.integers(img.shape[0] - c + 1))
            left = int(rng.integers(img.shape[1] - c + 1))
            out[k, 0] = img[top : top + c, left : left + c]
        return out

    def stream(self, batch_size, start=0):
        i = start
        while True:
            yield self.batch(i, batch_size)
            i += 1


def load_dataset(dataset_dir, crop_size, seed):
    """Load every usable PGM/PPM in ``dataset_dir`` (sorted by name) and
    return a CropSampler. Images smaller than the crop are skipped with a
    warning; ending up with none is an error."""
    paths = sorted(
        p for p in Path(dataset_dir).iterdir() if p.suffix.lower() in (".pgm", ".ppm")
    )
    if not paths:
        raise DataError(f"no PGM/PPM images found in {dataset_dir}")
    images, names = [], []
    for p in paths:
        img = netpbm.to_grayscale(netpbm.read_image(p)).data[0, 0]
        if img.shape[0] < crop_size or img.shape[1] < crop_size:
            log.warning("skipping %s: %sx%s is smaller than crop %s",
                        p.name, img.shape[0], img.shape[1], crop_size)
            continue
        images.append(np.ascontiguousarray(img, dtype=np.float32))
        names.append(p.name)
    if not images:
        raise DataError(f"no images in {dataset_dir} are at least {crop_size}x{crop_size}")
    return CropSampler(images, names, crop_size, seed)


@dataclass
class TrainState:
    params: model_mod.ModelParams
    velocity: dict
    iteration: int
    seed: int
    running_loss: float = 0.0
    running_count: int = 0

    @classmethod
    def fresh(cls, model_config, seed):
        params = model_mod.build_model(model_config, seed)
        velocity = {name: np.zeros_like(t.data) for name, t in params.named()}
        return cls(params=params, velocity=velocity, iteration=0, seed=seed)


def train_step(state, batch, config, extractor=None):
    """One forward/backward/update pass over ``batch`` (shape (b, 1, c, c)).

    The update is momentum SGD: v <- mu * v - lr * grad; w <- w + v.
    A non-finite loss aborts with DivergenceError rather than continuing.
    """
    label = batch if isinstance(batch, Tensor) else Tensor._wrap(np.ascontiguousarray(batch))
    recon = model_mod.recover(state.params, model_mod.measure(state.params, label))
    if config.loss.kind == "pixel":
        loss = losses_mod.pixel_loss(recon, label)
    else:
        if extractor is None:
            raise ConfigError("perceptual loss requires an extractor")
        loss = losses_mod.perceptual_loss(extractor, config.loss.tap, recon, label)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise DivergenceError("training loss is not finite", iteration=state.iteration)

    state.params.zero_grads()
    loss.backward()
    for name, t in state.params.named():
        v = state.velocity[name]
        v *= config.momentum
        if t.grad is not None:
            v -= config.learning_rate * t.grad
        t.data += v
    state.iteration += 1
    state.running_loss += loss_value
    state.running_count += 1
    return loss_value


def checkpoint_path(out_dir, iteration):
    return Path(out_dir) / f"checkpoint_{iteration:08d}.pcsw"


def save_checkpoint(state, path):
    """Weights plus "vel."-prefixed momentum buffers and the trainstate
    trailer (iteration, 16-byte RNG state = seed + iteration counters)."""
    out = {model_mod.CONFIG_RECORD: model_mod._config_record(state.params.config)}
    for name, t in state.params.named():
        out[name] = t.data
    for name, _ in state.params.named():
        out[f"vel.{name}"] = state.velocity[name]
    rng_bytes = struct.pack("<QQ", state.seed & 0xFFFFFFFFFFFFFFFF, state.iteration)
    weights_io.write_pcsw(path, out, trainstate=(state.iteration, rng_bytes))


def load_checkpoint(path, expected_config=None):
    tensors, trainstate = weights_io.read_pcsw(path)
    if trainstate is None:
        raise ConfigError(f"{path} has no trainstate trailer; not a checkpoint")
    params = model_mod.load_params(path, expected_config=expected_config)
    velocity = {}
    for name, t in params.named():
        key = f"vel.{name}"
        if key not in tensors:
            raise ShapeError(f"{path}: missing momentum buffer {key!r}")
        if tensors[key].shape != t.data.shape:
            raise ShapeError(f"{path}: momentum buffer {key!r} has the wrong shape")
        velocity[name] = np.ascontiguousarray(tensors[key])
    iteration, rng_bytes = trainstate
    seed, counter = struct.unpack("<QQ", rng_bytes)
    if counter != iteration:
        raise ConfigError(f"{path}: rng counter {counter} disagrees with iteration {iteration}")
    return TrainState(params=params, velocity=velocity, iteration=iteration, seed=seed)


def train(config, resume_from=None):
    """Run ``config.iterations`` optimization steps, checkpointing every
    ``checkpoint_every`` and appending `iter<TAB>loss<TAB>wallclock_ms` lines
    to ``out_dir``/loss_log.tsv. Fully deterministic given the seed."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config=config.model)
        if state.seed != config.seed:
            raise ConfigError(
                f"checkpoint seed {state.seed} differs from config seed {config.seed}"
            )
        log_mode = "a"
    else:
        state = TrainState.fresh(config.model, config.seed)
        log_mode = "w"

    extractor = None
    if config.loss.kind == "perceptual":
        extractor = losses_mod.load_extractor(config.loss.extractor)

    sampler = load_dataset(config.dataset_dir, config.crop_size, config.seed)

    t0 = time.monotonic()
    interval_loss = 0.0
    interval_count = 0
    last_saved = None
    with open(out_dir / "loss_log.tsv", log_mode) as log_file:
        while state.iteration < config.iterations:
            batch = sampler.batch(state.iteration, config.batch_size)
            loss_value = train_step(state, batch, config, extractor)
            interval_loss += loss_value
            interval_count += 1
            if state.iteration % config.checkpoint_every == 0:
                path = checkpoint_path(out_dir, state.iteration)
                save_checkpoint(state, path)
                last_saved = state.iteration
                ms = int((time.monotonic() - t0) * 1000)
                log_file.write(f"{state.iteration}\t{interval_loss / interval_count:.10g}\t{ms}\n")
                log_file.flush()
                interval_loss = 0.0
                interval_count = 0
        if last_saved != state.iteration:
            save_checkpoint(state, checkpoint_path(out_dir, state.iteration))
            if interval_count:
                ms = int((time.monotonic() - t0) * 1000)
                log_file.write(f"{state.iteration}\t{interval_loss / interval_count:.10g}\t{ms}\n")
    return state
