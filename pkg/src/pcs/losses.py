"""Pixel-space and feature-space training losses.

The pixel loss is the squared L2 distance between reconstruction and label,
summed over pixels and averaged over the batch. The feature loss applies the
same distance to the outputs of a fixed convolutional feature stack at a
named tap point. Constant factors are deliberately not folded in, so learning
rates quoted for one normalization do not transfer to another.

The feature stack mirrors the familiar VGG19 truncation: 3x3 conv + ReLU
layers with channel plan 64,64,P,128,128,P,256,256,256,256,P, where P is a
2x2 max-pool. Tap names are conv1_1 .. conv3_4 (taken after the ReLU),
pool1 .. pool3, and "input" for the raw image. Weights are frozen; they come
either from a ".pcsw" dump of a pretrained network or from a seeded Gaussian
draw for self-contained experiments.
"""

from dataclasses import dataclass

import numpy as np

from . import weights as weights_io
from .errors import ConfigError, GeometryError, ShapeError
from .tensor import ConvSpec, Tensor, maxpool2, mul, relu, replicate_channels, scale, sub, sum_all
from .tensor import conv2d

# (name, out_channels); None marks a 2x2 max-pool.
VGG_PLAN = (
    ("conv1_1", 64),
    ("conv1_2", 64),
    ("pool1", None),
    ("conv2_1", 128),
    ("conv2_2", 128),
    ("pool2", None),
    ("conv3_1", 256),
    ("conv3_2", 256),
    ("conv3_3", 256),
    ("conv3_4", 256),
    ("pool3", None),
)

MAX_DEPTH = sum(1 for _, ch in VGG_PLAN if ch is not None)

# The loss-tap notation VGG2_2 / VGG3_4 is ambiguous between the conv
# activation and the pool that follows it; both are implemented and the
# aliases default to the pools.
TAP_ALIASES = {"vgg2_2": "pool2", "vgg3_4": "pool3"}

INPUT_CHANNELS = 3


def resolve_tap(tap):
    name = tap.strip().lower()
    name = TAP_ALIASES.get(name, name)
    if name != "input" and name not in {entry for entry, _ in VGG_PLAN}:
        raise ConfigError(f"unknown feature tap {tap!r}")
    return name


def tap_pool_factor(tap):
    """Cumulative downsampling between the input and the tap."""
    tap = resolve_tap(tap)
    if tap == "input":
        return 1
    factor = 1
    for name, ch in VGG_PLAN:
        if ch is None:
            factor *= 2
        if name == tap:
            return factor
    raise ConfigError(f"unknown feature tap {tap!r}")


def _plan_prefix(depth):
    """Plan entries for the first ``depth`` convs plus any pool that
    immediately follows the last one."""
    if not 0 <= depth <= MAX_DEPTH:
        raise ConfigError(f"extractor depth must be 0..{MAX_DEPTH}, got {depth}")
    entries = []
    convs = 0
    for name, ch in VGG_PLAN:
        if ch is not None:
            if convs == depth:
                break
            convs += 1
        entries.append((name, ch))
        if ch is None and convs == depth:
            break
    return entries


class FeatureExtractor:
    """An ordered, frozen stack of conv+ReLU and pool layers with named taps."""

    def __init__(self, layers):
        # layers: list of ("conv", name, Tensor w, Tensor b) / ("pool", name)
        self.layers = layers
        for entry in layers:
            if entry[0] == "conv":
                entry[2].requires_grad = False
                entry[3].requires_grad = False

    @property
    def taps(self):
        return ["input"] + [entry[1] for entry in self.layers]

    def weight_dict(self):
        out = {}
        for entry in self.layers:
            if entry[0] == "conv":
                out[f"{entry[1]}.w"] = entry[2].data
                out[f"{entry[1]}.b"] = entry[3].data
        return out


def random_extractor(seed, depth):
    """Fixed Gaussian weights (std sqrt(2 / fan_in), zero biases) over the
    first ``depth`` convs of the channel plan."""
    rng = np.random.default_rng(seed)
    layers = []
    in_c = INPUT_CHANNELS
    for name, ch in _plan_prefix(depth):
        if ch is None:
            layers.append(("pool", name))
            continue
        std = np.sqrt(2.0 / (in_c * 9))
        w = Tensor((rng.standard_normal((ch, in_c, 3, 3)) * std).astype(np.float32))
        b = Tensor(np.zeros((1, ch, 1, 1), dtype=np.float32))
        layers.append(("conv", name, w, b))
        in_c = ch
    return FeatureExtractor(layers)


def save_extractor(extractor, path):
    weights_io.write_pcsw(path, extractor.weight_dict())


def parse_extractor_source(source):
    """Accepts a ".pcsw" path, a "random:SEED:DEPTH" string, or a
    (seed, depth) pair."""
    if isinstance(source, tuple):
        return ("random", int(source[0]), int(source[1]))
    text = str(source)
    if text.startswith("random:"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"random extractor source must be 'random:SEED:DEPTH', got {source!r}")
        try:
            return ("random", int(parts[1]), int(parts[2]))
        except ValueError:
            raise ConfigError(f"bad random extractor source {source!r}") from None
    return ("file", text)


def load_extractor(source):
    """Build a frozen extractor from a weight file or a seeded random spec."""
    kind, *args = parse_extractor_source(source)
    if kind == "random":
        return random_extractor(*args)
    path = args[0]
    tensors, _ = weights_io.read_pcsw(path)
    conv_names = [name for name, ch in VGG_PLAN if ch is not None]
    depth = 0
    for name in conv_names:
        if f"{name}.w" in tensors:
            depth += 1
        else:
            break
    if depth == 0:
        raise ConfigError(f"{path}: no conv layers found (expected names like 'conv1_1.w')")
    for name in conv_names[depth:]:
        if f"{name}.w" in tensors or f"{name}.b" in tensors:
            raise ConfigError(f"{path}: layer {name!r} present without its predecessors")
    layers = []
    in_c = INPUT_CHANNELS
    for name, ch in _plan_prefix(depth):
        if ch is None:
            layers.append(("pool", name))
            continue
        w_name, b_name = f"{name}.w", f"{name}.b"
        if b_name not in tensors:
            raise ConfigError(f"{path}: missing bias record {b_name!r}")
        w, b = tensors[w_name], tensors[b_name]
        if w.shape != (ch, in_c, 3, 3):
            raise ShapeError(f"{path}: {w_name!r} has shape {w.shape}, expected {(ch, in_c, 3, 3)}")
        if b.shape != (1, ch, 1, 1):
            raise ShapeError(f"{path}: {b_name!r} has shape {b.shape}, expected {(1, ch, 1, 1)}")
        layers.append(("conv", name, Tensor(w), Tensor(b)))
        in_c = ch
    return FeatureExtractor(layers)


def feature_extract(extractor, image, tap):
    """Run the stack up to ``tap`` and return the feature map there.

    Grayscale images are replicated to the stack's 3 input channels before
    the first conv; the "input" tap returns the image untouched.
    """
    tap = resolve_tap(tap)
    if tap == "input":
        return image
    if tap not in {entry[1] for entry in extractor.layers}:
        raise ConfigError(f"tap {tap!r} is not instantiated in this extractor")
    n, c, h, w = image.data.shape
    factor = tap_pool_factor(tap)
    if h % factor or w % factor:
        raise GeometryError(f"image {h}x{w} is not divisible by the tap's pool factor {factor}")
    if c == 1:
        x = replicate_channels(image, INPUT_CHANNELS)
    elif c == INPUT_CHANNELS:
        x = image
    else:
        raise ShapeError(f"extractor takes 1 or {INPUT_CHANNELS} channels, got {c}")
    for entry in extractor.layers:
        if entry[0] == "pool":
            x = maxpool2(x)
        else:
            _, _, wt, bt = entry
            spec = _conv_spec(wt.data.shape)
            x = relu(conv2d(x, wt, bt, spec))
        if entry[1] == tap:
            return x
    raise ConfigError(f"tap {tap!r} not reached")  # unreachable after the membership check


def _conv_spec(wshape):
    return ConvSpec(in_channels=wshape[1], out_channels=wshape[0],
                    kernel_h=3, kernel_w=3, pad_h=1, pad_w=1)


@dataclass(frozen=True)
class LossSpec:
    """Which training loss to use: plain pixel distance or the feature-space
    distance at ``tap`` of the extractor described by ``extractor``."""

    kind: str  # "pixel" | "perceptual"
    tap: str = None
    extractor: object = None

    def __post_init__(self):
        if self.kind not in ("pixel", "perceptual"):
            raise ConfigError(f"loss kind must be 'pixel' or 'perceptual', got {self.kind!r}")
        if self.kind == "pixel":
            if self.tap is not None:
                raise ConfigError("pixel loss does not take a tap")
        else:
            if self.tap is None:
                raise ConfigError("perceptual loss requires a tap")
            object.__setattr__(self, "tap", resolve_tap(self.tap))
            if self.extractor is None:
                raise ConfigError("perceptual loss requires an extractor source")


def pixel_loss(recon, label):
    """Squared L2 distance summed over pixels, averaged over the batch.
    Gradient flows into ``recon`` only."""
    if recon.data.shape != label.data.shape:
        raise ShapeError(
            f"pixel_loss shapes differ: {recon.data.shape} vs {label.data.shape}"
        )
    d = sub(recon, label.detach())
    return scale(sum_all(mul(d, d)), 1.0 / recon.data.shape[0])


def perceptual_loss(extractor, tap, recon, label):
    """Pixel loss applied to the tap feature maps of ``recon`` and ``label``;
    the label branch is detached."""
    recon_f = feature_extract(extractor, recon, tap)
    label_f = feature_extract(extractor, label.detach(), tap)
    return pixel_loss(recon_f, label_f)
