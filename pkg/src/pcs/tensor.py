"""Dense 4-D tensors (batch, channel, height, width) with reverse-mode autodiff.

The operation set is exactly what the sensing/recovery networks and their
losses need: strided convolution, its transpose, ReLU, 2x2 max-pooling,
elementwise arithmetic and a full reduction. Each forward call records a
closure on a per-graph tape (define-by-run); ``Tensor.backward`` replays the
tape in reverse topological order and accumulates gradients additively.

Values are stored in float32 by default; float64 tensors are supported
throughout so that finite-difference verification can run at full precision.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A 4-D array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ShapeError(
                f"tensors are (batch, channel, height, width) with every dim >= 1, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite (NaN/Inf rejected)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, data, parents=(), backward=None):
        # Internal op-output constructor: skips validation, prunes the tape
        # when no parent needs gradients.
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = parents
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.shape != (1, 1, 1, 1):
            raise ContractError(f"item() requires shape (1,1,1,1), got {self.data.shape}")
        return float(self.data[0, 0, 0, 0])

    def detach(self):
        """A view of the same values with no graph history and no gradient."""
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def require_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains NaN/Inf values")
        return self

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on.

        Gradients accumulate additively, both across multiple uses of a
        tensor inside one graph and across repeated backward calls.
        """
        if self.data.shape != (1, 1, 1, 1):
            raise ContractError(f"backward() requires a (1,1,1,1) scalar, got {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.ones((1, 1, 1, 1), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly transposed) 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    transposed: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be >= 1")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("ConvSpec padding must be non-negative")
        if self.kernel_h < self.stride_h or self.kernel_w < self.stride_w:
            raise GeometryError("kernel must cover the stride (overlapping footprints)")

    def out_size(self, h, w):
        """Forward output spatial size; raises when the size law has a remainder."""
        if self.transposed:
            oh = (h - 1) * self.stride_h - 2 * self.pad_h + self.kernel_h
            ow = (w - 1) * self.stride_w - 2 * self.pad_w + self.kernel_w
            if oh < 1 or ow < 1:
                raise GeometryError(f"transposed output size {oh}x{ow} is empty")
            return oh, ow
        span_h = h + 2 * self.pad_h - self.kernel_h
        span_w = w + 2 * self.pad_w - self.kernel_w
        if span_h < 0 or span_w < 0:
            raise GeometryError(f"kernel {self.kernel_h}x{self.kernel_w} larger than padded input {h}x{w}")
        if span_h % self.stride_h or span_w % self.stride_w:
            raise GeometryError(
                f"input {h}x{w} with pad ({self.pad_h},{self.pad_w}) does not tile exactly "
                f"under kernel ({self.kernel_h},{self.kernel_w}) stride ({self.stride_h},{self.stride_w})"
            )
        return span_h // self.stride_h + 1, span_w // self.stride_w + 1


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed tensor dtypes: {dt} vs {t.data.dtype}")
    return dt


def _pad2d(a, ph, pw):
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _strided_windows(padded, kh, kw, sh, sw):
    # (n, c, H, W) -> (n, c, oh, ow, kh, kw) view over strided kernel windows
    v = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw]


def _scatter_windows(cols, n, c, full_h, full_w, kh, kw, sh, sw, dtype):
    # Adjoint of _strided_windows: sum window contributions back onto the
    # padded canvas. Each (i, j) slice hits disjoint strided positions, so
    # plain slice-adds stay deterministic.
    oh, ow = cols.shape[2], cols.shape[3]
    buf = np.zeros((n, c, full_h, full_w), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, :, :, i, j]
    return buf


def _check_bias(bias, out_channels):
    if bias is None:
        return None
    if bias.data.shape != (1, out_channels, 1, 1):
        raise ShapeError(f"bias must have shape (1, {out_channels}, 1, 1), got {bias.data.shape}")
    return bias


def conv2d(x, weights, bias, spec):
    """Strided 2-D convolution: windowed dot products plus a per-channel bias.

    ``weights`` is (out_channels, in_channels, kernel_h, kernel_w) and
    ``bias`` is a (1, out_channels, 1, 1) tensor or None.
    """
    if spec.transposed:
        raise ContractError("conv2d called with a transposed ConvSpec")
    n, c, h, w = x.data.shape
    expected_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.data.shape != expected_w:
        raise ShapeError(f"conv2d weights must be {expected_w}, got {weights.data.shape}")
    if c != spec.in_channels:
        raise ShapeError(f"conv2d input has {c} channels, spec expects {spec.in_channels}")
    bias = _check_bias(bias, spec.out_channels)
    _check_same_dtype(*([x, weights] + ([bias] if bias is not None else [])))
    oh, ow = spec.out_size(h, w)

    padded = _pad2d(x.data, spec.pad_h, spec.pad_w)
    win = _strided_windows(padded, spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w)
    # (n, oh, ow, out_c) <- contract windows with the kernel
    out = np.tensordot(win, weights.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data

    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        if weights.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(weights, gw)
        if x.requires_grad:
            cols = np.tensordot(g, weights.data, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
            cols = np.moveaxis(cols, 3, 1)
            buf = _scatter_windows(
                cols, n, c, padded.shape[2], padded.shape[3],
                spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w, x.data.dtype,
            )
            ph, pw = spec.pad_h, spec.pad_w
            _accumulate(x, buf[:, :, ph : ph + h, pw : pw + w])

    return Tensor._wrap(out, parents, backward)


def conv2d_transposed(x, weights, bias, spec):
    """Transposed convolution; with zero bias it is the exact linear adjoint
    of ``conv2d`` run with the same weight values and geometry.

    ``weights`` is (in_channels, out_channels, kernel_h, kernel_w).
    """
    if not spec.transposed:
        raise ContractError("conv2d_transposed called with a non-transposed ConvSpec")
    n, c, h, w = x.data.shape
    expected_w = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weights.data.shape != expected_w:
        raise ShapeError(f"conv2d_transposed weights must be {expected_w}, got {weights.data.shape}")
    if c != spec.in_channels:
        raise ShapeError(f"conv2d_transposed input has {c} channels, spec expects {spec.in_channels}")
    bias = _check_bias(bias, spec.out_channels)
    _check_same_dtype(*([x, weights] + ([bias] if bias is not None else [])))
    oh, ow = spec.out_size(h, w)

    kh, kw, sh, sw = spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w
    full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
    cols = np.tensordot(x.data, weights.data, axes=([1], [0]))  # (n, h, w, out_c, kh, kw)
    cols = np.moveaxis(cols, 3, 1)
    buf = _scatter_windows(cols, n, spec.out_channels, full_h, full_w, kh, kw, sh, sw, x.data.dtype)
    ph, pw = spec.pad_h, spec.pad_w
    out = np.ascontiguousarray(buf[:, :, ph : ph + oh, pw : pw + ow])
    if bias is not None:
        out += bias.data

    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        gp = _pad2d(g, ph, pw)
        win = _strided_windows(gp, kh, kw, sh, sw)  # (n, out_c, h, w, kh, kw)
        if weights.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(weights, gw)
        if x.requires_grad:
            gx = np.tensordot(win, weights.data, axes=([1, 4, 5], [1, 2, 3]))
            _accumulate(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))

    return Tensor._wrap(out, parents, backward)


def relu(x):
    """Elementwise max(0, v). The gradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return Tensor._wrap(out, (x,), backward)


def maxpool2(x):
    """2x2 max-pooling with stride 2; gradient routes to the first maximum
    in row-major window order."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    v = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = v.argmax(axis=-1)
    out = np.ascontiguousarray(v.max(axis=-1))

    def backward(g):
        if x.requires_grad:
            onehot = (np.arange(4) == idx[..., None]).astype(x.data.dtype)
            gx = onehot * g[..., None]
            gx = gx.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _accumulate(x, gx)

    return Tensor._wrap(out, (x,), backward)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.data.shape} vs {b.data.shape}")
    _check_same_dtype(a, b)


def add(a, b):
    """Elementwise sum; the gradient fans out to both inputs."""
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return Tensor._wrap(out, (a, b), backward)


def sub(a, b):
    """Elementwise difference a - b."""
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return Tensor._wrap(out, (a, b), backward)


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return Tensor._wrap(out, (a, b), backward)


def scale(x, alpha):
    """Multiply by a python scalar."""
    alpha = float(alpha)
    out = x.data * x.data.dtype.type(alpha)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * x.data.dtype.type(alpha))

    return Tensor._wrap(out, (x,), backward)


def sum_all(x):
    """Sum every element into a (1,1,1,1) scalar tensor."""
    out = np.array(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, g[0, 0, 0, 0]))

    return Tensor._wrap(out, (x,), backward)


def replicate_channels(x, copies):
    """Repeat each channel ``copies`` times (grayscale -> RGB stand-in)."""
    if copies < 1:
        raise ShapeError("copies must be >= 1")
    if copies == 1:
        return x
    n, c, h, w = x.data.shape
    out = np.repeat(x.data, copies, axis=1)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(n, c, copies, h, w).sum(axis=2))

    return Tensor._wrap(out, (x,), backward)


def grad_check(f, x, eps=1e-5):
    """Max relative error between ``f``'s analytic gradient at ``x`` and a
    central finite difference, over all coordinates.

    ``f`` must map the tensor to a (1,1,1,1) scalar and be deterministic;
    ``x`` must be float64 so the difference quotient is trustworthy.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 tensor")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.data.shape != (1, 1, 1, 1):
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
