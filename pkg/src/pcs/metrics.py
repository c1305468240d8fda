"""Reconstruction quality metrics: PSNR, SSIM and a block-artifact ratio.

SSIM uses the reference settings (11x11 Gaussian window, sigma 1.5,
K1 = 0.01, K2 = 0.03) over valid window positions only; reports carry the
"ssim-ref-11x11" variant flag since other conventions exist.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError, ShapeError

SSIM_VARIANT = "ssim-ref-11x11"

_WINDOW = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _as_2d(img):
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1 or a.shape[1] != 1:
            raise ShapeError(f"expected a single grayscale image, got shape {a.shape}")
        a = a[0, 0]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {a.shape}")
    return a


def psnr(a, b, peak=1.0):
    """10 * log10(peak^2 / MSE); +inf when the images are identical."""
    if peak <= 0:
        raise ShapeError("peak must be positive")
    x, y = _as_2d(a), _as_2d(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window():
    half = (_WINDOW - 1) / 2.0
    coords = np.arange(_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * _SIGMA**2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_sums(img, win):
    v = np.lib.stride_tricks.sliding_window_view(img, (_WINDOW, _WINDOW))
    return np.tensordot(v, win, axes=([2, 3], [0, 1]))


def ssim(a, b, peak=1.0):
    """Mean local structural similarity over all valid 11x11 windows."""
    x, y = _as_2d(a), _as_2d(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < _WINDOW:
        raise GeometryError(f"ssim needs images at least {_WINDOW}x{_WINDOW}, got {x.shape}")
    win = _gaussian_window()
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu_x = _windowed_sums(x, win)
    mu_y = _windowed_sums(y, win)
    var_x = _windowed_sums(x * x, win) - mu_x * mu_x
    var_y = _windowed_sums(y * y, win) - mu_y * mu_y
    cov = _windowed_sums(x * y, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _boundary_ratio(grads, block):
    # grads index k sits between pixel columns k and k+1, so the seams
    # between adjacent blocks fall at indices block-1, 2*block-1, ...
    boundary = np.zeros(grads.shape[1], dtype=bool)
    boundary[block - 1 :: block] = True
    if not boundary.any() or boundary.all():
        return 1.0
    at = float(grads[:, boundary].mean())
    elsewhere = float(grads[:, ~boundary].mean())
    if elsewhere == 0.0:
        return 1.0 if at == 0.0 else math.inf
    return at / elsewhere


def blockiness(img, block):
    """Mean absolute gradient on block-grid seams divided by the mean
    absolute gradient elsewhere, averaged over rows and columns. 1.0 means
    no grid-aligned structure; a constant image is defined as 1.0."""
    x = _as_2d(img)
    h, w = x.shape
    if block < 2:
        raise GeometryError("block must be >= 2")
    if h % block or w % block:
        raise GeometryError(f"image {h}x{w} is not divisible by block {block}")
    col_grads = np.abs(np.diff(x, axis=1))  # (h, w-1); index k sits between cols k and k+1
    row_grads = np.abs(np.diff(x, axis=0)).T
    return 0.5 * (_boundary_ratio(col_grads, block) + _boundary_ratio(row_grads, block))


@dataclass(frozen=True)
class MetricRow:
    name: str
    psnr_db: float
    ssim: float
    blockiness: float


@dataclass(frozen=True)
class MetricReport:
    """Per-image metric rows (sorted by image name) plus arithmetic means."""

    rows: tuple
    variant: str = SSIM_VARIANT

    @property
    def mean_psnr(self):
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mean_blockiness(self):
        return float(np.mean([r.blockiness for r in self.rows]))

    def to_tsv(self):
        def fmt(v, digits):
            return "inf" if math.isinf(v) else f"{v:.{digits}f}"

        lines = [f"# {self.variant}", "name\tpsnr_db\tssim\tblockiness"]
        for r in self.rows:
            lines.append(f"{r.name}\t{fmt(r.psnr_db, 4)}\t{fmt(r.ssim, 6)}\t{fmt(r.blockiness, 4)}")
        lines.append(
            f"mean\t{fmt(self.mean_psnr, 4)}\t{fmt(self.mean_ssim, 6)}\t{fmt(self.mean_blockiness, 4)}"
        )
        return "\n".join(lines) + "\n"


def evaluate(params, dataset_dir, peak=1.0):
    """Measure and recover every PGM/PPM image in ``dataset_dir`` (sorted by
    filename), then score the reconstructions against the originals.

    Images whose sizes are not stride multiples are reflect-padded for the
    model and the reconstruction is cropped back, so metrics always compare
    at the original size. Color images are converted to luma first.
    """
    from . import netpbm
    from .model import recover_image

    paths = sorted(
        p for p in Path(dataset_dir).iterdir()
        if p.suffix.lower() in (".pgm", ".ppm")
    )
    if not paths:
        raise DataError(f"no PGM/PPM images found in {dataset_dir}")
    rows = []
    block = params.config.measurement_stride
    for p in paths:
        image = netpbm.to_grayscale(netpbm.read_image(p))
        recon = recover_image(params, image, pad_policy="reflect")
        rows.append(
            MetricRow(
                name=p.name,
                psnr_db=psnr(recon, image, peak),
                ssim=ssim(recon, image, peak),
                blockiness=blockiness(recon, block),
            )
        )
    return MetricReport(rows=tuple(rows))
