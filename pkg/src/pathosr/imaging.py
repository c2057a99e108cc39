"""Pure image primitives: bicubic resampling, PSNR and SSIM.

Images are numpy arrays of shape (H, W, 3) with float values in [0, 1].
All functions here are pure and deterministic: identical inputs produce
bit-identical outputs, which is what makes pyramid construction and
metric reporting reproducible across runs and worker processes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

__all__ = [
    "MagLevel",
    "SR_LEVELS",
    "LevelAggregate",
    "MetricReport",
    "bicubic_resize",
    "psnr",
    "ssim",
    "load_image",
    "save_image",
    "require_image",
]


class MagLevel(Enum):
    """Magnification levels of the tile pyramid, 5X up to 40X."""

    X5 = "5X"
    X10 = "10X"
    X20 = "20X"
    X40 = "40X"

    @property
    def scale_from_5x(self) -> int:
        """Linear upscale factor relative to the 5X level (1, 2, 4 or 8)."""
        return _SCALE_FROM_5X[self]

    @classmethod
    def from_name(cls, name: str) -> "MagLevel":
        for level in cls:
            if level.value == name:
                return level
        raise ValueError(f"unknown magnification level {name!r}")

    def __str__(self) -> str:
        return self.value


_SCALE_FROM_5X = {
    MagLevel.X5: 1,
    MagLevel.X10: 2,
    MagLevel.X20: 4,
    MagLevel.X40: 8,
}

# The three super-resolved output levels, lowest magnification first.
SR_LEVELS = (MagLevel.X10, MagLevel.X20, MagLevel.X40)


def require_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) image in [0, 1] and return it as float64."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive spatial extent")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} has values outside [0, 1]")
    return arr


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

# Catmull-Rom parameter. Pinned so the 40X->5X pyramid is reproducible
# bit-for-bit: a fixed 4-tap kernel is used at every scale (no adaptive
# antialiasing), and x1/2 halving lands on exactly representable weights
# (-1/16, 9/16, 9/16, -1/16).
_CUBIC_A = -0.5


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    x = np.abs(x)
    a = _CUBIC_A
    near = (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    far = a * (x**3 - 5.0 * x**2 + 8.0 * x - 4.0)
    out = np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))
    return out


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Source indices (clamped at edges) and kernel weights per output index."""
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(np.int64)
    taps = base[:, None] + np.arange(-1, 3, dtype=np.int64)[None, :]
    weights = _cubic_kernel(centers[:, None] - taps)
    idx = np.clip(taps, 0, n_in - 1)
    return idx, weights


def _resample_rows(img: np.ndarray, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # Fixed left-to-right accumulation keeps the result bit-stable.
    out = img[idx[:, 0]] * weights[:, 0, None, None]
    for k in range(1, 4):
        out += img[idx[:, k]] * weights[:, k, None, None]
    return out


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an image to (out_h, out_w) with the fixed Catmull-Rom kernel.

    Separable 4-tap cubic convolution with edge clamping; the output is
    clamped to [0, 1]. Resampling a constant image returns that constant.
    """
    arr = require_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be positive, got {out_h}x{out_w}")
    row_idx, row_w = _axis_taps(arr.shape[0], out_h)
    col_idx, col_w = _axis_taps(arr.shape[1], out_w)
    tmp = _resample_rows(arr, row_idx, row_w)
    out = _resample_rows(tmp.transpose(1, 0, 2), col_idx, col_w).transpose(1, 0, 2)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------


def _check_same_shape(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = require_image(pred, "pred")
    r = require_image(ref, "ref")
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs ref {r.shape}")
    return p, r


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on 8-bit quantized values.

    Both images are quantized to integer 8-bit levels (round(v * 255)) and
    compared with MAX = 255; identical images return math.inf, which
    aggregation excludes from means.
    """
    p, r = _check_same_shape(pred, ref)
    diff = np.rint(p * 255.0) - np.rint(r * 255.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_RANGE = 1.0


def _gaussian_window() -> np.ndarray:
    x = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * _SSIM_SIGMA**2))
    return g / g.sum()


_SSIM_KERNEL = _gaussian_window()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid positions only (no padding)."""
    g = _SSIM_KERNEL
    n = g.size
    h = x.shape[0] - n + 1
    out = g[0] * x[0:h]
    for k in range(1, n):
        out += g[k] * x[k : k + h]
    w = out.shape[1] - n + 1
    out2 = g[0] * out[:, 0:w]
    for k in range(1, n):
        out2 += g[k] * out[:, k : k + w]
    return out2


def ssim(pred: np.ndarray, ref: np.ndarray) -> float:
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Computed per RGB channel on the [0, 1] values (dynamic range 1.0) with
    K1 = 0.01, K2 = 0.03, then averaged over channels and all fully-interior
    window positions.
    """
    p, r = _check_same_shape(pred, ref)
    if min(p.shape[0], p.shape[1]) < _SSIM_WINDOW:
        raise ValueError(
            f"image {p.shape[0]}x{p.shape[1]} smaller than the {_SSIM_WINDOW}px SSIM window"
        )
    c1 = (_SSIM_K1 * _SSIM_RANGE) ** 2
    c2 = (_SSIM_K2 * _SSIM_RANGE) ** 2
    channel_means = []
    for c in range(3):
        x = p[:, :, c]
        y = r[:, :, c]
        mu_x = _filter_valid(x)
        mu_y = _filter_valid(y)
        var_x = _filter_valid(x * x) - mu_x * mu_x
        var_y = _filter_valid(y * y) - mu_y * mu_y
        cov = _filter_valid(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        channel_means.append(float(np.mean(num / den)))
    return float(np.mean(channel_means))


# ---------------------------------------------------------------------------
# Metric aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelAggregate:
    mean_psnr: float
    mean_ssim: float
    n: int


@dataclass
class MetricReport:
    """Per-magnification PSNR/SSIM means with sample counts."""

    per_level: dict[MagLevel, LevelAggregate]

    @classmethod
    def from_samples(
        cls, samples: dict[MagLevel, list[tuple[float, float]]]
    ) -> "MetricReport":
        """Aggregate (psnr, ssim) pairs per level.

        Infinite PSNR values (identical images) are excluded from the PSNR
        mean; the exclusion count is logged so it cannot silently skew
        aggregates.
        """
        per_level = {}
        for level, pairs in samples.items():
            if not pairs:
                raise ValueError(f"no samples for level {level}")
            psnrs = [p for p, _ in pairs]
            finite = [p for p in psnrs if math.isfinite(p)]
            excluded = len(psnrs) - len(finite)
            if excluded:
                logger.info(
                    "level %s: excluded %d infinite PSNR sample(s) from the mean",
                    level,
                    excluded,
                )
            mean_psnr = float(np.mean(finite)) if finite else math.inf
            mean_ssim = float(np.mean([s for _, s in pairs]))
            per_level[level] = LevelAggregate(mean_psnr, mean_ssim, len(pairs))
        return cls(per_level)

    def to_records(self) -> list[dict]:
        records = []
        for level in sorted(self.per_level, key=lambda l: l.scale_from_5x):
            agg = self.per_level[level]
            records.append(
                {
                    "level": level.value,
                    "mean_psnr": None if math.isinf(agg.mean_psnr) else agg.mean_psnr,
                    "mean_ssim": agg.mean_ssim,
                    "n": agg.n,
                }
            )
        return records

    def to_json(self) -> str:
        return json.dumps(self.to_records(), sort_keys=True)

    @classmethod
    def from_records(cls, records: list[dict]) -> "MetricReport":
        per_level = {}
        for rec in records:
            level = MagLevel.from_name(rec["level"])
            mean_psnr = math.inf if rec["mean_psnr"] is None else float(rec["mean_psnr"])
            per_level[level] = LevelAggregate(mean_psnr, float(rec["mean_ssim"]), int(rec["n"]))
        return cls(per_level)


# ---------------------------------------------------------------------------
# Lossless 8-bit PNG I/O
# ---------------------------------------------------------------------------


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an image as lossless 8-bit RGB PNG (round(v * 255))."""
    arr = require_image(img)
    data = np.rint(arr * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB image file into a float64 (H, W, 3) array in [0, 1]."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0
