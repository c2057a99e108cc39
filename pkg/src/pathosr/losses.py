"""The three loss terms and their weighted combination.

Pixel loss is mean absolute error per output level; perceptual loss is the
sum of feature MSEs at two depths of a frozen extractor; the adversarial
pair is binary cross-entropy at 40X only. Everything accepts torch tensors
(gradients flow) or numpy images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import SR_LEVELS, MagLevel

__all__ = [
    "PROB_EPS",
    "LossWeights",
    "FeatureExtractor",
    "LossBreakdown",
    "generator_loss",
    "perceptual_loss",
    "discriminator_loss",
    "adversarial_generator_term",
    "total_loss",
]

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Per-loss-type weights; the tuned values are 0.06 / 0.083 / 0.04."""

    w_gl: float = 0.06
    w_pl: float = 0.083
    w_dl: float = 0.04

    def __post_init__(self):
        if min(self.w_gl, self.w_pl, self.w_dl) <= 0:
            raise ValueError("loss weights must be strictly positive")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)[None]
    return torch.from_numpy(np.ascontiguousarray(arr))


def _as_image_batch(x) -> torch.Tensor:
    t = _as_tensor(x)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[1] != 3:
        raise ValueError(f"expected an image batch (N, 3, H, W), got {tuple(t.shape)}")
    return t


def generator_loss(sr, hr) -> torch.Tensor:
    """Mean absolute error over all pixel-channel values."""
    sr_t, hr_t = _as_tensor(sr), _as_tensor(hr)
    if sr_t.shape != hr_t.shape:
        raise ValueError(f"shape mismatch: {tuple(sr_t.shape)} vs {tuple(hr_t.shape)}")
    return torch.mean(torch.abs(sr_t - hr_t))


# ---------------------------------------------------------------------------
# Frozen feature extractor
# ---------------------------------------------------------------------------

# VGG19-style conv stack through its 9th conv layer; pools follow convs
# 2, 4 and 8. Features are tapped after the activations of convs 5 and 9.
_VGG19_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 256, 512)
_RANDOM_CHANNELS = (8, 8, 16, 16, 32, 32, 32, 32, 64)
_POOL_AFTER = frozenset({2, 4, 8})
_TAPS = (5, 9)
# Conv positions inside torchvision's vgg19().features for weight loading.
_TORCHVISION_FEATURE_IDX = (0, 2, 5, 7, 10, 12, 14, 16, 19)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature extractor with taps at conv 5 and 9.

    Backends:
      * ``"vgg19"``: the VGG19 conv stack with pretrained weights loaded
        from a torchvision-format state dict (``weights_path``); inputs are
        normalized with the ImageNet statistics the weights were trained on.
      * ``"random"``: the same layout at reduced width with weights drawn
        once from a fixed seed, so the full pipeline runs with no downloaded
        weights.

    Weights are frozen at construction and the module is pinned to eval
    mode; identical inputs always produce identical features.
    """

    MIN_INPUT = 16
    BACKENDS = ("vgg19", "random")

    def __init__(self, backend: str = "random", weights_path: str | Path | None = None,
                 seed: int = 1234):
        super().__init__()
        if backend not in self.BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {self.BACKENDS}")
        self.backend = backend
        channels = _VGG19_CHANNELS if backend == "vgg19" else _RANDOM_CHANNELS
        convs = []
        in_ch = 3
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, 3, 1, 1))
            in_ch = ch
        if backend == "vgg19":
            if weights_path is None:
                raise ValueError(
                    "backend 'vgg19' needs a torchvision-format VGG19 state dict "
                    "(weights_path); use backend 'random' to run without one"
                )
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            for conv, idx in zip(convs, _TORCHVISION_FEATURE_IDX):
                weight = state[f"features.{idx}.weight"]
                bias = state[f"features.{idx}.bias"]
                if weight.shape != conv.weight.shape:
                    raise ValueError(
                        f"weights at features.{idx} have shape {tuple(weight.shape)}, "
                        f"expected {tuple(conv.weight.shape)}"
                    )
                with torch.no_grad():
                    conv.weight.copy_(weight)
                    conv.bias.copy_(bias)
            mean, std = _IMAGENET_MEAN, _IMAGENET_STD
        else:
            gen = torch.Generator().manual_seed(seed)
            for conv in convs:
                with torch.no_grad():
                    nn.init.kaiming_normal_(conv.weight, a=0.0, generator=gen)
                    conv.bias.zero_()
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.convs = nn.ModuleList(convs)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # The extractor never leaves eval mode, whatever the enclosing
        # training loop does.
        return super().train(False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if min(x.shape[-2:]) < self.MIN_INPUT:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} below the extractor minimum "
                f"of {self.MIN_INPUT}px"
            )
        x = (x - self.input_mean) / self.input_std
        taps = []
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x))
            if i in _TAPS:
                taps.append(x)
            if i in _POOL_AFTER:
                x = F.max_pool2d(x, 2)
        return taps[0], taps[1]


def perceptual_loss(sr, hr, extractor: FeatureExtractor) -> torch.Tensor:
    """Feature MSE at the extractor's two taps, summed."""
    sr_t = _as_image_batch(sr)
    hr_t = _as_image_batch(hr)
    if sr_t.shape != hr_t.shape:
        raise ValueError(f"shape mismatch: {tuple(sr_t.shape)} vs {tuple(hr_t.shape)}")
    dtype = extractor.input_mean.dtype
    sr5, sr9 = extractor(sr_t.to(dtype))
    hr5, hr9 = extractor(hr_t.to(dtype))
    return F.mse_loss(sr5, hr5) + F.mse_loss(sr9, hr9)


# ---------------------------------------------------------------------------
# Adversarial terms
# ---------------------------------------------------------------------------


def _clamped_probs(p) -> torch.Tensor:
    t = _as_tensor(p).reshape(-1)
    return t.clamp(PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))], natural log, eps-clamped."""
    real = _clamped_probs(d_real)
    fake = _clamped_probs(d_fake)
    return -torch.mean(torch.log(real)) - torch.mean(torch.log(1.0 - fake))


def adversarial_generator_term(d_fake) -> torch.Tensor:
    """Non-saturating generator objective: -E[log D(fake)]."""
    fake = _clamped_probs(d_fake)
    return -torch.mean(torch.log(fake))


def total_loss(gl: Mapping[MagLevel, object], pl: Mapping[MagLevel, object],
               adv_40x, weights: LossWeights):
    """Weighted sum over the three output levels plus the 40X adversarial term."""
    total = None
    for level in SR_LEVELS:
        if level not in gl or level not in pl:
            raise ValueError(f"missing loss term for level {level}")
        term = weights.w_gl * gl[level] + weights.w_pl * pl[level]
        total = term if total is None else total + term
    return total + weights.w_dl * adv_40x


@dataclass
class LossBreakdown:
    """Scalar loss parts of one training step, plus their weighted total."""

    gl: dict[MagLevel, float]
    pl: dict[MagLevel, float]
    adv_40x: float
    dl_40x: float
    total: float

    @classmethod
    def compute(cls, gl, pl, adv_40x, dl_40x, weights: LossWeights) -> "LossBreakdown":
        def scalar(x) -> float:
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        gl_f = {level: scalar(gl[level]) for level in SR_LEVELS}
        pl_f = {level: scalar(pl[level]) for level in SR_LEVELS}
        adv = scalar(adv_40x)
        return cls(
            gl=gl_f,
            pl=pl_f,
            adv_40x=adv,
            dl_40x=scalar(dl_40x),
            total=float(total_loss(gl_f, pl_f, adv, weights)),
        )

    def recomputed_total(self, weights: LossWeights) -> float:
        return float(total_loss(self.gl, self.pl, self.adv_40x, weights))

    def is_finite(self) -> bool:
        values = [*self.gl.values(), *self.pl.values(), self.adv_40x, self.dl_40x, self.total]
        return all(math.isfinite(v) for v in values)

    def to_log_record(self, step: int, epoch: int, lr: float, flatness: float) -> dict:
        return {
            "step": step,
            "epoch": epoch,
            "gl_10x": self.gl[MagLevel.X10],
            "gl_20x": self.gl[MagLevel.X20],
            "gl_40x": self.gl[MagLevel.X40],
            "pl_10x": self.pl[MagLevel.X10],
            "pl_20x": self.pl[MagLevel.X20],
            "pl_40x": self.pl[MagLevel.X40],
            "adv_40x": self.adv_40x,
            "dl_40x": self.dl_40x,
            "total": self.total,
            "lr": lr,
            "flatness": flatness,
        }
