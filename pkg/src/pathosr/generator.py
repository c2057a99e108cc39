"""Multi-scale generator: three chained x2 super-resolution blocks.

A 5X input passes through three SRBs with independent weights; each SRB
emits a 3-channel image at twice the spatial size of its input, giving the
10X, 20X and 40X outputs. Inside an SRB, ten basic blocks (each three
residual dense blocks) predict detail on top of a global head-feature skip,
and a sub-pixel convolution performs the x2 upsample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import SR_LEVELS, MagLevel, require_image

__all__ = [
    "GeneratorConfig",
    "DenseBlock",
    "BasicBlock",
    "SuperResolutionBlock",
    "MultiScaleGenerator",
    "build_generator",
    "generator_forward",
    "pixel_shuffle",
    "count_parameters",
    "ParamCount",
    "to_tensor",
    "to_image",
]


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture hyperparameters for the three-stage generator."""

    srb_count: int = 3
    basic_blocks_per_srb: int = 10
    dense_blocks_per_basic: int = 3
    convs_per_dense: int = 5
    base_channels: int = 64
    growth_channels: int = 32
    residual_scale: float = 0.2
    upscale_per_srb: int = 2

    def __post_init__(self):
        if self.srb_count != 3:
            raise ValueError("the 10X/20X/40X chain requires exactly 3 SRBs")
        for name in ("basic_blocks_per_srb", "dense_blocks_per_basic", "base_channels", "growth_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.convs_per_dense < 2:
            raise ValueError("convs_per_dense must be >= 2")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ValueError("residual_scale must be in (0, 1]")
        if self.upscale_per_srb != 2:
            raise ValueError("each SRB upscales by exactly 2")

    @classmethod
    def paper(cls) -> "GeneratorConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "GeneratorConfig":
        """Reduced profile for CPU-speed tests and gradient checks."""
        return cls(basic_blocks_per_srb=2, base_channels=16, growth_channels=8)


def _conv3(in_ch: int, out_ch: int) -> nn.Conv2d:
    # Replicate padding keeps a constant field constant through every conv,
    # which the tiled-inference seam contract relies on.
    return nn.Conv2d(in_ch, out_ch, 3, 1, 1, padding_mode="replicate")


class DenseBlock(nn.Module):
    """Five 3x3 convs, each consuming the concat of the input and all
    previous outputs; the last conv maps back to the trunk width and is
    added to the input scaled by the residual factor."""

    def __init__(self, channels: int, growth: int, n_convs: int = 5, residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.convs = nn.ModuleList(
            _conv3(channels + growth * i, growth) for i in range(n_convs - 1)
        )
        self.final_conv = _conv3(channels + growth * (n_convs - 1), channels)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, dim=1))))
        return x + self.residual_scale * self.final_conv(torch.cat(feats, dim=1))


class BasicBlock(nn.Module):
    """Three dense blocks in sequence under one scaled outer residual.

    The outer residual adds the scaled detail the chain predicts (its delta
    from the input), so a zero-initialized chain leaves the block an exact
    identity map.
    """

    def __init__(self, channels: int, growth: int, n_dense: int = 3, n_convs: int = 5,
                 residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.dense_blocks = nn.Sequential(
            *[DenseBlock(channels, growth, n_convs, residual_scale) for _ in range(n_dense)]
        )

    def forward(self, x):
        return x + self.residual_scale * (self.dense_blocks(x) - x)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r); pure permutation."""
    if x.shape[1] % (r * r) != 0:
        raise ValueError(f"channel count {x.shape[1]} not divisible by r^2 = {r * r}")
    return F.pixel_shuffle(x, r)


def _icnr_(conv: nn.Conv2d, r: int) -> None:
    """Sub-pixel conv init: every group of r^2 output channels shares one
    kernel, so the shuffle is free of checkerboard structure at init."""
    out_ch = conv.out_channels
    with torch.no_grad():
        w = conv.weight.view(out_ch // (r * r), r * r, *conv.weight.shape[1:])
        w.copy_(w[:, :1].clone().expand_as(w))
        if conv.bias is not None:
            b = conv.bias.view(out_ch // (r * r), r * r)
            b.copy_(b[:, :1].clone().expand_as(b))


class SuperResolutionBlock(nn.Module):
    """One x2 stage: head conv, basic-block trunk with a global feature
    skip, sub-pixel upsample, and a final 3-channel conv."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.base_channels
        r = cfg.upscale_per_srb
        self.head = _conv3(3, c)
        self.blocks = nn.Sequential(
            *[
                BasicBlock(c, cfg.growth_channels, cfg.dense_blocks_per_basic,
                           cfg.convs_per_dense, cfg.residual_scale)
                for _ in range(cfg.basic_blocks_per_srb)
            ]
        )
        self.fusion = _conv3(c, c)
        self.to_subpixel = _conv3(c, 3 * r * r)
        self.upscale = r
        self.tail = _conv3(3, 3)
        _icnr_(self.to_subpixel, r)

    def forward(self, x):
        head = self.head(x)
        fused = head + self.fusion(self.blocks(head))
        return self.tail(pixel_shuffle(self.to_subpixel(fused), self.upscale))


class MultiScaleGenerator(nn.Module):
    """Three SRBs chained 5X -> 10X -> 20X -> 40X with independent weights.

    `forward` returns the raw (unclamped) outputs of the three stages so
    training losses see unflattened gradients; clamping to [0, 1] happens
    only when images are emitted (see `generator_forward`).
    """

    # Full images must cover the receptive field; training patches may be
    # smaller (the tiny profile uses 16px patches).
    MIN_IMAGE_INPUT = 32
    MIN_PATCH_INPUT = 8

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.srbs = nn.ModuleList(SuperResolutionBlock(cfg) for _ in range(cfg.srb_count))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != 3:
            raise ValueError(f"expected 3-channel input, got {x.shape[1]}")
        if min(x.shape[-2:]) < self.MIN_PATCH_INPUT:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} below the {self.MIN_PATCH_INPUT}px minimum"
            )
        outputs = []
        for srb in self.srbs:
            x = srb(x)
            outputs.append(x)
        return outputs


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> MultiScaleGenerator:
    """Construct a generator with weights drawn from a fixed seed."""
    torch.manual_seed(seed)
    return MultiScaleGenerator(cfg)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float image in [0, 1] -> (1, 3, H, W) float32 tensor."""
    arr = require_image(img)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float().unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) tensor -> clamped float64 (H, W, 3) image."""
    arr = t.detach().clamp(0.0, 1.0).squeeze(0).permute(1, 2, 0).cpu().numpy()
    return arr.astype(np.float64)


def generator_forward(model: MultiScaleGenerator, img5x: np.ndarray) -> dict[MagLevel, np.ndarray]:
    """Run the generator on a 5X image and emit the three SR images.

    Evaluation-mode forward: deterministic, outputs clamped to [0, 1] with
    spatial sizes exactly x2/x4/x8 the input.
    """
    x = to_tensor(img5x)
    if min(x.shape[-2:]) < model.MIN_IMAGE_INPUT:
        raise ValueError(
            f"5X image {tuple(x.shape[-2:])} below the {model.MIN_IMAGE_INPUT}px "
            "receptive-field minimum"
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outputs = model(x)
    finally:
        model.train(was_training)
    return {level: to_image(out) for level, out in zip(SR_LEVELS, outputs)}


@dataclass(frozen=True)
class ParamCount:
    total: int
    dense_conv_layers: int


def count_parameters(cfg: GeneratorConfig) -> ParamCount:
    """Exact trainable parameter count plus the dense-conv-layer tally."""
    model = build_generator(cfg, seed=0)
    total = sum(p.numel() for p in model.parameters() if p.requires_grad)
    dense_layers = (
        cfg.srb_count
        * cfg.basic_blocks_per_srb
        * cfg.dense_blocks_per_basic
        * cfg.convs_per_dense
    )
    return ParamCount(total=total, dense_conv_layers=dense_layers)


def zero_residual_init_(model: MultiScaleGenerator) -> None:
    """Zero every dense block's final conv: each basic block becomes the
    identity and each SRB reduces to its head/tail path. Test surgery."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, DenseBlock):
                module.final_conv.weight.zero_()
                module.final_conv.bias.zero_()
