"""40X authenticity critic: 7 conv modules, global pooling, 2 FC layers.

Each module applies a stride-1 conv then a stride-2 conv (both 3x3), so
seven modules shrink a 512px patch to 4px. Global average pooling in front
of the FC head decouples it from input size; a sigmoid emits the real/fake
probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

__all__ = ["DiscriminatorConfig", "Discriminator", "build_discriminator"]


@dataclass(frozen=True)
class DiscriminatorConfig:
    module_channels: tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512)
    convs_per_module: int = 2
    fc_hidden: int = 1024
    leaky_slope: float = 0.2

    def __post_init__(self):
        if len(self.module_channels) != 7:
            raise ValueError("exactly 7 convolutional modules are required")
        if any(c < 1 for c in self.module_channels):
            raise ValueError("module channels must be positive")
        if list(self.module_channels) != sorted(self.module_channels):
            raise ValueError("module channels must be non-decreasing")
        if self.convs_per_module != 2:
            raise ValueError("modules are fixed at stride-1 + stride-2 conv pairs")
        if self.fc_hidden < 1:
            raise ValueError("fc_hidden must be >= 1")

    @classmethod
    def paper(cls) -> "DiscriminatorConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "DiscriminatorConfig":
        return cls(module_channels=(8, 8, 16, 16, 32, 32, 64), fc_hidden=64)


class Discriminator(nn.Module):
    """Deep conv classifier for 40X patches; input must be >= 128px."""

    MIN_INPUT = 128  # seven stride-2 halvings

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = 3
        act = nn.LeakyReLU(cfg.leaky_slope, inplace=True)
        for i, ch in enumerate(cfg.module_channels):
            layers.append(nn.Conv2d(in_ch, ch, 3, 1, 1))
            if i > 0:  # batch norm after every conv except the very first
                layers.append(nn.BatchNorm2d(ch))
            layers.append(act)
            layers.append(nn.Conv2d(ch, ch, 3, 2, 1))
            layers.append(nn.BatchNorm2d(ch))
            layers.append(act)
            in_ch = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(in_ch, cfg.fc_hidden)
        self.fc2 = nn.Linear(cfg.fc_hidden, 1)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return a real/fake probability in (0, 1) per batch element."""
        if x.shape[1] != 3:
            raise ValueError(f"expected 3-channel input, got {x.shape[1]}")
        if min(x.shape[-2:]) < self.MIN_INPUT:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} below the {self.MIN_INPUT}px minimum"
            )
        feats = self.pool(self.features(x)).flatten(1)
        logits = self.fc2(self.act(self.fc1(feats))).squeeze(1)
        if not torch.all(torch.isfinite(logits)):
            raise FloatingPointError("discriminator produced non-finite logits")
        return torch.sigmoid(logits)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    """Construct a discriminator with weights drawn from a fixed seed."""
    torch.manual_seed(seed)
    return Discriminator(cfg)
