"""Alternating GAN optimization with curriculum patch filtering.

One logical training loop owns the weights. Each step updates the
discriminator on (real 40X, detached generated 40X), then the generator on
the weighted three-level loss plus the non-saturating adversarial term.
Patch pools are pure functions of (seed, epoch), so a resumed run replays
the exact data stream of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import (
    FlatnessSchedule,
    TileRecord,
    draw_patch_origins,
    flatness_value,
    load_tile_images,
    read_manifest,
)
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from .errors import DataError, NumericalDivergenceError, UsageError
from .generator import (
    GeneratorConfig,
    MultiScaleGenerator,
    build_generator,
    generator_forward,
)
from .imaging import SR_LEVELS, MagLevel, MetricReport, psnr, ssim
from .losses import (
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    adversarial_generator_term,
    discriminator_loss,
    generator_loss,
    perceptual_loss,
    total_loss,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "learning_rate",
    "train_step",
    "train",
    "validate",
    "evaluate_tiles",
    "init_state",
    "save_checkpoint",
    "load_checkpoint",
    "load_generator",
    "derive_seed",
]

CHECKPOINT_SCHEMA = 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of labels (seed, purpose, ids...)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults mirror the tuned values."""

    profile: str = "paper"
    epochs: int = 120
    steps_per_epoch: int = 500
    batch_size: int = 2
    lr0: float = 0.0004
    decay_factor: float = 0.5
    decay_every_epochs: int = 30
    adam_betas: tuple[float, float] = (0.9, 0.999)
    patches_per_image: int = 50
    patch_size: int = 64
    flatness: FlatnessSchedule = field(default_factory=FlatnessSchedule)
    val_fraction: float = 0.10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    extractor_backend: str = "random"
    vgg19_weights: str | None = None
    num_workers: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must be in [0, 0.5]")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if self.profile not in ("paper", "tiny"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.num_workers != 1:
            raise ValueError("only single-worker loading is implemented (deterministic)")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """CPU-scale profile: reduced architecture and 16px patches."""
        defaults = dict(
            profile="tiny",
            generator=GeneratorConfig.tiny(),
            discriminator=DiscriminatorConfig.tiny(),
            patch_size=16,
            patches_per_image=20,
        )
        defaults.update(overrides)
        return cls(**defaults)

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["generator"] = asdict(self.generator)
        d["discriminator"] = asdict(self.discriminator)
        d["discriminator"]["module_channels"] = list(self.discriminator.module_channels)
        d["flatness"] = asdict(self.flatness)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["adam_betas"] = tuple(d["adam_betas"])
        d["generator"] = GeneratorConfig(**d["generator"])
        disc = dict(d["discriminator"])
        disc["module_channels"] = tuple(disc["module_channels"])
        d["discriminator"] = DiscriminatorConfig(**disc)
        d["flatness"] = FlatnessSchedule(**d["flatness"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise decay: lr0 * factor^(epoch // decay_every_epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


# ---------------------------------------------------------------------------
# State, checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: MultiScaleGenerator
    discriminator: Discriminator
    extractor: FeatureExtractor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    completed_epochs: int = 0
    global_step: int = 0


def _build_extractor(cfg: TrainConfig) -> FeatureExtractor:
    return FeatureExtractor(backend=cfg.extractor_backend, weights_path=cfg.vgg19_weights)


def init_state(cfg: TrainConfig) -> TrainState:
    generator = build_generator(cfg.generator, seed=derive_seed(cfg.seed, "generator"))
    discriminator = build_discriminator(
        cfg.discriminator, seed=derive_seed(cfg.seed, "discriminator")
    )
    extractor = _build_extractor(cfg)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr0, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr0, betas=cfg.adam_betas)
    return TrainState(cfg, generator, discriminator, extractor, opt_g, opt_d)


def save_checkpoint(state: TrainState, ckpt_dir: str | Path) -> Path:
    """Write weights, optimizer state and RNG state plus a JSON sidecar."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "completed_epochs": state.completed_epochs,
            "global_step": state.global_step,
        },
        ckpt_dir / "weights.pt",
    )
    sidecar = {
        "schema": CHECKPOINT_SCHEMA,
        "epoch": state.completed_epochs,
        "step": state.global_step,
        "seed": state.cfg.seed,
        "config": state.cfg.to_json_dict(),
    }
    (ckpt_dir / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return ckpt_dir


def _read_sidecar(ckpt_dir: Path) -> dict:
    sidecar_path = ckpt_dir / "checkpoint.json"
    if not sidecar_path.exists():
        raise DataError(f"no checkpoint sidecar at {sidecar_path}")
    return json.loads(sidecar_path.read_text())


def load_checkpoint(ckpt_dir: str | Path) -> TrainState:
    """Rebuild a full training state; weight/config agreement is validated
    by strict state-dict loading."""
    ckpt_dir = Path(ckpt_dir)
    sidecar = _read_sidecar(ckpt_dir)
    cfg = TrainConfig.from_json_dict(sidecar["config"])
    state = init_state(cfg)
    blob = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    state.generator.load_state_dict(blob["generator"])
    state.discriminator.load_state_dict(blob["discriminator"])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    torch.set_rng_state(blob["torch_rng"])
    state.completed_epochs = int(blob["completed_epochs"])
    state.global_step = int(blob["global_step"])
    return state


def load_generator(ckpt_dir: str | Path) -> tuple[MultiScaleGenerator, TrainConfig]:
    """Load just the generator for inference/evaluation."""
    ckpt_dir = Path(ckpt_dir)
    sidecar = _read_sidecar(ckpt_dir)
    cfg = TrainConfig.from_json_dict(sidecar["config"])
    generator = MultiScaleGenerator(cfg.generator)
    blob = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    generator.load_state_dict(blob["generator"])
    generator.eval()
    return generator, cfg


# ---------------------------------------------------------------------------
# Data flow
# ---------------------------------------------------------------------------


class _TileCache:
    """Small LRU over loaded tile pyramids."""

    def __init__(self, capacity: int = 8):
        self.capacity = capacity
        self._store: dict[str, dict[MagLevel, np.ndarray]] = {}

    def get(self, record: TileRecord) -> dict[MagLevel, np.ndarray]:
        images = self._store.pop(record.tile_id, None)
        if images is None:
            images = load_tile_images(record)
            if len(self._store) >= self.capacity:
                self._store.pop(next(iter(self._store)))
        self._store[record.tile_id] = images
        return images


def split_train_val(records: list[TileRecord], val_fraction: float) -> tuple[list, list]:
    """Deterministic split: the last fraction of train tiles by sorted id."""
    ordered = sorted(records, key=lambda r: r.tile_id)
    n_val = min(int(len(ordered) * val_fraction), len(ordered) - 1)
    if n_val <= 0:
        return ordered, []
    return ordered[:-n_val], ordered[-n_val:]


def build_epoch_pool(
    records: list[TileRecord], cfg: TrainConfig, epoch: int, cache: _TileCache
) -> list[tuple[TileRecord, tuple[int, int], bool]]:
    """Curriculum-filtered patch pool for one epoch, deterministically shuffled.

    Per-tile draws are seeded by (seed, tile_id, epoch) so they do not depend
    on scheduling order.
    """
    flatness = flatness_value(epoch, cfg.flatness)
    entries: list[tuple[TileRecord, tuple[int, int], bool]] = []
    for record in sorted(records, key=lambda r: r.tile_id):
        images = cache.get(record)
        origins = draw_patch_origins(
            images[MagLevel.X5],
            cfg.patches_per_image,
            cfg.patch_size,
            flatness,
            derive_seed(cfg.seed, "patches", record.tile_id, epoch),
        )
        entries.extend((record, origin, flag) for origin, flag in origins)
    rng = np.random.default_rng(derive_seed(cfg.seed, "pool", epoch))
    return [entries[i] for i in rng.permutation(len(entries))]


def _crop_levels(
    images: dict[MagLevel, np.ndarray], origin: tuple[int, int], size: int
) -> tuple[np.ndarray, dict[MagLevel, np.ndarray]]:
    r, c = origin
    lr = images[MagLevel.X5][r : r + size, c : c + size]
    hr = {}
    for level in SR_LEVELS:
        s = level.scale_from_5x
        hr[level] = images[level][r * s : (r + size) * s, c * s : (c + size) * s]
    return lr, hr


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack([im.transpose(2, 0, 1) for im in images]).astype(np.float32)
    return torch.from_numpy(arr)


def _assemble_batch(pool, step: int, cfg: TrainConfig, cache: _TileCache):
    from .dataset import PatchPair

    batch = []
    for j in range(cfg.batch_size):
        record, origin, flag = pool[(step * cfg.batch_size + j) % len(pool)]
        lr, hr = _crop_levels(cache.get(record), origin, cfg.patch_size)
        batch.append(
            PatchPair(lr_patch=lr, hr_patches=hr, source_tile=record.tile_id,
                      lr_origin=origin, flagged=flag)
        )
    return batch


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def train_step(batch, state: TrainState, dump_dir: str | Path | None = None) -> LossBreakdown:
    """One alternating update: discriminator first, then generator.

    The discriminator phase sees the generated 40X batch detached, so no
    gradient ever reaches the generator there. Losses are computed on the
    raw (unclamped) generator outputs to keep gradients alive everywhere.
    """
    cfg = state.cfg
    if len(batch) != cfg.batch_size:
        raise ValueError(f"expected batch of {cfg.batch_size}, got {len(batch)}")
    lr_batch = _stack([pair.lr_patch for pair in batch])
    hr = {level: _stack([pair.hr_patches[level] for pair in batch]) for level in SR_LEVELS}

    state.generator.train()
    state.discriminator.train()

    outputs = state.generator(lr_batch)
    sr40 = outputs[-1]

    # Phase 1: discriminator.
    d_real = state.discriminator(hr[MagLevel.X40])
    d_fake_detached = state.discriminator(sr40.detach())
    dl = discriminator_loss(d_real, d_fake_detached)
    state.opt_d.zero_grad()
    dl.backward()
    state.opt_d.step()

    # Phase 2: generator, scored by the just-updated discriminator.
    d_fake = state.discriminator(sr40)
    adv = adversarial_generator_term(d_fake)
    gl = {level: generator_loss(out, hr[level]) for level, out in zip(SR_LEVELS, outputs)}
    pl = {
        level: perceptual_loss(out, hr[level], state.extractor)
        for level, out in zip(SR_LEVELS, outputs)
    }
    tot = total_loss(gl, pl, adv, cfg.weights)
    state.opt_g.zero_grad()
    tot.backward()
    state.opt_g.step()

    breakdown = LossBreakdown.compute(gl, pl, adv, dl, cfg.weights)
    if not breakdown.is_finite():
        dump_path = None
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            dump_path = dump_dir / f"diagnostic_step{state.global_step:07d}"
            torch.save(
                {
                    "generator": state.generator.state_dict(),
                    "discriminator": state.discriminator.state_dict(),
                    "step": state.global_step,
                },
                dump_path.with_suffix(".pt"),
            )
            dump_path.with_suffix(".json").write_text(
                json.dumps(breakdown.to_log_record(state.global_step, state.completed_epochs, 0.0, 0.0))
            )
        raise NumericalDivergenceError(
            f"non-finite loss at step {state.global_step}", dump_path
        )
    return breakdown


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train(
    cfg: TrainConfig,
    manifest: str | Path | list[TileRecord],
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Run the full training protocol; returns the final checkpoint directory.

    Writes one JSON line per step to ``<out>/train_log.jsonl`` and one
    checkpoint directory per completed epoch under ``<out>/checkpoints/``.
    """
    records = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise DataError("manifest has no train-split tiles")
    train_part, val_part = split_train_val(train_records, cfg.val_fraction)

    if resume is not None:
        state = load_checkpoint(resume)
        resumed_cfg = state.cfg.to_json_dict()
        requested = cfg.to_json_dict()
        # Extending the epoch budget on resume is allowed; everything else
        # must match for the trajectory to stay reproducible.
        resumed_cfg.pop("epochs")
        requested.pop("epochs")
        if resumed_cfg != requested:
            raise UsageError("resume config does not match the checkpoint config")
        state.cfg = cfg
    else:
        state = init_state(cfg)

    out_dir = Path(out_dir)
    ckpt_root = out_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if resume is not None else "w"

    cache = _TileCache()
    final_dir = Path(resume) if resume is not None else None
    with open(log_path, log_mode, encoding="utf-8") as log:
        for epoch in range(state.completed_epochs, cfg.epochs):
            lr = learning_rate(epoch, cfg)
            flatness = flatness_value(epoch, cfg.flatness)
            _set_lr(state.opt_g, lr)
            _set_lr(state.opt_d, lr)
            pool = build_epoch_pool(train_part, cfg, epoch, cache)
            for step in range(cfg.steps_per_epoch):
                batch = _assemble_batch(pool, step, cfg, cache)
                breakdown = train_step(batch, state, dump_dir=out_dir)
                log.write(
                    json.dumps(
                        breakdown.to_log_record(state.global_step, epoch, lr, flatness),
                        sort_keys=True,
                    )
                    + "\n"
                )
                state.global_step += 1
            log.flush()
            state.completed_epochs = epoch + 1
            final_dir = save_checkpoint(state, ckpt_root / f"epoch_{epoch + 1:04d}")
            logger.info(
                "epoch %d/%d done (lr %.2e, flatness %.2f, %d val tiles held out)",
                epoch + 1, cfg.epochs, lr, flatness, len(val_part),
            )
    if final_dir is None:
        raise DataError("nothing to train: checkpoint already at the epoch budget")
    return final_dir


# ---------------------------------------------------------------------------
# Validation / evaluation
# ---------------------------------------------------------------------------


def evaluate_tiles(
    generator: MultiScaleGenerator, records: list[TileRecord]
) -> tuple[MetricReport, list[dict]]:
    """PSNR/SSIM of generated vs real images for every tile and SR level."""
    if not records:
        raise DataError("no tiles to evaluate")
    samples: dict[MagLevel, list[tuple[float, float]]] = {level: [] for level in SR_LEVELS}
    rows = []
    for record in sorted(records, key=lambda r: r.tile_id):
        images = load_tile_images(record)
        sr = generator_forward(generator, images[MagLevel.X5])
        for level in SR_LEVELS:
            p = psnr(sr[level], images[level])
            s = ssim(sr[level], images[level])
            samples[level].append((p, s))
            rows.append({"tile_id": record.tile_id, "level": level.value, "psnr": p, "ssim": s})
    return MetricReport.from_samples(samples), rows


def validate(state_or_generator, val_tiles: list[TileRecord]) -> MetricReport:
    """Per-level metric means of the generator on held-out tiles."""
    generator = (
        state_or_generator.generator
        if isinstance(state_or_generator, TrainState)
        else state_or_generator
    )
    report, _ = evaluate_tiles(generator, val_tiles)
    return report
