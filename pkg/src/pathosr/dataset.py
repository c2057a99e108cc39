"""Corpus construction: tiling, the 40X->5X pyramid, and patch sampling.

Sources are ordinary large lossless RGB images standing in for whole-slide
scans. Each source is cut into non-overlapping 1024px tiles at 40X, every
tile is repeatedly halved with the fixed bicubic kernel down to 5X, and
training draws 64px patches from the 5X level together with their aligned
higher-magnification crops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import MagLevel, bicubic_resize, load_image

__all__ = [
    "LEVEL_SIZES",
    "TileRecord",
    "PatchPair",
    "FlatnessSchedule",
    "tile_image",
    "build_pyramid",
    "patch_stddev",
    "sample_patches",
    "flatness_value",
    "load_tile_images",
    "write_manifest",
    "read_manifest",
    "assign_splits",
]

# Tile edge length per magnification level for the standard 1024px 40X tile.
LEVEL_SIZES = {
    MagLevel.X40: 1024,
    MagLevel.X20: 512,
    MagLevel.X10: 256,
    MagLevel.X5: 128,
}

MANIFEST_SCHEMA = 1


@dataclass
class TileRecord:
    """One 40X tile and the on-disk locations of its pyramid levels."""

    tile_id: str
    source_image: str
    origin: tuple[int, int]
    paths: dict[MagLevel, str] = field(default_factory=dict)
    split: str = "train"

    def to_record(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "tile_id": self.tile_id,
            "source_image": self.source_image,
            "origin": list(self.origin),
            "paths": {level.value: path for level, path in sorted(self.paths.items(), key=lambda kv: kv[0].scale_from_5x)},
            "split": self.split,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TileRecord":
        return cls(
            tile_id=record["tile_id"],
            source_image=record["source_image"],
            origin=(int(record["origin"][0]), int(record["origin"][1])),
            paths={MagLevel.from_name(k): v for k, v in record.get("paths", {}).items()},
            split=record["split"],
        )


@dataclass
class PatchPair:
    """A 5X training patch with its aligned 10X/20X/40X ground-truth crops."""

    lr_patch: np.ndarray
    hr_patches: dict[MagLevel, np.ndarray]
    source_tile: str
    lr_origin: tuple[int, int]
    flagged: bool = False


@dataclass(frozen=True)
class FlatnessSchedule:
    """Patch-complexity threshold: +0.01 every 5 epochs, from 0 up to 0.15."""

    start: float = 0.0
    increment: float = 0.01
    period_epochs: int = 5
    max_value: float = 0.15

    def value(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return min(self.max_value, self.start + self.increment * (epoch // self.period_epochs))


def flatness_value(epoch: int, schedule: FlatnessSchedule | None = None) -> float:
    """Flatness threshold in effect at a given epoch."""
    return (schedule or FlatnessSchedule()).value(epoch)


def tile_image(
    source: np.ndarray,
    tile_size: int = 1024,
    source_name: str = "source",
    split: str = "train",
) -> list[TileRecord]:
    """Cut a 40X source into a non-overlapping grid of square tiles.

    Border remainders smaller than a tile are discarded. Records come back
    in row-major origin order with ids derived from the grid position, so
    repeat calls on the same source are identical.
    """
    if tile_size < 128:
        raise ValueError(f"tile_size must be >= 128, got {tile_size}")
    arr = np.asarray(source)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"source must have shape (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    if h < tile_size or w < tile_size:
        raise DataError(
            f"source {h}x{w} is smaller than one {tile_size}px tile"
        )
    records = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            records.append(
                TileRecord(
                    tile_id=f"{source_name}_r{r:03d}_c{c:03d}",
                    source_image=source_name,
                    origin=(r * tile_size, c * tile_size),
                    split=split,
                )
            )
    return records


def build_pyramid(tile40x: np.ndarray, tile_size: int = 1024) -> dict[MagLevel, np.ndarray]:
    """Cascaded x1/2 bicubic pyramid: 40X -> 20X -> 10X -> 5X.

    Each level is the halving of its parent (never a direct x1/8), so every
    level is exactly reproducible from the one above it.
    """
    arr = np.asarray(tile40x)
    if arr.shape[:2] != (tile_size, tile_size) or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(
            f"expected a {tile_size}x{tile_size}x3 tile, got {arr.shape}"
        )
    if tile_size % 8 != 0:
        raise ValueError(f"tile_size must be divisible by 8, got {tile_size}")
    levels = {MagLevel.X40: arr.astype(np.float64, copy=False)}
    chain = [(MagLevel.X40, MagLevel.X20), (MagLevel.X20, MagLevel.X10), (MagLevel.X10, MagLevel.X5)]
    for parent, child in chain:
        size = levels[parent].shape[0] // 2
        levels[child] = bicubic_resize(levels[parent], size, size)
    return levels


def patch_stddev(patch: np.ndarray) -> float:
    """Population standard deviation over all pixels and channels.

    Exactly 0.0 for a constant patch: the curriculum compares strictly
    against the flatness threshold, so mean-rounding noise must not make a
    flat patch look textured.
    """
    arr = np.asarray(patch, dtype=np.float64)
    if arr.min() == arr.max():
        return 0.0
    return float(np.std(arr))


def draw_patch_origins(
    lr_image: np.ndarray,
    count: int,
    size: int,
    flatness: float,
    seed: int,
) -> list[tuple[tuple[int, int], bool]]:
    """Curriculum-filtered uniform patch origins on a 5X image.

    Draws with replacement until `count` patches with stddev strictly above
    `flatness` are accepted or 20*count attempts are spent; any shortfall is
    filled with the highest-stddev rejected candidates, flagged True.
    """
    if not 0.0 <= flatness <= 0.15:
        raise ValueError(f"flatness must be in [0, 0.15], got {flatness}")
    h, w = lr_image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"5X image {h}x{w} smaller than patch size {size}")
    rng = np.random.default_rng(seed)
    max_attempts = 20 * count
    accepted: list[tuple[tuple[int, int], bool]] = []
    rejected: list[tuple[float, int, tuple[int, int]]] = []
    for attempt in range(max_attempts):
        if len(accepted) == count:
            break
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        std = patch_stddev(lr_image[r : r + size, c : c + size])
        if std > flatness:
            accepted.append(((r, c), False))
        else:
            rejected.append((std, attempt, (r, c)))
    shortfall = count - len(accepted)
    if shortfall > 0:
        # Highest-stddev rejects first; attempt index breaks ties deterministically.
        rejected.sort(key=lambda t: (-t[0], t[1]))
        accepted.extend((origin, True) for _, _, origin in rejected[:shortfall])
    return accepted


def load_tile_images(tile: TileRecord) -> dict[MagLevel, np.ndarray]:
    """Load every stored pyramid level of a tile from disk."""
    images = {}
    for level in MagLevel:
        path = tile.paths.get(level)
        if path is None:
            raise DataError(f"tile {tile.tile_id} is missing the {level} level")
        images[level] = load_image(path)
    return images


def sample_patches(
    tile: TileRecord,
    count: int = 50,
    size: int = 64,
    flatness: float = 0.0,
    seed: int = 0,
    images: dict[MagLevel, np.ndarray] | None = None,
) -> list[PatchPair]:
    """Sample aligned multi-scale patches from one tile's pyramid.

    The 5X patch is `size` px square; each higher level is the geometrically
    corresponding crop (origin and size scaled by the level's factor).
    Identical (tile, seed) calls return identical patches.
    """
    if images is None:
        images = load_tile_images(tile)
    for level in MagLevel:
        if level not in images:
            raise DataError(f"tile {tile.tile_id} is missing the {level} level")
    lr = images[MagLevel.X5]
    pairs = []
    for (r, c), flag in draw_patch_origins(lr, count, size, flatness, seed):
        hr = {}
        for level in (MagLevel.X10, MagLevel.X20, MagLevel.X40):
            s = level.scale_from_5x
            hr[level] = images[level][r * s : (r + size) * s, c * s : (c + size) * s]
        pairs.append(
            PatchPair(
                lr_patch=lr[r : r + size, c : c + size],
                hr_patches=hr,
                source_tile=tile.tile_id,
                lr_origin=(r, c),
                flagged=flag,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Manifest I/O and split assignment
# ---------------------------------------------------------------------------


def write_manifest(records: list[TileRecord], path: str | Path) -> None:
    """Write tile records as one JSON object per line, stable key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[TileRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(TileRecord.from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: bad manifest record ({exc})") from exc
    return records


def assign_splits(
    source_names: list[str], fractions: dict[str, float], seed: int
) -> dict[str, str]:
    """Deterministically assign whole sources to splits.

    Assignment is per source image, never per tile, so tiles from one slide
    can never straddle a split. Every split with a positive fraction receives
    at least one source when enough sources exist; the remainder goes by
    largest fractional share.
    """
    if not source_names:
        raise DataError("no source images to split")
    total = sum(fractions.values())
    if total <= 0:
        raise ValueError("split fractions must sum to a positive value")
    names = sorted(source_names)
    order = [names[i] for i in np.random.default_rng(seed).permutation(len(names))]
    splits = [s for s in fractions if fractions[s] > 0]
    n = len(names)
    counts = {s: 1 if len(splits) <= n else 0 for s in splits}
    remaining = n - sum(counts.values())
    ideal = {s: fractions[s] / total * n for s in splits}
    while remaining > 0:
        # Largest-remainder allocation, one source at a time.
        target = min(splits, key=lambda s: (counts[s] - ideal[s], splits.index(s)))
        counts[target] += 1
        remaining -= 1
    assignment = {}
    cursor = 0
    for s in splits:
        for name in order[cursor : cursor + counts[s]]:
            assignment[name] = s
        cursor += counts[s]
    return assignment
