"""Shared fixtures: synthetic tissue-like sources and prepared toy corpora."""

from __future__ import annotations

import numpy as np
import pytest

from pathosr.dataset import build_pyramid, tile_image, write_manifest
from pathosr.imaging import MagLevel, save_image


def make_synthetic_source(seed: int, height: int = 1024, width: int = 1024) -> np.ndarray:
    """Stained-tissue stand-in: smooth eosin-like background, dark nuclei
    blobs at several scales, and mild correlated texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    img = np.empty((height, width, 3))
    base = np.array([0.88, 0.72, 0.80])
    for c in range(3):
        phase = rng.uniform(0, 2 * np.pi, 2)
        freq = rng.uniform(1.0, 3.0, 2)
        wave = 0.06 * np.cos(2 * np.pi * freq[0] * yy / height + phase[0])
        wave += 0.06 * np.cos(2 * np.pi * freq[1] * xx / width + phase[1])
        img[:, :, c] = base[c] + wave

    n_blobs = max(40, (height * width) // 16384)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(6, 40), rng.uniform(6, 40)
        theta = rng.uniform(0, np.pi)
        color = np.array([0.30, 0.15, 0.45]) + rng.uniform(-0.08, 0.08, 3)
        y0, y1 = int(max(0, cy - ry - rx)), int(min(height, cy + ry + rx))
        x0, x1 = int(max(0, cx - ry - rx)), int(min(width, cx + ry + rx))
        if y0 >= y1 or x0 >= x1:
            continue
        py, px = yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx
        ca, sa = np.cos(theta), np.sin(theta)
        d = ((py * ca + px * sa) / ry) ** 2 + ((px * ca - py * sa) / rx) ** 2
        mask = d < 1.0
        for c in range(3):
            patch = img[y0:y1, x0:x1, c]
            patch[mask] = color[c]

    noise = rng.normal(0.0, 0.015, (height, width, 3))
    # 3x3 box smoothing gives the noise a little spatial correlation.
    sm = noise.copy()
    sm[1:-1, 1:-1] = (
        noise[:-2, :-2] + noise[:-2, 1:-1] + noise[:-2, 2:]
        + noise[1:-1, :-2] + noise[1:-1, 1:-1] + noise[1:-1, 2:]
        + noise[2:, :-2] + noise[2:, 1:-1] + noise[2:, 2:]
    ) / 9.0
    return np.clip(img + sm, 0.0, 1.0)


def prepare_toy_corpus(root, n_tiles: int, seed: int = 0, split: str = "train"):
    """Build a ready-to-train corpus of synthetic 1024px tiles on disk."""
    records = []
    for i in range(n_tiles):
        source = make_synthetic_source(seed + i)
        record = tile_image(source, 1024, source_name=f"toy{i:03d}", split=split)[0]
        levels = build_pyramid(source)
        for level, image in levels.items():
            path = root / split / level.value / f"{record.tile_id}.png"
            save_image(image, path)
            record.paths[level] = str(path)
        records.append(record)
    manifest = root / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest, records


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """16 synthetic train tiles, session-scoped (used by trainer suites)."""
    root = tmp_path_factory.mktemp("toy_corpus")
    manifest, records = prepare_toy_corpus(root, n_tiles=16, seed=100)
    return {"root": root, "manifest": manifest, "records": records}


@pytest.fixture(scope="session")
def single_tile_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("single_tile")
    manifest, records = prepare_toy_corpus(root, n_tiles=1, seed=7)
    return {"root": root, "manifest": manifest, "records": records}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
