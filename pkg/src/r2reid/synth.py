"""Desk-scale stand-in for a re-ID benchmark: each identity wears a
two-tone outfit with a stripe, photographed by two cameras that differ
in brightness."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .datapipe import DatasetRecord, write_manifest
from .exceptions import ConfigError
from .io import save_rten

CAMERA_GAIN = {1: 1.0, 2: 0.75}


def _hue_rgb(h: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, 0.85, 0.9))


def identity_signature(identity: int, n_ids: int, height: int, width: int) -> np.ndarray:
    """Noise-free (3, H, W) appearance of one identity."""
    top = _hue_rgb(identity / n_ids)
    bottom = _hue_rgb(identity / n_ids + 0.5 + 0.13 * (identity % 3))
    img = np.empty((3, height, width))
    split = height // 2
    img[:, :split] = top[:, None, None]
    img[:, split:] = bottom[:, None, None]
    # stripe position and thickness encode the identity as well
    band = max(1, height // 16)
    row = (identity * 5) % max(1, height - band)
    img[:, row : row + band] = 1.0 - img[:, row : row + band]
    return img


def render(identity, n_ids, camera, height, width, rng) -> np.ndarray:
    img = identity_signature(identity, n_ids, height, width) * CAMERA_GAIN[camera]
    img = img + rng.normal(0.0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def split_of(j: int, imgs_per_id: int) -> str:
    half = imgs_per_id // 2
    if j < half:
        return "train"
    return "query" if j == half else "gallery"


def make_synthetic(out_dir: str | Path, n_ids: int = 8, imgs_per_id: int = 8, height: int = 32, width: int = 16, seed: int = 0):
    """Write RTEN images plus ``train.csv``, ``query.csv`` and ``gallery.csv``.

    Image ``j`` of an identity is shot by camera ``1 + j % 2``; the first
    half of each identity's images train, the next one is the query and the
    rest form the gallery, so every query has cross-camera matches when
    ``imgs_per_id >= 4``.
    """
    if n_ids < 2 or imgs_per_id < 2:
        raise ConfigError("synth needs n_ids >= 2 and imgs_per_id >= 2")
    if height < 4 or width < 4:
        raise ConfigError("synth images must be at least 4x4")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    splits: dict[str, list[DatasetRecord]] = {"train": [], "query": [], "gallery": []}
    for ident in range(n_ids):
        for j in range(imgs_per_id):
            cam = 1 + j % 2
            rel = f"images/{ident:04d}_c{cam}_{j:03d}.rten"
            save_rten(out / rel, render(ident, n_ids, cam, height, width, rng))
            splits[split_of(j, imgs_per_id)].append(DatasetRecord(rel, ident, cam))
    for name, recs in splits.items():
        write_manifest(out / f"{name}.csv", recs)
    return splits
