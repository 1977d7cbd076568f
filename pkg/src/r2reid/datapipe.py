"""Dataset ingestion, pair sampling and training-time augmentation."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DatasetError, FormatError
from .io import load_rten
from .multitask import DIFFERENT, SAME, PairBatch

IMAGE_SUFFIXES = (".rten", ".ppm")
_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass(frozen=True)
class DatasetRecord:
    image_path: str
    identity: int  # -1 marks a distractor
    camera: int


@dataclass
class Dataset:
    records: list[DatasetRecord]
    root: Path = Path(".")
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.records:
            raise DatasetError("empty dataset")
        seen = set()
        for r in self.records:
            if not r.image_path:
                raise DatasetError("record with empty image path")
            if r.image_path in seen:
                raise DatasetError(f"duplicate path: {r.image_path}")
            seen.add(r.image_path)
        self.identity_index: dict[int, list[int]] = {}
        for pos, r in enumerate(self.records):
            self.identity_index.setdefault(r.identity, []).append(pos)
        # contiguous class ids for the identification head; distractors excluded
        self.classes = sorted(i for i in self.identity_index if i >= 0)
        self.class_of = {ident: k for k, ident in enumerate(self.classes)}

    @classmethod
    def from_arrays(cls, images, identities, cameras=None) -> "Dataset":
        """In-memory dataset; records get synthetic ``mem:`` paths."""
        cameras = np.ones(len(images), dtype=int) if cameras is None else cameras
        records, store = [], {}
        for i, (img, ident, cam) in enumerate(zip(images, identities, cameras)):
            path = f"mem:{i:08d}"
            records.append(DatasetRecord(path, int(ident), int(cam)))
            store[path] = np.asarray(img)
        return cls(records, Path("."), store)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, pos: int) -> np.ndarray:
        path = self.records[pos].image_path
        if path not in self.images:
            self.images[path] = load_image(self.root / path)
        return self.images[path]

    def stack(self, positions) -> np.ndarray:
        return np.stack([self.image(p) for p in positions])

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([r.camera for r in self.records], dtype=np.int64)


# --------------------------------------------------------------------------
# loading


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary PPM (P6) -> float32 array (3, H, W) scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * 3
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos) if len(data) - pos >= count * dtype.itemsize else None
    if raw is None:
        raise FormatError(f"{path}: truncated PPM raster")
    return (raw.reshape(height, width, 3).transpose(2, 0, 1) / maxval).astype(np.float32)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    rgb = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".rten":
        img = load_rten(path)
    elif suffix == ".ppm":
        img = read_ppm(path)
    else:
        raise FormatError(f"{path}: unsupported image format (expected .rten or .ppm)")
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"{path}: expected a 3xHxW image, got {img.shape}")
    return img.astype(np.float32, copy=False)


def _parse_manifest(manifest: Path) -> list[DatasetRecord]:
    records = []
    with open(manifest, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise DatasetError(f"{manifest}:{lineno}: expected path,identity,camera")
            path, ident, cam = (c.strip() for c in row)
            try:
                records.append(DatasetRecord(path, int(ident), int(cam)))
            except ValueError:
                if lineno == 1 and not records:
                    continue  # header
                raise DatasetError(f"{manifest}:{lineno}: bad identity/camera {ident!r},{cam!r}") from None
    return records


def load_dataset(root: str | Path, manifest: str | Path | None = None) -> Dataset:
    """Load records from a ``path,identity,camera`` manifest, or by parsing
    Market-1501 style filenames (``0002_c1s1_000451_03.rten``) under ``root``.

    Manifest paths are relative to ``root``. Records are sorted by path.
    """
    root = Path(root)
    if manifest is not None:
        records = _parse_manifest(Path(manifest))
    else:
        if not root.is_dir():
            raise DatasetError(f"{root}: not a directory")
        records = []
        for p in sorted(root.iterdir()):
            if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = _MARKET_NAME.match(p.name)
            if m is None:
                raise DatasetError(f"unparseable filename: {p.name}")
            records.append(DatasetRecord(p.name, int(m.group(1)), int(m.group(2))))
    records.sort(key=lambda r: r.image_path)
    return Dataset(records, root)


def write_manifest(path: str | Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "identity", "camera"])
        for r in records:
            writer.writerow([r.image_path, r.identity, r.camera])


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_h: int = 256
    crop_w: int = 128
    resize_factor: float = 1.125
    rea_probability: float = 0.5
    rea_area_range: tuple[float, float] = (0.02, 0.4)
    rea_aspect_range: tuple[float, float] = (0.3, 3.33)
    rea_max_attempts: int = 100

    def __post_init__(self):
        self.rea_area_range = tuple(self.rea_area_range)
        self.rea_aspect_range = tuple(self.rea_aspect_range)
        if not 0.0 <= self.rea_probability <= 1.0:
            raise ConfigError(f"rea_probability {self.rea_probability} outside [0, 1]")
        lo, hi = self.rea_area_range
        if not 0 < lo < hi < 1:
            raise ConfigError(f"rea_area_range must satisfy 0 < lo < hi < 1, got {self.rea_area_range}")
        lo, hi = self.rea_aspect_range
        if not 0 < lo < hi:
            raise ConfigError(f"rea_aspect_range must satisfy 0 < lo < hi, got {self.rea_aspect_range}")
        if self.crop_h < 1 or self.crop_w < 1 or self.resize_factor < 1:
            raise ConfigError("crop dims must be positive and resize_factor >= 1")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) image."""
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy)[:, None] + bottom * wy[:, None]).astype(image.dtype)


def random_crop(image: np.ndarray, out_h: int, out_w: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = image.shape
    if h < out_h or w < out_w:
        image = resize_bilinear(image, max(h, out_h), max(w, out_w))
        _, h, w = image.shape
    top = int(rng.integers(0, h - out_h + 1))
    left = int(rng.integers(0, w - out_w + 1))
    return image[:, top : top + out_h, left : left + out_w].copy()


def random_erase(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, return_box: bool = False):
    """With probability ``cfg.rea_probability`` overwrite one rectangle with
    uniform noise in [0, 1). ``return_box`` also yields ``(top, left, h, w)``
    or ``None`` when nothing was erased."""
    out = image.copy()
    box = None
    if rng.random() < cfg.rea_probability:
        _, h, w = image.shape
        area = h * w
        lo, hi = cfg.rea_area_range
        for _ in range(cfg.rea_max_attempts):
            target = rng.uniform(lo, hi) * area
            aspect = rng.uniform(*cfg.rea_aspect_range)
            eh = int(round(math.sqrt(target * aspect)))
            ew = int(round(math.sqrt(target / aspect)))
            if not (0 < eh < h and 0 < ew < w and lo <= eh * ew / area <= hi):
                continue
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out[:, top : top + eh, left : left + ew] = rng.random((image.shape[0], eh, ew))
            box = (top, left, eh, ew)
            break
    return (out, box) if return_box else out


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Resize up by ``resize_factor``, random crop to target, random erase."""
    big_h = int(round(cfg.crop_h * cfg.resize_factor))
    big_w = int(round(cfg.crop_w * cfg.resize_factor))
    img = random_crop(resize_bilinear(image, big_h, big_w), cfg.crop_h, cfg.crop_w, rng)
    return random_erase(img, cfg, rng)


# --------------------------------------------------------------------------
# pair sampling


def sample_pair_batch(
    ds: Dataset,
    batch_size: int,
    positive_fraction: float = 0.5,
    rng: np.random.Generator | None = None,
    augment_cfg: AugmentConfig | None = None,
    anchors=None,
) -> PairBatch:
    """Compose ``round(B * positive_fraction)`` positive pairs and the rest negative.

    ``anchors`` optionally fixes the first image of each pair (record
    positions, e.g. from a per-epoch shuffle); the partner is drawn from
    the same identity (positives) or a different one (negatives). A
    positive slot whose anchor has no second image gets a fresh anchor.
    Distractors are never sampled. Labels are contiguous class ids.
    """
    rng = np.random.default_rng() if rng is None else rng
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pools = {i: ds.identity_index[i] for i in ds.classes}
    multi = [i for i, pos in pools.items() if len(pos) >= 2]
    n_pos = int(math.floor(batch_size * positive_fraction + 0.5))
    n_neg = batch_size - n_pos
    if n_pos and not multi:
        raise DatasetError("positive pairs requested but no identity has two images")
    if n_neg and len(pools) < 2:
        raise DatasetError("negative pairs need at least two identities")
    if anchors is not None and len(anchors) != batch_size:
        raise ValueError(f"{len(anchors)} anchors for batch size {batch_size}")
    classes = ds.classes

    pos_a, pos_b, pair = [], [], []
    for slot in range(batch_size):
        anchor = None if anchors is None else int(anchors[slot])
        if anchor is not None and ds.records[anchor].identity < 0:
            anchor = None
        if slot < n_pos:
            if anchor is None or len(pools[ds.records[anchor].identity]) < 2:
                anchor = int(rng.choice(pools[multi[int(rng.integers(len(multi)))]]))
            ident = ds.records[anchor].identity
            partner = int(rng.choice([p for p in pools[ident] if p != anchor]))
            pair.append(SAME)
        else:
            if anchor is None:
                anchor = int(rng.choice(pools[classes[int(rng.integers(len(classes)))]]))
            ident = ds.records[anchor].identity
            others = [c for c in classes if c != ident]
            other = others[int(rng.integers(len(others)))]
            partner = int(rng.choice(pools[other]))
            pair.append(DIFFERENT)
        pos_a.append(anchor)
        pos_b.append(partner)

    def images(positions):
        if augment_cfg is None:
            return ds.stack(positions)
        return np.stack([augment(ds.image(p), augment_cfg, rng) for p in positions])

    return PairBatch(
        images(pos_a),
        images(pos_b),
        [ds.class_of[ds.records[p].identity] for p in pos_a],
        [ds.class_of[ds.records[p].identity] for p in pos_b],
        pair,
    )
