"""Gallery index, cosine ranking, and CMC / mAP evaluation under the
Market-1501 single-query protocol."""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import FormatError, RetrievalError, ShapeError
from .io import check_header, read_exact
from .res2net import Model, extract_descriptors

R2GX_MAGIC = b"R2GX"
R2GX_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class GalleryIndex:
    descriptors: np.ndarray  # (G, d), unit rows
    identities: np.ndarray
    cameras: np.ndarray
    norms: np.ndarray | None = None  # pre-normalization norms, diagnostics only

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        if self.descriptors.ndim != 2 or len(self.descriptors) < 1:
            raise ShapeError(f"gallery descriptors must be a non-empty (G, d) matrix, got {self.descriptors.shape}")
        g = len(self.descriptors)
        if self.identities.shape != (g,) or self.cameras.shape != (g,):
            raise ShapeError("gallery labels do not match descriptor rows")

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def from_descriptors(cls, descriptors, identities, cameras, names=None) -> "GalleryIndex":
        descriptors = np.asarray(descriptors)
        norms = np.linalg.norm(descriptors, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            what = names[zero[0]] if names is not None else f"row {zero[0]}"
            raise RetrievalError(f"zero-norm descriptor for {what}")
        return cls(descriptors / norms[:, None], identities, cameras, norms)


def build_gallery(model: Model, images: np.ndarray, identities, cameras, names=None) -> GalleryIndex:
    if len(images) == 0:
        raise RetrievalError("cannot build a gallery from zero records")
    return GalleryIndex.from_descriptors(extract_descriptors(model, images), identities, cameras, names)


def normalize(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q)
    if norm == 0:
        raise RetrievalError("zero-norm query descriptor")
    return q / norm


def similarities(q: np.ndarray, gallery: GalleryIndex) -> np.ndarray:
    if q.shape != (gallery.dim,):
        raise ShapeError(f"query dim {q.shape} != gallery dim {gallery.dim}")
    # row-wise reduction: equal rows get bitwise-equal scores, so the
    # index tie-break is honoured (a BLAS matvec gives no such guarantee)
    return np.sum(gallery.descriptors * normalize(q), axis=1)


def rank_query(
    q: np.ndarray,
    gallery: GalleryIndex,
    exclude: Callable[[int], bool] | np.ndarray | None = None,
) -> np.ndarray:
    """Gallery positions by descending cosine similarity, ties by ascending index.

    ``exclude`` is a per-position predicate or a boolean mask of rows to drop.
    """
    sims = similarities(q, gallery)
    keep = np.ones(len(gallery), dtype=bool)
    if exclude is not None:
        mask = np.asarray(exclude, dtype=bool) if not callable(exclude) else np.array([exclude(i) for i in range(len(gallery))], dtype=bool)
        keep &= ~mask
    candidates = np.flatnonzero(keep)
    if candidates.size == 0:
        raise RetrievalError("empty candidate set")
    order = np.lexsort((candidates, -sims[candidates]))
    return candidates[order]


def average_precision(ranked: np.ndarray, relevant) -> float:
    """AP = mean over hits of (hits so far / rank)."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise RetrievalError("no ground truth for query")
    hits = np.isin(ranked, list(relevant))
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, len(ranks) + 1) / ranks) / len(relevant))


@dataclass
class EvalResult:
    cmc: np.ndarray  # cmc[k-1] = Acc_k
    map: float
    per_query_ap: list[float]
    num_valid: int
    num_dropped: int = 0
    dropped: list[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def report(self) -> str:
        lines = [f"queries: {self.num_valid} evaluated, {self.num_dropped} dropped (no cross-camera ground truth)"]
        lines.append(f"{'rank':>6} {'accuracy':>10}")
        for k in (1, 5, 10, 20):
            if k <= len(self.cmc):
                lines.append(f"{k:>6} {self.cmc[k - 1]:>10.4f}")
        lines.append(f"{'mAP':>6} {self.map:>10.4f}")
        return "\n".join(lines)

    def csv_lines(self) -> list[str]:
        lines = ["k,acc_k"] + [f"{k},{float(v)!r}" for k, v in enumerate(self.cmc, start=1)]
        lines.append(f"mAP,{self.map!r}")
        return lines


def _evaluate_one(q, q_id, q_cam, gallery: GalleryIndex, k_max: int):
    junk = (gallery.identities == q_id) & (gallery.cameras == q_cam)
    if np.all(junk):
        return None
    ranked = rank_query(q, gallery, junk)
    matches = gallery.identities[ranked] == q_id
    if not matches.any():
        return None
    ap = average_precision(ranked, ranked[matches])
    first_hit = int(np.argmax(matches))
    cmc = (np.arange(k_max) >= first_hit).astype(np.float64)
    return cmc, ap


def evaluate_descriptors(
    q_desc: np.ndarray,
    q_ids,
    q_cams,
    gallery: GalleryIndex,
    k_max: int | None = None,
    n_jobs: int = 1,
) -> EvalResult:
    """Per query: drop same-identity/same-camera rows, keep distractors as
    negatives, rank, then average CMC indicators and AP over queries that
    still have a relevant row. Reductions run in query order.
    """
    q_desc = np.asarray(q_desc)
    q_ids = np.asarray(q_ids, dtype=np.int64)
    q_cams = np.asarray(q_cams, dtype=np.int64)
    if len(q_desc) == 0:
        raise RetrievalError("empty query set")
    k_max = len(gallery) if k_max is None else int(k_max)

    def one(i):
        return _evaluate_one(q_desc[i], q_ids[i], q_cams[i], gallery, k_max)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, range(len(q_desc))))
    else:
        results = [one(i) for i in range(len(q_desc))]

    valid = [r for r in results if r is not None]
    dropped = [i for i, r in enumerate(results) if r is None]
    if not valid:
        raise RetrievalError("no query has cross-camera ground truth in the gallery")
    cmc = np.zeros(k_max)
    for c, _ in valid:
        cmc += c
    cmc /= len(valid)
    aps = [ap for _, ap in valid]
    return EvalResult(cmc, float(sum(aps) / len(aps)), aps, len(valid), len(dropped), dropped)


def evaluate(
    query_images: np.ndarray,
    query_ids,
    query_cams,
    gallery: GalleryIndex,
    model: Model,
    k_max: int | None = None,
    n_jobs: int = 1,
) -> EvalResult:
    return evaluate_descriptors(extract_descriptors(model, query_images), query_ids, query_cams, gallery, k_max, n_jobs)


# --------------------------------------------------------------------------
# R2GX file
#
# b"R2GX" | u8 version | u8 dtype | u32 d | u32 G | G x (d floats, i32 id, i32 cam)


def gallery_bytes(g: GalleryIndex) -> bytes:
    dtype = np.dtype(g.descriptors.dtype).newbyteorder("<")
    code = {v: k for k, v in _DTYPES.items()}.get(dtype)
    if code is None:
        raise FormatError(f"unsupported gallery dtype {g.descriptors.dtype}")
    row = np.dtype([("f", dtype, (g.dim,)), ("id", "<i4"), ("cam", "<i4")])
    rows = np.empty(len(g), dtype=row)
    rows["f"] = g.descriptors
    rows["id"] = g.identities
    rows["cam"] = g.cameras
    buf = io.BytesIO()
    buf.write(R2GX_MAGIC + struct.pack("<BBII", R2GX_VERSION, code, g.dim, len(g)))
    buf.write(rows.tobytes())
    return buf.getvalue()


def save_gallery(g: GalleryIndex, path: str | Path) -> None:
    Path(path).write_bytes(gallery_bytes(g))


def read_gallery(fh) -> GalleryIndex:
    check_header(fh, R2GX_MAGIC, {R2GX_VERSION})
    code, d, count = struct.unpack("<BII", read_exact(fh, 9))
    if code not in _DTYPES:
        raise FormatError(f"unknown gallery dtype code {code}")
    row = np.dtype([("f", _DTYPES[code], (d,)), ("id", "<i4"), ("cam", "<i4")])
    rows = np.frombuffer(read_exact(fh, row.itemsize * count), dtype=row)
    if fh.read(1):
        raise FormatError("trailing bytes after gallery payload")
    native = _DTYPES[code].newbyteorder("=")
    return GalleryIndex(rows["f"].astype(native), rows["id"].astype(np.int64), rows["cam"].astype(np.int64))


def load_gallery(path: str | Path) -> GalleryIndex:
    with open(path, "rb") as fh:
        return read_gallery(fh)
