"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datapipe import AugmentConfig, load_dataset, load_image
from .exceptions import R2ReidError
from .gradcheck import SCOPES, format_table, run_suite
from .io import save_rten
from .res2net import BackboneConfig, extract_descriptor, extract_descriptors
from .retrieval import GalleryIndex, evaluate_descriptors, load_gallery, rank_query, save_gallery, similarities
from .synth import make_synthetic
from .trainer import TrainConfig, load_checkpoint, train

logger = logging.getLogger("r2reid")

CONFIG_SECTIONS = {"data", "backbone", "train", "augment", "out_dir"}
DATA_KEYS = {"train_manifest", "root"}


class UsageError(Exception):
    pass


def _existing(path, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _strict(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise UsageError(f"config section {section!r} must be an object")
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"config section {section!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section {section!r}: {exc}") from exc


def load_config(path: Path) -> dict:
    """Parse and validate a training config; relative paths resolve against its directory."""
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(raw) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    data = raw.get("data", {})
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown data keys {sorted(unknown)}")
    if "train_manifest" not in data and "root" not in data:
        raise UsageError(f"{path}: data.train_manifest or data.root is required")
    base = path.parent
    manifest = _existing(base / data["train_manifest"], "data.train_manifest") if "train_manifest" in data else None
    root = _existing(base / data["root"], "data.root") if "root" in data else manifest.parent
    augment = _strict(AugmentConfig, "augment", raw.get("augment", {}))
    train_cfg = _strict(TrainConfig, "train", raw.get("train", {}) | {"augment": augment})
    backbone = _strict(BackboneConfig, "backbone", raw.get("backbone", {}))
    return {
        "root": root,
        "manifest": manifest,
        "train": train_cfg,
        "backbone": backbone,
        "out_dir": base / raw.get("out_dir", "run"),
    }


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    try:
        splits = make_synthetic(args.out, args.n_ids, args.imgs_per_id, args.height, args.width, args.seed)
    except R2ReidError as exc:
        raise UsageError(str(exc)) from exc
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote {sum(len(v) for v in splits.values())} images to {args.out} ({counts})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(_existing(args.config, "--config"))
    train_cfg = cfg["train"]
    if args.seed is not None:
        train_cfg.seed = args.seed
    out = Path(args.out) if args.out else cfg["out_dir"]
    ds = load_dataset(cfg["root"], cfg["manifest"])
    result = train(train_cfg, ds, backbone=cfg["backbone"], out_dir=out)
    last = result.history[-1]
    print(f"trained {last['iter']} iterations; final loss {last['total']:.4f}")
    print(f"checkpoint: {out / 'model.r2mt'}")
    print(f"loss history: {out / 'loss.csv'}")
    return 0


def _manifest_dataset(path: Path):
    return load_dataset(path.parent, path)


def cmd_extract(args) -> int:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    manifest = _existing(args.manifest, "--manifest")
    model, _ = load_checkpoint(ckpt)
    ds = _manifest_dataset(manifest)
    desc = extract_descriptors(model, ds.stack(range(len(ds))))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rten(out / "descriptors.rten", desc)
    names = [r.image_path for r in ds.records]
    save_gallery(GalleryIndex.from_descriptors(desc, ds.identities, ds.cameras, names), out / "gallery.r2gx")
    print(f"{len(ds)} descriptors of dim {desc.shape[1]} -> {out / 'descriptors.rten'}, {out / 'gallery.r2gx'}")
    return 0


def cmd_rank(args) -> int:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    query = _existing(args.query, "--query")
    gallery_path = _existing(args.gallery, "--gallery")
    names = None
    if args.manifest:
        names = [r.image_path for r in _manifest_dataset(_existing(args.manifest, "--manifest")).records]
    model, _ = load_checkpoint(ckpt)
    gallery = load_gallery(gallery_path)
    if names is not None and len(names) != len(gallery):
        raise UsageError(f"--manifest has {len(names)} rows, gallery index {len(gallery)}")
    q = extract_descriptor(model, load_image(query))
    ranked = rank_query(q, gallery)
    sims = similarities(q, gallery)
    print("rank,gallery,similarity")
    for r, pos in enumerate(ranked[: args.top_k], start=1):
        label = names[pos] if names is not None else str(pos)
        print(f"{r},{label},{float(sims[pos]):.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    qpath = _existing(args.query, "--query")
    gpath = _existing(args.gallery, "--gallery")
    model, _ = load_checkpoint(ckpt)
    qds, gds = _manifest_dataset(qpath), _manifest_dataset(gpath)
    gdesc = extract_descriptors(model, gds.stack(range(len(gds))))
    gallery = GalleryIndex.from_descriptors(gdesc, gds.identities, gds.cameras, [r.image_path for r in gds.records])
    qdesc = extract_descriptors(model, qds.stack(range(len(qds))))
    k_max = min(args.top_k, len(gallery))
    result = evaluate_descriptors(qdesc, qds.identities, qds.cameras, gallery, k_max)
    print(result.report())
    lines = result.csv_lines()
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    rows, elapsed = run_suite(args.scope, seeds=10, base_seed=args.seed or 0)
    print(format_table(rows))
    print(f"{len(rows)} ops, 10 seeds each, {elapsed:.1f}s")
    return 0 if all(r.ok for r in rows) else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r2reid", description="Multi-task Res2Net person re-identification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,extract,rank,eval,gradcheck}")

    p = sub.add_parser("synth", help="write a synthetic RTEN dataset with train/query/gallery manifests")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-ids", type=int, default=8, help="number of identities (>= 2)")
    p.add_argument("--imgs-per-id", type=int, default=8, help="images per identity (>= 2)")
    p.add_argument("--height", type=int, default=32, help="image height")
    p.add_argument("--width", type=int, default=16, help="image width")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config; writes model.r2mt and loss.csv")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="descriptors for a manifest (RTEN matrix + R2GX gallery index)")
    p.add_argument("--checkpoint", required=True, help="R2MT checkpoint")
    p.add_argument("--manifest", required=True, help="path,identity,camera CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("rank", help="rank a gallery index against one query image")
    p.add_argument("--checkpoint", required=True, help="R2MT checkpoint")
    p.add_argument("--query", required=True, help="query image (.rten or .ppm)")
    p.add_argument("--gallery", required=True, help="R2GX gallery index")
    p.add_argument("--manifest", default=None, help="gallery manifest, to print paths instead of row numbers")
    p.add_argument("--top-k", type=int, default=10, help="number of results to print")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="CMC and mAP for query/gallery manifests")
    p.add_argument("--checkpoint", required=True, help="R2MT checkpoint")
    p.add_argument("--query", required=True, help="query manifest")
    p.add_argument("--gallery", required=True, help="gallery manifest")
    p.add_argument("--top-k", type=int, default=20, help="longest CMC rank reported")
    p.add_argument("--out", default=None, help="directory for eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="float64 finite-difference check of every backward pass")
    p.add_argument("--scope", choices=["all", *SCOPES], default="all", help="which group of ops to check")
    p.add_argument("--seed", type=int, default=0, help="first of the 10 seeds")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"r2reid {args.command}: {exc}", file=sys.stderr)
        return 2
    except (R2ReidError, OSError) as exc:
        print(f"r2reid {args.command}: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
