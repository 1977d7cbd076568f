import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from r2reid.cli import build_parser, main
from r2reid.datapipe import DatasetRecord, load_dataset, write_manifest
from r2reid.io import load_rten, save_rten
from r2reid.res2net import BackboneConfig, build_backbone
from r2reid.retrieval import load_gallery
from r2reid.trainer import save_checkpoint


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and len([k for k in a if k.endswith(".rten")]) == 64
    assert main(["synth", "--out", str(tmp_path / "c"), "--seed", "8"]) == 0
    assert tree(tmp_path / "c") != a


def test_synth_splits(synth_dir):
    splits = {name: load_dataset(synth_dir, synth_dir / f"{name}.csv") for name in ("train", "query", "gallery")}
    paths = [r.image_path for ds in splits.values() for r in ds.records]
    assert len(paths) == len(set(paths)) == 64
    for q in splits["query"].records:
        assert any(g.identity == q.identity and g.camera != q.camera for g in splits["gallery"].records)


def test_synth_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--n-ids", "1"]) == 2
    assert "n_ids" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and "synth" in a.choices)
    for name, p in sub.choices.items():
        help_text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in help_text
            assert action.help, f"{name} {action.option_strings} lacks help"


def test_missing_file_is_usage_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err


@pytest.mark.parametrize(
    "config,needle",
    [
        ({"data": {"train_manifest": "train.csv"}, "train": {"base_lrr": 0.1}}, "base_lrr"),
        ({"data": {"train_manifest": "train.csv"}, "extra": 1}, "extra"),
        ({"data": {"train_manifest": "missing.csv"}}, "missing.csv"),
        ({"data": {"train_manifest": "train.csv"}, "backbone": {"scale": 3}}, "scale"),
        ({}, "train_manifest"),
    ],
)
def test_bad_config(synth_dir, tmp_path, capsys, config, needle):
    cfg = synth_dir / f"bad_{abs(hash(needle))}.json"
    cfg.write_text(json.dumps(config))
    try:
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    finally:
        cfg.unlink()
    assert needle in capsys.readouterr().err


def test_corrupt_checkpoint_is_runtime_error(synth_dir, tmp_path, capsys):
    bad = tmp_path / "bad.r2mt"
    bad.write_bytes(b"XXXX\x01")
    assert main(["extract", "--checkpoint", str(bad), "--manifest", str(synth_dir / "gallery.csv"), "--out", str(tmp_path)]) == 1
    assert "magic" in capsys.readouterr().err


@pytest.fixture
def prebaked(tmp_path):
    """Queries and gallery where each identity's images are identical, so every query hits at rank 1."""
    rng = np.random.default_rng(0)
    model = build_backbone(BackboneConfig(num_identities=4), rng=0)
    save_checkpoint(model, None, tmp_path / "model.r2mt")
    (tmp_path / "img").mkdir()
    query, gallery = [], []
    for ident in range(4):
        img = rng.random((3, 16, 8)).astype(np.float32)
        for cam, bucket in ((1, query), (2, gallery), (3, gallery)):
            rel = f"img/{ident}_{cam}.rten"
            save_rten(tmp_path / rel, img)
            bucket.append(DatasetRecord(rel, ident, cam))
    write_manifest(tmp_path / "query.csv", query)
    write_manifest(tmp_path / "gallery.csv", gallery)
    return tmp_path


def test_eval_prebaked(prebaked, capsys):
    d = prebaked
    code = main(["eval", "--checkpoint", str(d / "model.r2mt"), "--query", str(d / "query.csv"), "--gallery", str(d / "gallery.csv"), "--out", str(d / "ev")])
    out = capsys.readouterr().out.splitlines()
    assert code == 0 and "mAP,1.0" in out and "1,1.0" in out and "k,acc_k" in out
    assert (d / "ev/eval.csv").read_text().splitlines()[-1] == "mAP,1.0"


def test_extract_and_rank(prebaked, capsys):
    d = prebaked
    assert main(["extract", "--checkpoint", str(d / "model.r2mt"), "--manifest", str(d / "gallery.csv"), "--out", str(d / "ex")]) == 0
    desc = load_rten(d / "ex/descriptors.rten")
    g = load_gallery(d / "ex/gallery.r2gx")
    assert desc.shape == (8, 16) and len(g) == 8
    np.testing.assert_allclose(g.descriptors, desc / np.linalg.norm(desc, axis=1, keepdims=True), rtol=1e-6)
    capsys.readouterr()
    code = main(["rank", "--checkpoint", str(d / "model.r2mt"), "--query", str(d / "img/2_1.rten"), "--gallery", str(d / "ex/gallery.r2gx"), "--manifest", str(d / "gallery.csv"), "--top-k", "3"])
    lines = capsys.readouterr().out.splitlines()
    assert code == 0 and lines[0] == "rank,gallery,similarity" and len(lines) == 4
    assert {lines[1].split(",")[1], lines[2].split(",")[1]} == {"img/2_2.rten", "img/2_3.rten"}
    assert float(lines[1].split(",")[2]) == pytest.approx(1.0, abs=1e-5)


def test_train_end_to_end(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "data": {"train_manifest": str(synth_dir / "train.csv")},
        "train": {"total_epochs": 100, "max_iterations": 3},
        "augment": {"crop_h": 32, "crop_w": 16},
        "out_dir": "run",
    }))
    assert main(["train", "--config", str(cfg), "--seed", "2"]) == 0
    assert (tmp_path / "run/model.r2mt").exists()
    assert len((tmp_path / "run/loss.csv").read_text().splitlines()) == 4


def test_gradcheck_block(capsys):
    assert main(["gradcheck", "--scope", "block"]) == 0
    out = capsys.readouterr().out
    row = next(l for l in out.splitlines() if l.startswith("res2net_block "))
    assert float(row.split()[2]) < 1e-4 and row.endswith("PASS")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "r2reid", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "r2reid", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
