import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from r2reid.datapipe import AugmentConfig, load_dataset
from r2reid.exceptions import BadMagicError, ConfigError, ShapeError, TruncatedFileError, UnsupportedVersionError
from r2reid.res2net import BackboneConfig, build_backbone
from r2reid.trainer import (
    HISTORY_COLUMNS,
    OptimizerState,
    TrainConfig,
    checkpoint_bytes,
    learning_rate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.005), (4, 0.005), (5, 0.05), (10, 0.05), (39, 0.05), (40, 0.005), (80, 0.0005)])
    def test_values(self, epoch, lr):
        assert learning_rate(epoch, TrainConfig()) == lr

    def test_non_increasing_after_warmup(self):
        cfg = TrainConfig()
        lrs = [learning_rate(e, cfg) for e in range(cfg.warmup_epochs, cfg.total_epochs)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("kwargs", [{"base_lr": 0}, {"decay_factor": 1.0}, {"warmup_epochs": -1}, {"loss_weights": (1, 1)}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestSGD:
    def test_plain_step(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([0.5])}, OptimizerState.zeros_like(p), 0.1, 0.0, 0.0)
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 0.1, 0.9, 0.0)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_momentum_two_steps(self):
        p = {"w": np.array([0.0])}
        state = OptimizerState.zeros_like(p)
        for _ in range(2):
            sgd_step(p, {"w": np.array([1.0])}, state, 0.1, 0.9, 0.0)
        assert p["w"][0] == pytest.approx(-0.29, abs=1e-12)

    def test_weight_decay_skips_bias_and_bn(self):
        p = {"a.weight": np.array([1.0]), "a.bias": np.array([1.0]), "bn.gamma": np.array([1.0]), "bn.beta": np.array([1.0])}
        sgd_step(p, {k: np.zeros(1) for k in p}, OptimizerState.zeros_like(p), 1.0, 0.0, 0.5)
        assert p["a.weight"][0] == 0.5 and all(p[k][0] == 1.0 for k in ("a.bias", "bn.gamma", "bn.beta"))

    def test_missing_and_mismatched(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError, match="w"):
            sgd_step(p, {}, OptimizerState.zeros_like(p), 0.1)
        with pytest.raises(ShapeError):
            sgd_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1)

    @given(st.floats(0.1, 10), st.floats(-10, 10), st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), st.floats(0.01, 0.99))
    def test_decreases_convex_quadratic(self, a, c, start, frac):
        # f(x) = a/2 (x - c)^2; plain gradient descent decreases f for lr < 2/a
        x0 = c + start
        p = {"x": np.array([x0])}
        sgd_step(p, {"x": np.array([a * (x0 - c)])}, OptimizerState.zeros_like(p), frac * 2 / a, 0.0, 0.0)
        assert a / 2 * (p["x"][0] - c) ** 2 < a / 2 * (x0 - c) ** 2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build_backbone(BackboneConfig(input_mean=(0.5, 0.5, 0.5), input_std=(0.2, 0.2, 0.2)), rng=1)
        state = OptimizerState({k: np.random.default_rng(0).standard_normal(v.shape).astype(v.dtype) for k, v in model.parameters().items()})
        save_checkpoint(model, state, tmp_path / "m.r2mt")
        loaded, lstate = load_checkpoint(tmp_path / "m.r2mt")
        assert loaded.config == model.config
        for name, arr in model.state_arrays().items():
            assert arr.dtype == loaded.state_arrays()[name].dtype and np.array_equal(arr, loaded.state_arrays()[name])
        assert all(np.array_equal(state.velocity[k], lstate.velocity[k]) for k in state.velocity)
        assert checkpoint_bytes(loaded, lstate) == (tmp_path / "m.r2mt").read_bytes()

    def test_without_optimizer(self):
        model = build_backbone(BackboneConfig(), rng=0)
        loaded, state = read_checkpoint(io.BytesIO(checkpoint_bytes(model)))
        assert state is None and checkpoint_bytes(loaded) == checkpoint_bytes(model)

    def test_errors(self):
        blob = checkpoint_bytes(build_backbone(BackboneConfig(), rng=0))
        assert blob[:4] == b"R2MT"
        with pytest.raises(BadMagicError, match="magic"):
            read_checkpoint(io.BytesIO(b"XXXX" + blob[4:]))
        with pytest.raises(UnsupportedVersionError, match="version"):
            read_checkpoint(io.BytesIO(blob[:4] + bytes([99]) + blob[5:]))
        for cut in (3, 7, len(blob) // 2, len(blob) - 1):
            with pytest.raises(TruncatedFileError):
                read_checkpoint(io.BytesIO(blob[:cut]))


def quick_config(**kw):
    kw = {"total_epochs": 100, "max_iterations": 4, "augment": AugmentConfig(crop_h=32, crop_w=16)} | kw
    return TrainConfig(**kw)


class TestTrain:
    def test_outputs_and_determinism(self, synth_dir, tmp_path):
        ds = load_dataset(synth_dir, synth_dir / "train.csv")
        r1 = train(quick_config(seed=3), ds, out_dir=tmp_path / "a")
        train(quick_config(seed=3), load_dataset(synth_dir, synth_dir / "train.csv"), out_dir=tmp_path / "b")
        assert (tmp_path / "a/model.r2mt").read_bytes() == (tmp_path / "b/model.r2mt").read_bytes()
        rows = list(csv.reader(open(tmp_path / "a/loss.csv")))
        assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 5
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4] and float(rows[1][2]) == 0.005
        assert r1.model.config.num_identities == 8

    def test_different_seed_differs(self, synth_dir):
        ds = load_dataset(synth_dir, synth_dir / "train.csv")
        a = train(quick_config(seed=0), ds).model
        b = train(quick_config(seed=1), ds).model
        assert checkpoint_bytes(a) != checkpoint_bytes(b)

    def test_epoch_length(self, synth_dir):
        ds = load_dataset(synth_dir, synth_dir / "train.csv")
        hist = train(quick_config(max_iterations=5), ds).history
        assert [h["epoch"] for h in hist] == [0, 0, 1, 1, 2]  # 32 records / batch 16

    def test_warm_start_class_mismatch(self, synth_dir):
        ds = load_dataset(synth_dir, synth_dir / "train.csv")
        with pytest.raises(ConfigError):
            train(quick_config(), ds, model=build_backbone(BackboneConfig(num_identities=5)))
