"""Mini-batch SGD with warmup + step decay, the pair-batch training loop,
and R2MT checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from .datapipe import AugmentConfig, Dataset, sample_pair_batch
from .exceptions import ConfigError, FormatError, ShapeError
from .io import check_header, read_exact, read_rten, write_rten
from .multitask import DEFAULT_LOSS_WEIGHTS, multitask_step
from .res2net import BackboneConfig, Model, build_backbone, load_state_arrays

logger = logging.getLogger(__name__)

R2MT_MAGIC = b"R2MT"
R2MT_VERSION = 1
_OPTIM_PREFIX = "optim."
HISTORY_COLUMNS = ("iter", "epoch", "lr", "id_loss_a", "id_loss_b", "verif_loss", "total")


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    warmup_epochs: int = 5
    warmup_factor: float = 0.1
    decay_every: int = 40
    decay_factor: float = 0.1
    total_epochs: int = 256
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    positive_fraction: float = 0.5
    max_iterations: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.decay_factor < 1:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if self.warmup_epochs < 0 or self.decay_every < 1 or self.total_epochs < 1:
            raise ConfigError("epoch counts must be non-negative (warmup) / positive (decay, total)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs three entries (id_a, id_b, verif)")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Warmup for the first ``warmup_epochs``, then step decay on the absolute epoch.

    Products are formed in decimal so that e.g. 0.05 x 0.1 is exactly 0.005.
    """
    base = Decimal(repr(cfg.base_lr))
    if epoch < cfg.warmup_epochs:
        return float(base * Decimal(repr(cfg.warmup_factor)))
    return float(base * Decimal(repr(cfg.decay_factor)) ** (epoch // cfg.decay_every))


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({name: np.zeros_like(arr) for name, arr in params.items()})


def decays(name: str) -> bool:
    # no weight decay on biases or batch-norm affine terms
    return name.rsplit(".", 1)[-1] not in ("bias", "gamma", "beta")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place momentum SGD: ``v = m*v + (g + wd*p); p -= lr*v``."""
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"missing gradient for {sorted(missing)[0]}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay and decays(name):
            g = g + weight_decay * p
        v = state.velocity.setdefault(name, np.zeros_like(p))
        v *= momentum
        v += g
        p -= lr * v


@dataclass
class TrainResult:
    model: Model
    state: OptimizerState
    history: list[dict]


def train(
    cfg: TrainConfig,
    ds: Dataset,
    model: Model | None = None,
    backbone: BackboneConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the multi-task training loop; deterministic given ``cfg.seed``.

    One epoch is ``len(train records) // batch_size`` iterations over a
    fresh permutation of anchors. With ``out_dir`` the checkpoint
    (``model.r2mt``) and loss history (``loss.csv``) are written there.
    """
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        backbone = backbone or BackboneConfig()
        if backbone.num_identities != len(ds.classes):
            backbone = BackboneConfig.from_dict(backbone.to_dict() | {"num_identities": len(ds.classes)})
        model = build_backbone(backbone, rng)
    elif model.config.num_identities != len(ds.classes):
        raise ConfigError(f"model has {model.config.num_identities} identities, dataset {len(ds.classes)}")

    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    train_pos = np.array([i for i, r in enumerate(ds.records) if r.identity >= 0])
    per_epoch = max(1, len(train_pos) // cfg.batch_size)
    history: list[dict] = []
    it = 0
    done = False
    for epoch in range(cfg.total_epochs):
        lr = learning_rate(epoch, cfg)
        perm = rng.permutation(train_pos)
        for k in range(per_epoch):
            anchors = perm[k * cfg.batch_size : (k + 1) * cfg.batch_size]
            if len(anchors) < cfg.batch_size:
                anchors = None
            batch = sample_pair_batch(ds, cfg.batch_size, cfg.positive_fraction, rng, cfg.augment, anchors)
            report, grads = multitask_step(batch, model, cfg.loss_weights)
            sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay)
            it += 1
            history.append(
                {
                    "iter": it,
                    "epoch": epoch,
                    "lr": lr,
                    "id_loss_a": report.id_loss_a,
                    "id_loss_b": report.id_loss_b,
                    "verif_loss": report.verif_loss,
                    "total": report.total,
                }
            )
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                done = True
                break
        logger.info("epoch %d lr %.6g loss %.4f", epoch, lr, history[-1]["total"])
        if done:
            break

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, state, out / "model.r2mt")
        write_history(out / "loss.csv", history)
    return TrainResult(model, state, history)


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in HISTORY_COLUMNS])


# --------------------------------------------------------------------------
# checkpoints
#
# b"R2MT" | u8 version | u32 n + n bytes JSON BackboneConfig | u32 count
# | count x (u16 n + n bytes name, RTEN tensor), names sorted lexicographically.
# Optimizer velocities are stored under "optim.<param name>".


def checkpoint_bytes(model: Model, state: OptimizerState | None = None) -> bytes:
    arrays = dict(model.state_arrays())
    if state is not None:
        arrays |= {_OPTIM_PREFIX + k: v for k, v in state.velocity.items()}
    buf = io.BytesIO()
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(R2MT_MAGIC + struct.pack("<B", R2MT_VERSION))
    buf.write(struct.pack("<I", len(config)) + config)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        write_rten(buf, arrays[name])
    return buf.getvalue()


def save_checkpoint(model: Model, state: OptimizerState | None, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, state))


def read_checkpoint(fh) -> tuple[Model, OptimizerState | None]:
    check_header(fh, R2MT_MAGIC, {R2MT_VERSION})
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    try:
        cfg = BackboneConfig.from_dict(json.loads(read_exact(fh, n)))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"corrupt backbone config in checkpoint: {exc}") from exc
    (count,) = struct.unpack("<I", read_exact(fh, 4))
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read_exact(fh, 2))
        name = read_exact(fh, n).decode()
        arrays[name] = read_rten(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    velocity = {k[len(_OPTIM_PREFIX) :]: v for k, v in arrays.items() if k.startswith(_OPTIM_PREFIX)}
    weights = {k: v for k, v in arrays.items() if not k.startswith(_OPTIM_PREFIX)}
    dtype = weights["stem.weight"].dtype if "stem.weight" in weights else np.float32
    model = build_backbone(cfg, 0, dtype=dtype)
    load_state_arrays(model, weights)
    return model, (OptimizerState(velocity) if velocity else None)


def load_checkpoint(path: str | Path) -> tuple[Model, OptimizerState | None]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss_weights"] = list(cfg.loss_weights)
    return d
