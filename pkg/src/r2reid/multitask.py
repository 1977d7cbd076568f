"""Siamese multi-task objective: two identification losses on the shared
descriptor plus a binary verification loss on the squared difference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BatchError, ShapeError
from .res2net import Model, backbone_backward, backbone_forward
from .tensor import LinearParams, linear, linear_backward, softmax

SAME, DIFFERENT = 0, 1
DEFAULT_LOSS_WEIGHTS = (0.5, 0.5, 1.0)


@dataclass
class PairBatch:
    images_a: np.ndarray
    images_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    pair_labels: np.ndarray  # SAME / DIFFERENT

    def __post_init__(self):
        self.labels_a = np.asarray(self.labels_a, dtype=np.int64)
        self.labels_b = np.asarray(self.labels_b, dtype=np.int64)
        self.pair_labels = np.asarray(self.pair_labels, dtype=np.int64)
        b = len(self.labels_a)
        if not (len(self.images_a) == len(self.images_b) == len(self.labels_b) == len(self.pair_labels) == b):
            raise BatchError("pair batch components have different lengths")
        expected = np.where(self.labels_a == self.labels_b, SAME, DIFFERENT)
        bad = np.flatnonzero(expected != self.pair_labels)
        if bad.size:
            i = int(bad[0])
            raise BatchError(
                f"pair {i}: pair label {int(self.pair_labels[i])} inconsistent with identities "
                f"{int(self.labels_a[i])}/{int(self.labels_b[i])}"
            )

    def __len__(self) -> int:
        return len(self.labels_a)

    def swapped(self) -> "PairBatch":
        return PairBatch(self.images_b, self.images_a, self.labels_b, self.labels_a, self.pair_labels)


@dataclass
class LossReport:
    id_loss_a: float
    id_loss_b: float
    verif_loss: float
    p_hat_a: np.ndarray
    p_hat_b: np.ndarray
    q_hat: np.ndarray
    weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS

    @property
    def total(self) -> float:
        wa, wb, wv = self.weights
        return wa * self.id_loss_a + wb * self.id_loss_b + wv * self.verif_loss


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over a batch of logits (B, K); returns loss, probs, dlogits."""
    probs = softmax(logits)
    b = logits.shape[0]
    rows = np.arange(b)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, targets].mean())
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1
    return loss, probs, dlogits / b


def identification_loss(f: np.ndarray, t, theta_t: LinearParams):
    """Cross-entropy of the identity head.

    ``f`` is (d,) or (B, d); ``t`` a matching identity index or array.
    Returns ``(loss, p_hat, grad_f, grad_theta)`` with the loss averaged
    over the batch.
    """
    single = f.ndim == 1
    f2 = f[None] if single else f
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    k = theta_t.weight.shape[0]
    if t.shape != (f2.shape[0],):
        raise ShapeError(f"{t.shape[0]} targets for {f2.shape[0]} descriptors")
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"identity target out of range [0, {k}): {t[(t < 0) | (t >= k)][0]}")
    loss, probs, dlogits = _cross_entropy(linear(f2, theta_t), t)
    grad_f, grad_theta = linear_backward(f2, theta_t, dlogits)
    if single:
        return loss, probs[0], grad_f[0], grad_theta
    return loss, probs, grad_f, grad_theta


def square_layer(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    if f1.shape != f2.shape:
        raise ShapeError(f"square layer needs equal shapes, got {f1.shape} and {f2.shape}")
    return (f1 - f2) ** 2


def square_layer_backward(f1: np.ndarray, f2: np.ndarray, grad_out: np.ndarray):
    d = 2 * (f1 - f2) * grad_out
    return d, -d


def verification_loss(f1: np.ndarray, f2: np.ndarray, pair_label, theta_s: LinearParams):
    """Binary cross-entropy on ``(f1 - f2)**2``; class 0 is "same".

    Returns ``(loss, q_hat, grad_f1, grad_f2, grad_theta)``.
    """
    fs = square_layer(f1, f2)
    single = fs.ndim == 1
    fs2 = fs[None] if single else fs
    labels = np.atleast_1d(np.asarray(pair_label, dtype=np.int64))
    if labels.shape != (fs2.shape[0],):
        raise ShapeError(f"{labels.shape[0]} pair labels for {fs2.shape[0]} pairs")
    if np.any((labels != SAME) & (labels != DIFFERENT)):
        raise ValueError("pair labels must be SAME (0) or DIFFERENT (1)")
    loss, probs, dlogits = _cross_entropy(linear(fs2, theta_s), labels)
    grad_fs, grad_theta = linear_backward(fs2, theta_s, dlogits)
    g1, g2 = square_layer_backward(f1, f2, grad_fs[0] if single else grad_fs)
    return loss, (probs[0] if single else probs), g1, g2, grad_theta


def siamese_forward(model: Model, images_a: np.ndarray, images_b: np.ndarray, train: bool = False):
    """Both branches through the same parameter set."""
    fa, ca = backbone_forward(model, images_a, train)
    fb, cb = backbone_forward(model, images_b, train)
    return fa, fb, ca, cb


def multitask_step(batch: PairBatch, model: Model, weights=DEFAULT_LOSS_WEIGHTS):
    """Losses and fused gradients for one pair batch (train-mode batch norm).

    The gradient returned for every parameter is
    ``w_a * g_id_a + w_b * g_id_b + w_v * g_verif``; backbone parameters
    accumulate contributions from both branches.
    """
    wa, wb, wv = weights
    fa, fb, ca, cb = siamese_forward(model, batch.images_a, batch.images_b, train=True)
    la, pa, gfa_id, g_head_a = identification_loss(fa, batch.labels_a, model.id_head)
    lb, pb, gfb_id, g_head_b = identification_loss(fb, batch.labels_b, model.id_head)
    lv, q, gfa_v, gfb_v, g_verif = verification_loss(fa, fb, batch.pair_labels, model.verif_head)

    grads_a = backbone_backward(model, ca, wa * gfa_id + wv * gfa_v)
    grads_b = backbone_backward(model, cb, wb * gfb_id + wv * gfb_v)
    grads = {name: grads_a[name] + grads_b[name] for name in grads_a}
    for key in ("weight", "bias"):
        grads[f"id_head.{key}"] = wa * g_head_a[key] + wb * g_head_b[key]
        grads[f"verif_head.{key}"] = wv * g_verif[key]
    report = LossReport(la, lb, lv, pa, pb, q, tuple(weights))
    return report, grads


def predict_same_probability(model: Model, images_a: np.ndarray, images_b: np.ndarray) -> np.ndarray:
    """Infer-mode probability that each pair shows the same person."""
    fa, fb, _, _ = siamese_forward(model, images_a, images_b, train=False)
    return softmax(linear(square_layer(fa, fb), model.verif_head))[:, SAME]


def predict_identity(model: Model, images: np.ndarray) -> np.ndarray:
    f, _ = backbone_forward(model, images, train=False)
    return np.argmax(linear(f, model.id_head), axis=1)
