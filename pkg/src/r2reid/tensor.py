"""Primitive differentiable ops on dense ``numpy`` arrays.

Every forward op returns its output together with whatever the matching
backward needs; backward passes are written by hand. Arrays are NCHW.
Training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DivisibilityError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape) < 1:
            raise ShapeError(f"conv weight must be 4-d with positive extents, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class LinearParams:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def linear(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {p.weight.shape}")
    return x @ p.weight.T + p.bias


def linear_backward(x: np.ndarray, p: LinearParams, grad_out: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ p.weight, {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw) over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add of window gradients (N, C, Ho, Wo, kh, kw) back onto the input."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _check_conv(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d input {x.shape} incompatible with weight {p.weight.shape}")
    _, _, kh, kw = p.weight.shape
    ho = conv_output_size(x.shape[2], kh, p.stride, p.padding)
    wo = conv_output_size(x.shape[3], kw, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for weight {p.weight.shape}")
    return ho, wo


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation plus per-channel bias (im2col + matmul)."""
    ho, wo = _check_conv(x, p)
    cout, cin, kh, kw = p.weight.shape
    n = x.shape[0]
    cols = _windows(x, kh, kw, p.stride, p.padding).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ p.weight.reshape(cout, -1).T + p.bias
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d_direct(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Loop-per-output-pixel reference for :func:`conv2d`. Slow; tests only."""
    ho, wo = _check_conv(x, p)
    cout, _, kh, kw = p.weight.shape
    s, pad = p.stride, p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((x.shape[0], cout, ho, wo), dtype=np.result_type(x, p.weight))
    for b in range(x.shape[0]):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * s : i * s + kh, j * s : j * s + kw]
                    out[b, co, i, j] = np.sum(patch * p.weight[co]) + p.bias[co]
    return out


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, {"weight": ..., "bias": ...})``."""
    ho, wo = _check_conv(x, p)
    cout, cin, kh, kw = p.weight.shape
    n = x.shape[0]
    if grad_out.shape != (n, cout, ho, wo):
        raise ShapeError(f"conv2d grad_out {grad_out.shape} does not match output {(n, cout, ho, wo)}")
    cols = _windows(x, kh, kw, p.stride, p.padding).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_w = (g.T @ cols).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gcols = (g @ p.weight.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    grad_x = _col2im(gcols, x.shape, kh, kw, p.stride, p.padding)
    return grad_x, {"weight": grad_w, "bias": grad_b}


# --------------------------------------------------------------------------
# batch normalization


def batchnorm(x: np.ndarray, p: BatchNormParams, train: bool):
    """Per-channel normalization over (N, H, W).

    In train mode batch statistics are used and the running statistics are
    updated in place; the returned cache feeds :func:`batchnorm_backward`.
    """
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * p.gamma.reshape(shape) + p.beta.reshape(shape)
    return out, (xhat, inv_std)


def batchnorm_backward(p: BatchNormParams, cache, grad_out: np.ndarray):
    """Backward of train-mode :func:`batchnorm`."""
    xhat, inv_std = cache
    shape = (1, -1, 1, 1)
    m = grad_out.size // grad_out.shape[1]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * p.gamma.reshape(shape)
    grad_x = (inv_std.reshape(shape) / m) * (
        m * dxhat - grad_beta.reshape(shape) * p.gamma.reshape(shape) - xhat * (grad_gamma * p.gamma).reshape(shape)
    )
    return grad_x, {"gamma": grad_gamma, "beta": grad_beta}


# --------------------------------------------------------------------------
# elementwise / pooling / channel plumbing


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).copy()


def avg_pool2d(x: np.ndarray, k: int = 3, stride: int = 2, pad: int = 1) -> np.ndarray:
    """Average pooling; padded zeros count towards the denominator."""
    return _windows(x, k, k, stride, pad).mean(axis=(4, 5))


def avg_pool2d_backward(x_shape, grad_out: np.ndarray, k: int = 3, stride: int = 2, pad: int = 1) -> np.ndarray:
    cols = np.broadcast_to((grad_out / (k * k))[..., None, None], grad_out.shape + (k, k))
    return _col2im(cols, x_shape, k, k, stride, pad)


def channel_split(x: np.ndarray, scale: int) -> list[np.ndarray]:
    """Split the channel axis into ``scale`` contiguous groups of equal width."""
    n = x.shape[1]
    if scale < 1 or n % scale:
        raise DivisibilityError(f"scale {scale} does not divide {n} channels")
    w = n // scale
    return [x[:, i * w : (i + 1) * w] for i in range(scale)]


def channel_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-shifted."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return probs * (grad_out - np.sum(grad_out * probs, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Sequence[np.ndarray | None]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    *,
    tol: float = 1e-6,
    max_coords: int = 24,
    rel_floor: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare hand-written gradients against finite differences.

    ``forward(*inputs)`` returns an array; ``backward(*inputs, grad_out)``
    returns one gradient per input (``None`` to skip an input). The output
    is contracted against a fixed random tensor to get a scalar objective.
    Inputs are perturbed in place and restored bit-for-bit afterwards, so
    closures may hold references to them.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = rel_floor * rms(all analytic gradients)``, so gradients that
    are exactly zero by construction (a conv bias feeding batch norm) are
    not judged on round-off alone. ``n`` is the central difference, or
    either one-sided difference if that agrees better: a ReLU kink inside
    ``[x - eps, x + eps]`` corrupts the central estimate, but the side not
    containing the kink still sees the true slope. A wrong gradient
    disagrees with all three.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = np.asarray(forward(*inputs))
    proj = rng.standard_normal(out.shape)
    grads = backward(*inputs, proj.astype(out.dtype))

    def evaluate() -> np.ndarray:
        return np.asarray(forward(*inputs), dtype=np.float64)

    def contract(diff: np.ndarray) -> float:
        return float(np.sum(diff * proj))

    checked = [(a, g) for a, g in zip(inputs, grads) if g is not None]
    sq = sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for _, g in checked)
    count = sum(g.size for _, g in checked)
    floor = max(rel_floor * np.sqrt(sq / max(count, 1)), 1e-12)
    base = evaluate()

    per_input = []
    for arr, grad in checked:
        if grad.shape != arr.shape:
            raise ShapeError(f"gradient {grad.shape} does not match input {arr.shape}")
        flat = arr.reshape(-1)  # view, so in-place edits reach the caller
        if not np.shares_memory(flat, arr):
            raise ValueError("finite_diff_check needs contiguous inputs")
        gflat = np.asarray(grad).reshape(-1)
        k = min(max_coords, flat.size)
        worst = 0.0
        for j in rng.choice(flat.size, size=k, replace=False):
            orig = flat[j]
            flat[j] = orig + eps
            hi = flat[j]
            plus = evaluate()
            flat[j] = orig - eps
            lo = flat[j]
            minus = evaluate()
            flat[j] = orig
            # difference outputs before contracting, and divide by the step
            # actually taken, to keep round-off well below the tolerances
            estimates = (
                contract(plus - minus) / float(hi - lo),
                contract(plus - base) / float(hi - orig),
                contract(base - minus) / float(orig - lo),
            )
            a = float(gflat[j])
            worst = max(worst, min(relative_error(a, n, floor) for n in estimates))
        per_input.append(worst)
    return GradCheckResult(max(per_input, default=0.0), tol, per_input)
