"""Float64 finite-difference checks for every hand-written backward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .multitask import identification_loss, square_layer, square_layer_backward, verification_loss
from .res2net import init_block, res2net_block, res2net_block_backward
from .tensor import (
    BatchNormParams,
    ConvParams,
    GradCheckResult,
    LinearParams,
    avg_pool2d,
    avg_pool2d_backward,
    batchnorm,
    batchnorm_backward,
    channel_concat,
    channel_split,
    conv2d,
    conv2d_backward,
    finite_diff_check,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)

PRIMITIVE_TOL = 1e-6
COMPOSED_TOL = 1e-4
EPS = 1e-5

Case = Callable[[np.random.Generator], GradCheckResult]


def _conv_case(k: int, stride: int):
    def case(rng):
        x = rng.standard_normal((2, 3, 7, 6))
        p = ConvParams(rng.standard_normal((4, 3, k, k)), rng.standard_normal(4), stride, k // 2)

        def bwd(x, w, b, g):
            gx, gp = conv2d_backward(x, p, g)
            return gx, gp["weight"], gp["bias"]

        return finite_diff_check(lambda *a: conv2d(x, p), bwd, [x, p.weight, p.bias], EPS, tol=PRIMITIVE_TOL, rng=rng)

    return case


def _bn_case(rng):
    x = rng.standard_normal((3, 4, 3, 2)) * 2 + 1
    p = BatchNormParams.fresh(4, np.float64)
    p.gamma[:] = rng.uniform(0.5, 1.5, 4)
    p.beta[:] = rng.standard_normal(4)

    def bwd(x, gamma, beta, g):
        _, cache = batchnorm(x, p, True)
        gx, gp = batchnorm_backward(p, cache, g)
        return gx, gp["gamma"], gp["beta"]

    return finite_diff_check(lambda *a: batchnorm(x, p, True)[0], bwd, [x, p.gamma, p.beta], EPS, tol=PRIMITIVE_TOL, rng=rng)


def _relu_case(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    return finite_diff_check(relu, lambda x, g: [relu_backward(x, g)], [x], EPS, tol=PRIMITIVE_TOL, rng=rng)


def _gap_case(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return finite_diff_check(
        global_avg_pool, lambda x, g: [global_avg_pool_backward(x.shape, g)], [x], EPS, tol=PRIMITIVE_TOL, rng=rng
    )


def _avgpool_case(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    return finite_diff_check(
        avg_pool2d, lambda x, g: [avg_pool2d_backward(x.shape, g)], [x], EPS, tol=PRIMITIVE_TOL, rng=rng
    )


def _split_concat_case(rng):
    x = rng.standard_normal((2, 8, 3, 3))
    weights = [1.0, -2.0, 0.5, 3.0]

    def fwd(x):
        return channel_concat([w * part for w, part in zip(weights, channel_split(x, 4))])

    def bwd(x, g):
        return [channel_concat([w * part for w, part in zip(weights, channel_split(g, 4))])]

    return finite_diff_check(fwd, bwd, [x], EPS, tol=PRIMITIVE_TOL, rng=rng)


def _softmax_case(rng):
    z = rng.standard_normal((3, 5)) * 2
    return finite_diff_check(softmax, lambda z, g: [softmax_backward(softmax(z), g)], [z], EPS, tol=PRIMITIVE_TOL, rng=rng)


def _linear_case(rng):
    x = rng.standard_normal((4, 6))
    p = LinearParams(rng.standard_normal((3, 6)), rng.standard_normal(3))

    def bwd(x, w, b, g):
        gx, gp = linear_backward(x, p, g)
        return gx, gp["weight"], gp["bias"]

    return finite_diff_check(lambda *a: linear(x, p), bwd, [x, p.weight, p.bias], EPS, tol=PRIMITIVE_TOL, rng=rng)


def _square_case(rng):
    f1, f2 = rng.standard_normal((2, 3, 6))
    return finite_diff_check(
        square_layer, lambda a, b, g: square_layer_backward(a, b, g), [f1, f2], EPS, tol=PRIMITIVE_TOL, rng=rng
    )


def _block_case(cin: int, cout: int, stride: int, scale: int, first_split_conv: bool = False):
    def case(rng):
        p = init_block(rng, cin, cout, cout, scale, stride, first_split_conv, dtype=np.float64)
        x = rng.standard_normal((3, cin, 6, 5))
        arrays = p.arrays()
        names = list(arrays)

        def bwd(x, *rest):
            _, cache = res2net_block(x, p, True)
            gx, grads = res2net_block_backward(p, cache, rest[-1])
            return [gx] + [grads[n] for n in names]

        return finite_diff_check(
            lambda *a: res2net_block(x, p, True)[0],
            bwd,
            [x] + [arrays[n] for n in names],
            EPS,
            tol=COMPOSED_TOL,
            rng=rng,
        )

    return case


def _id_loss_case(rng):
    k, d = 7, 6
    f = rng.standard_normal((4, d))
    t = rng.integers(0, k, 4)
    p = LinearParams(rng.standard_normal((k, d)), rng.standard_normal(k))

    def fwd(*a):
        return np.array(identification_loss(f, t, p)[0])

    def bwd(f_, w, b, g):
        _, _, gf, gp = identification_loss(f, t, p)
        return gf * g, gp["weight"] * g, gp["bias"] * g

    return finite_diff_check(fwd, bwd, [f, p.weight, p.bias], EPS, tol=COMPOSED_TOL, rng=rng)


def _verif_loss_case(rng):
    d = 6
    f1, f2 = rng.standard_normal((2, 4, d))
    labels = rng.integers(0, 2, 4)
    p = LinearParams(rng.standard_normal((2, d)), rng.standard_normal(2))

    def fwd(*a):
        return np.array(verification_loss(f1, f2, labels, p)[0])

    def bwd(a, b, w, bias, g):
        _, _, g1, g2, gp = verification_loss(f1, f2, labels, p)
        return g1 * g, g2 * g, gp["weight"] * g, gp["bias"] * g

    return finite_diff_check(fwd, bwd, [f1, f2, p.weight, p.bias], EPS, tol=COMPOSED_TOL, rng=rng)


SCOPES: dict[str, dict[str, Case]] = {
    "primitives": {
        "conv2d_3x3": _conv_case(3, 1),
        "conv2d_3x3_s2": _conv_case(3, 2),
        "conv2d_1x1": _conv_case(1, 1),
        "batchnorm": _bn_case,
        "relu": _relu_case,
        "global_avg_pool": _gap_case,
        "avg_pool2d": _avgpool_case,
        "channel_split_concat": _split_concat_case,
        "softmax": _softmax_case,
        "linear": _linear_case,
        "square_layer": _square_case,
    },
    "block": {
        "res2net_block": _block_case(8, 8, 1, 4),
        "res2net_block_s2": _block_case(8, 16, 2, 4),
        "res2net_block_scale1": _block_case(8, 8, 1, 1),
        "res2net_block_first_conv": _block_case(8, 8, 1, 4, True),
    },
    "losses": {
        "identification_loss": _id_loss_case,
        "verification_loss": _verif_loss_case,
    },
}


@dataclass
class SuiteRow:
    name: str
    scope: str
    worst: float
    tol: float
    seeds: int

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def run_suite(scope: str = "all", seeds: int = 10, base_seed: int = 0) -> tuple[list[SuiteRow], float]:
    """Run every case in ``scope`` over ``seeds`` seeds; returns rows and wall time."""
    scopes = list(SCOPES) if scope == "all" else [scope]
    start = time.perf_counter()
    rows = []
    for sc in scopes:
        for name, case in SCOPES[sc].items():
            results = [case(np.random.default_rng(base_seed + s)) for s in range(seeds)]
            rows.append(SuiteRow(name, sc, max(r.max_rel_error for r in results), results[0].tol, seeds))
    return rows, time.perf_counter() - start


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'op':<26} {'scope':<11} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in rows:
        lines.append(f"{r.name:<26} {r.scope:<11} {r.worst:>12.3e} {r.tol:>8.0e}  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
