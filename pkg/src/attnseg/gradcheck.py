"""Central finite-difference verification of tape gradients.

Each check builds a scalar ``loss = Σ out · R`` with a fixed random ``R``,
backpropagates once, and compares selected gradient entries with
``(L(x + h) - L(x - h)) / 2h``. The error of an entry is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` where ``floor``
is ``1e-3`` times the largest analytic gradient entry among the probes, so
entries whose true gradient vanishes (e.g. a bias followed by batch norm) are
judged against the scale of the check rather than against zero.

A central difference is only meaningful when both evaluations lie on the same
linear piece of every ReLU and max. When a perturbation flips any such switch
the probe is repeated with a ten times smaller step, and dropped if it still
crosses after ``retries`` reductions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import SwitchRecorder, Tape, Tensor, backward, tsum

SMOOTH_TOL = 1e-6
LAYER_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    probes: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], *, step: float = 1e-3,
                    max_probes: int | None = None, seed: int = 0, rel_floor: float = 1e-3,
                    details: list | None = None, retries: int = 3) -> tuple[float, int]:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` recomputes the output from the current contents of ``tensors``;
    its output is projected onto a fixed random direction to form the loss.
    At most ``max_probes`` entries per tensor are perturbed (all if None).
    Returns (worst relative error, number of probes kept).
    """
    rng = np.random.default_rng(seed)
    with Tape():
        out = fn()
    proj = rng.normal(size=out.shape)

    def loss_value() -> tuple[float, SwitchRecorder]:
        with SwitchRecorder() as rec:
            value = float(np.sum(fn().data * proj))
        return value, rec

    def central(flat: np.ndarray, i: int) -> float | None:
        orig = flat[i]
        h = step
        for _ in range(retries + 1):
            flat[i] = orig + h
            up, rec_up = loss_value()
            flat[i] = orig - h
            down, rec_down = loss_value()
            flat[i] = orig
            if rec_up.same_piece(rec_down):
                return (up - down) / (2 * h)
            h /= 10
        return None

    for t in tensors:
        t.grad = None
    with Tape():
        loss = tsum(fn() * proj)
    backward(loss)

    pairs = []  # (tensor index, flat index, analytic, numeric)
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        for i in idx:
            numeric = central(flat, int(i))
            if numeric is not None:
                pairs.append((k, int(i), float(analytic.reshape(-1)[i]), numeric))
    scale = max((abs(a) for _, _, a, _ in pairs), default=0.0)
    floor = max(rel_floor * scale, 1e-12)
    worst = 0.0
    for k, i, a, n in pairs:
        e = rel_error(a, n, floor)
        worst = max(worst, e)
        if details is not None:
            details.append((k, i, a, n, e))
    return worst, len(pairs)


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _module_check(module, inputs: Sequence[Tensor], call, **kw) -> tuple[float, int]:
    params = list(module.parameters()) if module is not None else []
    return check_gradients(call, list(inputs) + params, **kw)


def suite(seed: int = 0) -> list[tuple[str, float, Callable[[], tuple[float, int]]]]:
    """(name, tolerance, check) triples covering every op, layer and block."""
    from . import tensor as T
    from .attention import ChannelAttention, DualPathGate, NonLocalBlock, ScaleAttention
    from .layers import BatchNorm2d, Conv2d, Linear, bilinear_resize, global_avg_pool, global_max_pool, maxpool2x2
    from .model import ModelConfig, build

    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float, Callable[[], tuple[float, int]]]] = []

    def add(name, tol, fn):
        checks.append((name, tol, fn))

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    add("matmul", SMOOTH_TOL, lambda: check_gradients(lambda: T.matmul(a, b), [a, b], step=1e-4))
    s = _rand(rng, 5, 7, scale=2.0)
    add("softmax_rows", SMOOTH_TOL, lambda: check_gradients(lambda: T.softmax_rows(s), [s], step=1e-4))
    g = _rand(rng, 2, 6, scale=2.0)
    add("sigmoid", SMOOTH_TOL, lambda: check_gradients(lambda: T.sigmoid(g), [g], step=1e-4))
    r = Tensor(rng.choice([-1, 1], size=(3, 5)) * rng.uniform(0.1, 1.0, (3, 5)), requires_grad=True)
    add("relu", LAYER_TOL, lambda: check_gradients(lambda: T.relu(r), [r], step=1e-3))
    x4, c11 = _rand(rng, 2, 3, 4, 4), _rand(rng, 1, 3, 1, 1)
    add("broadcast_mul", SMOOTH_TOL, lambda: check_gradients(lambda: x4 * c11, [x4, c11], step=1e-4))
    add("broadcast_add", SMOOTH_TOL, lambda: check_gradients(lambda: x4 + c11, [x4, c11], step=1e-4))
    p1, p2 = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 2, 4, 4)
    add("concat_reshape_transpose", SMOOTH_TOL, lambda: check_gradients(
        lambda: T.transpose2d(T.reshape(T.concat_channels([p1, p2]), (2, 5, 16))), [p1, p2], step=1e-4))
    dd, dn = _rand(rng, 3, 4), Tensor(rng.uniform(1.0, 2.0, (3, 4)), requires_grad=True)
    add("div", SMOOTH_TOL, lambda: check_gradients(lambda: dd / dn, [dd, dn], step=1e-4))

    conv = Conv2d(3, 4, 3, rng=rng)
    xc = _rand(rng, 2, 3, 8, 8)
    add("conv2d_3x3", LAYER_TOL, lambda: _module_check(conv, [xc], lambda: conv(xc), max_probes=30))
    conv_s = Conv2d(3, 2, 3, stride=2, padding=1, rng=rng)
    add("conv2d_stride2", LAYER_TOL, lambda: _module_check(conv_s, [xc], lambda: conv_s(xc), max_probes=30))
    conv1 = Conv2d(3, 5, 1, rng=rng)
    add("conv2d_1x1", LAYER_TOL, lambda: _module_check(conv1, [xc], lambda: conv1(xc), max_probes=30))
    bn = BatchNorm2d(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.normal(size=3)
    add("batchnorm_train", LAYER_TOL, lambda: _module_check(bn, [xc], lambda: bn(xc), max_probes=30))
    lin = Linear(8, 4, rng=rng)
    lin.bias.data = rng.normal(size=4)
    xl = _rand(rng, 3, 8)
    add("linear", LAYER_TOL, lambda: _module_check(lin, [xl], lambda: lin(xl)))
    add("maxpool2x2", LAYER_TOL, lambda: check_gradients(lambda: maxpool2x2(xc), [xc], step=1e-3, max_probes=60))
    add("global_avg_pool", SMOOTH_TOL, lambda: check_gradients(lambda: global_avg_pool(xc), [xc], step=1e-4,
                                                                max_probes=60))
    add("global_max_pool", LAYER_TOL, lambda: check_gradients(lambda: global_max_pool(xc), [xc], step=1e-3,
                                                              max_probes=60))
    xr = _rand(rng, 1, 2, 5, 5)
    add("bilinear_resize", LAYER_TOL, lambda: check_gradients(lambda: bilinear_resize(xr, 8, 8), [xr], step=1e-3))

    nl = NonLocalBlock(16, rng=rng)
    xn = _rand(rng, 2, 16, 3, 3, scale=0.5)
    add("NonLocalBlock", LAYER_TOL, lambda: _module_check(nl, [xn], lambda: nl(xn)[0], step=1e-5, max_probes=12))
    gate = DualPathGate(8, 12, 4, rng=rng)
    xlo, xhi = _rand(rng, 1, 8, 6, 6), _rand(rng, 1, 12, 6, 6)
    add("DualPathGate", LAYER_TOL, lambda: _module_check(gate, [xlo, xhi], lambda: gate(xlo, xhi)[0], step=1e-5,
                                                         max_probes=12))
    ca = ChannelAttention(8, rng=rng)
    xa = _rand(rng, 2, 8, 5, 5)
    add("ChannelAttention", LAYER_TOL, lambda: _module_check(ca, [xa], lambda: ca(xa)[0], step=1e-5, max_probes=12))
    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    feats = [_rand(rng, 1, c, 8 // 2**i, 8 // 2**i) for i, c in enumerate([4, 6, 8, 10])]
    add("ScaleAttention", LAYER_TOL, lambda: _module_check(la, feats, lambda: la(feats, (8, 8))[0], step=1e-5,
                                                           max_probes=8))

    net = build(ModelConfig(in_channels=1, num_classes=2), seed=seed)
    xin = _rand(rng, 1, 1, 32, 32)

    def full_net() -> tuple[float, int]:
        return check_gradients(lambda: net(xin)[0], [xin] + net.parameters(), step=1e-6, max_probes=1,
                               seed=seed)

    add("CANet[1x1x32x32]", LAYER_TOL, full_net)
    return checks


def run_suite(seed: int = 0, only: Sequence[str] | None = None,
              report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for name, tol, fn in suite(seed):
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        err, probes = fn()
        res = CheckResult(name, err, tol, probes, time.perf_counter() - t0)
        results.append(res)
        if report:
            report(res)
    return results
