"""Finite-difference verification of every differentiable op and loss.

Each registered case draws a random instance, reduces the op output to a
scalar with a fixed random weighting, and compares tape gradients against
central differences. Inputs that meet a kink (ReLU at 0, ties in max
pooling) are drawn away from it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import TensorND, cholesky_logdet, ops, solve
from .engine.gradcheck import analytic_gradients, numeric_gradient, relative_error
from .losses import CBCEConfig, RMIConfig, cbce_loss, mse_loss, rmi_loss

TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

Builder = Callable[[np.random.Generator], tuple[Callable[..., TensorND], list[TensorND]]]


def _weighted(rng: np.random.Generator, out_shape) -> Callable[[TensorND], TensorND]:
    w = rng.normal(size=out_shape)
    return lambda out: ops.sum(ops.mul(out, w))


def _unary(op, make_x) -> Builder:
    def build(rng):
        x = TensorND(make_x(rng))
        reduce = _weighted(rng, op(x).shape)
        return (lambda a: reduce(op(a))), [x]
    return build


def _away_from_zero(shape):
    def make(rng):
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)
    return make


def _distinct(shape):
    def make(rng):
        n = int(np.prod(shape))
        return (rng.permutation(n) / n + rng.uniform(0, 0.1 / n, size=n)).reshape(shape)
    return make


def _normal(shape, scale=1.0):
    return lambda rng: rng.normal(0.0, scale, size=shape)


def _conv(stride=1, padding=1, dilation=1) -> Builder:
    def build(rng):
        x = TensorND(rng.normal(size=(2, 3, 7, 7)))
        w = TensorND(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        b = TensorND(rng.normal(size=4))
        f = lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
        reduce = _weighted(rng, f(x, w, b).shape)
        return (lambda x, w, b: reduce(f(x, w, b))), [x, w, b]
    return build


def _batch_norm(rng):
    x = TensorND(rng.normal(1.0, 2.0, size=(3, 4, 3, 3)))
    gamma = TensorND(rng.uniform(0.5, 1.5, size=4))
    beta = TensorND(rng.normal(size=4))
    w = rng.normal(size=x.shape)

    def f(x, gamma, beta):
        stats = ops.RunningStats(4)
        return ops.sum(ops.mul(ops.batch_norm(x, gamma, beta, stats, training=True), w))
    return f, [x, gamma, beta]


def _binary(op, make_a, make_b) -> Builder:
    def build(rng):
        a, b = TensorND(make_a(rng)), TensorND(make_b(rng))
        reduce = _weighted(rng, op(a, b).shape)
        return (lambda a, b: reduce(op(a, b))), [a, b]
    return build


def _spd(rng, batch=(2,), d=4):
    m = rng.normal(size=batch + (d, d))
    return m @ np.swapaxes(m, -1, -2) + d * np.eye(d)


def _logdet(rng):
    a = TensorND(_spd(rng))
    return (lambda a: ops.sum(cholesky_logdet(a))), [a]


def _solve(rng):
    a = TensorND(_spd(rng) + 0.3 * rng.normal(size=(2, 4, 4)))
    b = TensorND(rng.normal(size=(2, 4, 3)))
    w = rng.normal(size=(2, 4, 3))
    return (lambda a, b: ops.sum(ops.mul(solve(a, b), w))), [a, b]


def _one_hot(rng, shape):
    labels = rng.integers(0, shape[1], size=(shape[0],) + shape[2:])
    return np.moveaxis(np.eye(shape[1])[labels], -1, 1)


def _cbce(rng):
    shape = (2, 3, 5, 5)
    y = _one_hot(rng, shape)
    cfg = CBCEConfig(beta=float(rng.choice([0.0, 0.9, 0.9999])))
    x = TensorND(rng.normal(size=shape))
    return (lambda z: cbce_loss(z, y, cfg)), [x]


def _mse(rng):
    a, b = TensorND(rng.normal(size=(2, 3, 4, 4))), TensorND(rng.normal(size=(2, 3, 4, 4)))
    return mse_loss, [a, b]


def _rmi(stride: int) -> Builder:
    def build(rng):
        shape = (2, 2, 10, 10) if stride == 1 else (1, 2, 12, 12)
        y = _one_hot(rng, shape)
        cfg = RMIConfig(downsample_stride=stride)
        x = TensorND(rng.normal(size=shape))
        return (lambda z: rmi_loss(ops.softmax(z, axis=1), y, cfg)), [x]
    return build


REGISTRY: dict[str, Builder] = {
    "add": _binary(ops.add, _normal((3, 4)), _normal((4,))),
    "sub": _binary(ops.sub, _normal((3, 4)), _normal((3, 1))),
    "mul": _binary(ops.mul, _normal((3, 4)), _normal((3, 4))),
    "div": _binary(ops.div, _normal((3, 4)), lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "log": _unary(ops.log, lambda r: r.uniform(0.2, 3.0, (3, 5))),
    "clamp": _unary(lambda x: ops.clamp(x, -0.5, 0.5), _distinct((4, 6))),
    "relu": _unary(ops.relu, _away_from_zero((2, 3, 4, 4))),
    "sigmoid": _unary(ops.sigmoid, _normal((2, 3, 4, 4), 2.0)),
    "softmax": _unary(lambda x: ops.softmax(x, axis=1), _normal((2, 3, 4, 4), 2.0)),
    "sum": _unary(lambda x: ops.sum(x, axis=(0, 2)), _normal((2, 3, 4))),
    "mean": _unary(lambda x: ops.mean(x, axis=-1, keepdims=True), _normal((2, 3, 4))),
    "reshape": _unary(lambda x: ops.reshape(x, (6, 4)), _normal((2, 3, 4))),
    "transpose": _unary(ops.transpose, _normal((2, 3, 4))),
    "concat": _binary(lambda a, b: ops.concat([a, b], axis=1), _normal((2, 2, 3, 3)), _normal((2, 3, 3, 3))),
    "take_channels": _unary(lambda x: ops.take_channels(x, 1, 3), _normal((2, 4, 3, 3))),
    "matmul": _binary(ops.matmul, _normal((2, 3, 4)), _normal((4, 5))),
    "conv2d": _conv(),
    "conv2d_strided": _conv(stride=2, padding=0),
    "conv2d_dilated": _conv(padding=2, dilation=2),
    "batch_norm": _batch_norm,
    "max_pool2d": _unary(ops.max_pool2d, _distinct((2, 2, 6, 6))),
    "avg_pool2d": _unary(ops.avg_pool2d, _normal((2, 2, 6, 6))),
    "pixel_shuffle": _unary(lambda x: ops.pixel_shuffle(x, 2), _normal((2, 8, 3, 3))),
    "interpolate_bilinear": _unary(lambda x: ops.interpolate_bilinear(x, 2), _normal((2, 2, 4, 5))),
    "unfold_regions": _unary(lambda x: ops.unfold_regions(x, 3, 1), _normal((1, 2, 5, 5))),
    "cholesky_logdet": _logdet,
    "solve": _solve,
    "cbce_loss": _cbce,
    "mse_loss": _mse,
    "rmi_loss": _rmi(1),
    "rmi_loss_pooled": _rmi(2),
}


@dataclass
class CaseResult:
    name: str
    trials: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} trials={self.trials:<3d} worst_rel_err={self.worst:.3e} tol={self.tolerance:g}"


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [r.line() for r in self.results]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall ({len(self.results)} checks, {self.seconds:.1f}s)")
        return out


def check_case(name: str, build: Builder, trials: int = 20, seed: int = 0,
               tolerance: float = TOLERANCE) -> CaseResult:
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, t, sum(name.encode())])
        fn, inputs = build(rng)
        analytic = analytic_gradients(fn, inputs)
        for k, ga in enumerate(analytic):
            gn = numeric_gradient(fn, inputs, k)
            worst = max(worst, float(np.nan_to_num(relative_error(ga, gn).max(), nan=np.inf)))
    return CaseResult(name, trials, worst, tolerance)


def check_model(samples: int = 50, seed: int = 0, tolerance: float = MODEL_TOLERANCE) -> CaseResult:
    """End-to-end check of the full fusion model's total loss on sampled parameter entries."""
    from .engine import Tape
    from .losses import total_loss
    from .model import ModelConfig, Variant, build_model

    cfg = ModelConfig(base_width=4, depth=2, fusion_dim=8, sr_hidden=8, variant=Variant.INTERP_SR_MAF)
    store, net = build_model(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.uniform(size=(2, 3, 16, 16))
    hr = rng.uniform(size=(2, 3, 32, 32))
    y = _one_hot(rng, (2, 2, 32, 32))

    def loss() -> TensorND:
        return total_loss(net.forward_train(x), y, hr, cfg.variant).total

    with Tape() as tape:
        out = loss()
    tape.backward(out, store.tensors())
    names = store.names()
    worst = 0.0
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        p = store[name]
        idx = int(rng.integers(p.size))
        ga = p.grad.reshape(-1)[idx]
        gn = numeric_gradient(lambda _p: loss(), [p], 0, index=idx)
        worst = max(worst, float(relative_error(np.array(ga), np.array(gn)).max()))
    return CaseResult("model_interp_sr_maf", samples, worst, tolerance)


def run_gradcheck(trials: int = 20, seed: int = 0, registry: dict[str, Builder] | None = None,
                  model_samples: int = 50) -> GradcheckReport:
    start = time.perf_counter()
    registry = REGISTRY if registry is None else registry
    report = GradcheckReport([check_case(n, b, trials, seed) for n, b in registry.items()])
    if model_samples:
        report.results.append(check_model(model_samples, seed))
    report.seconds = time.perf_counter() - start
    return report
