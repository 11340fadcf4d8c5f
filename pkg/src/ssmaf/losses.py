"""Training objectives: class-balanced cross entropy, MSE and region mutual information."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import NotSPDError, TensorND, cholesky_logdet, ops, solve

PROB_CLIP = 1e-6


@dataclass(frozen=True)
class CBCEConfig:
    beta: float = 0.9999

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")


@dataclass(frozen=True)
class RMIConfig:
    radius: int = 3
    downsample_stride: int = 2
    eps: float = 5e-4
    bce_weight: float = 0.5
    region_stride: int = 1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.downsample_stride < 1 or self.region_stride < 1 or self.radius < 1:
            raise ValueError("radius and strides must be >= 1")
        if not 0.0 <= self.bce_weight <= 1.0:
            raise ValueError("bce_weight must lie in [0, 1]")


def class_weight(count: int, beta: float) -> float:
    """(1 - beta) / (1 - beta**count), zero for absent classes.

    Evaluated as expm1(log beta) / expm1(count * log beta), which is exact
    for count == 1 and keeps precision when beta**count is close to 1.
    """
    if count <= 0:
        return 0.0
    if beta == 0.0:
        return 1.0
    lb = math.log(beta)
    return math.expm1(lb) / math.expm1(count * lb)


def _check_one_hot(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=1) == 1):
        raise ValueError("target must be one-hot over the channel axis")


def cbce_loss(logits: TensorND, target, cfg: CBCEConfig = CBCEConfig()) -> TensorND:
    """Class-balanced softmax cross entropy.

    Per image, class i with n_i pixels is weighted by (1-beta)/(1-beta^n_i);
    the weighted pixel sums are divided by the class count and averaged over
    the batch.
    """
    y = np.asarray(target.data if isinstance(target, TensorND) else target, dtype=float)
    if y.shape != logits.shape:
        raise ValueError(f"cbce_loss: logits {logits.shape} vs target {y.shape}")
    _check_one_hot(y)
    B, C = y.shape[:2]
    counts = y.sum(axis=(2, 3)).round().astype(int)
    w = np.array([[class_weight(n, cfg.beta) for n in row] for row in counts])
    coeff = y * w[:, :, None, None] * (-1.0 / (C * B))
    logz = ops.log(ops.clamp(ops.softmax(logits, axis=1), PROB_CLIP, 1 - PROB_CLIP))
    return ops.sum(ops.mul(logz, coeff))


def mse_loss(pred: TensorND, target) -> TensorND:
    target = target if isinstance(target, TensorND) else TensorND(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    d = ops.sub(pred, target)
    return ops.mean(ops.mul(d, d))


def bce(probs: TensorND, target: np.ndarray) -> TensorND:
    p = ops.clamp(probs, PROB_CLIP, 1 - PROB_CLIP)
    terms = ops.add(ops.mul(ops.log(p), target), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - target))
    return ops.mul(ops.mean(terms), -1.0)


def _centered(v: TensorND) -> TensorND:
    return ops.sub(v, ops.mean(v, axis=-1, keepdims=True))


def rmi_term(probs: TensorND, target: np.ndarray, cfg: RMIConfig) -> TensorND:
    """Mean over (image, class) of logdet(conditional covariance) / (2 d)."""
    y = TensorND(target)
    p = probs
    if cfg.downsample_stride > 1:
        s = cfg.downsample_stride
        H, W = probs.shape[2:]
        if H % s or W % s:
            raise ValueError(f"rmi_loss: map {H}x{W} not divisible by downsample stride {s}")
        y = ops.avg_pool2d(y, s)
        p = ops.avg_pool2d(p, s)
    d = cfg.radius * cfg.radius
    yv = _centered(ops.unfold_regions(y, cfg.radius, cfg.region_stride))
    pv = _centered(ops.unfold_regions(p, cfg.radius, cfg.region_stride))
    n = yv.shape[-1]
    eye = np.eye(d)
    s_yy = ops.mul(ops.matmul(yv, ops.transpose(yv)), 1.0 / n)
    s_yp = ops.mul(ops.matmul(yv, ops.transpose(pv)), 1.0 / n)
    s_pp = ops.mul(ops.matmul(pv, ops.transpose(pv)), 1.0 / n)
    explained = ops.matmul(s_yp, solve(ops.add(s_pp, cfg.eps * eye), ops.transpose(s_yp)))
    cond = ops.sub(s_yy, explained)
    try:
        logdet = cholesky_logdet(ops.add(cond, cfg.eps * eye))
    except NotSPDError:
        logdet = cholesky_logdet(ops.add(cond, 10 * cfg.eps * eye))
    return ops.mul(ops.mean(logdet), 1.0 / (2 * d))


def rmi_loss(probs: TensorND, target, cfg: RMIConfig = RMIConfig()) -> TensorND:
    """bce_weight * BCE + (1 - bce_weight) * region mutual information term."""
    y = np.asarray(target.data if isinstance(target, TensorND) else target, dtype=float)
    if y.shape != probs.shape:
        raise ValueError(f"rmi_loss: probs {probs.shape} vs target {y.shape}")
    terms = []
    if cfg.bce_weight > 0:
        terms.append(ops.mul(bce(probs, y), cfg.bce_weight))
    if cfg.bce_weight < 1:
        terms.append(ops.mul(rmi_term(probs, y, cfg), 1.0 - cfg.bce_weight))
    return terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])


def maf_loss(o_fuseg: TensorND, y, o_fusr: TensorND, hr, cfg: RMIConfig = RMIConfig()) -> TensorND:
    return ops.add(rmi_loss(ops.softmax(o_fuseg, axis=1), y, cfg), mse_loss(o_fusr, hr))


@dataclass
class LossBreakdown:
    total: TensorND
    cbce: float
    mse: float | None = None
    maf: float | None = None


def total_loss(bundle, y, hr, variant, cbce_cfg: CBCEConfig = CBCEConfig(),
               rmi_cfg: RMIConfig = RMIConfig()) -> LossBreakdown:
    """Unweighted sum of the objectives active for ``variant``.

    ``y`` is the one-hot target at the resolution of ``bundle.o_seg``; ``hr``
    the high-resolution image (ignored by variants without the SR stream).
    """
    from .model import Variant

    variant = Variant.parse(variant)
    l_cbce = cbce_loss(bundle.o_seg, y, cbce_cfg)
    if variant in (Variant.BASELINE, Variant.INTERP):
        return LossBreakdown(l_cbce, l_cbce.item())
    if bundle.o_sr is None:
        raise ValueError(f"total_loss: variant {variant.value} needs the SR output")
    l_mse = mse_loss(bundle.o_sr, hr)
    if variant is Variant.INTERP_SR:
        return LossBreakdown(ops.add(l_cbce, l_mse), l_cbce.item(), l_mse.item())
    if bundle.o_fuseg is None or bundle.o_fusr is None:
        raise ValueError("total_loss: variant interp_sr_maf needs both fusion outputs")
    l_maf = maf_loss(bundle.o_fuseg, y, bundle.o_fusr, hr, rmi_cfg)
    total = ops.add(ops.add(l_cbce, l_mse), l_maf)
    return LossBreakdown(total, l_cbce.item(), l_mse.item(), l_maf.item())
