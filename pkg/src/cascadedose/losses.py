"""Segmentation (Dice + cross-entropy) and deep-supervised L1 dose losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .conv import trilinear_resize
from .tensor import ConfigError, DimensionError, Tensor

DEFAULT_EPS = 1e-5


class ContractError(ValueError):
    """Loss inputs violate their value-range contract."""


@dataclass
class LossWeights:
    lambda1: float = 10.0  # final output
    lambda2: float = 8.0  # deep supervision

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")


def dice_ce_loss(probs: Tensor, onehot, eps: float = DEFAULT_EPS) -> Tensor:
    """1 - (2/J) sum_j <Y_j, P_j> / (|Y_j|^2 + |P_j|^2 + eps) - (1/K) sum_k sum_j Y log(P + eps).

    Class axis first; every remaining axis counts as voxels.
    """
    Y = onehot if isinstance(onehot, Tensor) else Tensor(np.asarray(onehot, dtype=probs.dtype))
    if probs.shape != Y.shape:
        raise DimensionError(f"dice_ce_loss: probs {probs.shape} vs one-hot {Y.shape}")
    if probs.data.min() < -1e-6 or probs.data.max() > 1 + 1e-6:
        raise ContractError("dice_ce_loss: probabilities outside [0, 1]")
    J = probs.shape[0]
    K = probs.size // J
    vox_axes = tuple(range(1, probs.ndim))
    inter = ops.sum(ops.mul(Y, probs), vox_axes)
    denom = ops.add_scalar(ops.add(ops.sum(ops.square(Y), vox_axes), ops.sum(ops.square(probs), vox_axes)), eps)
    dice_term = ops.sum(ops.div(inter, denom))
    ce = ops.sum(ops.mul(Y, ops.log(probs, eps)))
    return ops.add_scalar(ops.add(ops.mul_scalar(dice_term, -2.0 / J), ops.mul_scalar(ce, -1.0 / K)), 1.0)


def build_gt_pyramid(dose, S: int) -> list:
    """Ground truth at every pyramid scale: level s has extent / 2^(S-s); level S is ``dose`` itself."""
    dose = dose if isinstance(dose, Tensor) else Tensor(np.asarray(dose))
    if S < 1:
        raise ConfigError(f"pyramid depth must be >= 1, got {S}")
    f = 2 ** (S - 1)
    if any(n % f for n in dose.shape[1:]):
        raise ConfigError(f"extents {dose.shape[1:]} not divisible by 2^(S-1) = {f}")
    levels = []
    for s in range(1, S + 1):
        if s == S:
            levels.append(dose)
        else:
            d = 2 ** (S - s)
            levels.append(Tensor(trilinear_resize(dose, tuple(n // d for n in dose.shape[1:])).data))
    return levels


def dose_loss(pred, target, w: LossWeights | None = None) -> Tensor:
    """lambda1 * mean|Y(S) - P(S)| + lambda2 * (sum_{s<S} mean|Y(s) - P(s)|) / (S - 1)."""
    return dose_loss_terms(pred, target, w)[0]


def dose_loss_terms(pred, target, w: LossWeights | None = None):
    """(total, final-level term, deep-supervision term or None)."""
    w = w or LossWeights()
    pred = list(pred.levels if hasattr(pred, "levels") else pred)
    target = list(target)
    S = len(pred)
    if S != len(target):
        raise DimensionError(f"dose_loss: {S} predicted levels vs {len(target)} target levels")
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise DimensionError(f"dose_loss: level shapes {p.shape} vs {t.shape}")
    if S == 1 and w.lambda2 > 0:
        raise ConfigError("deep supervision needs at least two pyramid levels (divides by S - 1)")
    l_out = ops.mean(ops.abs(ops.sub(pred[-1], target[-1])))
    total = ops.mul_scalar(l_out, w.lambda1)
    l_ds = None
    if S > 1:
        terms = [ops.mean(ops.abs(ops.sub(p, t))) for p, t in zip(pred[:-1], target[:-1])]
        l_ds = terms[0]
        for t in terms[1:]:
            l_ds = ops.add(l_ds, t)
        l_ds = ops.mul_scalar(l_ds, 1.0 / (S - 1))
        total = ops.add(total, ops.mul_scalar(l_ds, w.lambda2))
    return total, l_out, l_ds
