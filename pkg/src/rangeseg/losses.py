"""Training losses on per-pixel class probabilities, with analytic gradients.

Both losses consume post-softmax probabilities shaped (C, P) together with a
validity mask; the softmax backward composes in the training loop. The
Jaccard surrogate is piecewise linear, so its gradient is the subgradient
through the sort permutation actually chosen (ties broken by pixel index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, InvalidTargetError
from .pointcloud import ClassWeights

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossValue:
    total: float
    wce: float
    lovasz: float
    gradient: np.ndarray  # (C, P), same dtype as the probability input


def _check_inputs(probs, targets, valid):
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.ndim != 2:
        raise InvalidTargetError(f"probs must be (C, P), got {probs.shape}")
    c, p = probs.shape
    if targets.shape != (p,):
        raise InvalidTargetError(f"targets must be ({p},), got {targets.shape}")
    if valid is None:
        valid = np.ones(p, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (p,):
            raise InvalidTargetError(f"valid mask must be ({p},), got {valid.shape}")
    if np.any((targets[valid] < 0) | (targets[valid] >= c)):
        raise InvalidTargetError("target index outside [0, C)")
    return probs, targets, valid


def weighted_cross_entropy(probs, targets, weights: ClassWeights, valid=None):
    """Mean over valid pixels of alpha[target] * -log p[target].

    Probabilities are clamped to [1e-12, 1] before the log; the gradient is
    zero where the clamp engaged.
    """
    probs, targets, valid = _check_inputs(probs, targets, valid)
    n_valid = int(valid.sum())
    grad = np.zeros_like(probs)
    if n_valid == 0:
        raise EmptyBatchError("no valid pixels")
    idx = np.nonzero(valid)[0]
    t = targets[idx]
    p_t = probs[t, idx]
    alpha = weights.weights[t]
    clamped = np.clip(p_t, LOG_CLAMP, 1.0)
    value = float(np.mean(alpha * -np.log(clamped)))
    live = p_t >= LOG_CLAMP  # below the clamp the loss is locally constant
    g = np.where(live, -alpha / np.maximum(clamped, LOG_CLAMP), 0.0) / n_valid
    grad[t, idx] = g.astype(probs.dtype)
    return value, grad


def _jaccard_deltas(gt_sorted):
    """Lovász-extension gradient of the Jaccard loss for one sorted class."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    deltas = jaccard.copy()
    deltas[1:] = jaccard[1:] - jaccard[:-1]
    return deltas


def _lovasz_by_class(probs, targets, valid):
    """Per-present-class surrogate values and the un-averaged gradient."""
    idx = np.nonzero(valid)[0]
    if len(idx) == 0:
        raise EmptyBatchError("no valid pixels")
    t = targets[idx]
    present = np.unique(t)
    grad = np.zeros_like(probs)
    by_class = {}
    for cls in present:
        fg = (t == cls).astype(np.float64)
        errors = np.where(fg > 0, 1.0 - probs[cls, idx], probs[cls, idx]).astype(np.float64)
        order = np.argsort(-errors, kind="stable")  # ties keep pixel order
        deltas = _jaccard_deltas(fg[order])
        by_class[int(cls)] = float(errors[order] @ deltas)
        sign = np.where(fg > 0, -1.0, 1.0)
        g = np.zeros(len(idx))
        g[order] = deltas
        grad[cls, idx] += (sign * g).astype(probs.dtype)
    return by_class, grad


def lovasz_per_class(probs, targets, valid=None) -> dict:
    """Surrogate value per class present in the ground truth, no averaging."""
    probs, targets, valid = _check_inputs(probs, targets, valid)
    by_class, _ = _lovasz_by_class(probs, targets, valid)
    return by_class


def lovasz_softmax(probs, targets, valid=None):
    """Jaccard-loss surrogate averaged over classes present in the ground truth."""
    probs, targets, valid = _check_inputs(probs, targets, valid)
    by_class, grad = _lovasz_by_class(probs, targets, valid)
    n = len(by_class)
    grad /= n
    return sum(by_class.values()) / n, grad


def total_loss(probs, targets, weights: ClassWeights, valid=None) -> LossValue:
    """Weighted cross-entropy plus the Jaccard surrogate, gradients summed."""
    wce, g_wce = weighted_cross_entropy(probs, targets, weights, valid)
    ls, g_ls = lovasz_softmax(probs, targets, valid)
    return LossValue(total=wce + ls, wce=wce, lovasz=ls, gradient=g_wce + g_ls)
