"""Binary cross-entropy and soft Dice losses.

Each loss comes in two forms: on probabilities (``loss_*`` returning
``(value, dL/dp)``) and fused with the output sigmoid (``*_with_logits``
returning ``(value, dL/dz, p)``), which is what training uses.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, ValidationError
from .ops import as_tensor, sigmoid

PROB_EPS = 1e-7


def _check(p, y):
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    return p, y


def loss_bce(p, y, eps: float = PROB_EPS):
    """Mean binary cross-entropy over the batch (first axis).

    ``p`` is clamped to ``[eps, 1 - eps]``; the gradient is zero where the
    clamp is active. Extra axes are averaged per case first.
    """
    p, y = _check(p, y)
    pc = np.clip(p, eps, 1.0 - eps)
    per = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    value = per.sum() / per.size
    inside = (p >= eps) & (p <= 1.0 - eps)
    grad = np.where(inside, (-(y / pc) + (1.0 - y) / (1.0 - pc)) / per.size, 0.0)
    return float(value), grad


def bce_with_logits(z, y, eps: float = PROB_EPS):
    z, y = _check(z, y)
    p = sigmoid(z)
    value, _ = loss_bce(p, y, eps)
    return value, (p - y) / p.size, p


def loss_dice(p, y, smooth: float = 1.0):
    """``1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)`` over all voxels."""
    p, y = _check(p, y)
    if not smooth > 0:
        raise ValidationError(f"dice smoothing must be > 0, got {smooth}")
    inter = float((p * y).sum())
    denom = float(p.sum() + y.sum()) + smooth
    num = 2.0 * inter + smooth
    value = 1.0 - num / denom
    grad = -(2.0 * y * denom - num) / (denom * denom)
    return value, grad


def dice_with_logits(z, y, smooth: float = 1.0):
    z, y = _check(z, y)
    p = sigmoid(z)
    value, dp = loss_dice(p, y, smooth)
    return value, dp * p * (1.0 - p), p


LOSSES_WITH_LOGITS = {"bce": bce_with_logits, "dice": dice_with_logits}
