"""Loss functions: weighted BCE in probability and logit form, Dice, multitask sum.

The probability form ``wbce`` is the readable reference; it cannot accept
predictions at exactly 0 or 1.  Training uses ``ns_wbce`` on raw logits,
whose softplus term is evaluated as ``max(t, 0) + log1p(exp(-|t|))`` - equal
in real arithmetic to ``log(1 + e^t)`` but finite for any float input.  Both
forms agree to 1e-9 wherever both are defined.

All reductions are per-sample means.  Dice is computed per image over its
pixels and then averaged across the batch, so a large mask cannot drown out
a small one; both-empty image/target pairs contribute zero loss.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accum, _make, stable_sigmoid

__all__ = [
    "LossWeights",
    "wbce",
    "logit",
    "positive_term_coefficient",
    "stable_softplus",
    "ns_wbce",
    "dice_loss",
    "multitask_loss",
    "ns_wbce_op",
    "dice_loss_op",
]

DICE_EPS = 1e-7


class LossWeights:
    """The pair of loss coefficients: positive-class weight and task weight."""

    __slots__ = ("w_p", "w_clf")

    def __init__(self, w_p: float = 3.0, w_clf: float = 1.5):
        if w_p < 1.0:
            raise ValueError(f"positive-class weight must be >= 1, got {w_p}")
        if w_clf <= 0.0:
            raise ValueError(f"classification weight must be > 0, got {w_clf}")
        self.w_p = float(w_p)
        self.w_clf = float(w_clf)

    def __repr__(self):
        return f"LossWeights(w_p={self.w_p}, w_clf={self.w_clf})"

    def __eq__(self, other):
        return isinstance(other, LossWeights) and (self.w_p, self.w_clf) == (other.w_p, other.w_clf)


def _check_binary(y: np.ndarray, name: str = "targets"):
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must be binary 0/1 values")


def wbce(h, y, w_p: float = 1.0) -> float:
    """Weighted binary cross-entropy on probabilities.

    -(1/M) * sum(w_p * y * log(h) + (1 - y) * log(1 - h)); rejects h at
    exactly 0 or 1, where the log form is undefined - use ns_wbce there.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_binary(y)
    if np.any(h <= 0.0) or np.any(h >= 1.0):
        raise ValueError("wbce: predictions must lie strictly inside (0, 1)")
    terms = w_p * y * np.log(h) + (1.0 - y) * np.log1p(-h)
    return float(-np.mean(terms))


def logit(h) -> np.ndarray:
    """Inverse sigmoid, log(h / (1 - h)); defined only for h strictly in (0,1)."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h <= 0.0) or np.any(h >= 1.0):
        raise ValueError("logit: arguments must lie strictly inside (0, 1)")
    return np.log(h) - np.log1p(-h)


def positive_term_coefficient(y, w_p: float) -> np.ndarray:
    """Per-element weight: w_p where the target is positive, 1 elsewhere."""
    y = np.asarray(y, dtype=np.float64)
    _check_binary(y)
    return 1.0 + y * (w_p - 1.0)


def stable_softplus(t) -> np.ndarray:
    """log(1 + e^t) evaluated without overflow: max(t,0) + log1p(e^-|t|)."""
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def ns_wbce(z, y, w_p: float = 1.0):
    """Numerically stable weighted BCE on logits.

    Returns ``(loss, dloss_dz)`` with
    loss = (1/M) * sum((1 - y) * z + K * softplus(-z)),  K = 1 + y*(w_p - 1),
    dloss_dz = ((1 - y) - K * (1 - sigmoid(z))) / M.
    Total (finite, NaN-free) for any finite logit.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"ns_wbce: logits shape {z.shape} != targets shape {y.shape}")
    _check_binary(y)
    k = positive_term_coefficient(y, w_p)
    m = max(z.size, 1)
    loss = float(np.sum((1.0 - y) * z + k * stable_softplus(-z)) / m)
    grad = ((1.0 - y) - k * (1.0 - stable_sigmoid(z))) / m
    return loss, grad


def dice_loss(h, y, eps: float = DICE_EPS):
    """Soft Dice loss, per image then batch mean; returns ``(loss, dloss_dh)``.

    1 - 2*sum(y*h) / (sum(y) + sum(h) + eps) per image.  1-D inputs are a
    single image; otherwise axis 0 is the batch axis.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.shape != y.shape:
        raise ValueError(f"dice_loss: prediction shape {h.shape} != target shape {y.shape}")
    _check_binary(y)
    if np.any(h < 0.0) or np.any(h > 1.0):
        raise ValueError("dice_loss: predictions must lie in [0, 1]")
    shape = h.shape
    hb = h.reshape(1, -1) if h.ndim <= 1 else h.reshape(shape[0], -1)
    yb = y.reshape(hb.shape)
    n = hb.shape[0]

    inter = np.sum(yb * hb, axis=1)
    sums = np.sum(yb, axis=1) + np.sum(hb, axis=1)
    den = sums + eps
    empty = sums == 0.0
    per_image = np.where(empty, 0.0, 1.0 - 2.0 * inter / den)
    loss = float(np.mean(per_image))

    grad = -2.0 * (yb * den[:, None] - inter[:, None]) / (den[:, None] ** 2)
    grad[empty] = 0.0
    return loss, (grad / n).reshape(shape)


def multitask_loss(l_clf: float, l_seg: float, w_clf: float = 1.5) -> float:
    """Weighted task sum: w_clf * classification loss + segmentation loss."""
    if not (np.isfinite(l_clf) and np.isfinite(l_seg)):
        raise ValueError(f"multitask_loss: non-finite components ({l_clf}, {l_seg})")
    return float(w_clf * l_clf + l_seg)


# ---------------------------------------------------------------------------
# graph-integrated forms (same math, wired into autodiff for training)
# ---------------------------------------------------------------------------

def ns_wbce_op(z: Tensor, y, w_p: float = 1.0) -> Tensor:
    """ns_wbce as a graph node: scalar loss tensor over a logits tensor."""
    value, dz = ns_wbce(z.data, y, w_p)

    def backward(g):
        _accum(z, (np.float64(g) * dz).astype(z.data.dtype))

    return _make(np.asarray(value, dtype=z.data.dtype), (z,), backward)


def dice_loss_op(h: Tensor, y) -> Tensor:
    """dice_loss as a graph node: scalar loss tensor over a probability tensor."""
    value, dh = dice_loss(h.data, y)

    def backward(g):
        _accum(h, (np.float64(g) * dh).astype(h.data.dtype))

    return _make(np.asarray(value, dtype=h.data.dtype), (h,), backward)
