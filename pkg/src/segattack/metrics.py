"""Differentiable soft-IoU loss and discrete IoU metrics.

Training minimizes the negative soft IoU averaged over all six classes;
attack objectives use the same loss restricted to the five structure classes.
Reported numbers always come from the discrete (argmax) IoU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, accumulate_grad, make_node

SMOOTHING = 1e-6


@dataclass(frozen=True)
class ClassScope:
    """Non-empty set of class indices a loss or metric averages over."""

    classes: tuple[int, ...]

    def __post_init__(self):
        if len(self.classes) == 0:
            raise ValueError("class scope must be non-empty")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate classes in scope: {self.classes}")
        if any(c < 0 for c in self.classes):
            raise ValueError(f"negative class index in scope: {self.classes}")

    def validate_against(self, num_classes: int) -> None:
        if any(c >= num_classes for c in self.classes):
            raise ValueError(
                f"scope {self.classes} out of range for {num_classes} classes"
            )


SCOPE_ALL = ClassScope(tuple(range(6)))         # all classes, for training
SCOPE_STRUCTURES = ClassScope(tuple(range(1, 6)))  # the five structures, for attacks


def one_hot(labels: np.ndarray, num_classes: int = 6) -> np.ndarray:
    """Label map (H,W) or (N,H,W) to float64 one-hot (N,C,H,W)."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.ndim != 3:
        raise ShapeError(f"expected (H,W) or (N,H,W) labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    n, h, w = labels.shape
    out = np.zeros((n, num_classes, h, w), dtype=np.float64)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


def soft_iou_per_sample(probs: Tensor, target_onehot: np.ndarray, scope: ClassScope) -> Tensor:
    """Per-sample negative mean soft IoU over the scope, as a Tensor[N].

    Soft IoU per class is (I + s) / (U + s) with I the probability mass on
    the target region, U the union mass, and s a small smoothing constant in
    both numerator and denominator so an absent class predicted absent scores
    exactly 1. Differentiable everywhere; the backward uses the closed form
    d[(I+s)/(U+s)]/dp = (t*(U+s) - (I+s)*(1-t)) / (U+s)^2.
    """
    t = np.asarray(target_onehot, dtype=np.float64)
    if probs.data.ndim != 4:
        raise ShapeError(f"probs must be (N,C,H,W), got {probs.shape}")
    if t.shape != probs.shape:
        raise ShapeError(f"target shape {t.shape} does not match probs {probs.shape}")
    scope.validate_against(probs.shape[1])
    cs = list(scope.classes)
    s = SMOOTHING

    p = probs.data[:, cs]
    tc = t[:, cs]
    inter = np.einsum("nchw,nchw->nc", p, tc)
    union = p.sum(axis=(2, 3)) + tc.sum(axis=(2, 3)) - inter
    iou_soft = (inter + s) / (union + s)
    out_data = -iou_soft.mean(axis=1)

    def bw(g):
        if not probs.requires_grad:
            return
        # g has shape (N,); chain through the per-class mean and the ratio
        coef = (-g / len(cs)).reshape(-1, 1, 1, 1)
        num = tc * (union + s)[:, :, None, None] - (inter + s)[:, :, None, None] * (1.0 - tc)
        gp_scope = coef * num / ((union + s) ** 2)[:, :, None, None]
        gp = np.zeros_like(probs.data)
        gp[:, cs] = gp_scope
        accumulate_grad(probs, gp)

    return make_node(out_data, (probs,), bw, "soft_iou")


def soft_iou_loss(probs: Tensor, target_onehot: np.ndarray, scope: ClassScope) -> Tensor:
    """Scalar loss: batch mean of the per-sample negative mean soft IoU."""
    return soft_iou_per_sample(probs, target_onehot, scope).mean()


def iou(pred: np.ndarray, ref: np.ndarray, cls: int) -> float:
    """Discrete intersection-over-union for one class; both-empty counts 1."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"label map shapes differ: {pred.shape} vs {ref.shape}")
    a = pred == cls
    b = ref == cls
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_iou(pred: np.ndarray, ref: np.ndarray, scope: ClassScope) -> float:
    """Arithmetic mean of per-class discrete IoU over the scope."""
    return float(np.mean([iou(pred, ref, c) for c in scope.classes]))
