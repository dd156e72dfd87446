"""Scalar objectives: cross-entropy, logit KD, relation loss, focal loss.

Every loss reduces over the batch by the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .tensor import Tensor, as_tensor

PEARSON_EPS = 1e-8


@dataclass
class LossWeights:
    """Coefficients of the composite objective, in the order
    (CE, proj1, proj2, logits, relation), plus the loss hyperparameters."""

    ce: float = 0.2
    proj1: float = 0.2
    proj2: float = 0.2
    logits: float = 0.2
    relation: float = 0.2
    temperature: float = 4.0
    beta1: float = 1.0
    beta2: float = 1.0
    label_smoothing: float = 0.1

    COMPONENTS = ("ce", "proj1", "proj2", "logits", "relation")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in self.COMPONENTS:
            if getattr(self, name) < 0:
                raise ConfigError(f"lambda for {name} must be >= 0, got {getattr(self, name)}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("relation coefficients must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label smoothing {self.label_smoothing} outside [0, 1)")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.COMPONENTS)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.COMPONENTS}


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {list(labels.shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise DataError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean of ``-sum_c y'_c log softmax(logits)_c`` with label smoothing."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {list(logits.shape)}")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing {smoothing} outside [0, 1)")
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    target = (1.0 - smoothing) * one_hot(labels, c) + smoothing / c
    return -(logits.log_softmax(axis=-1) * target).sum(axis=-1).mean()


def logit_kd(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Batch-mean KL(softmax(z_T / T) || softmax(z_S / T)), without a T^2 factor."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    student_logits, teacher_logits = as_tensor(student_logits), as_tensor(teacher_logits)
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {list(student_logits.shape)} vs {list(teacher_logits.shape)}"
        )
    log_p_t = (teacher_logits * (1.0 / temperature)).log_softmax(axis=-1)
    log_p_s = (student_logits * (1.0 / temperature)).log_softmax(axis=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(axis=-1).mean()


def pearson(x: Tensor, y: Tensor, axis: int = -1, eps: float = PEARSON_EPS) -> Tensor:
    """Pearson correlation along ``axis`` with ``eps`` added to each std."""
    x, y = as_tensor(x), as_tensor(y)
    xc = x - x.mean(axis=axis, keepdims=True)
    yc = y - y.mean(axis=axis, keepdims=True)
    cov = (xc * yc).mean(axis=axis)
    sx = (xc * xc).mean(axis=axis).sqrt() + eps
    sy = (yc * yc).mean(axis=axis).sqrt() + eps
    return cov / (sx * sy)


@dataclass
class RelationTerms:
    total: Tensor
    inter: Tensor
    intra: Tensor


def relation_loss(p_teacher: Tensor, p_student: Tensor, beta1: float = 1.0, beta2: float = 1.0) -> RelationTerms:
    """Correlation agreement between probability matrices.

    ``inter`` averages ``1 - rho`` over rows (per-sample class distributions),
    ``intra`` over columns (per-class scores across the batch).
    """
    p_teacher, p_student = as_tensor(p_teacher), as_tensor(p_student)
    if p_teacher.shape != p_student.shape or p_teacher.ndim != 2:
        raise DimensionError(
            f"relation_loss needs equal B x C inputs, got {list(p_teacher.shape)} and {list(p_student.shape)}"
        )
    b, c = p_teacher.shape
    if b < 2 or c < 2:
        raise ContractError(f"relation_loss needs B >= 2 and C >= 2, got B={b}, C={c}")
    inter = (1.0 - pearson(p_teacher, p_student, axis=1)).mean()
    intra = (1.0 - pearson(p_teacher, p_student, axis=0)).mean()
    return RelationTerms(total=inter * beta1 + intra * beta2, inter=inter, intra=intra)


def focal_loss(logits: Tensor, labels, alpha: float | Sequence[float] = 1.0, gamma: float = 2.0) -> Tensor:
    """Batch mean of ``-alpha_t (1 - p_t)^gamma log p_t``.

    ``alpha`` is either a scalar or one weight per class.
    """
    if logits.ndim != 2:
        raise DimensionError(f"focal_loss expects B x C logits, got {list(logits.shape)}")
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    alpha_arr = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha_arr <= 0):
        raise ConfigError("focal alpha must be > 0")
    alpha_t = alpha_arr[labels] if alpha_arr.ndim == 1 else np.full(b, float(alpha_arr))
    log_pt = (logits.log_softmax(axis=-1) * one_hot(labels, c)).sum(axis=-1)
    modulator = (1.0 - log_pt.exp()) ** gamma
    return -(modulator * log_pt * alpha_t).mean()
