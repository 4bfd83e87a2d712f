"""Per-sample teacher assignment and the teacher/student case taxonomy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .autodiff import Tensor
from .errors import ContractError, DataError, DimensionError


@dataclass
class PartitionMask:
    """N x K one-hot grid; row i marks the model that teaches sample i."""

    assignments: np.ndarray
    rule: str
    tie_note: str = ""

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=bool)
        if a.ndim != 2 or a.shape[1] < 2:
            raise DimensionError(f"partition needs N x K with K >= 2, got {list(a.shape)}")
        if a.shape[0] and not np.all(a.sum(axis=1) == 1):
            raise ContractError("partition rows must contain exactly one teacher")
        self.assignments = a

    @property
    def n(self):
        return self.assignments.shape[0]

    @property
    def k(self):
        return self.assignments.shape[1]

    @property
    def teacher(self):
        return np.argmax(self.assignments, axis=1)

    def column(self, k):
        return self.assignments[:, k].astype(np.float64)

    def fractions(self):
        if self.n == 0:
            return np.zeros(self.k)
        return self.assignments.mean(axis=0)


def _values(z):
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def _check_labels(y, n, c):
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {list(y.shape)}")
    y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    return y


def gt_probs(z, y):
    """Softmax probability of the ground-truth class for each row."""
    z = np.ascontiguousarray(_values(z))
    y = _check_labels(y, z.shape[0], z.shape[1])
    return K.softmax_rows(z)[np.arange(z.shape[0]), y]


def confidence_masks(z1, z2, y):
    """Model 1 teaches where its ground-truth probability is strictly higher;
    ties go to model 2."""
    a, b = _values(z1), _values(z2)
    if a.shape != b.shape:
        raise DimensionError(f"logit shapes differ: {list(a.shape)} vs {list(b.shape)}")
    p1, p2 = gt_probs(a, y), gt_probs(b, y)
    m1 = p1 > p2
    return PartitionMask(np.stack([m1, ~m1], axis=1), "confidence", "ties->model 2")


def loss_masks(losses):
    """Model 1 teaches where its loss is strictly lower; ties go to model 2."""
    L = _values(losses)
    if L.ndim != 2 or L.shape[1] != 2:
        raise DimensionError(f"loss_masks needs N x 2 losses, got {list(L.shape)}")
    if np.isnan(L).any():
        raise DataError("loss_masks: NaN loss")
    m1 = L[:, 0] < L[:, 1]
    return PartitionMask(np.stack([m1, ~m1], axis=1), "loss", "ties->model 2")


def multi_masks(gt_probs_matrix, rule="confidence"):
    """Argmax over K models' ground-truth probabilities; ties go to the lowest index."""
    P = _values(gt_probs_matrix)
    if P.ndim != 2 or P.shape[1] < 2:
        raise DimensionError(f"multi_masks needs N x K with K >= 2, got {list(P.shape)}")
    if np.isnan(P).any():
        raise DataError("multi_masks: NaN score")
    out = np.zeros(P.shape, dtype=bool)
    if P.shape[0]:
        out[np.arange(P.shape[0]), np.argmax(P, axis=1)] = True
    return PartitionMask(out, rule, "ties->lowest index")


def multi_loss_masks(losses):
    """Lowest-loss teacher over K models (ties to the lowest index)."""
    L = _values(losses)
    return multi_masks(-L, rule="loss")


# ---------------------------------------------------------------------------
# case taxonomy
# ---------------------------------------------------------------------------

CASE_NAMES = ("case1", "case2", "case3", "inverted")


@dataclass
class CaseStats:
    """Counts per case.

    case1: teacher and student both right.  case2: teacher right, student
    wrong.  case3: both wrong.  inverted: teacher wrong but student right,
    which the confidence ordering alone does not exclude.
    """

    counts: dict = field(default_factory=lambda: dict.fromkeys(CASE_NAMES, 0))

    @property
    def total(self):
        return sum(self.counts.values())

    def fractions(self):
        n = self.total
        return {k: (v / n if n else 0.0) for k, v in self.counts.items()}

    def to_dict(self):
        return {"counts": dict(self.counts), "fractions": self.fractions()}


def orient(z1, z2, y):
    """Per-sample (teacher, student) logits using the confidence rule (ties -> model 2)."""
    a, b = _values(z1), _values(z2)
    m1 = confidence_masks(a, b, y).assignments[:, 0]
    teacher = np.where(m1[:, None], a, b)
    student = np.where(m1[:, None], b, a)
    return teacher, student


def case_labels(z_teacher, z_student, y):
    t, s = _values(z_teacher), _values(z_student)
    y = _check_labels(y, t.shape[0], t.shape[1])
    if np.any(gt_probs(t, y) < gt_probs(s, y)):
        raise ContractError("classify_cases: teacher rows must be at least as confident on the ground truth")
    t_ok = np.argmax(t, axis=1) == y
    s_ok = np.argmax(s, axis=1) == y
    labels = np.full(y.shape, 3, dtype=np.int64)
    labels[t_ok & s_ok] = 1
    labels[t_ok & ~s_ok] = 2
    labels[~t_ok & s_ok] = 4
    return labels


def classify_cases(z_teacher, z_student, y):
    labels = case_labels(z_teacher, z_student, y)
    counts = {
        "case1": int(np.sum(labels == 1)),
        "case2": int(np.sum(labels == 2)),
        "case3": int(np.sum(labels == 3)),
        "inverted": int(np.sum(labels == 4)),
    }
    return CaseStats(counts)
