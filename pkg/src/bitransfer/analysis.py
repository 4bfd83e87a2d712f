"""Post-hoc analysis: task metrics, ensembling, recovered fraction and CCA."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DimensionError, NumericError
from .losses import cc as _cc


# ---------------------------------------------------------------------------
# task metrics
# ---------------------------------------------------------------------------

def classification_metrics(z, y):
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    y = np.asarray(y).astype(np.int64)
    if z.shape[0] == 0:
        return {"top1": 0.0}
    return {"top1": float(np.mean(np.argmax(z, axis=1) == y))}


def segmentation_metrics(pred, gt, n_classes):
    """mIoU, fwIoU, mACC and pACC from the pixel confusion matrix.

    Classes that never occur in ``gt`` are left out of the mIoU/mACC means.
    """
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {list(pred.shape)} vs ground truth {list(gt.shape)}")
    cm = K.confusion_matrix(gt, pred, n_classes).astype(np.float64)
    return metrics_from_confusion(cm)


def metrics_from_confusion(cm):
    total = cm.sum()
    diag = np.diag(cm)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    union = gt_count + pred_count - diag
    iou = np.divide(diag, union, out=np.zeros_like(diag), where=union > 0)
    acc = np.divide(diag, gt_count, out=np.zeros_like(diag), where=gt_count > 0)
    freq = gt_count / total
    return {
        "mIoU": float(iou[present].mean()),
        "fwIoU": float((freq * iou).sum()),
        "mACC": float(acc[present].mean()),
        "pACC": float(diag.sum() / total),
    }


def nss(pred, fixations):
    """Normalized scanpath saliency: mean standardized prediction at fixated pixels.

    Standard definition (population standard deviation); the training
    pipeline never uses it as a loss.
    """
    pred = np.asarray(pred, dtype=np.float64)
    fix = np.asarray(fixations).astype(np.int64).reshape(-1, 2)
    if fix.shape[0] == 0:
        raise DegenerateInputError("NSS needs at least one fixation")
    std = pred.std()
    if not std > 0:
        raise DegenerateInputError("NSS undefined for a constant prediction")
    z = (pred - pred.mean()) / std
    return float(z[fix[:, 0], fix[:, 1]].mean())


def saliency_metrics(pred, gt_map, fixations):
    pred = np.asarray(pred, dtype=np.float64)
    return {"CC": _cc(Tensor(pred), Tensor(gt_map)).item(), "NSS": nss(pred, fixations)}


# ---------------------------------------------------------------------------
# ensembles and recovered fraction
# ---------------------------------------------------------------------------

def ensemble_eval(models, handle, split="eval"):
    """Average the models' probability outputs per sample, then score."""
    from .tasks import get_task

    if len(models) < 2:
        raise ConfigError("an ensemble needs at least two models")
    task = get_task(handle.task)
    heads = {m.arch.head for m in models}
    if heads != {task.head}:
        raise ConfigError(f"models with heads {sorted(heads)} cannot serve task {handle.task}")
    lo, hi = handle.bounds(split)
    x = handle.x[lo:hi]
    mean_prob = sum(task.probabilities(m, x) for m in models) / len(models)
    return task.score(mean_prob, handle, split)


def recovered(before, after, ensemble):
    denom = ensemble - before
    if denom == 0:
        raise DegenerateInputError("recovered: ensemble equals the pretrained metric")
    return (after - before) / denom


@dataclass
class EnsembleResult:
    ensemble_metric: float
    before: list
    after: list
    recovered: list = field(default_factory=list)

    @classmethod
    def build(cls, ensemble_metric, before, after):
        rec = [recovered(b, a, ensemble_metric) for b, a in zip(before, after)]
        return cls(ensemble_metric, list(before), list(after), rec)


# ---------------------------------------------------------------------------
# CCA
# ---------------------------------------------------------------------------

@dataclass
class CcaSummary:
    correlations: np.ndarray
    mean: float

    def to_dict(self):
        return {"correlations": [float(c) for c in self.correlations], "mean": self.mean}


def _inv_sqrt(cov, which):
    vals, vecs = np.linalg.eigh(cov)
    if not np.all(np.isfinite(vals)) or vals.min() <= 0.0:
        raise NumericError(f"cca: {which} covariance is singular even after ridge")
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca(features_a, features_b, k=None, ridge=1e-6):
    """Canonical correlations via whitening and an SVD of the cross-covariance.

    A ridge ``ridge * I`` is added to both auto-covariances before whitening.  Returns the
    top-``k`` correlations (default: all ``min(Fa, Fb)``) in descending order,
    clipped to [0, 1].
    """
    A = np.asarray(features_a.data if isinstance(features_a, Tensor) else features_a, dtype=np.float64)
    B = np.asarray(features_b.data if isinstance(features_b, Tensor) else features_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise DimensionError(f"cca: feature matrices {list(A.shape)} and {list(B.shape)}")
    n, fa = A.shape
    fb = B.shape[1]
    if n <= max(fa, fb):
        raise DimensionError(f"cca needs more samples ({n}) than features ({max(fa, fb)})")
    kmax = min(fa, fb)
    k = kmax if k is None else int(k)
    if not 1 <= k <= kmax:
        raise ConfigError(f"cca: k must lie in [1, {kmax}], got {k}")
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    caa = A.T @ A / (n - 1) + ridge * np.eye(fa)
    cbb = B.T @ B / (n - 1) + ridge * np.eye(fb)
    cab = A.T @ B / (n - 1)
    wa, wb = _inv_sqrt(caa, "first"), _inv_sqrt(cbb, "second")
    u, s, vt = np.linalg.svd(wa @ cab @ wb)
    if not np.all(np.isfinite(s)):
        raise NumericError("cca: non-finite singular values")
    # the ridge only picks the directions; report the plain correlation of
    # each pair of canonical variates so exact matches come out as 1
    pa, pb = A @ (wa @ u[:, :kmax]), B @ (wb @ vt.T[:, :kmax])
    num = np.einsum("ij,ij->j", pa, pb)
    den = np.linalg.norm(pa, axis=0) * np.linalg.norm(pb, axis=0)
    r = np.abs(np.divide(num, den, out=np.zeros_like(num), where=den > 0))
    corr = np.clip(np.sort(r)[::-1][:k], 0.0, 1.0)
    return CcaSummary(corr, float(corr.mean()))


# ---------------------------------------------------------------------------
# emission helpers
# ---------------------------------------------------------------------------

def csv_text(schema, header, rows):
    """Comma-separated table preceded by a ``# schema=...`` line."""
    buf = io.StringIO()
    buf.write(f"# schema={schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def json_text(schema, payload):
    """JSON with ``schema`` as the first key, on the first line."""
    body = json.dumps({"schema": schema, **payload}, indent=2)
    return "{" + body[1:].lstrip() + "\n"
