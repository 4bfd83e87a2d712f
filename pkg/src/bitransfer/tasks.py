"""Task adapters: how each task runs a model, scores it and distills between models."""
from __future__ import annotations

import numpy as np

from . import _kernels as K
from . import autodiff as ad
from .analysis import classification_metrics, nss, segmentation_metrics
from .autodiff import Tensor
from .errors import ConfigError
from .losses import PROB_CLIP, cross_entropy, kl_distill, kl_maps, mask_loss_rows, vsp_rows
from .models import forward_classifier, forward_dense


class ClassificationTask:
    name = "classification"
    head = "class-logits"
    primary = "top1"
    metric_names = ("top1",)
    default_rule = "confidence"
    rules = ("confidence", "loss")

    def targets(self, handle, idx):
        return handle.y[idx].astype(np.int64)

    def forward(self, m, x):
        return forward_classifier(m, x)[0]

    def features(self, m, x):
        return forward_classifier(m, Tensor(x))[1].data

    def task_loss_rows(self, out, target, w):
        return cross_entropy(out, target, per_sample=True)

    def gt_scores(self, out, target):
        from .partition import gt_probs
        return gt_probs(out, target)

    def distill_rows(self, student, teacher, T, direction):
        return kl_distill(student, teacher, T, per_sample=True, direction=direction)

    def probabilities(self, m, x):
        return K.softmax_rows(np.ascontiguousarray(self.forward(m, Tensor(x)).data))

    def score(self, prob, handle, split):
        lo, hi = handle.bounds(split)
        return classification_metrics(prob, handle.y[lo:hi])

    def evaluate(self, m, handle, split="eval"):
        lo, hi = handle.bounds(split)
        return self.score(self.probabilities(m, handle.x[lo:hi]), handle, split)

    def logits(self, m, handle, split="eval"):
        lo, hi = handle.bounds(split)
        return self.forward(m, Tensor(handle.x[lo:hi])).data


class DenseSegTask:
    """Per-pixel classification scored by one mask loss per class plus an
    image-level class term on pixel-averaged logits."""

    name = "dense-seg"
    head = "dense-logits"
    primary = "mIoU"
    metric_names = ("mIoU", "fwIoU", "mACC", "pACC")
    default_rule = "loss"
    rules = ("loss",)

    def targets(self, handle, idx):
        return handle.y[idx].astype(np.int64), handle.extra["y_cls"][idx].astype(np.int64)

    def forward(self, m, x):
        return forward_dense(m, x)

    def features(self, m, x):
        return forward_dense(m, Tensor(x), return_features=True)[1].data

    def task_loss_rows(self, out, target, w):
        labels, y_cls = target
        n, h, wd, c = out.data.shape
        hw = h * wd
        pix = ad.reshape(out, (n * hw, c))
        prob = ad.clip(ad.softmax(pix), PROB_CLIP, 1.0 - PROB_CLIP)
        per_class = ad.reshape(ad.transpose(ad.reshape(prob, (n, hw, c)), (0, 2, 1)), (n * c, hw))
        onehot = (labels.reshape(n, 1, hw) == np.arange(c)[None, :, None]).astype(np.float64)
        masks = ad.mean(ad.reshape(mask_loss_rows(per_class, onehot.reshape(n * c, hw), w), (n, c)), axis=1)
        z_cls = ad.mean(ad.reshape(out, (n, hw, c)), axis=1)
        correct = np.argmax(z_cls.data, axis=1) == y_cls
        lam = np.where(correct, w.lambda_cls_correct, w.lambda_cls_incorrect)
        ce = cross_entropy(z_cls, y_cls, per_sample=True)
        return masks + ce * Tensor(lam)

    def distill_rows(self, student, teacher, T, direction):
        n, h, wd, c = student.data.shape
        flat_s = ad.reshape(student, (n * h * wd, c))
        flat_t = ad.reshape(teacher, (n * h * wd, c))
        per_pixel = kl_distill(flat_s, flat_t, T, per_sample=True, direction=direction)
        return ad.mean(ad.reshape(per_pixel, (n, h * wd)), axis=1)

    def probabilities(self, m, x):
        out = self.forward(m, Tensor(x)).data
        n, h, w, c = out.shape
        return K.softmax_rows(np.ascontiguousarray(out.reshape(-1, c))).reshape(n, h, w, c)

    def score(self, prob, handle, split):
        lo, hi = handle.bounds(split)
        return segmentation_metrics(np.argmax(prob, axis=-1), handle.y[lo:hi], handle.n_classes)

    def evaluate(self, m, handle, split="eval"):
        lo, hi = handle.bounds(split)
        return self.score(self.probabilities(m, handle.x[lo:hi]), handle, split)


class SaliencyTask:
    name = "saliency"
    head = "saliency-map"
    primary = "CC"
    metric_names = ("CC", "NSS")
    default_rule = "loss"
    rules = ("loss",)

    def targets(self, handle, idx):
        return handle.y[idx]

    def forward(self, m, x):
        return forward_dense(m, x)

    def features(self, m, x):
        return forward_dense(m, Tensor(x), return_features=True)[1].data

    def task_loss_rows(self, out, target, w):
        n = out.data.shape[0]
        return vsp_rows(ad.reshape(out, (n, out.data[0].size)), target.reshape(n, -1), w)

    def distill_rows(self, student, teacher, T, direction):
        # maps are already distributions after normalization; T is not applied
        n = student.data.shape[0]
        m = student.data[0].size
        return kl_maps(ad.reshape(student, (n, m)), ad.reshape(teacher, (n, m)),
                       per_sample=True, direction=direction)

    def probabilities(self, m, x):
        return self.forward(m, Tensor(x)).data

    def score(self, prob, handle, split):
        lo, hi = handle.bounds(split)
        maps, fix = handle.y[lo:hi], handle.extra["fixations"][lo:hi]
        ccs, nsss = [], []
        for p, g, f in zip(prob, maps, fix):
            pc, gc = p - p.mean(), g - g.mean()
            ccs.append(float((pc * gc).mean() / np.sqrt((pc * pc).mean() * (gc * gc).mean())))
            nsss.append(nss(p, f))
        return {"CC": float(np.mean(ccs)), "NSS": float(np.mean(nsss))}

    def evaluate(self, m, handle, split="eval"):
        lo, hi = handle.bounds(split)
        return self.score(self.probabilities(m, handle.x[lo:hi]), handle, split)


TASK_TYPES = {"classification": ClassificationTask, "dense-seg": DenseSegTask, "saliency": SaliencyTask}


def get_task(name):
    try:
        return TASK_TYPES[name]()
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASK_TYPES)}") from None
