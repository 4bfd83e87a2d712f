import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitransfer.analysis import (EnsembleResult, cca, classification_metrics, csv_text, ensemble_eval, json_text,
                                 nss, recovered, saliency_metrics, segmentation_metrics)
from bitransfer.data import ClassificationSpec, DatasetHandle, generate, ClassificationSpec as CS
from bitransfer.errors import ConfigError, DegenerateInputError, DimensionError
from bitransfer.models import ArchDescriptor, init_model


def test_recovered_known_values():
    assert recovered(81.332, 82.722, 84.332) == pytest.approx(0.463, abs=5e-4)
    assert recovered(79.152, 80.544, 80.274) == pytest.approx(1.24, abs=5e-3)
    assert recovered(0.5, 0.5, 0.7) == 0.0
    with pytest.raises(DegenerateInputError):
        recovered(0.5, 0.6, 0.5)


def test_recovered_linear_in_after():
    before, ens = 0.6, 0.8
    ts = np.linspace(0, 1, 5)
    vals = [recovered(before, before + t * (ens - before), ens) for t in ts]
    assert np.allclose(vals, ts, atol=1e-12)
    r = EnsembleResult.build(ens, [0.6, 0.7], [0.7, 0.7])
    assert r.recovered == pytest.approx([0.5, 0.0])


def _const_model(probs, name):
    """Linear classifier on a single constant input whose softmax equals ``probs``."""
    arch = ArchDescriptor(1, (), len(probs), "class-logits")
    m = init_model(arch, 0, name)
    m.params["head.weight"].data[:] = 0.0
    m.params["head.bias"].data[:] = np.log(probs)
    return m


def _one_sample_handle(label, classes=3):
    return DatasetHandle("classification", ClassificationSpec(classes=classes), np.ones((1, 1)),
                         np.array([label]), {"eval": (0, 1)})


def test_ensemble_confident_right_beats_mild_wrong():
    a = _const_model([0.9, 0.05, 0.05], "a")
    b = _const_model([0.25, 0.55, 0.2], "b")
    h = _one_sample_handle(0)
    # direct averaging oracle: [0.575, 0.3, 0.125] -> class 0
    assert ensemble_eval([a, b], h)["top1"] == 1.0
    assert ensemble_eval([b, a], h)["top1"] == 1.0
    assert ensemble_eval([b, b], h)["top1"] == 0.0


def test_ensemble_with_itself_and_permutation():
    data = generate("classification", CS(seed=0, n_train=200, n_eval=300))
    arch = ArchDescriptor(16, (8,), 4, "class-logits")
    m1, m2, m3 = (init_model(arch, s, f"m{s}") for s in range(3))
    from bitransfer.tasks import get_task
    own = get_task("classification").evaluate(m1, data)
    assert ensemble_eval([m1, m1], data) == own
    assert ensemble_eval([m1, m2, m3], data) == ensemble_eval([m3, m1, m2], data)
    with pytest.raises(ConfigError):
        ensemble_eval([m1], data)
    seg = ArchDescriptor(3, (4,), 3, "dense-logits", grid=(4, 4))
    with pytest.raises(ConfigError):
        ensemble_eval([init_model(seg, 0), init_model(seg, 1)], data)


def test_cca_self_and_linear_invariance():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(2000, 6))
    s = cca(A, A)
    assert np.all(np.abs(s.correlations - 1) < 1e-8)
    M = rng.normal(size=(6, 6)) + 3 * np.eye(6)
    t = cca(A, A @ M)
    assert np.all(np.abs(t.correlations - 1) < 1e-6)
    B = rng.normal(size=(2000, 4))
    base = cca(A, B).correlations
    moved = cca(A @ M, B @ (rng.normal(size=(4, 4)) + 3 * np.eye(4))).correlations
    assert np.allclose(base, moved, atol=1e-6)
    assert np.all(np.diff(base) <= 0) and base.shape == (4,)


def test_cca_independent_features_small():
    # Monte-Carlo reference: with N=10000, Fa=Fb=8 the mean is about 0.02
    for seed in range(5):
        rng = np.random.default_rng(seed)
        s = cca(rng.normal(size=(10000, 8)), rng.normal(size=(10000, 8)))
        assert s.mean < 0.1
        assert np.all((s.correlations >= 0) & (s.correlations <= 1))


def test_cca_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        cca(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)))
    with pytest.raises(ConfigError):
        cca(rng.normal(size=(50, 3)), rng.normal(size=(50, 3)), k=4)
    assert cca(rng.normal(size=(50, 3)), rng.normal(size=(50, 5)), k=2).correlations.shape == (2,)


def test_classification_metrics_counts():
    assert classification_metrics(np.eye(3), [0, 1, 2])["top1"] == 1.0
    assert classification_metrics(np.eye(3), [1, 2, 0])["top1"] == 0.0
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(500, 5)), rng.integers(0, 5, 500)
    hits = sum(int(np.argmax(z[i]) == y[i]) for i in range(500))
    assert classification_metrics(z, y)["top1"] == hits / 500


def test_segmentation_metrics_examples():
    gt = np.zeros((1, 2, 2), dtype=int)
    assert segmentation_metrics(gt, gt, 2) == {"mIoU": 1.0, "fwIoU": 1.0, "mACC": 1.0, "pACC": 1.0}
    pred = np.array([[[0, 1], [0, 1]]])
    # confusion [[2, 2], [0, 0]]: class 1 absent from gt, IoU0 = 2 / 4
    assert segmentation_metrics(pred, gt, 2) == {"mIoU": 0.5, "fwIoU": 0.5, "mACC": 0.5, "pACC": 0.5}
    with pytest.raises(DimensionError):
        segmentation_metrics(pred, np.zeros((1, 2, 3), dtype=int), 2)


def test_fwiou_equals_miou_for_balanced_classes():
    gt = np.array([[[0, 0, 1, 1], [2, 2, 3, 3]]])
    pred = np.array([[[0, 1, 1, 1], [2, 3, 3, 0]]])
    m = segmentation_metrics(pred, gt, 4)
    assert m["fwIoU"] == pytest.approx(m["mIoU"], abs=1e-15)


def _brute_force(pred, gt, c):
    iou, acc, freq = [], [], []
    n = gt.size
    out_iou = np.zeros(c)
    for k in range(c):
        tp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == k and g == k)
        ng = sum(1 for g in gt.ravel() if g == k)
        npred = sum(1 for p in pred.ravel() if p == k)
        union = ng + npred - tp
        out_iou[k] = tp / union if union else 0.0
        if ng:
            iou.append(out_iou[k])
            acc.append(tp / ng)
        freq.append(ng / n)
    pacc = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == g) / n
    return {"mIoU": float(np.mean(iou)), "fwIoU": float(np.dot(freq, out_iou)),
            "mACC": float(np.mean(acc)), "pACC": pacc}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_segmentation_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 4, (1, 8, 8)), rng.integers(0, 4, (1, 8, 8))
    got, want = segmentation_metrics(pred, gt, 4), _brute_force(pred, gt, 4)
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-12)


def test_metrics_order_independent():
    rng = np.random.default_rng(5)
    gt, pred = rng.integers(0, 3, (6, 4, 4)), rng.integers(0, 3, (6, 4, 4))
    perm = rng.permutation(6)
    a, b = segmentation_metrics(pred, gt, 3), segmentation_metrics(pred[perm], gt[perm], 3)
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-14)


def test_nss_examples():
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(6, 6))
    z = (p - p.mean()) / p.std()
    i, j = np.unravel_index(np.argmax(p), p.shape)
    assert nss(p, [(i, j)]) == pytest.approx(z.max(), abs=1e-12)
    fix = [(0, 0), (3, 4), (5, 1)]
    assert nss(3.5 * p + 2.0, fix) == pytest.approx(nss(p, fix), abs=1e-10)
    with pytest.raises(DegenerateInputError):
        nss(np.ones((3, 3)), fix)
    with pytest.raises(DegenerateInputError):
        nss(p, [])


def test_saliency_metrics_self():
    rng = np.random.default_rng(0)
    g = rng.uniform(size=(8, 8))
    m = saliency_metrics(g, g, [(1, 1)])
    assert m["CC"] == pytest.approx(1.0, abs=1e-10)


def test_emission_helpers_have_schema_first():
    text = csv_text("x/1", ["a", "b"], [[1, 0.5]])
    assert text.splitlines()[0] == "# schema=x/1" and text.splitlines()[2] == "1,0.5"
    js = json_text("y/1", {"k": 1})
    assert js.splitlines()[0].startswith('{"schema": "y/1"')
    assert json.loads(js) == {"schema": "y/1", "k": 1}
