import numpy as np
import pytest

from bitransfer.data import (ClassificationSpec, DenseSpec, SaliencySpec, ViewPolicy, batches, complementary_views,
                             generate, load_dataset, save_dataset)
from bitransfer.errors import ConfigError, DataError


def nearest_centroid(x, means):
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


@pytest.mark.parametrize("task", ["classification", "dense-seg", "saliency"])
def test_regeneration_is_bit_identical(task):
    a, b = generate(task), generate(task)
    for (ka, va), (kb, vb) in zip(a.arrays().items(), b.arrays().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    assert a.digest() == b.digest()


def test_different_seeds_differ():
    assert generate("classification", ClassificationSpec(seed=1)).digest() != generate("classification").digest()


def test_half_views_weaker_than_full_view():
    h = generate("classification", ClassificationSpec(n_train=8000, n_eval=2000))
    means, y = h.extra["means"], h.y.astype(int)
    full = np.mean(nearest_centroid(h.x, means) == y)
    lo = np.mean(nearest_centroid(h.x[:, :8], means[:, :8]) == y)
    hi = np.mean(nearest_centroid(h.x[:, 8:], means[:, 8:]) == y)
    for acc in (lo, hi):
        assert 0.25 < acc < full < 1.0


def test_label_histogram_uniform():
    h = generate("classification", ClassificationSpec(n_train=8000, n_eval=2000))
    frac = np.bincount(h.y.astype(int), minlength=4) / h.y.size
    assert np.all(np.abs(frac - 0.25) <= 0.02)


def test_classification_spec_errors():
    with pytest.raises(ConfigError):
        generate("classification", ClassificationSpec(classes=1))
    with pytest.raises(ConfigError):
        generate("classification", ClassificationSpec(dim=3))
    with pytest.raises(ConfigError):
        generate("classification", ClassificationSpec(margin=0.0))
    with pytest.raises(ConfigError):
        generate("nope")


def test_dense_noise_free_is_threshold_recoverable():
    h = generate("dense-seg", DenseSpec(noise=0.0, n_train=50, n_eval=10))
    means = h.extra["means"]
    pix = h.x.reshape(-1, h.x.shape[-1])
    pred = nearest_centroid(pix, means)
    assert np.mean(pred == h.y.reshape(-1).astype(int)) == 1.0


def test_dense_dominant_label_and_area():
    spec = DenseSpec(n_train=800, n_eval=200)
    h = generate("dense-seg", spec)
    labels = h.y.astype(int)
    fg = labels > 0
    area = fg.reshape(len(labels), -1).mean()
    assert abs(area / spec.fg_fraction - 1) < 0.05
    # every image's foreground pixels carry its image-level label
    for i in range(50):
        assert set(np.unique(labels[i][fg[i]])) == {int(h.extra["y_cls"][i])}


def test_dense_errors():
    with pytest.raises(ConfigError):
        generate("dense-seg", DenseSpec(height=3))
    with pytest.raises(ConfigError):
        generate("dense-seg", DenseSpec(fg_fraction=1.0))


def test_saliency_maps_normalized_and_fixations_follow_map():
    h = generate("saliency", SaliencySpec(n_train=20, n_eval=5))
    assert np.all(np.abs(h.y.reshape(len(h.y), -1).sum(axis=1) - 1) < 1e-9)
    # 1000 fixations from the first map via the same sampler
    spec = SaliencySpec(n_train=1, n_eval=1, fixations=1000)
    g = generate("saliency", spec)
    fix = g.extra["fixations"][0].astype(int)
    dens = np.zeros((spec.height, spec.width))
    np.add.at(dens, (fix[:, 0], fix[:, 1]), 1.0)
    cc = np.corrcoef(dens.ravel(), g.y[0].ravel())[0, 1]
    assert cc > 0.5
    with pytest.raises(ConfigError):
        generate("saliency", SaliencySpec(height=7))


def test_batches_permutation_and_determinism():
    h = generate("classification", ClassificationSpec(n_train=103, n_eval=10))
    got = list(batches(h, "train", 10, 7))
    assert [len(b) for b in got][-1] == 3
    cat = np.concatenate(got)
    assert np.array_equal(np.sort(cat), np.arange(103))
    assert np.array_equal(cat, np.concatenate(list(batches(h, "train", 10, 7))))
    orders = {tuple(np.concatenate(list(batches(h, "train", 10, s)))) for s in range(10)}
    assert len(orders) == 10
    with pytest.raises(ConfigError):
        list(batches(h, "train", 0, 0))
    with pytest.raises(DataError):
        list(batches(h, "test", 4, 0))


@pytest.mark.parametrize("task", ["classification", "dense-seg", "saliency"])
def test_splits_do_not_leak(task):
    h = generate(task)
    assert not set(h.indices("train").tolist()) & set(h.indices("eval").tolist())


def test_views_cover_and_fill():
    v = complementary_views(16, 2)
    assert v == [list(range(8)), list(range(8, 16))]
    w = complementary_views(9, 3, overlap=2)
    assert sorted(set().union(*map(set, w))) == list(range(9)) and all(len(x) == 5 for x in w)
    with pytest.raises(ConfigError):
        ViewPolicy([[0, 1]], 4)
    p = ViewPolicy(v, 16)
    x = np.ones((3, 16))
    assert np.all(p.apply(x, 0)[:, 8:] == 0) and np.all(p.apply(x, 0)[:, :8] == 1)
    q = ViewPolicy(v, 16, fill="noise", disjoint_subsets=True)
    out = q.apply(x, 1, np.random.default_rng(0))
    assert np.all(out[:, 8:] == 1) and np.all(out[:, :8] != 1)
    with pytest.raises(ConfigError):
        q.apply(x, 1)
    parts = [q.subset(np.arange(10), k) for k in range(2)]
    assert np.array_equal(np.concatenate(parts), np.arange(10))


def test_dataset_cache_round_trip(tmp_path):
    h = generate("dense-seg", DenseSpec(n_train=5, n_eval=3))
    save_dataset(h, tmp_path / "d.bin")
    g = load_dataset(tmp_path / "d.bin")
    assert g.digest() == h.digest() and g.spec == h.spec
