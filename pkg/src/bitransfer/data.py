"""Deterministic synthetic datasets with complementary information by construction.

Every generator is a pure function of its spec.  Samples are generated in one
block; the first ``n_train`` rows form the train split and the rest the eval
split.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError

TASKS = ("classification", "dense-seg", "saliency")


@dataclass(frozen=True)
class ClassificationSpec:
    seed: int = 0
    n_train: int = 8000
    n_eval: int = 2000
    dim: int = 16
    classes: int = 4
    margin: float = 1.5
    noise: float = 1.0
    # per-sample extra noise on one randomly chosen half; makes which model
    # "knows" a sample vary from sample to sample
    half_noise: float = 0.0


@dataclass(frozen=True)
class DenseSpec:
    seed: int = 0
    n_train: int = 600
    n_eval: int = 200
    height: int = 8
    width: int = 8
    channels: int = 8
    classes: int = 3
    fg_fraction: float = 0.3
    margin: float = 2.0
    noise: float = 1.0


@dataclass(frozen=True)
class SaliencySpec:
    seed: int = 0
    n_train: int = 400
    n_eval: int = 100
    height: int = 12
    width: int = 12
    channels: int = 4
    gaussians: int = 2
    fixations: int = 30
    noise: float = 0.3


SPECS = {"classification": ClassificationSpec, "dense-seg": DenseSpec, "saliency": SaliencySpec}


@dataclass
class DatasetHandle:
    task: str
    spec: object
    x: np.ndarray
    y: np.ndarray
    splits: dict
    extra: dict = field(default_factory=dict)

    def bounds(self, split):
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]

    def indices(self, split):
        lo, hi = self.bounds(split)
        return np.arange(lo, hi)

    def split(self, split):
        lo, hi = self.bounds(split)
        return self.x[lo:hi], self.y[lo:hi]

    def size(self, split):
        lo, hi = self.bounds(split)
        return hi - lo

    @property
    def n_classes(self):
        return getattr(self.spec, "classes", 1)

    @property
    def input_dim(self):
        return self.x.shape[-1]

    def arrays(self):
        out = OrderedDict([("x", self.x), ("y", self.y)])
        out.update(self.extra)
        return out

    def digest(self):
        h = hashlib.sha256(repr((self.task, asdict(self.spec))).encode())
        for k, v in self.arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _balanced_labels(rng, n, classes, offset=0):
    return rng.permutation(np.arange(n) % classes + offset)


def _spread_means(rng, classes, dim, margin):
    """Centered class means whose closest pair sits exactly ``margin`` apart."""
    z = rng.normal(size=(classes, dim))
    z -= z.mean(axis=0)
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    closest = d[np.triu_indices(classes, 1)].min()
    if not closest > 1e-9:
        raise ConfigError("class means collapsed; try another seed or dimension")
    return z * (margin / closest)


def _split_means(rng, classes, dim, margin):
    half = dim // 2
    return np.concatenate([_spread_means(rng, classes, half, margin),
                           _spread_means(rng, classes, dim - half, margin)], axis=1)


def _check_common(spec):
    if spec.n_train < 1 or spec.n_eval < 1:
        raise ConfigError("both splits need at least one sample")
    if not (np.isfinite(spec.margin) and spec.margin > 0):
        raise ConfigError(f"margin must be positive and finite, got {spec.margin}")
    if not (np.isfinite(spec.noise) and spec.noise >= 0):
        raise ConfigError(f"noise must be nonnegative, got {spec.noise}")


def gen_classification(spec=ClassificationSpec()):
    """Gaussian clusters whose means are drawn separately for each feature half.

    Each half alone identifies the class better than chance but worse than the
    full vector, and the two halves carry independent noise.
    """
    if spec.classes < 2 or spec.dim < 4:
        raise ConfigError("classification needs classes >= 2 and dim >= 4")
    _check_common(spec)
    if spec.half_noise < 0:
        raise ConfigError("half_noise must be nonnegative")
    r_means, r_labels, r_noise, r_half = _streams(spec.seed, 4)
    n = spec.n_train + spec.n_eval
    means = _split_means(r_means, spec.classes, spec.dim, spec.margin)
    y = _balanced_labels(r_labels, n, spec.classes)
    x = means[y] + spec.noise * r_noise.normal(size=(n, spec.dim))
    noisy_half = r_half.integers(0, 2, size=n)
    if spec.half_noise > 0:
        half = spec.dim // 2
        extra = spec.half_noise * r_half.normal(size=(n, spec.dim))
        cols = np.arange(spec.dim) >= half
        hit = cols[None, :] == (noisy_half[:, None] == 1)
        x = x + np.where(hit, extra, 0.0)
    return DatasetHandle("classification", spec, x, y.astype(np.float64),
                         {"train": (0, spec.n_train), "eval": (spec.n_train, n)},
                         OrderedDict([("means", means)]))


# ---------------------------------------------------------------------------
# dense segmentation
# ---------------------------------------------------------------------------

def _rasterize(rng, height, width, area):
    """Boolean mask of one rectangle or disc with roughly ``area`` pixels."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    if rng.random() < 0.5:
        aspect = rng.uniform(0.6, 1.6)
        h = float(np.clip(np.sqrt(area * aspect), 1.0, height))
        w = float(np.clip(area / h, 1.0, width))
        top = rng.uniform(0.0, height - h)
        left = rng.uniform(0.0, width - w)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    r = min(np.sqrt(area / np.pi), height / 2.0, width / 2.0)
    cy = rng.uniform(r, height - r)
    cx = rng.uniform(r, width - r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def gen_dense(spec=DenseSpec()):
    """Images holding one foreground shape on background class 0.

    Per-pixel features are class means (split across channel halves) plus
    Gaussian noise.  ``y_cls`` is the image's foreground class.
    """
    if spec.height < 4 or spec.width < 4 or spec.classes < 2:
        raise ConfigError("dense task needs a grid of at least 4x4 and classes >= 2")
    if spec.channels < 2:
        raise ConfigError("dense task needs at least 2 channels")
    if not 0.0 < spec.fg_fraction < 1.0:
        raise ConfigError("fg_fraction must lie in (0, 1)")
    _check_common(spec)
    r_means, r_labels, r_shapes, r_noise = _streams(spec.seed, 4)
    n = spec.n_train + spec.n_eval
    means = _split_means(r_means, spec.classes, spec.channels, spec.margin)
    y_cls = _balanced_labels(r_labels, n, spec.classes - 1, offset=1)
    area = spec.fg_fraction * spec.height * spec.width
    labels = np.zeros((n, spec.height, spec.width), dtype=np.int64)
    for i in range(n):
        labels[i][_rasterize(r_shapes, spec.height, spec.width, area)] = y_cls[i]
    x = means[labels] + spec.noise * r_noise.normal(size=labels.shape + (spec.channels,))
    return DatasetHandle("dense-seg", spec, x, labels.astype(np.float64),
                         {"train": (0, spec.n_train), "eval": (spec.n_train, n)},
                         OrderedDict([("y_cls", y_cls.astype(np.float64)), ("means", means)]))


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

def gen_saliency(spec=SaliencySpec()):
    """Gaussian-mixture saliency maps, fixations drawn from them, and
    per-pixel features that are noisy power transforms of the map."""
    if spec.height < 8 or spec.width < 8:
        raise ConfigError("saliency grid must be at least 8x8")
    if spec.gaussians < 1 or spec.fixations < 1 or spec.channels < 1:
        raise ConfigError("need at least one gaussian, fixation and channel")
    if not (np.isfinite(spec.noise) and spec.noise >= 0):
        raise ConfigError("noise must be nonnegative")
    if spec.n_train < 1 or spec.n_eval < 1:
        raise ConfigError("both splits need at least one sample")
    r_maps, r_fix, r_noise = _streams(spec.seed, 3)
    n, H, W = spec.n_train + spec.n_eval, spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    maps = np.empty((n, H, W))
    for i in range(n):
        m = np.zeros((H, W))
        weights = r_maps.uniform(0.5, 1.0, size=spec.gaussians)
        for g in range(spec.gaussians):
            cy, cx = r_maps.uniform(0.15 * H, 0.85 * H), r_maps.uniform(0.15 * W, 0.85 * W)
            s = r_maps.uniform(0.08, 0.2) * min(H, W)
            m += weights[g] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        maps[i] = m / m.sum()
    fix = np.empty((n, spec.fixations, 2))
    for i in range(n):
        flat = r_fix.choice(H * W, size=spec.fixations, p=maps[i].reshape(-1))
        fix[i, :, 0], fix[i, :, 1] = np.divmod(flat, W)
    peak = maps / maps.reshape(n, -1).max(axis=1)[:, None, None]
    gammas = np.linspace(0.5, 2.0, spec.channels)
    x = np.stack([peak ** g for g in gammas], axis=-1)
    x = x + spec.noise * r_noise.normal(size=x.shape)
    return DatasetHandle("saliency", spec, x, maps,
                         {"train": (0, spec.n_train), "eval": (spec.n_train, n)},
                         OrderedDict([("fixations", fix)]))


GENERATORS = {"classification": gen_classification, "dense-seg": gen_dense, "saliency": gen_saliency}


def generate(task, spec=None):
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return GENERATORS[task](spec if spec is not None else SPECS[task]())


# ---------------------------------------------------------------------------
# views and batching
# ---------------------------------------------------------------------------

@dataclass
class ViewPolicy:
    """Feature subsets visible to each model during pretraining.

    ``fill="zero"`` blanks hidden features; ``fill="noise"`` replaces them
    with standard normal noise.  With ``disjoint_subsets`` model k also
    pretrains only on the k-th contiguous chunk of the train split.
    """

    views: list
    dim: int
    fill: str = "zero"
    disjoint_subsets: bool = False

    def __post_init__(self):
        self.views = [np.asarray(sorted(set(int(i) for i in v)), dtype=np.int64) for v in self.views]
        covered = set().union(*(set(v.tolist()) for v in self.views)) if self.views else set()
        if covered != set(range(self.dim)):
            raise ConfigError("views must jointly cover every feature")
        if self.fill not in ("zero", "noise"):
            raise ConfigError(f"unknown view fill {self.fill!r}")

    def hidden(self, k):
        keep = np.zeros(self.dim, dtype=bool)
        keep[self.views[k]] = True
        return ~keep

    def apply(self, x, k, rng=None):
        hide = self.hidden(k)
        out = np.array(x, dtype=np.float64)
        if self.fill == "zero":
            out[..., hide] = 0.0
        else:
            if rng is None:
                raise ConfigError("noise fill needs a random generator")
            out[..., hide] = rng.normal(size=out[..., hide].shape)
        return out

    def subset(self, indices, k):
        if not self.disjoint_subsets:
            return indices
        return np.array_split(indices, len(self.views))[k]


def complementary_views(dim, k=2, overlap=0):
    """k contiguous windows (wrapping around) that tile ``dim`` features,
    each widened by ``overlap`` features."""
    if k < 2 or dim < k:
        raise ConfigError("need k >= 2 views and at least k features")
    starts = [round(i * dim / k) for i in range(k)] + [dim]
    views = []
    for i in range(k):
        width = starts[i + 1] - starts[i] + overlap
        views.append([(starts[i] + j) % dim for j in range(min(width, dim))])
    return views


def batches(handle, split, batch_size, epoch_seed):
    """Shuffled index batches covering the split once; the last may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = handle.indices(split)
    perm = np.random.default_rng(epoch_seed).permutation(idx)
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


# ---------------------------------------------------------------------------
# caching
# ---------------------------------------------------------------------------

def save_dataset(handle, path):
    header = OrderedDict([("task", handle.task)])
    for f in fields(handle.spec):
        header[f"spec.{f.name}"] = repr(getattr(handle.spec, f.name))
    for k, v in handle.arrays().items():
        header[f"shape.{k}"] = ",".join(str(s) for s in v.shape)
    return write_container(path, "dataset", header, handle.arrays())


def load_dataset(path):
    _, header, arrays = read_container(path, expect_kind="dataset")
    task = header.get("task")
    if task not in SPECS:
        raise DataError(f"{path}: unknown task {task!r}")
    cls = SPECS[task]
    kwargs = {}
    for f in fields(cls):
        raw = header.get(f"spec.{f.name}")
        if raw is not None:
            kwargs[f.name] = type(getattr(cls(), f.name))(raw)
    spec = cls(**kwargs)
    shaped = OrderedDict()
    for k, v in arrays.items():
        shape = tuple(int(s) for s in header[f"shape.{k}"].split(",") if s)
        shaped[k] = v.reshape(shape)
    n_train = spec.n_train
    n = shaped["x"].shape[0]
    extra = OrderedDict((k, v) for k, v in shaped.items() if k not in ("x", "y"))
    return DatasetHandle(task, spec, shaped["x"], shaped["y"],
                         {"train": (0, n_train), "eval": (n_train, n)}, extra)
