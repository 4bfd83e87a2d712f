"""Small trainable MLPs: a classifier and a shared-weight per-pixel model."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container
from .errors import ConfigError, DataError, DimensionError

HEADS = ("class-logits", "dense-logits", "saliency-map")
MAX_HIDDEN_LAYERS = 3
MAX_WIDTH = 256


@dataclass(frozen=True)
class ArchDescriptor:
    input_dim: int
    hidden: tuple = (64,)
    output_dim: int = 2
    head: str = "class-logits"
    activation: str = "relu"
    grid: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        self.validate()

    def validate(self):
        widths = (self.input_dim, *self.hidden, self.output_dim, *self.grid)
        if any(int(w) <= 0 for w in widths):
            raise ConfigError(f"all widths must be positive: {self}")
        if len(self.hidden) > MAX_HIDDEN_LAYERS or any(h > MAX_WIDTH for h in self.hidden):
            raise ConfigError(f"at most {MAX_HIDDEN_LAYERS} hidden layers of width <= {MAX_WIDTH}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.head == "saliency-map" and self.output_dim != 1:
            raise ConfigError("saliency head must have output_dim 1")
        if self.grid and len(self.grid) != 2:
            raise ConfigError("grid must be (H, W)")

    @property
    def layer_shapes(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self):
        return sum(a * b + b for a, b in self.layer_shapes)

    def param_shapes(self):
        shapes = OrderedDict()
        for i, (a, b) in enumerate(self.layer_shapes):
            prefix = "head" if i == len(self.hidden) else f"layer{i}"
            shapes[f"{prefix}.weight"] = (a, b)
            shapes[f"{prefix}.bias"] = (b,)
        return shapes

    def to_header(self):
        return OrderedDict([
            ("arch.input_dim", str(self.input_dim)),
            ("arch.hidden", ",".join(str(h) for h in self.hidden)),
            ("arch.output_dim", str(self.output_dim)),
            ("arch.head", self.head),
            ("arch.activation", self.activation),
            ("arch.grid", ",".join(str(g) for g in self.grid)),
        ])

    @classmethod
    def from_header(cls, header):
        def ints(text):
            return tuple(int(t) for t in text.split(",") if t)
        try:
            return cls(
                input_dim=int(header["arch.input_dim"]),
                hidden=ints(header["arch.hidden"]),
                output_dim=int(header["arch.output_dim"]),
                head=header["arch.head"],
                activation=header["arch.activation"],
                grid=ints(header.get("arch.grid", "")),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad architecture header: {exc}") from None


@dataclass
class ModelBundle:
    name: str
    arch: ArchDescriptor
    params: OrderedDict = field(default_factory=OrderedDict)
    feature_tap: str = ""
    frozen: bool = False

    def __post_init__(self):
        if not self.feature_tap:
            n = len(self.arch.hidden)
            self.feature_tap = f"layer{n - 1}" if n else "input"

    @property
    def n_params(self):
        return sum(t.size for t in self.params.values())

    def copy(self, name=None):
        params = OrderedDict((k, Tensor(v.data, requires_grad=v.requires_grad))
                             for k, v in self.params.items())
        return ModelBundle(name or self.name, self.arch, params, self.feature_tap, self.frozen)

    def freeze(self):
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self):
        self.frozen = False
        for t in self.params.values():
            t.requires_grad = True
        return self

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def digest(self):
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(arch, seed, name="model"):
    """Glorot-uniform weights, zero biases; a pure function of (arch, seed)."""
    if not isinstance(arch, ArchDescriptor):
        raise ConfigError("init_model needs an ArchDescriptor")
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for pname, shape in arch.param_shapes().items():
        if pname.endswith(".weight"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[pname] = Tensor(arr, requires_grad=True)
    return ModelBundle(name, arch, params)


def _mlp(m, h):
    """Returns (output, features) for a 2-D input."""
    n = h.data.shape[0]
    feats = h
    for i in range(len(m.arch.hidden)):
        w, b = m.params[f"layer{i}.weight"], m.params[f"layer{i}.bias"]
        h = ad.relu(h @ w + ad.expand_rows(b, n))
        feats = h
    out = h @ m.params["head.weight"] + ad.expand_rows(m.params["head.bias"], n)
    return out, feats


def forward_classifier(m, x):
    """Logits and tap features (activations of the last hidden layer)."""
    if m.arch.head != "class-logits":
        raise ConfigError(f"{m.name}: head {m.arch.head!r} is not a classifier")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != m.arch.input_dim:
        raise DimensionError(f"{m.name}: input {x.shape} does not match input_dim {m.arch.input_dim}")
    return _mlp(m, x)


def forward_dense(m, x, return_features=False):
    """Per-pixel MLP over an N x H x W x D image batch.

    dense-logits heads return N x H x W x C logits; saliency heads return
    an N x H x W map squashed through a sigmoid.
    """
    if m.arch.head == "class-logits":
        raise ConfigError(f"{m.name}: classifier head cannot produce dense output")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4 or x.data.shape[3] != m.arch.input_dim:
        raise DimensionError(f"{m.name}: input {x.shape} is not N x H x W x {m.arch.input_dim}")
    n, h, w, d = x.data.shape
    out, feats = _mlp(m, ad.reshape(x, (n * h * w, d)))
    if m.arch.head == "saliency-map":
        out = ad.reshape(ad.sigmoid(out), (n, h, w))
    else:
        out = ad.reshape(out, (n, h, w, m.arch.output_dim))
    if return_features:
        return out, feats
    return out


def save_checkpoint(m, path):
    header = OrderedDict([("name", m.name), ("feature_tap", m.feature_tap),
                          ("frozen", "1" if m.frozen else "0")])
    header.update(m.arch.to_header())
    return write_container(path, "checkpoint", header, m.arrays())


def load_checkpoint(path):
    _, header, arrays = read_container(path, expect_kind="checkpoint")
    arch = ArchDescriptor.from_header(header)
    shapes = arch.param_shapes()
    if list(arrays) != list(shapes):
        raise DataError(f"{path}: parameter names {list(arrays)} do not match architecture")
    frozen = header.get("frozen", "0") == "1"
    params = OrderedDict()
    for pname, shape in shapes.items():
        flat = arrays[pname]
        if flat.size != int(np.prod(shape)):
            raise DataError(f"{path}: {pname} has {flat.size} values, expected shape {shape}")
        params[pname] = Tensor(flat.reshape(shape), requires_grad=not frozen)
    return ModelBundle(header.get("name", "model"), arch, params,
                       header.get("feature_tap", ""), frozen)
