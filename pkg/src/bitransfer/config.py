"""Flat ``section.key=value`` run configuration with typed defaults."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import fields
from pathlib import Path

from .data import SPECS
from .errors import ConfigError


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    t = str(text).strip()
    return tuple(int(p) for p in t.split(",") if p.strip()) if t else ()


def _paths(text):
    t = str(text).strip()
    return tuple(p.strip() for p in t.split(",") if p.strip()) if t else ()


# key -> (default, parser); "" / -1 defaults mean "derive at run time"
SCHEMA = OrderedDict([
    ("run.seed", (0, int)),
    ("run.out", ("out", str)),
    ("run.models", (2, int)),
    ("data.task", ("classification", str)),
    ("data.cache", ("", str)),
    ("model.hidden", ((64, 64), _ints)),
    ("view.fill", ("", str)),
    ("view.overlap", (0, int)),
    ("view.disjoint", ("", str)),
    ("pretrain.epochs", (20, int)),
    ("pretrain.lr", (1e-3, float)),
    ("pretrain.batch_size", (128, int)),
    ("transfer.method", ("bi-kd", str)),
    ("transfer.epochs", (20, int)),
    ("transfer.lr", (1e-4, float)),
    ("transfer.weight_decay", (1e-5, float)),
    ("transfer.batch_size", (128, int)),
    ("transfer.temperature", (1.0, float)),
    ("transfer.partition_rule", ("", str)),
    ("transfer.kl_direction", ("forward", str)),
    ("transfer.tie_rule", ("auto", str)),
    ("transfer.inputs", ((), _paths)),
    ("analyze.before", ((), _paths)),
    ("analyze.after", ((), _paths)),
    ("analyze.cca_k", (0, int)),
    ("loss.lambda_ce", (5.0, float)),
    ("loss.lambda_dice", (5.0, float)),
    ("loss.lambda_cls_correct", (2.0, float)),
    ("loss.lambda_cls_incorrect", (0.1, float)),
    ("loss.dice_eps", (1.0, float)),
    ("loss.cc_floor", (1e-8, float)),
    ("emit.metrics", (True, _bool)),
    ("emit.cca", (True, _bool)),
    ("emit.cases", (True, _bool)),
])

# dataset generator fields, one key per field of every task's spec (seed excluded: run.seed drives it)
for _task, _cls in SPECS.items():
    for _f in fields(_cls):
        if _f.name != "seed":
            SCHEMA[f"data.{_task}.{_f.name}"] = (_f.default, type(_f.default))

PATH_KEYS = ("run.out", "data.cache", "transfer.inputs", "analyze.before", "analyze.after")


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Validated values for every known key; unknown keys are rejected."""

    def __init__(self, values=None, base_dir="."):
        self.values = OrderedDict((k, d) for k, (d, _) in SCHEMA.items())
        self.explicit = set()
        for k, v in (values or {}).items():
            self.set(k, v)
        self.base_dir = Path(base_dir)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        default, parse = SCHEMA[key]
        if isinstance(raw, str) or not isinstance(raw, type(default)):
            try:
                value = parse(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None
        else:
            value = raw
        self.values[key] = value
        self.explicit.add(key)

    def __getitem__(self, key):
        return self.values[key]

    def resolve_paths(self):
        """Make every path absolute; relative ones are taken from ``base_dir``."""
        for key in PATH_KEYS:
            v = self.values[key]
            if isinstance(v, tuple):
                self.values[key] = tuple(str((self.base_dir / p).resolve()) for p in v)
            elif v:
                self.values[key] = str((self.base_dir / v).resolve())
        return self

    def data_spec(self):
        task = self["data.task"]
        if task not in SPECS:
            raise ConfigError(f"unknown task {task!r}")
        cls = SPECS[task]
        kw = {f.name: self[f"data.{task}.{f.name}"] for f in fields(cls) if f.name != "seed"}
        return cls(seed=self["run.seed"], **kw)

    def text(self):
        return "".join(f"{k}={_format(v)}\n" for k, v in self.values.items())


def parse_lines(lines, source="<config>"):
    out = OrderedDict()
    for n, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#") or s.startswith(";"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{n}: expected key=value, got {s!r}")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config_section(text):
    """Lines of the ``[config]`` section of a manifest."""
    lines, inside = [], False
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            inside = s == "[config]"
            continue
        if inside:
            lines.append(line)
    return lines


def load_config(path=None, overrides=(), seed=None, out=None):
    """Read a config file (or a manifest's ``[config]`` section), apply
    ``--set`` overrides, then resolve paths against the file's directory."""
    values, base = OrderedDict(), Path(".")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        lines = _config_section(text) if "[config]" in text else text.splitlines()
        values = parse_lines(lines, str(p))
        base = p.parent
    cfg = RunConfig(values, base_dir=base)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
        if k.strip() in PATH_KEYS:
            # command-line paths are relative to the working directory
            cfg.values[k.strip()] = _absolute(cfg.values[k.strip()])
    if seed is not None:
        cfg.set("run.seed", int(seed))
    if out is not None:
        cfg.set("run.out", str(Path(out).resolve()))
    return cfg.resolve_paths()


def _absolute(v):
    if isinstance(v, tuple):
        return tuple(str(Path(p).resolve()) for p in v)
    return str(Path(v).resolve()) if v else v
