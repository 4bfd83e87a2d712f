"""Command-line entry point: pretrain, transfer, analyze and experiment."""
from __future__ import annotations

import argparse
import hashlib
import sys
from copy import deepcopy
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import cca, csv_text, ensemble_eval, json_text, recovered
from .config import load_config
from .data import ViewPolicy, complementary_views, generate, load_dataset, save_dataset
from .errors import BitransferError, ConfigError, DataError
from .losses import LossWeights
from .models import ArchDescriptor, init_model, load_checkpoint, save_checkpoint
from .partition import classify_cases, orient
from .tasks import get_task
from .trainer import TransferConfig, pretrain, run_transfer

MANIFEST_SCHEMA = "bitransfer.manifest/1"
HEADS = {"classification": "class-logits", "dense-seg": "dense-logits", "saliency": "saliency-map"}


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _save(model, path):
    save_checkpoint(model, path)
    return Path(path)


def _out(cfg):
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def dataset(cfg):
    cache = cfg["data.cache"]
    spec = cfg.data_spec()
    if cache and Path(cache).is_file():
        handle = load_dataset(cache)
        if handle.spec != spec:
            raise ConfigError(f"dataset cache {cache} was built from a different spec")
        return handle
    handle = generate(cfg["data.task"], spec)
    if cache:
        save_dataset(handle, cache)
    return handle


def view_policy(cfg, handle):
    task = handle.task
    fill = cfg["view.fill"] or ("zero" if task == "classification" else "noise")
    disjoint = cfg["view.disjoint"]
    disjoint = (task == "dense-seg") if disjoint == "" else disjoint.lower() in ("1", "true", "yes", "on")
    views = complementary_views(handle.input_dim, cfg["run.models"], cfg["view.overlap"])
    return ViewPolicy(views, handle.input_dim, fill=fill, disjoint_subsets=disjoint)


def arch_for(cfg, handle):
    head = HEADS[handle.task]
    out_dim = 1 if head == "saliency-map" else handle.n_classes
    grid = () if handle.task == "classification" else tuple(handle.x.shape[1:3])
    return ArchDescriptor(handle.input_dim, tuple(cfg["model.hidden"]), out_dim, head, grid=grid)


def model_names(cfg):
    return [f"model{k + 1}" for k in range(cfg["run.models"])]


def init_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), 100 + k]).generate_state(1)[0])


def loss_weights(cfg):
    return LossWeights(
        temperature=cfg["transfer.temperature"],
        lambda_ce=cfg["loss.lambda_ce"], lambda_dice=cfg["loss.lambda_dice"],
        lambda_cls_correct=cfg["loss.lambda_cls_correct"],
        lambda_cls_incorrect=cfg["loss.lambda_cls_incorrect"],
        dice_eps=cfg["loss.dice_eps"], cc_floor=cfg["loss.cc_floor"],
    )


def transfer_config(cfg, models=()):
    return TransferConfig(
        models=list(models), method=cfg["transfer.method"], task=cfg["data.task"],
        temperature=cfg["transfer.temperature"], lr=cfg["transfer.lr"],
        weight_decay=cfg["transfer.weight_decay"], epochs=cfg["transfer.epochs"],
        batch_size=cfg["transfer.batch_size"], seed=cfg["run.seed"],
        partition_rule=cfg["transfer.partition_rule"], kl_direction=cfg["transfer.kl_direction"],
        tie_rule=cfg["transfer.tie_rule"], pretrain_lr=cfg["pretrain.lr"],
        pretrain_epochs=cfg["pretrain.epochs"], weights=loss_weights(cfg),
    )


def _load_models(paths, what):
    models = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"{what} checkpoint not found: {p}")
        models.append(load_checkpoint(p))
    return models


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg, handle=None):
    """Train ``run.models`` fresh models on their views; one checkpoint each."""
    handle = handle if handle is not None else dataset(cfg)
    out = _out(cfg)
    arch = arch_for(cfg, handle)
    view = view_policy(cfg, handle)
    tcfg = transfer_config(cfg)
    tcfg = replace(tcfg, batch_size=cfg["pretrain.batch_size"])
    task = get_task(handle.task)
    artifacts, rows = [], []
    for k, name in enumerate(model_names(cfg)):
        model = init_model(arch, init_seed(cfg["run.seed"], k), name)
        res = pretrain(model, handle, tcfg, view, k)
        artifacts.append(_save(res.model, out / f"{name}.ckpt"))
        for h in res.history:
            rows.append([name, h["epoch"], h["loss"]] + [h[m] for m in task.metric_names])
    if cfg["emit.metrics"]:
        header = ["model", "epoch", "loss", *task.metric_names]
        artifacts.append(_write(out / "metrics.csv", csv_text("bitransfer.pretrain-metrics/1", header, rows)))
    return [Path(a) for a in artifacts]


def _inputs(cfg):
    paths = cfg["transfer.inputs"] or tuple(str(Path(cfg["run.out"]) / f"{n}.ckpt") for n in model_names(cfg))
    return list(paths)


def cmd_transfer(cfg, handle=None):
    """Run the configured transfer method; writes the report and new checkpoints."""
    models = _load_models(_inputs(cfg), "input")
    tcfg = transfer_config(cfg, models)
    tcfg.check_models()
    handle = handle if handle is not None else dataset(cfg)
    out = _out(cfg)
    report = run_transfer(tcfg, handle)
    artifacts = [_write(out / "report.json", report.to_json())]
    for m in report.models:
        artifacts.append(_save(m, out / f"{m.name}.transfer.ckpt"))
    if cfg["emit.metrics"]:
        task = get_task(handle.task)
        header = ["epoch", "model", *task.metric_names]
        rows = []
        for b, name in zip(report.baseline, report.model_names):
            rows.append([0, name] + [b[k] for k in task.metric_names])
        for rec in report.epochs:
            for met, name in zip(rec["metrics"], report.model_names):
                rows.append([rec["epoch"], name] + [met[k] for k in task.metric_names])
        artifacts.append(_write(out / "metrics.csv", csv_text("bitransfer.transfer-metrics/1", header, rows)))
    return [Path(a) for a in artifacts], report


def _features(task, model, handle):
    lo, hi = handle.bounds("eval")
    return task.features(model, handle.x[lo:hi])


def _cases(task, models, handle):
    lo, hi = handle.bounds("eval")
    y = handle.y[lo:hi]
    z1, z2 = task.logits(models[0], handle), task.logits(models[1], handle)
    return classify_cases(*orient(z1, z2, y), y)


def cmd_analyze(cfg, handle=None):
    """Ensemble, recovered fraction, CCA and case statistics, before vs after."""
    before_paths = list(cfg["analyze.before"]) or _inputs(cfg)
    after_paths = list(cfg["analyze.after"]) or [
        str(Path(cfg["run.out"]) / f"{Path(p).name[:-len('.ckpt')]}.transfer.ckpt") for p in before_paths]
    before = _load_models(before_paths, "before")
    after = _load_models(after_paths, "after")
    if len(before) != len(after) or len(before) < 2:
        raise ConfigError("analyze needs matching before/after lists of at least two checkpoints")
    handle = handle if handle is not None else dataset(cfg)
    task = get_task(handle.task)
    for m in before + after:
        if m.arch.head != task.head:
            raise ConfigError(f"checkpoint {m.name} has head {m.arch.head!r}, task {handle.task} needs {task.head!r}")
    out = _out(cfg)
    prim = task.primary
    ens = ensemble_eval(before, handle)[prim]
    rows = []
    for b, a in zip(before, after):
        mb, ma = task.evaluate(b, handle)[prim], task.evaluate(a, handle)[prim]
        rec = recovered(mb, ma, ens) if ens != mb else float("nan")
        rows.append([a.name, prim, mb, ma, ens, rec])
    header = ["model", "metric", "before", "after", "ensemble", "recovered"]
    artifacts = [_write(out / "analysis.csv", csv_text("bitransfer.analysis/1", header, rows))]
    if cfg["emit.cca"]:
        k = cfg["analyze.cca_k"] or None
        cb = cca(_features(task, before[0], handle), _features(task, before[1], handle), k=k)
        ca = cca(_features(task, after[0], handle), _features(task, after[1], handle), k=k)
        payload = {"models": [before[0].name, before[1].name], "before": cb.to_dict(), "after": ca.to_dict()}
        artifacts.append(_write(out / "cca.json", json_text("bitransfer.cca/1", payload)))
    if cfg["emit.cases"] and task.name == "classification":
        crow = []
        for phase, ms in (("before", before), ("after", after)):
            fr = _cases(task, ms, handle).fractions()
            crow.append([phase] + [fr[c] for c in ("case1", "case2", "case3", "inverted")])
        header = ["phase", "case1", "case2", "case3", "inverted"]
        artifacts.append(_write(out / "cases.csv", csv_text("bitransfer.cases/1", header, crow)))
    return [Path(a) for a in artifacts]


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except BitransferError as e:
        raise type(e)(f"stage {name}: {e}") from e


def cmd_experiment(cfg):
    """generate -> pretrain x K -> transfer -> analyze, then a hashed manifest."""
    out = _out(cfg)
    stages, artifacts = [], []

    def sub(name, **extra):
        c = deepcopy(cfg)
        c.values["run.out"] = str(out / name)
        for k, v in extra.items():
            c.values[k] = v
        return c

    gen = sub("data", **{"data.cache": str(out / "data" / "dataset.bin")})
    Path(gen["data.cache"]).parent.mkdir(parents=True, exist_ok=True)
    cache = Path(gen["data.cache"])
    if cache.exists():
        cache.unlink()
    handle = _stage("generate", dataset, gen)
    stages.append("generate")
    artifacts.append(cache)

    pre = sub("pretrain")
    artifacts += _stage("pretrain", cmd_pretrain, pre, handle)
    stages += [f"pretrain:{n}" for n in model_names(cfg)]

    inputs = tuple(str(out / "pretrain" / f"{n}.ckpt") for n in model_names(cfg))
    tr = sub("transfer", **{"transfer.inputs": inputs})
    arts, report = _stage("transfer", cmd_transfer, tr, handle)
    artifacts += arts
    stages.append("transfer")

    afters = tuple(str(out / "transfer" / f"{n}.transfer.ckpt") for n in model_names(cfg))
    an = sub("analyze", **{"analyze.before": inputs, "analyze.after": afters})
    artifacts += _stage("analyze", cmd_analyze, an, handle)
    stages.append("analyze")

    lines = [f"# schema={MANIFEST_SCHEMA}", "[config]"]
    lines += cfg.text().splitlines()
    lines += ["[stages]", *stages, "[artifacts]"]
    for a in artifacts:
        rel = a.relative_to(out).as_posix()
        if a.name == "report.json":
            lines.append(f"{rel} body-sha256={report.digest()}")
        else:
            lines.append(f"{rel} sha256={sha256_file(a)}")
    manifest = _write(out / "manifest.txt", "\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    """Sections of a manifest as {section: [lines]}."""
    sections, current = {}, None
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1]
            sections[current] = []
        elif current is not None and s:
            sections[current].append(s)
    return sections


def manifest_hashes(path):
    out = {}
    for line in read_manifest(path).get("artifacts", []):
        rel, h = line.rsplit(" ", 1)
        out[rel] = h
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="bitransfer", description="bidirectional knowledge transfer lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "transfer", "analyze", "experiment"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value config file or a manifest")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (run.out)")
        sp.add_argument("--seed", type=int, help="run seed (run.seed)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, seed=args.seed, out=args.out)
        if args.command == "pretrain":
            paths = cmd_pretrain(cfg)
        elif args.command == "transfer":
            paths = cmd_transfer(cfg)[0]
        elif args.command == "analyze":
            paths = cmd_analyze(cfg)
        else:
            paths = [cmd_experiment(cfg)]
    except (ConfigError, DataError, FileNotFoundError) as e:
        print(f"bitransfer {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (BitransferError, OSError, ArithmeticError) as e:
        print(f"bitransfer {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
