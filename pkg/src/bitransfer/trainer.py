"""Pretraining, bidirectional and K-model transfer, and the two KD baselines."""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from . import autodiff as ad
from .analysis import json_text
from .autodiff import Tensor
from .data import ViewPolicy, batches
from .errors import BitransferError, ConfigError, ContractError, NumericError, TrainingError
from .losses import KL_DIRECTIONS, LossWeights
from .partition import PartitionMask, classify_cases, orient
from .tasks import get_task

METHODS = ("bi-kd", "multi-kd", "vanilla-kd", "fixed-partition-kd", "solo-finetune")
RULES = ("confidence", "loss")
TIE_RULES = ("auto", "first", "last")
PRETRAIN_LR = 1e-3
TRANSFER_LR = 1e-4
LARGE_SCALE_LR = 1e-6
REPORT_SCHEMA = "bitransfer.report/1"


@dataclass
class TransferConfig:
    models: list = field(default_factory=list)
    method: str = "bi-kd"
    task: str = "classification"
    temperature: float = 1.0
    lr: float = TRANSFER_LR
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    partition_rule: str = ""
    kl_direction: str = "forward"
    tie_rule: str = "auto"
    pretrain_lr: float = PRETRAIN_LR
    pretrain_epochs: int = 20
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        task = get_task(self.task)
        if not self.partition_rule:
            self.partition_rule = task.default_rule
        if self.partition_rule not in RULES:
            raise ConfigError(f"unknown partition rule {self.partition_rule!r}")
        if self.partition_rule not in task.rules:
            raise ConfigError(f"task {self.task} supports partition rules {task.rules}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.tie_rule not in TIE_RULES:
            raise ConfigError(f"tie_rule must be one of {TIE_RULES}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weights.temperature != self.temperature:
            self.weights = replace(self.weights, temperature=self.temperature)

    def check_models(self):
        task = get_task(self.task)
        if self.method != "solo-finetune" and len(self.models) < 2:
            raise ConfigError(f"method {self.method} needs at least two models")
        if self.method in ("bi-kd", "vanilla-kd", "fixed-partition-kd") and len(self.models) != 2:
            raise ConfigError(f"method {self.method} takes exactly two models")
        for m in self.models:
            if m.arch.head != task.head:
                raise ConfigError(f"model {m.name} has head {m.arch.head!r}; task {self.task} needs {task.head!r}")


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


class AdamState:
    """Moments for one model's trainable parameters."""

    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.step = 0

    def update(self, model, lr, weight_decay):
        if model.frozen:
            raise ContractError(f"{model.name} is frozen")
        self.step += 1
        for k, t in model.params.items():
            if t.grad is None:
                raise ContractError(f"{model.name}.{k} has no gradient")
            if self.m[k].shape != t.data.shape:
                raise ContractError(f"{model.name}.{k}: moment shape mismatch")
            K.adam_update(t.data, np.ascontiguousarray(t.grad), self.m[k], self.v[k],
                          lr, self.beta1, self.beta2, self.eps, weight_decay, self.step)


@dataclass
class StepResult:
    losses: dict
    mask: PartitionMask | None = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _batch(task, data, idx):
    return data.x[idx], task.targets(data, idx)


def _scores(task, outs, rows, target, rule):
    """N x K matrix where larger means a better teacher."""
    if rule == "confidence":
        return np.stack([task.gt_scores(o, target) for o in outs], axis=1)
    return -np.stack([r.data for r in rows], axis=1)


def assign_teachers(scores, tie_rule="auto"):
    """Per-row argmax of the scores.

    ``auto`` hands ties to the last model when K == 2 and to the first model
    otherwise; ``first``/``last`` force either.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, k = scores.shape
    tie = tie_rule if tie_rule != "auto" else ("last" if k == 2 else "first")
    if tie == "first":
        pick = np.argmax(scores, axis=1)
    else:
        pick = k - 1 - np.argmax(scores[:, ::-1], axis=1)
    out = np.zeros((n, k), dtype=bool)
    out[np.arange(n), pick] = True
    return PartitionMask(out, "argmax", f"ties->{tie}")


def _mask(task, outs, rows, target, cfg, tie_rule=None):
    scores = _scores(task, outs, rows, target, cfg.partition_rule)
    mask = assign_teachers(scores, tie_rule or cfg.tie_rule)
    mask.rule = cfg.partition_rule
    return mask


def _apply(models, states, loss, tape, cfg):
    ad.backward(loss, tape)
    for m, s in zip(models, states):
        s.update(m, cfg.lr, cfg.weight_decay)


def _float(t):
    return float(t.data.reshape(-1)[0])


def _pair_distill(task, outs, mask, cfg):
    """sum_i sum_{j != i} mean_n(m_i * KL(student j <- teacher i))."""
    total = None
    n = outs[0].data.shape[0]
    for i in range(len(outs)):
        col = Tensor(mask.column(i))
        for j in range(len(outs)):
            if j == i:
                continue
            rows = task.distill_rows(outs[j], outs[i], cfg.temperature, cfg.kl_direction)
            term = ad.tsum(rows * col) / float(max(n, 1))
            total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------

def solo_step(model, state, batch, cfg, update=True):
    task = get_task(cfg.task)
    x, target = batch
    with ad.Tape() as tape:
        loss = ad.mean(task.task_loss_rows(task.forward(model, Tensor(x)), target, cfg.weights))
    if update:
        _apply([model], [state], loss, tape, cfg)
    return StepResult({"L_T": _float(loss), "total": _float(loss)})


def bi_kd_objective(task, z1, z2, target, cfg):
    """Loss terms for one batch given both models' outputs.

    Returns ({"L_T1", "L_T2", "L_dist", "total"} as tensors, mask).
    """
    r1 = task.task_loss_rows(z1, target, cfg.weights)
    r2 = task.task_loss_rows(z2, target, cfg.weights)
    lt1, lt2 = ad.mean(r1), ad.mean(r2)
    mask = _mask(task, [z1, z2], [r1, r2], target, cfg)
    n = z1.data.shape[0]
    kl21 = task.distill_rows(z2, z1, cfg.temperature, cfg.kl_direction)
    kl12 = task.distill_rows(z1, z2, cfg.temperature, cfg.kl_direction)
    dist = ad.tsum(kl21 * Tensor(mask.column(0)) + kl12 * Tensor(mask.column(1))) / float(n)
    return {"L_T1": lt1, "L_T2": lt2, "L_dist": dist, "total": lt1 + lt2 + dist}, mask


def bi_kd_step(m1, m2, states, batch, cfg, update=True):
    """L = L_T1 + L_T2 + mean(m1 * KL(2 <- 1) + m2 * KL(1 <- 2)); one Adam step each."""
    task = get_task(cfg.task)
    x, target = batch
    with ad.Tape() as tape:
        z1, z2 = task.forward(m1, Tensor(x)), task.forward(m2, Tensor(x))
        terms, mask = bi_kd_objective(task, z1, z2, target, cfg)
    if update:
        _apply([m1, m2], states, terms["total"], tape, cfg)
    return StepResult({k: _float(v) for k, v in terms.items()}, mask)


def multi_kd_step(models, states, batch, cfg, update=True):
    """K-model transfer: each sample's teacher distills into all other models."""
    if len(models) < 2:
        raise ConfigError("multi_kd_step needs K >= 2")
    task = get_task(cfg.task)
    x, target = batch
    with ad.Tape() as tape:
        outs = [task.forward(m, Tensor(x)) for m in models]
        rows = [task.task_loss_rows(o, target, cfg.weights) for o in outs]
        lts = [ad.mean(r) for r in rows]
        mask = _mask(task, outs, rows, target, cfg)
        dist = _pair_distill(task, outs, mask, cfg)
        total = dist
        for lt in lts:
            total = total + lt
    if update:
        _apply(models, states, total, tape, cfg)
    losses = {f"L_T{k + 1}": _float(lt) for k, lt in enumerate(lts)}
    losses.update({"L_dist": _float(dist), "total": _float(total)})
    return StepResult(losses, mask)


def vanilla_kd_step(student, teacher, state, batch, cfg, update=True):
    """Student learns from labels plus a frozen teacher on every sample."""
    if not teacher.frozen:
        raise ContractError(f"vanilla KD teacher {teacher.name} must be frozen")
    task = get_task(cfg.task)
    x, target = batch
    zt = task.forward(teacher, Tensor(x))
    with ad.Tape() as tape:
        zs = task.forward(student, Tensor(x))
        lt = ad.mean(task.task_loss_rows(zs, target, cfg.weights))
        kl = ad.mean(task.distill_rows(zs, zt, cfg.temperature, cfg.kl_direction))
        total = lt + kl
    if update:
        _apply([student], [state], total, tape, cfg)
    return StepResult({"L_T": _float(lt), "L_dist": _float(kl), "total": _float(total)})


def fixed_partition_kd_step(student, teacher, snapshot, state, batch, cfg, update=True):
    """KL-only transfer guided per sample by a frozen teacher or the frozen
    starting copy of the student, whichever the partition rule prefers
    (ties go to the snapshot)."""
    if not (teacher.frozen and snapshot.frozen):
        raise ContractError("fixed-partition guides must both be frozen")
    task = get_task(cfg.task)
    x, target = batch
    zt = task.forward(teacher, Tensor(x))
    zsnap = task.forward(snapshot, Tensor(x))
    rows = [task.task_loss_rows(z, target, cfg.weights) for z in (zt, zsnap)]
    mask = _mask(task, [zt, zsnap], rows, target, cfg, tie_rule="last")
    guide = _select_rows(zt, zsnap, mask.assignments[:, 0])
    with ad.Tape() as tape:
        zs = task.forward(student, Tensor(x))
        kl = ad.mean(task.distill_rows(zs, guide, cfg.temperature, cfg.kl_direction))
    if update:
        _apply([student], [state], kl, tape, cfg)
    return StepResult({"L_dist": _float(kl), "total": _float(kl)}, mask)


def _select_rows(a, b, pick_a):
    shape = (-1,) + (1,) * (a.data.ndim - 1)
    return Tensor(np.where(pick_a.reshape(shape), a.data, b.data))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _pretrain_batches(data, cfg, epoch, view, view_index):
    if view is None or not view.disjoint_subsets:
        yield from batches(data, "train", cfg.batch_size, epoch_seed(cfg.seed, epoch))
        return
    own = view.subset(data.indices("train"), view_index)
    perm = np.random.default_rng(epoch_seed(cfg.seed, epoch)).permutation(own)
    for start in range(0, perm.size, cfg.batch_size):
        yield perm[start:start + cfg.batch_size]


@dataclass
class PretrainResult:
    model: object
    metric: dict
    history: list


def _guard(fn, epoch, stage):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return fn()
    except NumericError as e:
        raise TrainingError(f"{stage} diverged in epoch {epoch}: {e}") from e


def pretrain(model, data, cfg, view=None, view_index=0):
    """Task-loss training on a copy of ``model``.

    With a :class:`ViewPolicy`, the model only ever sees its view: hidden
    inputs are zeroed or noised, and under zero fill the first-layer weights
    reading hidden inputs are cleared so they stay exactly zero.
    """
    task = get_task(data.task)
    if model.arch.head != task.head:
        raise ConfigError(f"model head {model.arch.head!r} cannot train on task {data.task}")
    m = model.copy().unfreeze()
    if cfg.pretrain_epochs == 0:
        return PretrainResult(m, task.evaluate(m, data), [])
    if view is not None:
        if not isinstance(view, ViewPolicy):
            raise ConfigError("view must be a ViewPolicy")
        if view.fill == "zero":
            w0 = next(iter(m.params.values()))
            w0.data[view.hidden(view_index)] = 0.0
    noise = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(view_index), 1]))
    state = AdamState(m)
    step_cfg = replace(cfg, lr=cfg.pretrain_lr, models=[])
    history = []
    for epoch in range(cfg.pretrain_epochs):
        total, count = 0.0, 0
        for idx in _pretrain_batches(data, cfg, epoch, view, view_index):
            if view is not None:
                x = view.apply(data.x[idx], view_index, noise)
            else:
                x = data.x[idx]
            res = _guard(lambda: solo_step(m, state, (x, task.targets(data, idx)), step_cfg), epoch + 1, "pretrain")
            total += res.losses["total"] * idx.size
            count += idx.size
        metric = task.evaluate(m, data)
        history.append({"epoch": epoch + 1, "loss": total / max(count, 1), **metric})
    return PretrainResult(m, {k: history[-1][k] for k in task.metric_names}, history)


# ---------------------------------------------------------------------------
# transfer loop
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    method: str
    task: str
    seed: int
    primary: str
    model_names: list
    baseline: list
    epochs: list = field(default_factory=list)
    final: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    cases_before: dict | None = None
    cases_after: dict | None = None
    mask_flips: int | None = None
    wall_clock: float = 0.0
    models: list = field(default_factory=list, repr=False)

    def body(self):
        return {
            "method": self.method,
            "task": self.task,
            "seed": self.seed,
            "primary": self.primary,
            "models": self.model_names,
            "baseline": self.baseline,
            "final": self.final,
            "delta": self.delta,
            "cases_before": self.cases_before,
            "cases_after": self.cases_after,
            "mask_flips": self.mask_flips,
            "epochs": self.epochs,
        }

    def digest(self):
        """Hash of the deterministic part of the report (no wall clock)."""
        return hashlib.sha256(json_text(REPORT_SCHEMA, self.body()).encode()).hexdigest()

    def to_json(self):
        return json_text(REPORT_SCHEMA, {**self.body(), "digest": self.digest(), "wall_clock": self.wall_clock})

    def primary_delta(self):
        return [d[self.primary] for d in self.delta]


def _case_stats(task, models, data):
    if task.name != "classification" or len(models) != 2:
        return None
    lo, hi = data.bounds("eval")
    y = data.y[lo:hi]
    z1, z2 = task.logits(models[0], data), task.logits(models[1], data)
    t, s = orient(z1, z2, y)
    return classify_cases(t, s, y).to_dict()


def _evaluate(task, models, data):
    return [task.evaluate(m, data) for m in models]


def run_transfer(cfg, data):
    """Run ``cfg.epochs`` epochs of the configured method on copies of ``cfg.models``.

    The inputs are never mutated; the trained copies are returned in
    ``report.models``.
    """
    cfg.check_models()
    task = get_task(cfg.task)
    if data.task != cfg.task:
        raise ConfigError(f"dataset task {data.task} does not match config task {cfg.task}")
    started = time.perf_counter()
    live = [m.copy().unfreeze() for m in cfg.models]
    baseline = _evaluate(task, live, data)
    report = TransferReport(cfg.method, cfg.task, int(cfg.seed), task.primary,
                            [m.name for m in cfg.models], baseline)
    report.cases_before = _case_stats(task, live, data)
    n_train = data.size("train")
    lo = data.bounds("train")[0]

    guides = []
    if cfg.method == "vanilla-kd":
        guides = [cfg.models[0].copy().freeze()]
        live[0] = guides[0]
    elif cfg.method == "fixed-partition-kd":
        # each model in turn is the student of the other, both guides frozen at the start
        guides = [m.copy().freeze() for m in cfg.models]
    trainable = [m for m in live if not m.frozen]
    states = {id(m): AdamState(m) for m in trainable}

    first_assign, last_assign = None, None
    for epoch in range(cfg.epochs):
        teacher_of = np.full(n_train, -1, dtype=np.int64)
        sums, count = {}, 0
        for idx in batches(data, "train", cfg.batch_size, epoch_seed(cfg.seed, epoch)):
            batch = _batch(task, data, idx)
            results = _guard(lambda: _dispatch(cfg, live, guides, states, batch), epoch + 1, "transfer")
            for key, res in results:
                for name, v in res.losses.items():
                    sums[key + name] = sums.get(key + name, 0.0) + v * idx.size
                if res.mask is not None and key == "":
                    teacher_of[idx - lo] = res.mask.teacher
            count += idx.size
        metrics = _evaluate(task, live, data)
        record = {
            "epoch": epoch + 1,
            "metrics": metrics,
            "losses": {k: v / max(count, 1) for k, v in sums.items()},
        }
        if (teacher_of >= 0).any():
            k = len(live)
            record["teacher_fraction"] = [float(np.mean(teacher_of == i)) for i in range(k)]
            if first_assign is None:
                first_assign = teacher_of.copy()
            last_assign = teacher_of
        report.epochs.append(record)

    report.models = live
    report.final = _evaluate(task, live, data)
    report.delta = [{k: f[k] - b[k] for k in b} for f, b in zip(report.final, baseline)]
    report.cases_after = _case_stats(task, live, data)
    if first_assign is not None:
        report.mask_flips = int(np.sum(first_assign != last_assign))
    report.wall_clock = time.perf_counter() - started
    return report


def _dispatch(cfg, live, guides, states, batch):
    method = cfg.method
    if method == "bi-kd":
        m1, m2 = live
        return [("", bi_kd_step(m1, m2, [states[id(m1)], states[id(m2)]], batch, cfg))]
    if method == "multi-kd":
        return [("", multi_kd_step(live, [states[id(m)] for m in live], batch, cfg))]
    if method == "solo-finetune":
        return [(f"m{k + 1}.", solo_step(m, states[id(m)], batch, cfg)) for k, m in enumerate(live)]
    if method == "vanilla-kd":
        return [("", vanilla_kd_step(live[1], guides[0], states[id(live[1])], batch, cfg))]
    if method == "fixed-partition-kd":
        out = []
        for k, student in enumerate(live):
            teacher, snapshot = guides[1 - k], guides[k]
            res = fixed_partition_kd_step(student, teacher, snapshot, states[id(student)], batch, cfg)
            out.append((f"m{k + 1}.", res))
        return out
    raise ConfigError(f"unknown method {method!r}")


__all__ = [
    "METHODS", "PRETRAIN_LR", "TRANSFER_LR", "LARGE_SCALE_LR", "TransferConfig", "AdamState",
    "StepResult", "PretrainResult", "TransferReport", "epoch_seed", "assign_teachers",
    "solo_step", "bi_kd_objective", "bi_kd_step", "multi_kd_step", "vanilla_kd_step", "fixed_partition_kd_step",
    "pretrain", "run_transfer", "BitransferError",
]
