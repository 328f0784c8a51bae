"""Full-batch training loop with warmup-gated invariance penalties."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .distmatch import SortedMaBuffer
from .errors import InvalidArgument, NumericAbort
from .penalties import (BASELINE_TERMS, TRACE_NAMES, IdmConfig, PenaltyBreakdown,
                        domain_risks, erm_terms, idm_objective, trace_penalties)

PENALTY_MODES = ("erm", "irm", "vrex", "iga", "fishr", "idm")
ALIGNING_MODES = ("irm", "vrex", "iga", "fishr", "idm")


@dataclass
class TrainConfig:
    hidden_dim: int = nn.DEFAULT_HIDDEN
    lr: float = 4.49e-4
    weight_decay: float = 3.4e-4
    steps: int = 501
    warmup_g: int = 154
    warmup_r: int = 0
    lambda1: float = 2888595.180638
    lambda2: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    seed: int = 0
    penalty_mode: str = "idm"
    batch_size: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rescale: bool = True
    reset_optimizer: bool = False
    record_traces: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps: must be >= 1")
        for name in ("warmup_g", "warmup_r"):
            if not 0 <= getattr(self, name) <= self.steps:
                raise InvalidArgument(f"{name}: must lie in [0, steps]")
        for name in ("gamma1", "gamma2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidArgument(f"{name}: must lie in [0, 1)")
        for name in ("lambda1", "lambda2", "weight_decay"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name}: must be >= 0")
        if not self.lr > 0:
            raise InvalidArgument("lr: must be positive")
        if self.hidden_dim < 1:
            raise InvalidArgument("hidden_dim: must be >= 1")
        if self.penalty_mode not in PENALTY_MODES:
            raise InvalidArgument(f"penalty_mode: must be one of {PENALTY_MODES}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgument("batch_size: must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise InvalidArgument(f"{unknown[0]}: unknown config key")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    step: int
    train_acc: float
    test_acc: float | None = None
    gray_acc: float | None = None
    domain_risks: list = field(default_factory=list)
    breakdown: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    evals: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: nn.MlpModel, dataset, chunk: int = 8192) -> tuple:
    """(accuracy, mean cross-entropy) of ``model`` on ``dataset``."""
    if dataset.features.shape[1] != model.input_dim:
        raise InvalidArgument(f"dataset has {dataset.features.shape[1]} features, "
                              f"model expects {model.input_dim}")
    correct, loss = 0, 0.0
    n = len(dataset)
    for start in range(0, n, chunk):
        cache = nn.forward(model, dataset.features[start:start + chunk],
                           dataset.labels[start:start + chunk])
        correct += int(np.sum(np.argmax(cache.logits, axis=1) == cache.y))
        loss += float(np.sum(cache.losses))
    return correct / n, loss / n


def _penalty_step(cfg: TrainConfig, step: int, caches, buffers):
    """Compose this step's objective; returns (breakdown, upstream, buffers')."""
    mode = cfg.penalty_mode
    if mode == "idm":
        use_g = step >= cfg.warmup_g and cfg.lambda1 > 0
        use_r = step >= cfg.warmup_r and cfg.lambda2 > 0
        icfg = IdmConfig(cfg.lambda1 if use_g else 0.0, cfg.lambda2 if use_r else 0.0,
                         cfg.gamma1, cfg.gamma2, use_g, use_r, cfg.rescale)
        bd, up, gbuf, rbuf = idm_objective(caches, buffers[0], buffers[1], icfg)
        return bd, up, (gbuf, rbuf)
    l_e, up = erm_terms(caches)
    if mode == "erm":
        return PenaltyBreakdown(l_e, total=l_e), up, buffers
    # baselines: weight 1 during warmup, lambda1 afterwards
    weight = cfg.lambda1 if step >= cfg.warmup_g else 1.0
    value, pen_up = BASELINE_TERMS[mode](caches)
    up = up.add(pen_up.scaled(weight))
    scale = 1.0 / weight if cfg.rescale and weight > 1.0 else 1.0
    if scale != 1.0:
        up = up.scaled(scale)
    total = l_e + weight * value
    return PenaltyBreakdown(l_e, value, 0.0, weight, 0.0, total, scale), up, buffers


def _batches(cfg: TrainConfig, domains, rng):
    if cfg.batch_size is None:
        return [(d.features, d.labels) for d in domains]
    out = []
    for d in domains:
        idx = rng.choice(len(d), size=min(cfg.batch_size, len(d)), replace=False)
        out.append((d.features[idx], d.labels[idx]))
    return out


def train(cfg: TrainConfig, train_domains, eval_sets: dict | None = None,
          model: nn.MlpModel | None = None) -> tuple:
    """Run the configured objective; returns ``(final_model, history)``.

    Each record describes the model *before* that step's update, mirroring
    the usual full-batch Colored MNIST loop.
    """
    eval_sets = eval_sets or {}
    if not train_domains:
        raise InvalidArgument("need at least one training domain")
    if cfg.penalty_mode in ALIGNING_MODES and len(train_domains) < 2:
        raise InvalidArgument(f"penalty_mode {cfg.penalty_mode} needs >= 2 training domains")
    dim = train_domains[0].features.shape[1]
    num_classes = 2
    if model is None:
        model = nn.init_mlp(dim, cfg.hidden_dim, num_classes, seed=cfg.seed)
    state = nn.AdamState.zeros(model)
    rng = np.random.default_rng(cfg.seed + 1)
    buffers = (None, None)
    history = []
    for step in range(cfg.steps):
        if cfg.reset_optimizer and step == cfg.warmup_g and step > 0:
            # the penalty switch-on rescales gradients abruptly; stale moments stall Adam
            state = nn.AdamState.zeros(model)
        caches = [nn.forward(model, x, y) for x, y in _batches(cfg, train_domains, rng)]
        risks = domain_risks(caches)
        if not all(np.isfinite(c.reps).all() and np.isfinite(c.logits).all() for c in caches):
            # the penalties would reject NaN inputs; report the divergence instead
            raise NumericAbort(f"non-finite forward pass at step {step}",
                               {"step": step, "domain_risks": _finite_list(risks)})
        breakdown, upstream, buffers = _penalty_step(cfg, step, caches, buffers)
        if cfg.record_traces and len(caches) >= 2:
            breakdown.traces = trace_penalties(caches)
        if not (math.isfinite(breakdown.total) and np.all(np.isfinite(risks))):
            raise NumericAbort(f"non-finite objective at step {step}",
                               {"step": step, "breakdown": _finite_dict(breakdown.as_dict()),
                                "domain_risks": _finite_list(risks)})
        logits = np.vstack([c.logits for c in caches])
        labels = np.concatenate([c.y for c in caches])
        record = MetricsRecord(step, accuracy_from_logits(logits, labels),
                               domain_risks=[float(r) for r in risks],
                               breakdown=breakdown.as_dict())
        for name, ds in eval_sets.items():
            acc, risk = evaluate(model, ds)
            record.evals[name] = {"acc": acc, "risk": risk}
            if name == "test":
                record.test_acc = acc
            elif name == "gray":
                record.gray_acc = acc
        history.append(record)

        grads = upstream.backward(model, caches)
        model, state = nn.adam_step(model, grads, state, cfg.lr, cfg.beta1, cfg.beta2,
                                    cfg.eps, cfg.weight_decay)
    return model, history


def _finite_list(values) -> list:
    return [float(v) if math.isfinite(v) else None for v in values]


def _finite_dict(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float):
            out[k] = v if math.isfinite(v) else None
        elif isinstance(v, dict):
            out[k] = _finite_dict(v)
        else:
            out[k] = v
    return out


def select_model(history) -> int:
    """Index maximizing min(train_acc, test_acc); earliest on ties."""
    if not history:
        raise InvalidArgument("empty history")
    best, best_val = 0, -math.inf
    for i, rec in enumerate(history):
        if rec.test_acc is None:
            raise InvalidArgument(f"record {i} has no test accuracy")
        val = min(rec.train_acc, rec.test_acc)
        if val > best_val:
            best, best_val = i, val
    return best


def select_model_by_risk(history) -> int:
    """Index minimizing max(train risk, test risk); the risk reading of the rule."""
    best, best_val = 0, math.inf
    for i, rec in enumerate(history):
        test = rec.evals.get("test", {}).get("risk")
        if test is None:
            raise InvalidArgument(f"record {i} has no test risk")
        val = max(float(np.mean(rec.domain_risks)), test)
        if val < best_val:
            best, best_val = i, val
    return best


@dataclass
class TraceTable:
    steps: list
    series: dict
    flagged: list
    start_step: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = list(self.series)
        writer.writerow(["step"] + names)
        for k, step in enumerate(self.steps):
            writer.writerow([step] + [repr(self.series[n][k]) for n in names])
        return buf.getvalue()


def penalty_traces(history, warmup: int = 0, names=TRACE_NAMES) -> TraceTable:
    """Each trace divided by its value at the first step >= ``warmup``.

    A series whose reference value is zero is left unnormalized and listed in
    ``flagged``.
    """
    if not history or not history[0].breakdown.get("traces"):
        raise InvalidArgument("history has no recorded traces")
    start = next((i for i, r in enumerate(history) if r.step >= warmup), None)
    if start is None:
        raise InvalidArgument(f"no record at or after step {warmup}")
    steps = [r.step for r in history[start:]]
    series, flagged = {}, []
    for name in names:
        raw = [r.breakdown["traces"][name] for r in history[start:]]
        ref = raw[0]
        if ref == 0 or not math.isfinite(ref):
            series[name] = raw
            flagged.append(name)
        else:
            series[name] = [v / ref for v in raw]
    return TraceTable(steps, series, flagged, history[start].step)


def write_metrics(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def summary_rows(history) -> list:
    sel = select_model(history)
    rows = []
    for label, idx in (("final", len(history) - 1), ("selected", sel)):
        rec = history[idx]
        rows.append({"row": label, "step": rec.step, "train_acc": rec.train_acc,
                     "test_acc": rec.test_acc, "gray_acc": rec.gray_acc})
    if all("test" in r.evals for r in history):
        rec = history[select_model_by_risk(history)]
        rows.append({"row": "selected_by_risk", "step": rec.step, "train_acc": rec.train_acc,
                     "test_acc": rec.test_acc, "gray_acc": rec.gray_acc})
    return rows


def write_summary(history, path) -> list:
    rows = summary_rows(history)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
