"""Invariance penalties: the IDM objective plus IRMv1, V-REx, IGA and Fishr.

Each ``*_penalty`` returns the scalar; the matching ``*_terms`` function also
returns upstream gradients in the form ``nn.backward`` consumes.  Gradient
based penalties work on classifier-layer gradients only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .distmatch import SortedMaBuffer, pdm_penalty, pdm_value
from .errors import InvalidArgument

TRACE_NAMES = ("irm", "vrex", "iga", "fishr", "idm")


def _centered(rows: np.ndarray) -> np.ndarray:
    """rows minus their mean over axis 0; identical rows give exact zeros."""
    offsets = rows - rows[0]
    return offsets - offsets.mean(axis=0)


@dataclass
class Upstream:
    """Per-domain upstream gradients for ``nn.backward``."""

    loss_grads: list
    rep_grads: list | None = None
    clsgrad_grads: list | None = None
    logit_grads: list | None = None

    def scaled(self, factor: float) -> "Upstream":
        def mul(items):
            if items is None:
                return None
            return [None if g is None else factor * g for g in items]
        return Upstream(mul(self.loss_grads), mul(self.rep_grads),
                        mul(self.clsgrad_grads), mul(self.logit_grads))

    def add(self, other: "Upstream") -> "Upstream":
        def plus(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return [x if y is None else (y if x is None else x + y) for x, y in zip(a, b)]
        return Upstream(plus(self.loss_grads, other.loss_grads),
                        plus(self.rep_grads, other.rep_grads),
                        plus(self.clsgrad_grads, other.clsgrad_grads),
                        plus(self.logit_grads, other.logit_grads))

    def backward(self, model, caches):
        return nn.backward(model, caches, self.loss_grads, self.rep_grads,
                           self.clsgrad_grads, self.logit_grads)


@dataclass
class PenaltyBreakdown:
    l_e: float
    l_g: float = 0.0
    l_r: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    total: float = 0.0
    scale: float = 1.0
    traces: dict = field(default_factory=dict)

    @property
    def scaled_total(self) -> float:
        return self.scale * self.total

    def as_dict(self) -> dict:
        out = asdict(self)
        out["scaled_total"] = self.scaled_total
        return out


@dataclass(frozen=True)
class IdmConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    apply_g: bool = True
    apply_r: bool = True
    rescale: bool = True


def domain_risks(caches) -> np.ndarray:
    return np.array([float(np.mean(c.losses)) for c in caches])


def erm_terms(caches) -> tuple:
    """Mean of the per-domain empirical risks and its per-sample upstream."""
    m = len(caches)
    risk = float(np.mean(domain_risks(caches)))
    grads = [np.full(c.batch_size, 1.0 / (m * c.batch_size)) for c in caches]
    return risk, Upstream(grads)


def idm_objective(caches, grad_buffer: SortedMaBuffer | None, rep_buffer: SortedMaBuffer | None,
                  cfg: IdmConfig) -> tuple:
    """L_E + lambda1 * PDM(per-sample classifier grads) + lambda2 * PDM(representations).

    Returns ``(breakdown, upstream, grad_buffer', rep_buffer')``.  When
    ``cfg.rescale`` is set and ``lambda1 > 1`` the upstream gradients belong to
    ``total / lambda1``; the breakdown's ``total`` is always unscaled.
    """
    if not caches:
        raise InvalidArgument("need at least one domain")
    m = len(caches)
    if m < 2 and ((cfg.apply_g and cfg.lambda1 != 0) or (cfg.apply_r and cfg.lambda2 != 0)):
        raise InvalidArgument("distribution matching needs at least two domains")
    l_e, upstream = erm_terms(caches)
    l_g = l_r = 0.0
    if cfg.apply_g:
        per_sample = [nn.per_sample_classifier_grads(c) for c in caches]
        l_g, g_grads, grad_buffer = pdm_penalty(per_sample, grad_buffer, cfg.gamma1)
        upstream.clsgrad_grads = [cfg.lambda1 * g for g in g_grads]
    if cfg.apply_r:
        l_r, r_grads, rep_buffer = pdm_penalty([c.reps for c in caches], rep_buffer, cfg.gamma2)
        upstream.rep_grads = [cfg.lambda2 * g for g in r_grads]
    total = l_e + cfg.lambda1 * l_g + cfg.lambda2 * l_r
    scale = 1.0 / cfg.lambda1 if cfg.rescale and cfg.lambda1 > 1.0 else 1.0
    if scale != 1.0:
        upstream = upstream.scaled(scale)
    breakdown = PenaltyBreakdown(l_e, l_g, l_r, cfg.lambda1, cfg.lambda2, total, scale)
    return breakdown, upstream, grad_buffer, rep_buffer


# ---------------------------------------------------------------------------
# baselines


def irmv1_terms(caches) -> tuple:
    """(1/m) sum_d (d/ds mean CE(s * logits_d, y_d) at s = 1)^2.

    The derivative in s is mean_j <p_j - onehot(y_j), z_j>.
    """
    m = len(caches)
    value = 0.0
    logit_grads = []
    for c in caches:
        delta = c.deltas()
        z = c.logits
        p = c.probs
        per = np.sum(delta * z, axis=1)
        g = float(np.mean(per))
        value += g * g / m
        # d/dz_k of <p - e, z> = delta_k + p_k (z_k - <p, z>)
        dper = delta + p * (z - np.sum(p * z, axis=1, keepdims=True))
        logit_grads.append((2.0 * g / (m * c.batch_size)) * dper)
    return value, Upstream([None] * m, logit_grads=logit_grads)


def irmv1_penalty(caches) -> float:
    return irmv1_terms(caches)[0]


def vrex_penalty(domain_risks) -> float:
    r = np.asarray(domain_risks, dtype=np.float64)
    if r.size < 1:
        raise InvalidArgument("need at least one domain risk")
    return float(np.mean(_centered(r) ** 2))


def vrex_terms(caches) -> tuple:
    risks = domain_risks(caches)
    m = len(caches)
    coef = 2.0 / m * _centered(risks)
    grads = [np.full(c.batch_size, coef[i] / c.batch_size) for i, c in enumerate(caches)]
    return vrex_penalty(risks), Upstream(grads)


def iga_penalty(domain_mean_grads) -> float:
    g = np.asarray(domain_mean_grads, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidArgument("expected m vectors of equal length")
    return float(np.sum(_centered(g) ** 2))


def _per_sample(caches, per_sample):
    if per_sample is None:
        return [nn.per_sample_classifier_grads(c) for c in caches]
    return per_sample


def iga_terms(caches, per_sample=None) -> tuple:
    per_sample = _per_sample(caches, per_sample)
    means = np.stack([g.mean(axis=0) for g in per_sample])
    centered = _centered(means)
    # the cross-domain mean's contribution cancels
    ups = [np.broadcast_to(2.0 * centered[i] / g.shape[0], g.shape).copy()
           for i, g in enumerate(per_sample)]
    return float(np.sum(centered ** 2)), Upstream([None] * len(caches), clsgrad_grads=ups)


def fishr_penalty(per_domain_grad_variances) -> float:
    v = np.asarray(per_domain_grad_variances, dtype=np.float64)
    if v.ndim != 2:
        raise InvalidArgument("expected m vectors of equal length")
    return float(np.sum(_centered(v) ** 2))


def fishr_terms(caches, per_sample=None) -> tuple:
    per_sample = _per_sample(caches, per_sample)
    centered = [g - g.mean(axis=0) for g in per_sample]
    variances = np.stack([np.mean(c * c, axis=0) for c in centered])
    dv = _centered(variances)
    ups = [(4.0 / g.shape[0]) * dv[i] * centered[i] for i, g in enumerate(per_sample)]
    return float(np.sum(dv ** 2)), Upstream([None] * len(caches), clsgrad_grads=ups)


def idm_trace_penalty(caches, per_sample=None) -> float:
    """Stateless PDM of per-sample classifier gradients (fresh buffer, no averaging)."""
    per_sample = _per_sample(caches, per_sample)
    return pdm_value(per_sample)


BASELINE_TERMS = {"irm": irmv1_terms, "vrex": vrex_terms, "iga": iga_terms,
                  "fishr": fishr_terms}


def trace_penalties(caches) -> dict:
    """Evaluation-only values of every penalty on the given caches."""
    per_sample = _per_sample(caches, None)
    return {
        "irm": irmv1_penalty(caches),
        "vrex": vrex_penalty(domain_risks(caches)),
        "iga": iga_terms(caches, per_sample)[0],
        "fishr": fishr_terms(caches, per_sample)[0],
        "idm": idm_trace_penalty(caches, per_sample),
    }
