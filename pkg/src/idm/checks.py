"""Randomized property checks behind ``idm verify-theory``.

Every check returns a :class:`CheckResult` carrying the worst observed margin
(positive means the property held with room to spare) and, on failure, the
first counterexample found.  The instance counts default to the acceptance
levels; callers may shrink them for a quick smoke run.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .distmatch import (KdeSpec, SortedMaBuffer, brute_force_optimal_matching,
                        kde_divergence_numeric, matching_bound, sorted_matching_value)
from .errors import InvalidArgument
from .infotheory import (indistinguishable_covariances, pinsker_chain, predictor_gap,
                         random_joint, verify_shift_decomposition, xor_counterexample)
from .penalties import IdmConfig, idm_objective

FAULTS = ("sorted-matching",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    instances: int
    margin: float
    tolerance: float
    seconds: float = 0.0
    counterexample: dict | None = None

    def as_dict(self) -> dict:
        out = asdict(self)
        if not math.isfinite(out["margin"]):
            out["margin"] = None
        return out


class _Tracker:
    """Keeps the worst margin and the first violating instance."""

    def __init__(self, name: str, tolerance: float):
        self.name, self.tolerance = name, tolerance
        self.count, self.worst, self.bad = 0, math.inf, None
        self.start = time.perf_counter()

    def observe(self, margin: float, instance) -> None:
        self.count += 1
        if not margin >= self.worst:
            self.worst = margin
        if not margin >= 0 and self.bad is None:
            self.bad = instance() if callable(instance) else instance

    def result(self) -> CheckResult:
        return CheckResult(self.name, self.bad is None and self.count > 0, self.count,
                           self.worst, self.tolerance, time.perf_counter() - self.start,
                           self.bad)


def check_shift_decomposition(rng, count: int = 1000, tol: float = 1e-12) -> CheckResult:
    t = _Tracker("shift_decomposition", tol)
    for _ in range(count):
        cards = tuple(int(c) for c in rng.integers(2, 5, 3))
        joint = random_joint(("X", "Y", "D"), cards, rng, sparsity=rng.choice([0.0, 0.3]))
        res = verify_shift_decomposition(joint)
        t.observe(tol - abs(res), lambda: {"joint": joint.to_json(), "residual": res})
    return t.result()


def check_predictor_gap(rng, count: int = 1000, tol: float = 1e-12) -> CheckResult:
    """Random predictors obey the lower bound; the Bayes predictor attains it."""
    t = _Tracker("predictor_gap_bound", tol)
    for _ in range(count):
        cards = tuple(int(c) for c in rng.integers(2, 5, 3))
        joint = random_joint(("X", "Y", "D"), cards, rng)
        q = rng.exponential(size=cards[:2])
        q /= q.sum(axis=1, keepdims=True)
        lhs, rhs = predictor_gap(joint, q)
        t.observe(lhs - rhs + tol, lambda: {"joint": joint.to_json(), "q": q.tolist(),
                                           "lhs": lhs, "rhs": rhs})
        p_xy = joint.marginal(["X", "Y"])
        bayes = p_xy / p_xy.sum(axis=1, keepdims=True)
        lhs, rhs = predictor_gap(joint, bayes)
        t.observe(tol - abs(lhs - rhs), lambda: {"joint": joint.to_json(), "equality_case": True,
                                                "lhs": lhs, "rhs": rhs})
    return t.result()


def check_pinsker(rng, count: int = 1000, tol: float = 1e-12) -> CheckResult:
    t = _Tracker("pinsker_chain", tol)
    for _ in range(count):
        k = int(rng.integers(2, 9))
        p, q = rng.exponential(size=k), rng.exponential(size=k)
        p, q = p / p.sum(), q / q.sum()
        tv, bound = pinsker_chain(p, q)
        t.observe(bound - tv + tol, lambda: {"p": p.tolist(), "q": q.tolist(),
                                            "tv": tv, "bound": bound})
    return t.result()


def check_xor(m_values=range(2, 11), tol: float = 1e-12) -> CheckResult:
    t = _Tracker("xor_counterexample", tol)
    for m in m_values:
        per_domain, joint_mi = xor_counterexample(m)
        err = max(max(abs(v) for v in per_domain), abs(joint_mi - math.log(2.0)))
        t.observe(tol - err, {"m": m, "per_domain": per_domain, "joint": joint_mi})
    return t.result()


def check_indistinguishable(rng, count: int = 100, gap_tol: float = 1e-8,
                            min_frobenius: float = 1e-6) -> CheckResult:
    """Both construction modes on random batches with n in [5, 16]."""
    t = _Tracker("indistinguishable_covariances", gap_tol)
    for _ in range(count):
        seed = int(rng.integers(2 ** 31))
        n = int(rng.integers(5, 17))
        for mode in ("single_sample_set", "two_sample_sets"):
            b_max = n - 2 if mode == "single_sample_set" else (n - 2) // 2
            b = int(rng.integers(1, b_max + 1))
            x1 = rng.standard_normal((n, b))
            x2 = rng.standard_normal((n, b)) if mode == "two_sample_sets" else None
            info = {"seed": seed, "n": n, "b": b, "mode": mode}
            try:
                pair = indistinguishable_covariances(x1, mode, x2, seed=seed)
            except InvalidArgument as exc:
                t.observe(-math.inf, dict(info, error=str(exc)))
                continue
            frob = float(np.linalg.norm(pair.sigma1 - pair.sigma2))
            margin = min(gap_tol - pair.loglik_gap, frob - min_frobenius)
            t.observe(margin, dict(info, gap=pair.loglik_gap, frobenius=frob))
    return t.result()


def _sorted_pairing(p1, p2) -> list:
    """perm with p1[i] paired to the element of p2 of equal rank."""
    r1 = np.argsort(p1, kind="stable")
    r2 = np.argsort(p2, kind="stable")
    perm = np.empty(len(p1), dtype=int)
    perm[r1] = r2
    return perm.tolist()


def check_mixture_bound(rng, count: int = 100, tol: float = 1e-6,
                        metrics=("kl", "w1")) -> CheckResult:
    """Numeric mixture divergence never exceeds the sorted matching bound."""
    t = _Tracker("mixture_matching_bound", tol)
    for metric in metrics:
        for _ in range(count):
            b = int(rng.integers(1, 9))
            spec = KdeSpec(sigma=float(rng.uniform(0.5, 2.0)))
            p1 = rng.uniform(-3, 3, b)
            p2 = rng.uniform(-3, 3, b)
            bound = matching_bound(p1, p2, _sorted_pairing(p1, p2), spec, metric)
            numeric = kde_divergence_numeric(p1, p2, spec, metric)
            t.observe(bound + tol - numeric,
                      lambda: {"metric": metric, "sigma": spec.sigma, "p1": p1.tolist(),
                               "p2": p2.tolist(), "numeric": numeric, "bound": bound})
    return t.result()


def _faulty_sorted_value(p1, p2, metric, sigma) -> float:
    """Sorted matching with the two extreme ranks of ``p2`` swapped."""
    a, b = sorted(p1), sorted(p2)
    b[0], b[-1] = b[-1], b[0]
    if metric == "kl":
        return math.fsum((x - y) ** 2 / (2.0 * sigma * sigma) for x, y in zip(a, b))
    return math.fsum(abs(x - y) for x, y in zip(a, b))


def check_sorted_optimality(rng, count: int = 200, tol: float = 1e-12,
                            fault: str | None = None) -> CheckResult:
    """Sorted pairing matches the brute-force optimum over b in [2, 7]."""
    if fault is not None and fault not in FAULTS:
        raise InvalidArgument(f"unknown fault {fault!r}; known: {FAULTS}")
    t = _Tracker("sorted_matching_optimality", tol)
    for k in range(count):
        metric = ("kl", "w1")[k % 2]
        b = int(rng.integers(2, 8))
        sigma = float(rng.uniform(0.5, 2.0))
        p1 = rng.uniform(-3, 3, b)
        p2 = rng.uniform(-3, 3, b)
        if fault == "sorted-matching":
            value = _faulty_sorted_value(p1, p2, metric, sigma)
        else:
            value = sorted_matching_value(p1, p2, metric, sigma)
        perm, best = brute_force_optimal_matching(p1, p2, metric, sigma)
        t.observe(tol - abs(value - best),
                  lambda: {"metric": metric, "sigma": sigma, "p1": p1.tolist(),
                           "p2": p2.tolist(), "sorted": value, "brute_force": best,
                           "optimal_perm": perm})
    return t.result()


# ---------------------------------------------------------------------------
# gradient integrity


def _flatten(model: nn.MlpModel) -> np.ndarray:
    return np.concatenate([p.ravel() for p in model.params()])


def _unflatten(vec: np.ndarray, like: nn.MlpModel) -> nn.MlpModel:
    out, k = [], 0
    for p in like.params():
        out.append(vec[k:k + p.size].reshape(p.shape))
        k += p.size
    return nn.MlpModel(*out)


def idm_gradient_error(rng, h: float = 1e-6) -> float:
    """Relative L2 error of the analytic IDM gradient against central differences.

    A small random model, two or three domains, random lambdas and moving
    average buffers.  Buffers are held fixed, as the training step treats them.
    """
    m = int(rng.integers(2, 4))
    b, d_in = int(rng.integers(3, 7)), int(rng.integers(2, 6))
    hidden, classes = int(rng.integers(2, 7)), int(rng.integers(2, 4))
    model = nn.init_mlp(d_in, hidden, classes, seed=int(rng.integers(2 ** 31)))
    model = nn.MlpModel(*[p + 0.1 * rng.standard_normal(p.shape) for p in model.params()])
    xs = [rng.standard_normal((b, d_in)) for _ in range(m)]
    ys = [rng.integers(0, classes, b) for _ in range(m)]
    g_dim = nn.classifier_grad_dim(model)
    gamma1, gamma2 = float(rng.uniform(0, 0.9)), float(rng.uniform(0, 0.9))
    gbuf = SortedMaBuffer(0.1 * rng.standard_normal((m, b, g_dim)), gamma1)
    rbuf = SortedMaBuffer(rng.standard_normal((m, b, hidden)), gamma2)
    cfg = IdmConfig(float(rng.uniform(0.1, 5)), float(rng.uniform(0.1, 5)), gamma1, gamma2,
                    True, True, rescale=False)

    def objective(mdl):
        caches = [nn.forward(mdl, x, y) for x, y in zip(xs, ys)]
        return caches, idm_objective(caches, gbuf, rbuf, cfg)

    caches, (_, upstream, _, _) = objective(model)
    analytic = _flatten(upstream.backward(model, caches))
    theta = _flatten(model)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        hi = objective(_unflatten(theta + step, model))[1][0].total
        lo = objective(_unflatten(theta - step, model))[1][0].total
        numeric[i] = (hi - lo) / (2 * h)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


def check_gradients(rng, count: int = 50, tol: float = 1e-4) -> CheckResult:
    t = _Tracker("idm_gradient_integrity", tol)
    for k in range(count):
        err = idm_gradient_error(rng)
        t.observe(tol - err, {"instance": k, "relative_error": err})
    return t.result()


def run_all(seed: int = 0, fault: str | None = None, scale: float = 1.0) -> list:
    """Run every check from one seed; ``scale`` shrinks the instance counts."""
    rng = np.random.default_rng(seed)

    def n(count):
        return max(1, int(round(count * scale)))

    return [
        check_shift_decomposition(rng, n(1000)),
        check_predictor_gap(rng, n(1000)),
        check_pinsker(rng, n(1000)),
        check_xor(),
        check_indistinguishable(rng, n(100)),
        check_mixture_bound(rng, n(100)),
        check_sorted_optimality(rng, n(200), fault=fault),
        check_gradients(rng, n(50)),
    ]
