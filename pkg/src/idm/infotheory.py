"""Exact information measures over small discrete joints.

Everything is in nats. The verifiers here execute the identities behind the
shift decomposition I(Z;D) = I(X;D) + I(Y;D|X), the predictor lower bound
KL(P_{Y|X,D} || Q_{Y|X}) >= I(Y;D|X), Pinsker's inequality, the XOR
counterexample, and the indistinguishable-covariance construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import InvalidArgument, ResourceLimitError

NORMALIZATION_TOL = 1e-12
MAX_XOR_DOMAINS = 20
RANK_RTOL = 1e-10


def nats_to_bits(value: float) -> float:
    return value / math.log(2.0)


@dataclass(frozen=True)
class DiscreteJoint:
    """Dense joint distribution over named finite variables.

    ``probabilities`` is an array whose shape equals ``cardinalities``; axis
    ``k`` indexes ``variable_names[k]``.
    """

    variable_names: tuple
    cardinalities: tuple
    probabilities: np.ndarray = field(repr=False)

    def __post_init__(self):
        names = tuple(self.variable_names)
        cards = tuple(int(c) for c in self.cardinalities)
        if len(names) != len(cards) or not names:
            raise InvalidArgument("need one cardinality per variable")
        if len(set(names)) != len(names):
            raise InvalidArgument(f"duplicate variable names: {names}")
        if any(c < 1 for c in cards):
            raise InvalidArgument(f"cardinalities must be positive: {cards}")
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.size != math.prod(cards):
            raise InvalidArgument(
                f"table has {p.size} entries, expected {math.prod(cards)}")
        p = p.reshape(cards)
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidArgument("probabilities must be finite and nonnegative")
        if abs(math.fsum(p.ravel()) - 1.0) > NORMALIZATION_TOL:
            raise InvalidArgument(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "variable_names", names)
        object.__setattr__(self, "cardinalities", cards)
        object.__setattr__(self, "probabilities", p)

    def axes(self, names: Iterable[str]) -> list:
        idx = []
        for name in names:
            if name not in self.variable_names:
                raise InvalidArgument(f"unknown variable {name!r}")
            idx.append(self.variable_names.index(name))
        return idx

    def marginal(self, names: Sequence[str]) -> np.ndarray:
        """Marginal table with axes in the order of ``names``."""
        keep = self.axes(names)
        drop = tuple(i for i in range(len(self.variable_names)) if i not in keep)
        table = self.probabilities.sum(axis=drop) if drop else self.probabilities
        # remaining axes are in ascending original order; permute to requested
        order = sorted(keep)
        return np.transpose(table, [order.index(k) for k in keep])

    def to_json(self) -> str:
        return json.dumps({"vars": list(self.variable_names),
                           "card": list(self.cardinalities),
                           "p": self.probabilities.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DiscreteJoint":
        obj = json.loads(text)
        try:
            return cls(obj["vars"], obj["card"], np.asarray(obj["p"], dtype=float))
        except KeyError as exc:
            raise InvalidArgument(f"missing key {exc}") from None


def random_joint(names: Sequence[str], cards: Sequence[int],
                 rng: np.random.Generator, sparsity: float = 0.0) -> DiscreteJoint:
    """Dirichlet-ish random joint; ``sparsity`` zeroes that fraction of cells."""
    raw = rng.exponential(size=math.prod(cards))
    if sparsity > 0:
        raw[rng.random(raw.size) < sparsity] = 0.0
        if raw.sum() == 0:
            raw[rng.integers(raw.size)] = 1.0
    raw /= math.fsum(raw)
    # renormalize once more so fsum is 1 to within an ulp or two
    raw /= math.fsum(raw)
    return DiscreteJoint(tuple(names), tuple(cards), raw)


def _as_names(group) -> list:
    if isinstance(group, str):
        return [group]
    names = list(group)
    if not names:
        raise InvalidArgument("variable set must be nonempty")
    return names


def _flat(table: np.ndarray, joint: DiscreteJoint, groups) -> np.ndarray:
    shape = [math.prod(joint.cardinalities[i] for i in joint.axes(g)) for g in groups]
    return table.reshape(shape)


def _plogp_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    """sum p * log(num / den) with 0 log 0 = 0 and p log(p/0) = +inf."""
    mask = p > 0
    if np.any(den[mask] == 0):
        return math.inf
    return math.fsum((p[mask] * (np.log(num[mask]) - np.log(den[mask]))).ravel())


def mutual_information(joint: DiscreteJoint, a, b) -> float:
    """I(A;B) by direct summation over the joint table."""
    a, b = _as_names(a), _as_names(b)
    if set(a) & set(b):
        raise InvalidArgument(f"variable sets overlap: {set(a) & set(b)}")
    p_ab = _flat(joint.marginal(a + b), joint, [a, b])
    p_a = p_ab.sum(axis=1, keepdims=True)
    p_b = p_ab.sum(axis=0, keepdims=True)
    return _plogp_ratio(p_ab, p_ab, p_a * p_b)


def mutual_information_given(joint: DiscreteJoint, a, b, c) -> float:
    """I(A;B|C)."""
    a, b, c = _as_names(a), _as_names(b), _as_names(c)
    if set(a) & set(b) or set(a) & set(c) or set(b) & set(c):
        raise InvalidArgument("variable sets must be pairwise disjoint")
    p_abc = _flat(joint.marginal(a + b + c), joint, [a, b, c])
    p_ac = p_abc.sum(axis=1, keepdims=True)
    p_bc = p_abc.sum(axis=0, keepdims=True)
    p_c = p_abc.sum(axis=(0, 1), keepdims=True)
    return _plogp_ratio(p_abc, p_abc * p_c, p_ac * p_bc)


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return _plogp_ratio(p, p, q)


def _require_xyd(joint: DiscreteJoint):
    if set(joint.variable_names) != {"X", "Y", "D"}:
        raise InvalidArgument(
            f"expected variables X, Y, D; got {joint.variable_names}")


def verify_shift_decomposition(joint: DiscreteJoint) -> float:
    """Residual of I(X,Y;D) - I(X;D) - I(Y;D|X); zero up to rounding."""
    _require_xyd(joint)
    total = mutual_information(joint, ["X", "Y"], ["D"])
    covariate = mutual_information(joint, ["X"], ["D"])
    concept = mutual_information_given(joint, ["Y"], ["D"], ["X"])
    return total - covariate - concept


def predictor_gap(joint: DiscreteJoint, q) -> tuple:
    """(E_{D,X} KL(P_{Y|X,D} || Q_{Y|X}), I(Y;D|X)) for a predictor table q[x, y]."""
    _require_xyd(joint)
    p = joint.marginal(["X", "Y", "D"])
    nx, ny, _ = p.shape
    q = np.asarray(q, dtype=float)
    if q.shape != (nx, ny):
        raise InvalidArgument(f"q must have shape {(nx, ny)}, got {q.shape}")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidArgument("every row of q must be a distribution over Y")
    p_xd = p.sum(axis=1, keepdims=True)
    lhs = _plogp_ratio(p, p, p_xd * q[:, :, None])
    rhs = mutual_information_given(joint, ["Y"], ["D"], ["X"])
    return lhs, rhs


def pinsker_chain(p, q) -> tuple:
    """(TV(P,Q), sqrt(KL(Q||P)/2))."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InvalidArgument("p and q must have the same support size")
    tv = 0.5 * math.fsum(np.abs(p - q))
    kl = kl_divergence(q, p)
    # rounding can leave KL a hair below zero when p and q nearly coincide
    return tv, math.sqrt(max(kl, 0.0) / 2.0) if math.isfinite(kl) else math.inf


def xor_joint(m: int) -> DiscreteJoint:
    """Joint of m fair bits D1..Dm and their parity W."""
    if m < 2:
        raise InvalidArgument("need at least two domains")
    if m > MAX_XOR_DOMAINS:
        raise ResourceLimitError(
            f"m={m} needs a 2^{m + 1} table; limit is m <= {MAX_XOR_DOMAINS}")
    grids = np.indices((2,) * m).reshape(m, -1)
    parity = grids.sum(axis=0) % 2
    table = np.zeros((2 ** m, 2))
    table[np.arange(2 ** m), parity] = 2.0 ** -m
    names = tuple(f"D{i + 1}" for i in range(m)) + ("W",)
    return DiscreteJoint(names, (2,) * (m + 1), table.ravel())


def xor_counterexample(m: int) -> tuple:
    """Per-domain I(W;D_i) (all zero) and I(W;D_1..D_m) (= ln 2)."""
    joint = xor_joint(m)
    domains = list(joint.variable_names[:-1])
    per_domain = [mutual_information(joint, ["W"], [d]) for d in domains]
    return per_domain, mutual_information(joint, ["W"], domains)


# ---------------------------------------------------------------------------
# indistinguishable Gaussian environments


@dataclass(frozen=True)
class CovariancePair:
    sigma1: np.ndarray
    sigma2: np.ndarray
    loglik_gap: float

    def __post_init__(self):
        for s in (self.sigma1, self.sigma2):
            if np.max(np.abs(s - s.T)) > 1e-10:
                raise InvalidArgument("covariance is not symmetric")
            if np.linalg.eigvalsh(s).min() < -1e-10:
                raise InvalidArgument("covariance is not positive semidefinite")
        if np.linalg.norm(self.sigma1 - self.sigma2) <= 1e-6:
            raise InvalidArgument("covariances coincide")


def gaussian_loglik(data: np.ndarray, sigma: np.ndarray) -> float:
    """log p(S | Sigma) for the columns of ``data`` under N(0, Sigma)."""
    n, b = data.shape
    chol = np.linalg.cholesky(sigma)
    white = np.linalg.solve(chol, data)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (b * n * math.log(2 * math.pi) + b * logdet + np.sum(white * white))


def _split_span(gram: np.ndarray) -> tuple:
    w, v = np.linalg.eigh(gram)
    top = w.max(initial=0.0)
    inside = w > RANK_RTOL * top if top > 0 else np.zeros_like(w, dtype=bool)
    return v[:, inside], v[:, ~inside]


def _build(basis: np.ndarray, eig: np.ndarray) -> np.ndarray:
    s = (basis * eig) @ basis.T
    return 0.5 * (s + s.T)


def indistinguishable_covariances(data, mode: str = "single_sample_set",
                                  data2=None, seed: int = 0) -> CovariancePair:
    """Two distinct zero-mean Gaussian environments the sample(s) cannot tell apart.

    ``data`` is n x b with one sample per column. In single mode the two
    covariances give ``data`` identical likelihood. In two-sample mode each
    returned covariance assigns ``data`` and ``data2`` identical likelihood.
    """
    x1 = np.asarray(data, dtype=float)
    if x1.ndim != 2:
        raise InvalidArgument("data must be an n x b matrix")
    n, b = x1.shape
    rng = np.random.default_rng(seed)
    if mode == "single_sample_set":
        if n <= b + 1:
            raise InvalidArgument(f"need n > b + 1, got n={n}, b={b}")
        return _single(x1, rng)
    if mode == "two_sample_sets":
        if data2 is None:
            raise InvalidArgument("two_sample_sets mode needs data2")
        x2 = np.asarray(data2, dtype=float)
        if x2.shape != x1.shape:
            raise InvalidArgument("data and data2 must have the same shape")
        if n <= 2 * b + 1:
            raise InvalidArgument(f"need n > 2b + 1, got n={n}, b={b}")
        return _two(x1, x2, rng)
    raise InvalidArgument(f"unknown mode {mode!r}")


def _single(x: np.ndarray, rng: np.random.Generator) -> CovariancePair:
    col, comp = _split_span(x @ x.T)
    lam_col = rng.uniform(0.5, 2.0, col.shape[1])
    lam_comp = rng.uniform(0.5, 2.0, comp.shape[1])
    sigma1 = _build(col, lam_col) + _build(comp, lam_comp)
    for _ in range(100):
        factors = rng.uniform(0.5, 2.0, comp.shape[1])
        # unit product keeps the determinant, hence the normalizer, fixed
        factors /= np.exp(np.mean(np.log(factors)))
        sigma2 = _build(col, lam_col) + _build(comp, lam_comp * factors)
        if np.linalg.norm(sigma1 - sigma2) > 1e-3:
            break
    gap = abs(gaussian_loglik(x, sigma1) - gaussian_loglik(x, sigma2))
    return CovariancePair(sigma1, sigma2, gap)


def _positive_null_vector(a: np.ndarray) -> np.ndarray | None:
    """Strictly positive lam with a @ lam = 0, or None if none exists."""
    _, sv, vt = np.linalg.svd(a)
    rank = int(np.sum(sv > RANK_RTOL * sv.max(initial=0.0)))
    null = vt[rank:].T
    if null.shape[1] == 0:
        return None
    k = null.shape[1]
    # maximize t subject to t <= null @ c <= 1
    cost = np.zeros(k + 1)
    cost[-1] = -1.0
    a_ub = np.vstack([np.hstack([-null, np.ones((null.shape[0], 1))]),
                      np.hstack([null, np.zeros((null.shape[0], 1))])])
    b_ub = np.concatenate([np.zeros(null.shape[0]), np.ones(null.shape[0])])
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * k + [(None, 1.0)], method="highs")
    if res.status != 0 or res.x[-1] < 1e-6:
        return None
    lam = null @ res.x[:k]
    return lam if lam.min() > 0 else None


def _two(x1: np.ndarray, x2: np.ndarray, rng: np.random.Generator) -> CovariancePair:
    n, b = x1.shape
    span, comp = _split_span(x1 @ x1.T + x2 @ x2.T)
    extra = 2 * b + 1 - span.shape[1]
    basis = np.hstack([span, comp[:, :extra]])
    free = comp[:, extra:]
    # rotate the (2b+1)-dim block onto the eigenvectors of the scatter difference
    diff = x1 @ x1.T - x2 @ x2.T
    _, rot = np.linalg.eigh(basis.T @ diff @ basis)
    basis = basis @ rot
    coef = (basis.T @ x1) ** 2 - (basis.T @ x2) ** 2  # (2b+1) x b
    precision = _positive_null_vector(coef.T)
    if precision is None:
        precision = _positive_trace_solution(coef.sum(axis=1), rng)
    sigmas = []
    for _ in range(2):
        comp_eig = rng.uniform(0.5, 2.0, free.shape[1])
        sigmas.append(_build(basis, 1.0 / precision) + _build(free, comp_eig))
    gap = max(abs(gaussian_loglik(x1, s) - gaussian_loglik(x2, s)) for s in sigmas)
    return CovariancePair(sigmas[0], sigmas[1], gap)


def _positive_trace_solution(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Positive lam with c @ lam = 0; exists iff c vanishes or takes both signs."""
    scale = np.abs(c).max(initial=0.0)
    pos, neg = c > 1e-14 * scale, c < -1e-14 * scale
    if scale > 0 and not (pos.any() and neg.any()):
        raise InvalidArgument(
            "no zero-mean Gaussian equalizes these samples: one set dominates the other")
    lam = rng.uniform(0.5, 2.0, c.size)
    s = c @ lam
    if s > 0:
        lam[neg] *= 1.0 + s / -(c[neg] @ lam[neg])
    elif s < 0:
        lam[pos] *= 1.0 + -s / (c[pos] @ lam[pos])
    # absorb the remaining rounding into a single coordinate
    j = int(np.argmax(np.abs(c)))
    rest = c @ lam - c[j] * lam[j]
    lam[j] = -rest / c[j] if c[j] != 0 else lam[j]
    return lam
