"""Per-sample distribution matching (PDM) and its divergence machinery.

PDM slices a batch into columns, sorts every column, keeps an exponential
moving average of the sorted matrices per domain and penalizes the squared
distance of each domain's average to the cross-domain mean.  The helpers
below the penalty evaluate the Gaussian-kernel bounds that justify matching
sorted points, together with brute-force and quadrature oracles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgument, NumericFailure, ResourceLimitError

METRICS = ("kl", "w1")
MAX_BRUTE_FORCE = 8
MAX_SIMPSON_DEPTH = 24


def sort_columns(x) -> tuple:
    """Sort every column ascending (stable).

    Returns ``(sorted, perms)`` where ``perms[:, j]`` maps a sorted row index
    to the original row in column ``j``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgument(f"expected a b x d matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise InvalidArgument("NaN entry in batch")
    # sorting rows of the transpose is much faster than axis-0 sorting
    perms = np.argsort(np.ascontiguousarray(x.T), axis=1, kind="stable").T
    return np.take_along_axis(x, perms, axis=0), perms


@dataclass
class SortedMaBuffer:
    """Per-domain moving averages of column-sorted batches, zero-initialized."""

    per_domain: np.ndarray  # shape (m, b, d)
    gamma: float = 0.0
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.per_domain = np.asarray(self.per_domain, dtype=np.float64)
        if self.per_domain.ndim != 3:
            raise InvalidArgument("buffer must hold m matrices of shape b x d")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.initialized is None:
            self.initialized = np.zeros(self.per_domain.shape[0], dtype=bool)

    @classmethod
    def fresh(cls, m: int, b: int, d: int, gamma: float = 0.0) -> "SortedMaBuffer":
        return cls(np.zeros((m, b, d)), gamma)

    @property
    def shape(self) -> tuple:
        return self.per_domain.shape


def pdm_penalty(batches, buffer: SortedMaBuffer | None = None, gamma: float | None = None):
    """PDM loss, its gradient w.r.t. every batch, and the updated buffer.

    Historical buffer contents are constants; only the ``(1 - gamma)`` share of
    the current sorted batch is differentiated, and the sort acts as a fixed
    permutation.  The input buffer is not modified.
    """
    mats = [np.asarray(x, dtype=np.float64) for x in batches]
    m = len(mats)
    if m < 2:
        raise InvalidArgument("PDM needs at least two domains")
    shape = mats[0].shape
    if len(shape) != 2 or any(x.shape != shape for x in mats):
        raise InvalidArgument(
            f"all domains must share one b x d shape, got {[x.shape for x in mats]}")
    b, d = shape
    if buffer is None:
        buffer = SortedMaBuffer.fresh(m, b, d, 0.0 if gamma is None else gamma)
    if gamma is None:
        gamma = buffer.gamma
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")
    if buffer.shape != (m, b, d):
        raise InvalidArgument(f"buffer shape {buffer.shape} != {(m, b, d)}")

    # work on d x b transposes so every sort and scatter touches contiguous rows
    rows = np.arange(d)[:, None]
    ma = np.empty((m, b, d))
    perms = []
    for i, x in enumerate(mats):
        if np.isnan(x).any():
            raise InvalidArgument("NaN entry in batch")
        xt = np.ascontiguousarray(x.T)
        perm = np.argsort(xt, axis=1, kind="stable")
        ma[i] = gamma * buffer.per_domain[i] + (1.0 - gamma) * xt[rows, perm].T
        perms.append(perm)
    # offsets from domain 0 keep identical domains at exactly zero loss
    offsets = ma - ma[0]
    centered = offsets - offsets.mean(axis=0)
    scale = 1.0 / (m * d * b)
    loss = scale * float(np.sum(centered * centered))

    # d loss / d ma_i = 2 scale (ma_i - mean); the mean's own term sums to zero
    grads = []
    coef = 2.0 * scale * (1.0 - gamma)
    for i in range(m):
        gt = np.empty((d, b))
        gt[rows, perms[i]] = coef * centered[i].T
        grads.append(gt.T)
    updated = SortedMaBuffer(ma, gamma, np.ones(m, dtype=bool))
    return loss, grads, updated


def pdm_value(batches) -> float:
    """Stateless PDM loss (fresh buffer, gamma 0) without gradients.

    Only sorted values are needed, so a plain sort replaces the argsort.
    """
    mats = [np.asarray(x, dtype=np.float64) for x in batches]
    if len(mats) < 2:
        raise InvalidArgument("PDM needs at least two domains")
    shape = mats[0].shape
    if len(shape) != 2 or any(x.shape != shape for x in mats):
        raise InvalidArgument(
            f"all domains must share one b x d shape, got {[x.shape for x in mats]}")
    if any(np.isnan(x).any() for x in mats):
        raise InvalidArgument("NaN entry in batch")
    sorted_t = np.stack([np.sort(np.ascontiguousarray(x.T), axis=1) for x in mats])
    offsets = sorted_t - sorted_t[0]
    centered = offsets - offsets.mean(axis=0)
    return float(np.sum(centered * centered)) / (len(mats) * shape[0] * shape[1])


# ---------------------------------------------------------------------------
# Gaussian kernel divergences


@dataclass(frozen=True)
class KdeSpec:
    sigma: float = 1.0
    integration_halfwidth: float = 10.0
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")
        if not self.tolerance > 0 or not self.integration_halfwidth > 0:
            raise InvalidArgument("tolerance and halfwidth must be positive")


def gaussian_kl(x1: float, x2: float, sigma: float) -> float:
    """KL(N(x1, s^2) || N(x2, s^2))."""
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    return (x1 - x2) ** 2 / (2.0 * sigma * sigma)


def gaussian_w1(x1: float, x2: float) -> float:
    return abs(x1 - x2)


def _pair_div(metric: str, sigma: float):
    if metric == "kl":
        return lambda a, b: gaussian_kl(a, b, sigma)
    if metric == "w1":
        return gaussian_w1
    raise InvalidArgument(f"metric must be one of {METRICS}, got {metric!r}")


def _check_perm(perm, b: int) -> list:
    perm = [int(k) for k in perm]
    if sorted(perm) != list(range(b)):
        raise InvalidArgument(f"{perm} is not a bijection on [0, {b})")
    return perm


def matching_bound(points1, points2, perm, spec: KdeSpec, metric: str = "kl") -> float:
    """(1/b) sum_i div(P_i, Q_perm(i)) for unit-mass Gaussian kernels."""
    p1 = [float(v) for v in points1]
    p2 = [float(v) for v in points2]
    if len(p1) != len(p2) or not p1:
        raise InvalidArgument("point sets must be nonempty and of equal size")
    perm = _check_perm(perm, len(p1))
    div = _pair_div(metric, spec.sigma)
    return math.fsum(div(p1[i], p2[perm[i]]) for i in range(len(p1))) / len(p1)


def sorted_matching_value(points1, points2, metric: str = "kl", sigma: float = 1.0) -> float:
    """sum_i div(P_(i), Q_(i)) after sorting both sets ascending."""
    div = _pair_div(metric, sigma)
    return math.fsum(div(a, b) for a, b in zip(sorted(points1), sorted(points2)))


def brute_force_optimal_matching(points1, points2, metric: str = "kl",
                                 sigma: float = 1.0) -> tuple:
    """Exhaustively minimize sum_i div(P_i, Q_f(i)) over all bijections f.

    Enumeration is lexicographic and only a strictly smaller value replaces
    the incumbent, so the identity wins ties.
    """
    p1 = [float(v) for v in points1]
    p2 = [float(v) for v in points2]
    b = len(p1)
    if b != len(p2) or b == 0:
        raise InvalidArgument("point sets must be nonempty and of equal size")
    if b > MAX_BRUTE_FORCE:
        raise ResourceLimitError(f"b={b} needs {math.factorial(b)} permutations; "
                                 f"limit is b <= {MAX_BRUTE_FORCE}")
    div = _pair_div(metric, sigma)
    cost = [[div(p1[i], p2[j]) for j in range(b)] for i in range(b)]
    best_perm, best = None, math.inf
    for perm in itertools.permutations(range(b)):
        value = math.fsum(cost[i][perm[i]] for i in range(b))
        if value < best:
            best_perm, best = perm, value
    return list(best_perm), best


def _log_mixture(points: np.ndarray, sigma: float, x: np.ndarray) -> np.ndarray:
    z = (x[:, None] - points[None, :]) / sigma
    logk = -0.5 * z * z
    top = logk.max(axis=1)
    return (top + np.log(np.exp(logk - top[:, None]).sum(axis=1))
            - math.log(points.size * sigma * math.sqrt(2.0 * math.pi)))


def adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = MAX_SIMPSON_DEPTH,
                     panels: int = 64) -> float:
    """Adaptive Simpson quadrature of a vectorized integrand.

    The interval is split into ``panels`` equal pieces first; each piece is
    refined until the Richardson estimate |S2 - S1| / 15 falls under its share
    of ``tol``.
    """
    edges = np.linspace(a, b, panels + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    fe, fm = f(edges), f(mids)
    stack = []
    for k in range(panels):
        lo, hi = edges[k], edges[k + 1]
        whole = (hi - lo) / 6.0 * (fe[k] + 4 * fm[k] + fe[k + 1])
        stack.append((lo, hi, fe[k], fm[k], fe[k + 1], whole, tol / panels, 0))
    total = []
    failed = False
    while stack:
        lo, hi, flo, fmid, fhi, whole, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        fl, fr = f(np.array([0.5 * (lo + mid), 0.5 * (mid + hi)]))
        left = (mid - lo) / 6.0 * (flo + 4 * fl + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4 * fr + fhi)
        delta = left + right - whole
        if abs(delta) <= 15.0 * eps:
            total.append(left + right + delta / 15.0)
        elif depth + 1 >= max_depth:
            failed = True
            total.append(left + right + delta / 15.0)
        else:
            stack.append((lo, mid, flo, fl, fmid, left, eps / 2, depth + 1))
            stack.append((mid, hi, fmid, fr, fhi, right, eps / 2, depth + 1))
    estimate = math.fsum(total)
    if failed:
        raise NumericFailure(f"adaptive Simpson did not converge in {max_depth} levels",
                             last_estimate=estimate)
    return estimate


def kde_divergence_numeric(points1, points2, spec: KdeSpec, metric: str = "kl",
                           w1_panels: int = 16384) -> float:
    """Numerically integrated KL or W1 between two Gaussian-kernel mixtures."""
    p1 = np.asarray(points1, dtype=np.float64).ravel()
    p2 = np.asarray(points2, dtype=np.float64).ravel()
    if p1.size == 0 or p2.size == 0:
        raise InvalidArgument("point sets must be nonempty")
    if max(p1.size, p2.size) > 64:
        raise ResourceLimitError("numeric oracle supports at most 64 points")
    sigma = spec.sigma
    reach = spec.integration_halfwidth * sigma
    lo = min(p1.min(), p2.min()) - reach
    hi = max(p1.max(), p2.max()) + reach
    if metric == "kl":
        def integrand(x):
            lp = _log_mixture(p1, sigma, x)
            return np.exp(lp) * (lp - _log_mixture(p2, sigma, x))
        return adaptive_simpson(integrand, lo, hi, spec.tolerance)
    if metric == "w1":
        if w1_panels < 4096:
            raise InvalidArgument("W1 trapezoid needs at least 4096 panels")
        x = np.linspace(lo, hi, w1_panels + 1)
        cdf1 = ndtr((x[:, None] - p1[None, :]) / sigma).mean(axis=1)
        cdf2 = ndtr((x[:, None] - p2[None, :]) / sigma).mean(axis=1)
        return float(np.trapezoid(np.abs(cdf1 - cdf2), x))
    raise InvalidArgument(f"metric must be one of {METRICS}, got {metric!r}")
