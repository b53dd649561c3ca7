"""Covering numbers, star hulls, local complexity and network sizing.

A finite function class is stored by its values on a fixed weighted design:
``values[k, p]`` is function ``k`` at point ``p`` and the distance is the
weighted L2 norm ``sqrt(sum_p w_p (f_p - g_p)^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .antisym_net import NetComplexity
from .core import EmpiricalMetric, PairwiseLoss, SampleSet, metric_evaluations
from .ustat import DiscreteDistribution, _conditional_means, _full_kernel

_DRAW_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class FunctionClassSample:
    values: np.ndarray
    weights: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        V = np.array(self.values, dtype=float)
        if V.ndim == 1:
            V = V[None, :]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if V.shape[1] != w.size:
            raise ValueError("every function must be evaluated on the same points")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        V.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", V)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.size

    @classmethod
    def from_predictors(cls, functions, metric: EmpiricalMetric) -> "FunctionClassSample":
        rows, w = [], None
        for f in functions:
            v, w = metric_evaluations(f, metric)
            rows.append(v)
        if not rows:
            raise ValueError("empty class")
        return cls(np.array(rows), w)

    def distances(self, centers: "FunctionClassSample | None" = None) -> np.ndarray:
        """``D[a, b]`` = distance from ``centers[a]`` to ``self[b]``."""
        C = self.values if centers is None else centers.values
        out = np.empty((C.shape[0], self.size))
        sw = np.sqrt(self.weights)
        Vw = self.values * sw
        for a in range(C.shape[0]):
            diff = Vw - C[a] * sw
            out[a] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return out

    def sup_norm(self) -> float:
        """``A = max_f ||f||`` in the class metric."""
        return float(np.sqrt((self.values**2 @ self.weights).max()))

    def unique(self) -> "FunctionClassSample":
        _, first = np.unique(self.values, axis=0, return_index=True)
        keep = np.sort(first)
        labels = tuple(self.labels[i] for i in keep) if self.labels else ()
        return FunctionClassSample(self.values[keep], self.weights, labels)


# ---------------------------------------------------------------------------
# Covering numbers
# ---------------------------------------------------------------------------


def farthest_first(cls: FunctionClassSample):
    """Farthest-point traversal from index 0 (ties to the lowest index).

    Returns the visiting order and ``radius[k]``, the covering radius of the
    first ``k + 1`` centres.  The order does not depend on ``eps``, so greedy
    counts are monotone in ``eps``.
    """
    if cls.size == 0:
        raise ValueError("empty class")
    D = cls.distances()
    order = [0]
    nearest = D[0].copy()
    radius = [float(nearest.max())]
    while len(order) < cls.size and radius[-1] > 0.0:
        k = int(np.argmax(nearest))
        order.append(k)
        nearest = np.minimum(nearest, D[k])
        radius.append(float(nearest.max()))
    return order, np.array(radius)


def greedy_net(cls: FunctionClassSample, eps: float) -> list[int]:
    if eps <= 0:
        raise ValueError("eps must be positive")
    order, radius = farthest_first(cls)
    k = int(np.argmax(radius <= eps)) if np.any(radius <= eps) else len(order) - 1
    return order[: k + 1]


def covering_number_greedy(cls: FunctionClassSample, eps: float) -> int:
    return len(greedy_net(cls, eps))


def covering_curve(cls: FunctionClassSample, eps_grid) -> list[int]:
    order, radius = farthest_first(cls)
    out = []
    for eps in eps_grid:
        if eps <= 0:
            raise ValueError("eps must be positive")
        hit = np.flatnonzero(radius <= eps)
        out.append(int(hit[0]) + 1 if hit.size else len(order))
    return out


def _popcount(x: int) -> int:
    return bin(x).count("1")


def covering_number_exact(cls: FunctionClassSample, eps: float,
                          centers: FunctionClassSample | None = None) -> int:
    """Smallest number of centres within ``eps`` of every member.

    Centres come from ``centers`` (default: the class itself).  Exact set cover
    by depth-first branch and bound on bitmasks; meant for classes of a few
    dozen members.
    """
    if cls.size == 0:
        raise ValueError("empty class")
    if eps <= 0:
        raise ValueError("eps must be positive")
    D = cls.distances(centers)
    masks = sorted({int(sum(1 << int(j) for j in np.flatnonzero(row <= eps))) for row in D} - {0})
    # drop centres dominated by another centre
    masks = [m for m in masks if not any(o != m and (o | m) == o for o in masks)]
    full = (1 << cls.size) - 1
    if (0 if not masks else np.bitwise_or.reduce(np.array(masks, dtype=object))) != full:
        raise ValueError("centres cannot cover the class")
    holders = [[m for m in masks if m >> j & 1] for j in range(cls.size)]
    best = [len(greedy_cover(masks, full))]
    seen: dict[int, int] = {}

    def search(uncovered: int, used: int):
        if uncovered == 0:
            best[0] = min(best[0], used)
            return
        if seen.get(uncovered, 1 << 30) <= used:
            return
        seen[uncovered] = used
        gains = [_popcount(m & uncovered) for m in masks]
        if used + -(-_popcount(uncovered) // max(gains)) >= best[0]:
            return
        j = min((b for b in range(cls.size) if uncovered >> b & 1), key=lambda b: len(holders[b]))
        for m in sorted(holders[j], key=lambda m: -_popcount(m & uncovered)):
            search(uncovered & ~m, used + 1)

    search(full, 0)
    return best[0]


def greedy_cover(masks, full: int) -> list[int]:
    chosen, covered = [], 0
    while covered != full:
        m = max(masks, key=lambda m: _popcount(m & ~covered))
        chosen.append(m)
        covered |= m
    return chosen


# ---------------------------------------------------------------------------
# Star hulls and shifted classes
# ---------------------------------------------------------------------------


def star_hull_grid(cls: FunctionClassSample, alpha_steps: int, levels=None) -> FunctionClassSample:
    """``{a f : f in class}`` for ``a`` in ``{i / alpha_steps}`` plus any extra
    ``levels`` in ``[0, 1]``; duplicate functions are kept once."""
    if alpha_steps < 1:
        raise ValueError("alpha_steps must be >= 1")
    alphas = set(i / alpha_steps for i in range(alpha_steps + 1))
    if levels is not None:
        lv = np.asarray(levels, dtype=float)
        if np.any((lv < 0) | (lv > 1)):
            raise ValueError("levels must lie in [0, 1]")
        alphas.update(lv.tolist())
    alphas = sorted(alphas)
    rows = [np.zeros(cls.values.shape[1])]
    rows += [a * v for v in cls.values for a in alphas if a > 0]
    return FunctionClassSample(np.array(rows), cls.weights).unique()


def net_inequality_levels(A: float, t: float) -> np.ndarray:
    """Scales ``min(1, (2j - 1) t / (2A))``, ``j = 1 .. ceil(A / t)``; every
    ``a`` in ``[0, 1]`` is within ``t / (2A)`` of one of them."""
    M = max(1, math.ceil(A / t))
    return np.minimum(1.0, (2 * np.arange(1, M + 1) - 1) * t / (2 * A))


def shifted_class(candidates, f_ref, S: SampleSet, loss: PairwiseLoss, dist,
                  mc_budget: int = 100_000, seed: int = 0) -> FunctionClassSample:
    """``g_f(Z_i) = E[q_f(Z_i, Z)]`` at the sample points, weights ``1 / n``.

    Exact over the atoms of a ``DiscreteDistribution``, Monte Carlo (common
    draws for all candidates) for other samplers.
    """
    if isinstance(dist, DiscreteDistribution):
        atoms = shifted_class_atoms(candidates, f_ref, loss, dist)
        idx = dist.index_of(S.x, S.y)
        V = atoms.values[:, idx]
    else:
        Xm, ym = dist.draw(mc_budget, np.random.default_rng(seed))
        V = np.array([_conditional_means(f, f_ref, loss, S.x, S.y, Xm, ym) for f in candidates])
    return FunctionClassSample(V, np.full(S.n, 1.0 / S.n))


def shifted_class_atoms(candidates, f_ref, loss: PairwiseLoss,
                        dist: DiscreteDistribution) -> FunctionClassSample:
    """``g_f`` on every atom, weighted by the atom probabilities."""
    V = np.array([_full_kernel(f, f_ref, loss, dist.x, dist.y) @ dist.probs for f in candidates])
    return FunctionClassSample(V, dist.probs)


# ---------------------------------------------------------------------------
# Local complexity and fixed points
# ---------------------------------------------------------------------------


@dataclass
class LocalComplexityEstimate:
    r_grid: np.ndarray
    phi_values: np.ndarray
    phi_se: np.ndarray
    fixed_point: float
    mc_draws: int
    seed: int
    n: int

    def rows(self):
        return [(r, p, s) for r, p, s in zip(self.r_grid, self.phi_values, self.phi_se)]


def _deviation_draws(cls: FunctionClassSample, n: int, mc_draws: int, seed: int) -> np.ndarray:
    """``E g - P_n g`` for every class member over ``mc_draws`` fresh samples."""
    w = cls.weights / cls.weights.sum()
    mean = cls.values @ w
    out = np.empty((mc_draws, cls.size))
    for b in range(-(-mc_draws // _DRAW_BLOCK)):
        lo, hi = b * _DRAW_BLOCK, min((b + 1) * _DRAW_BLOCK, mc_draws)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, b])))
        counts = rng.multinomial(n, w, size=hi - lo)
        out[lo:hi] = mean - (counts / n) @ cls.values.T
    return out


def _phi_from_deviations(dev: np.ndarray, second: np.ndarray, r: float) -> np.ndarray:
    if r < 0:
        raise ValueError("r must be nonnegative")
    with np.errstate(divide="ignore"):
        alpha = np.where(second > 0, np.minimum(1.0, np.sqrt(r / np.where(second > 0, second, 1.0))), 1.0)
    return np.maximum(0.0, (np.abs(dev) * alpha).max(axis=1))


def local_complexity_curve(cls: FunctionClassSample, n: int, r_grid, mc_draws: int,
                           seed: int) -> LocalComplexityEstimate:
    """``phi(r) = E sup_{g in G*, E g^2 <= r} |E g - P_n g|`` over the exact star
    hull of ``cls``.

    ``cls`` holds the functions on the atoms of a distribution (weights are the
    probabilities).  On the hull the supremum is attained at the largest
    admissible scale of each member, ``min(1, sqrt(r / E g^2))``.  Every ``r``
    uses the same resamples, so ``phi(r) / sqrt(r)`` is nonincreasing draw by
    draw.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    if np.any(r_grid < 0):
        raise ValueError("r must be nonnegative")
    w = cls.weights / cls.weights.sum()
    second = cls.values**2 @ w
    dev = _deviation_draws(cls, n, mc_draws, seed)
    phi, se = [], []
    for r in r_grid:
        v = _phi_from_deviations(dev, second, r)
        phi.append(v.mean())
        se.append(v.std(ddof=1) / np.sqrt(mc_draws) if mc_draws > 1 else 0.0)
    phi = np.array(phi)
    try:
        rstar = fixed_point(r_grid, phi)
    except ValueError:
        rstar = float("nan")
    return LocalComplexityEstimate(r_grid, phi, np.array(se), rstar, mc_draws, seed, n)


def local_complexity(cls: FunctionClassSample, r: float, n: int, mc_draws: int, seed: int) -> float:
    if r < 0:
        raise ValueError("r must be nonnegative")
    return float(local_complexity_curve(cls, n, [r], mc_draws, seed).phi_values[0])


def _interp_psi(r_grid: np.ndarray, psi: np.ndarray, r: float) -> float:
    """Piecewise log-log interpolation (linear where a value is zero)."""
    k = int(np.clip(np.searchsorted(r_grid, r) - 1, 0, r_grid.size - 2))
    r0, r1, p0, p1 = r_grid[k], r_grid[k + 1], psi[k], psi[k + 1]
    if r == r0:
        return float(p0)
    if r == r1:
        return float(p1)
    if p0 > 0 and p1 > 0 and r0 > 0:
        s = math.log(r / r0) / math.log(r1 / r0)
        return float(math.exp((1 - s) * math.log(p0) + s * math.log(p1)))
    s = (r - r0) / (r1 - r0)
    return float((1 - s) * p0 + s * p1)


def fixed_point(r_grid, psi_values=None, tol: float = 1e-13) -> float:
    """Root of ``psi(r) = r`` by bisection on the interpolated curve.

    ``r_grid`` is increasing; ``psi_values`` the samples.  Alternatively pass a
    callable as ``psi_values`` to bisect it directly.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    if r_grid.size < 2 or np.any(np.diff(r_grid) <= 0):
        raise ValueError("r grid must be increasing with at least two points")
    if callable(psi_values):
        psi = psi_values
    else:
        values = np.asarray(psi_values, dtype=float)
        if values.shape != r_grid.shape:
            raise ValueError("one psi value per grid point")
        psi = lambda r: _interp_psi(r_grid, values, r)  # noqa: E731
    lo, hi = float(r_grid[0]), float(r_grid[-1])
    d_lo, d_hi = psi(lo) - lo, psi(hi) - hi
    if d_lo == 0:
        return lo
    if d_hi == 0:
        return hi
    if not (d_lo > 0 > d_hi):
        raise ValueError("fixed point outside grid")
    log_space = lo > 0
    for _ in range(400):
        mid = math.sqrt(lo * hi) if log_space else 0.5 * (lo + hi)
        if psi(mid) - mid > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Complexity budgets
# ---------------------------------------------------------------------------


def pdim_budget(c: NetComplexity) -> int:
    """``L * W * ceil(ln U)``."""
    L, W, U = c.depth_L, c.nonzero_weights_W, c.computation_units_U
    if U <= 1:
        return 0
    return int(L * W * math.ceil(math.log(U)))


def size_network(n: float, d: int, r: int) -> tuple[int, int, int]:
    """``L = ceil(d / (2r + d) * ln n)`` (at least 1), ``W = U = ceil(e^L)``."""
    if n < 2 or d < 1 or r < 1:
        raise ValueError("need n >= 2, d >= 1, r >= 1")
    # the 1e-12 guard keeps exact integers such as ln(e^3) / 1 from rounding up
    L = max(1, math.ceil(d / (2 * r + d) * math.log(n) - 1e-12))
    W = math.ceil(math.exp(L))
    return L, W, W


def fit_capacity_exponents(eps_grid, counts) -> tuple[float, float, float]:
    """Least-squares fit ``ln N = ln s + V ln(1 / eps)``; returns ``(s, V, rms residual)``."""
    eps = np.asarray(eps_grid, dtype=float)
    N = np.asarray(counts, dtype=float)
    if eps.size < 3 or eps.size != N.size:
        raise ValueError("need at least three (eps, count) pairs")
    if np.any(eps <= 0) or np.any(N < 1):
        raise ValueError("eps must be positive and counts >= 1")
    x = np.log(1.0 / eps)
    if np.ptp(x) == 0:
        raise ValueError("degenerate eps grid")
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, np.log(N), rcond=None)
    resid = np.log(N) - A @ coef
    return float(np.exp(coef[0])), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


@dataclass
class CapacityReport:
    eps_grid: list
    covering_counts: list
    fitted_s: float
    fitted_V: float
    fit_residual: float
    pdim_budget: int
    local: list = field(default_factory=list)

    def covering_rows(self):
        return list(zip(self.eps_grid, self.covering_counts))


def capacity_report(cls: FunctionClassSample, eps_grid, complexity: NetComplexity) -> CapacityReport:
    counts = covering_curve(cls, eps_grid)
    s, V, res = fit_capacity_exponents(eps_grid, counts)
    return CapacityReport(list(eps_grid), counts, s, V, res, pdim_budget(complexity))
