"""Domain types, pairwise losses, risks and empirical metrics.

Predictors are plain callables ``f(x1, x2)`` taking two ``(m, d)`` arrays of
inputs and returning an ``(m,)`` array.  Objects that can evaluate all ordered
pairs of a point set faster than pair-by-pair expose ``pair_matrix(X)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


class InsufficientSampleError(ValueError):
    """Raised when a pairwise quantity needs more points than provided."""


class Estimate(NamedTuple):
    """A numerical estimate with its (Monte Carlo) standard error.

    Deterministic quadratures report ``stderr = 0``.
    """

    value: float
    stderr: float

    def __float__(self) -> float:
        return float(self.value)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplePoint:
    x: np.ndarray
    y: float


@dataclass(frozen=True, eq=False)
class SampleSet:
    """``n`` labelled points with ``x`` in ``[0, 1]^d`` and ``|y| <= B``."""

    x: np.ndarray
    y: np.ndarray
    B: float
    seed: int | None = None
    target_id: str | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError("x must be (n, d) with one label per row")
        if x.shape[0] < 2:
            raise InsufficientSampleError("insufficient sample: need n >= 2")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("inputs must lie in [0, 1]^d")
        if np.any(np.abs(y) > self.B):
            raise ValueError(f"labels exceed the bound B={self.B}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def points(self) -> list[SamplePoint]:
        return [SamplePoint(self.x[i], float(self.y[i])) for i in range(self.n)]

    def permuted(self, perm) -> "SampleSet":
        perm = np.asarray(perm)
        return SampleSet(self.x[perm], self.y[perm], self.B, self.seed, self.target_id)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class LossKind(enum.Enum):
    LEAST_SQUARES = "least_squares"
    HINGE_RANKING = "hinge_ranking"
    METRIC_MARGIN = "metric_margin"


@dataclass(frozen=True)
class PairwiseLoss:
    """A pairwise loss ``l(t, y, y')`` with Lipschitz constant ``K`` in ``t``.

    ``sgn(0) = 0`` for the ranking hinge, so tied labels cost the full margin.
    The metric-margin loss is ``(1 + tau(y, y') (t - b))_+`` with
    ``tau = +1`` on equal labels and ``-1`` otherwise.
    """

    kind: LossKind
    lipschitz_K: float
    bias_b: float = 0.0

    def __post_init__(self):
        if not self.lipschitz_K > 0:
            raise ValueError("lipschitz_K must be positive")

    @property
    def anti_symmetric(self) -> bool:
        return self.kind in (LossKind.LEAST_SQUARES, LossKind.HINGE_RANKING)

    def value(self, t, y, y2):
        t = np.asarray(t, dtype=float)
        if self.kind is LossKind.LEAST_SQUARES:
            r = t - y + y2
            return r * r
        if self.kind is LossKind.HINGE_RANKING:
            return np.maximum(1.0 - np.sign(np.subtract(y, y2)) * t, 0.0)
        tau = np.where(np.equal(y, y2), 1.0, -1.0)
        return np.maximum(1.0 + tau * (t - self.bias_b), 0.0)

    def derivative(self, t, y, y2):
        """d l / d t, taking the left limit (zero) at hinge kinks."""
        t = np.asarray(t, dtype=float)
        if self.kind is LossKind.LEAST_SQUARES:
            return 2.0 * (t - y + y2)
        if self.kind is LossKind.HINGE_RANKING:
            s = np.sign(np.subtract(y, y2))
            return np.where(1.0 - s * t > 0.0, -s, 0.0)
        tau = np.where(np.equal(y, y2), 1.0, -1.0)
        return np.where(1.0 + tau * (t - self.bias_b) > 0.0, tau, 0.0)

    def __call__(self, t, y, y2):
        return self.value(t, y, y2)


def least_squares(B: float) -> PairwiseLoss:
    """Pairwise least squares with the clipped-range constant ``K = 8B``."""
    return PairwiseLoss(LossKind.LEAST_SQUARES, 8.0 * B)


def hinge_ranking() -> PairwiseLoss:
    return PairwiseLoss(LossKind.HINGE_RANKING, 1.0)


def metric_margin(b: float = 1.0) -> PairwiseLoss:
    return PairwiseLoss(LossKind.METRIC_MARGIN, 1.0, bias_b=b)


def loss_eval(loss: PairwiseLoss, t: float, y: float, y2: float) -> float:
    return float(loss.value(t, y, y2))


@dataclass
class SymmetryReport:
    eq_symmetry_ok: bool
    anti_symmetry_ok: bool
    first_failure: tuple | None = None


def _default_reference(x1, x2):
    # anti-symmetric by construction
    return np.sin(3.0 * x1).sum(axis=1) - np.sin(3.0 * x2).sum(axis=1)


def check_loss_symmetries(loss, trials: int = 1000, seed: int = 0,
                          predictor: Predictor | None = None,
                          d: int = 1, B: float = 1.0, tol: float = 1e-12) -> SymmetryReport:
    """Check ``l(t,y,y') = l(-t,y',y)`` and the swap symmetry under an
    anti-symmetric ``predictor`` on ``trials`` random tuples.

    ``loss`` may be a :class:`PairwiseLoss` or any vectorised callable
    ``l(t, y, y')``.  The first failing tuple is reported.
    """
    fn = loss.value if isinstance(loss, PairwiseLoss) else loss
    f = predictor if predictor is not None else _default_reference
    rng = np.random.default_rng(seed)
    t = rng.uniform(-2 * B, 2 * B, trials)
    y = rng.uniform(-B, B, trials)
    y2 = rng.uniform(-B, B, trials)
    ties = rng.random(trials) < 0.1
    y2[ties] = y[ties]
    x1 = rng.random((trials, d))
    x2 = rng.random((trials, d))

    failure = None

    def _close(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.abs(a - b) <= tol * np.maximum(1.0, np.abs(a))

    ok_anti = _close(fn(t, y, y2), fn(-t, y2, y))
    if not ok_anti.all():
        k = int(np.argmin(ok_anti))
        failure = ("anti_symmetry", float(t[k]), float(y[k]), float(y2[k]))

    t12 = f(x1, x2)
    t21 = f(x2, x1)
    ok_eq = _close(fn(t12, y, y2), fn(t21, y2, y))
    if not ok_eq.all() and failure is None:
        k = int(np.argmin(ok_eq))
        failure = ("eq_symmetry", float(t12[k]), float(y[k]), float(y2[k]))
    return SymmetryReport(bool(ok_eq.all()), bool(ok_anti.all()), failure)


# ---------------------------------------------------------------------------
# Risks
# ---------------------------------------------------------------------------


def pair_values(f: Predictor, X: np.ndarray) -> np.ndarray:
    """Matrix ``F[i, j] = f(X[i], X[j])`` over all ordered pairs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if hasattr(f, "pair_matrix"):
        return f.pair_matrix(X)
    n = X.shape[0]
    ii, jj = np.divmod(np.arange(n * n), n)
    return np.asarray(f(X[ii], X[jj]), dtype=float).reshape(n, n)


def offdiag_mean(M: np.ndarray) -> float:
    """Mean over ``i != j`` of a square matrix, summed in row-major order."""
    n = M.shape[0]
    M = np.array(M, dtype=float)
    np.fill_diagonal(M, 0.0)
    return float(M.sum() / (n * (n - 1)))


def loss_matrix(F: np.ndarray, y: np.ndarray, loss: PairwiseLoss) -> np.ndarray:
    L = loss.value(F, y[:, None], y[None, :])
    np.fill_diagonal(L, 0.0)
    return L


def empirical_risk(f: Predictor, S: SampleSet, loss: PairwiseLoss) -> float:
    if S.n < 2:
        raise InsufficientSampleError("insufficient sample")
    return offdiag_mean(loss_matrix(pair_values(f, S.x), S.y, loss))


def _draw_labeled(target, noise, m: int, rng: np.random.Generator):
    X = rng.random((m, target.d))
    return X, target(X) + noise.draw(rng, m)


def population_risk_mc(f: Predictor, target, noise, mc_n: int, seed: int,
                       loss: PairwiseLoss | None = None) -> Estimate:
    """Monte Carlo estimate of ``E l(f(X, X'), Y, Y')`` over ``mc_n`` pairs."""
    loss = loss if loss is not None else least_squares(1.0)
    rng = np.random.default_rng(seed)
    X1, y1 = _draw_labeled(target, noise, mc_n, rng)
    X2, y2 = _draw_labeled(target, noise, mc_n, rng)
    vals = loss.value(f(X1, X2), y1, y2)
    return Estimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(mc_n)))


# ---------------------------------------------------------------------------
# Empirical metrics
# ---------------------------------------------------------------------------


class MetricKind(enum.Enum):
    MU_N_CROSS_RHO = "mu_n_cross_rho"
    NU_N = "nu_n"
    XI = "xi"
    RHO_N = "rho_n"


@dataclass(frozen=True, eq=False)
class EmpiricalMetric:
    kind: MetricKind
    sample: SampleSet
    mc_budget: int = 100_000
    seed: int = 0
    _grid: np.ndarray | None = field(default=None, init=False, repr=False)

    def inner_points(self) -> np.ndarray:
        """Integration nodes for the ``rho_x`` factor (uniform on the cube).

        Midpoint grid of 4096 nodes for d = 1, 128 x 128 for d = 2, otherwise
        ``mc_budget`` uniform draws.
        """
        if self._grid is None:
            d = self.sample.d
            if d == 1:
                g = ((np.arange(4096) + 0.5) / 4096)[:, None]
            elif d == 2:
                t = (np.arange(128) + 0.5) / 128
                a, b = np.meshgrid(t, t, indexing="ij")
                g = np.column_stack([a.ravel(), b.ravel()])
            else:
                g = np.random.default_rng(self.seed).random((self.mc_budget, d))
            object.__setattr__(self, "_grid", g)
        return self._grid


def _offdiag_flat(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    return M[~np.eye(n, dtype=bool)]


def metric_evaluations(f, metric: EmpiricalMetric) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``f`` on the metric's design; returns ``(values, weights)``.

    The metric norm is ``sqrt(sum(weights * values**2))``.  Arrays are accepted
    for the purely sample-based metrics: an ``(n, n)`` matrix for ``NU_N`` and
    ``XI``, a length-``n`` vector for ``RHO_N``.
    """
    S = metric.sample
    n = S.n
    kind = metric.kind
    if kind in (MetricKind.NU_N, MetricKind.XI):
        if callable(f):
            if kind is MetricKind.NU_N:
                M = pair_values(f, S.x)
            else:
                ii, jj = np.divmod(np.arange(n * n), n)
                M = np.asarray(f(S.x[ii], S.y[ii], S.x[jj], S.y[jj]), float).reshape(n, n)
        else:
            M = np.asarray(f, dtype=float)
            if M.shape != (n, n):
                raise ValueError(f"{kind.value} needs an (n, n) pairwise evaluation")
        v = _offdiag_flat(M)
        return v, np.full(v.size, 1.0 / v.size)
    if kind is MetricKind.RHO_N:
        v = np.asarray(f(S.x, S.y) if callable(f) else f, dtype=float).reshape(-1)
        if v.size != n:
            raise ValueError("rho_n needs one value per sample point")
        return v, np.full(n, 1.0 / n)
    if not callable(f):
        raise ValueError("mu_n x rho_x needs a callable pairwise predictor")
    grid = metric.inner_points()
    G = grid.shape[0]
    vals = np.empty((n, G))
    for i in range(n):
        xi = np.broadcast_to(S.x[i], (G, S.d))
        vals[i] = f(grid, xi)
    v = vals.ravel()
    return v, np.full(v.size, 1.0 / v.size)


def metric_norm(f, metric: EmpiricalMetric) -> float:
    v, w = metric_evaluations(f, metric)
    return float(np.sqrt(np.sum(w * v * v)))
