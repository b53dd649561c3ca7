"""Synthetic pairwise regression: smooth cosine targets, bounded noise, the
Bayes predictor and excess-risk evaluation for the least-squares loss."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Estimate, PairwiseLoss, SampleSet, least_squares


@dataclass(frozen=True, eq=False)
class SmoothTarget:
    """``f(x) = sum_k a_k cos(2 pi <k, x> + phi_k)`` on ``[0, 1]^d``.

    ``sobolev_bound`` is the certificate ``max_{j <= r} sum_k |a_k| (2 pi |k|_1)^j``
    which dominates every ``sup |D^alpha f|`` with ``|alpha|_1 <= r``.
    """

    d: int
    r: int
    k_max: int
    freqs: np.ndarray
    coefficients: np.ndarray
    phases: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        freqs = np.array(self.freqs, dtype=int).reshape(-1, self.d)
        coef = np.array(self.coefficients, dtype=float).reshape(-1)
        ph = np.array(self.phases, dtype=float).reshape(-1)
        if not (freqs.shape[0] == coef.size == ph.size):
            raise ValueError("one coefficient and phase per frequency")
        for a in (freqs, coef, ph):
            a.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "phases", ph)

    @property
    def target_id(self) -> str:
        return f"cos-d{self.d}-r{self.r}-k{self.k_max}-s{self.seed}"

    def _l1(self):
        return np.abs(self.freqs).sum(axis=1).astype(float)

    @property
    def sobolev_bound(self) -> float:
        base = 2.0 * np.pi * self._l1()
        a = np.abs(self.coefficients)
        return float(max(np.sum(a * base**j) for j in range(self.r + 1)))

    @property
    def sup_bound(self) -> float:
        """Certified ``sup |f|``."""
        return float(np.abs(self.coefficients).sum())

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = 2.0 * np.pi * (X @ self.freqs.T) + self.phases
        return np.cos(theta) @ self.coefficients

    def derivative(self, X, alpha) -> np.ndarray:
        """Closed-form ``D^alpha f`` at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        alpha = np.asarray(alpha, dtype=int)
        order = int(alpha.sum())
        scale = np.prod((2.0 * np.pi * self.freqs) ** alpha, axis=1)
        theta = 2.0 * np.pi * (X @ self.freqs.T) + self.phases + order * np.pi / 2
        return np.cos(theta) @ (self.coefficients * scale)

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d, "r": self.r, "k_max": self.k_max, "seed": self.seed,
            "freqs": self.freqs.tolist(),
            "coefficients": self.coefficients.tolist(),
            "phases": self.phases.tolist(),
            "sobolev_bound": self.sobolev_bound,
        })

    @classmethod
    def from_json(cls, text: str) -> "SmoothTarget":
        doc = json.loads(text)
        return cls(doc["d"], doc["r"], doc["k_max"], np.array(doc["freqs"]).reshape(-1, doc["d"]),
                   doc["coefficients"], doc["phases"], doc.get("seed"))


def half_space_frequencies(d: int, k_max: int) -> np.ndarray:
    """Nonzero ``k`` with ``|k|_inf <= k_max`` and first nonzero entry positive."""
    out = []
    for k in itertools.product(range(-k_max, k_max + 1), repeat=d):
        nz = [c for c in k if c != 0]
        if nz and nz[0] > 0:
            out.append(k)
    return np.array(out, dtype=int).reshape(-1, d)


def generate_target(d: int, r: int, k_max: int = 8, seed: int = 0) -> SmoothTarget:
    """Random cosine expansion with ``|a_k| ~ (1 + |k|_1)^-(r + d + 1)``,
    rescaled so the certified Sobolev bound equals 1."""
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = np.random.default_rng(seed)
    freqs = half_space_frequencies(d, k_max)
    l1 = np.abs(freqs).sum(axis=1)
    signs = rng.choice([-1.0, 1.0], size=len(freqs))
    phases = rng.uniform(0.0, 2.0 * np.pi, len(freqs))
    coef = signs * (1.0 + l1) ** -(r + d + 1.0)
    target = SmoothTarget(d, r, k_max, freqs, coef, phases, seed)
    return normalized(target)


def normalized(target: SmoothTarget, level: float = 1.0) -> SmoothTarget:
    b = target.sobolev_bound
    if b == 0:
        return target
    coef = target.coefficients * (level / b)
    out = SmoothTarget(target.d, target.r, target.k_max, target.freqs, coef, target.phases, target.seed)
    # guard against the rescaled certificate landing one ulp above the level
    while out.sobolev_bound > level:
        coef = coef * (1.0 - 1e-15)
        out = SmoothTarget(target.d, target.r, target.k_max, target.freqs, coef, target.phases, target.seed)
    return out


@dataclass(frozen=True)
class NoiseModel:
    """Centred bounded noise: uniform on ``[-sigma, sigma]`` or ``+-sigma``."""

    kind: str = "uniform"
    sigma: float = 0.3

    def __post_init__(self):
        if self.kind not in ("uniform", "two_point"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-self.sigma, self.sigma, size)
        return self.sigma * rng.choice([-1.0, 1.0], size=size)

    @property
    def variance(self) -> float:
        return self.sigma**2 / 3.0 if self.kind == "uniform" else self.sigma**2

    def label_bound(self, target: SmoothTarget) -> float:
        # the 1e-12 slack absorbs round-off in evaluating the cosine sum
        return target.sup_bound + self.sigma + 1e-12


@dataclass(frozen=True, eq=False)
class SyntheticDistribution:
    """``X ~ U[0, 1]^d``, ``Y = f(X) + noise``."""

    target: SmoothTarget
    noise: NoiseModel = field(default_factory=NoiseModel)

    @property
    def d(self) -> int:
        return self.target.d

    @property
    def B(self) -> float:
        return self.noise.label_bound(self.target)

    def draw(self, n: int, rng: np.random.Generator):
        X = rng.random((n, self.d))
        return X, self.target(X) + self.noise.draw(rng, n)


class BayesPredictor:
    """``f_rho(x, x') = f(x) - f(x')`` for the least-squares pairwise loss."""

    def __init__(self, target: SmoothTarget):
        self.target = target

    def __call__(self, x1, x2):
        return self.target(x1) - self.target(x2)

    def pair_matrix(self, X):
        v = self.target(X)
        return v[:, None] - v[None, :]

    def pair_rows(self, X, start: int, stop: int):
        v = self.target(X)
        return v[start:stop, None] - v[None, :]


def sample_data(target: SmoothTarget, noise: NoiseModel, n: int, seed: int) -> SampleSet:
    if n < 2:
        raise ValueError("n must be >= 2")
    X, y = SyntheticDistribution(target, noise).draw(n, np.random.default_rng(seed))
    return SampleSet(X, y, noise.label_bound(target), seed=seed, target_id=target.target_id)


def sample_to_csv(S: SampleSet, path) -> None:
    """Write ``x1 .. xd, y`` rows with 17 significant digits."""
    header = ",".join([f"x{k + 1}" for k in range(S.d)] + ["y"])
    np.savetxt(path, np.column_stack([S.x, S.y]), delimiter=",", fmt="%.17g", header=header, comments="")


def sample_from_csv(path, B: float, seed: int | None = None, target_id: str | None = None) -> SampleSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SampleSet(data[:, :-1], data[:, -1], B, seed=seed, target_id=target_id)


def midpoint_grid(d: int, per_axis: int) -> np.ndarray:
    t = (np.arange(per_axis) + 0.5) / per_axis
    mesh = np.meshgrid(*([t] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _blocked_sq_diff_mean(f, target: SmoothTarget, X, block: int = 256) -> float:
    """Mean of ``(f - f_rho)^2`` over all ordered pairs of ``X`` (diagonal included)."""
    N = X.shape[0]
    v = target(X)
    total = 0.0
    for s in range(0, N, block):
        R = X[s:s + block]
        k = R.shape[0]
        if hasattr(f, "pair_rows"):
            F = f.pair_rows(X, s, s + k)
        else:
            F = np.asarray(f(np.repeat(R, N, axis=0), np.tile(X, (k, 1))), dtype=float).reshape(k, N)
        diff = F - (v[s:s + block, None] - v[None, :])
        total += float(np.sum(diff * diff))
    return total / (N * N)


def excess_risk_ls(f, target: SmoothTarget, quad_points: int | None = None,
                   mc_n: int = 1_000_000, seed: int = 0) -> Estimate:
    """``E(f) - E(f_rho) = ||f - f_rho||^2`` over ``rho_x x rho_x``.

    Composite midpoint rule with ``quad_points`` nodes per axis for d <= 2
    (defaults 512 and 128), Monte Carlo over ``mc_n`` pairs otherwise.
    """
    bayes = BayesPredictor(target)
    d = target.d
    if d <= 2:
        q = quad_points or (512 if d == 1 else 128)
        grid = midpoint_grid(d, q)
        if grid.shape[0] <= 4096 and hasattr(f, "pair_matrix"):
            diff = f.pair_matrix(grid) - bayes.pair_matrix(grid)
            return Estimate(float(np.mean(diff * diff)), 0.0)
        return Estimate(_blocked_sq_diff_mean(f, target, grid), 0.0)
    rng = np.random.default_rng(seed)
    X1, X2 = rng.random((mc_n, d)), rng.random((mc_n, d))
    diff = f(X1, X2) - bayes(X1, X2)
    sq = diff * diff
    return Estimate(float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(mc_n)))


# ---------------------------------------------------------------------------
# Variance-expectation check
# ---------------------------------------------------------------------------


@dataclass
class VarianceExpectationReport:
    violations: int
    margin: float
    mean_q: np.ndarray
    mean_q2: np.ndarray
    B: float


def variance_expectation_from_samples(q_samples, B: float, n_se: float = 3.0) -> VarianceExpectationReport:
    """Count candidates with ``E[q^2] > 64 B^2 E[q] + n_se * SE``.

    Each entry of ``q_samples`` holds Monte Carlo draws of one shifted loss
    ``q``.  The standard error is that of the per-draw difference
    ``q^2 - 64 B^2 q``.  A mean of ``q`` significantly below zero is rejected.
    """
    M = 64.0 * B * B
    viol, margin = 0, np.inf
    mq, mq2 = [], []
    for q in q_samples:
        q = np.asarray(q, dtype=float)
        m = q.size
        se_q = q.std(ddof=1) / np.sqrt(m) if m > 1 else 0.0
        if q.mean() < -n_se * se_q:
            raise ValueError("shifted loss has negative mean; a variance-expectation "
                             "bound needs a nonnegative first moment")
        D = q * q - M * q
        se = D.std(ddof=1) / np.sqrt(m) if m > 1 else 0.0
        slack = n_se * se - D.mean()
        viol += int(slack < 0)
        margin = min(margin, float(slack))
        mq.append(q.mean())
        mq2.append(np.mean(q * q))
    return VarianceExpectationReport(viol, margin, np.array(mq), np.array(mq2), B)


def verify_variance_expectation(candidates, target: SmoothTarget, noise: NoiseModel,
                                mc_n: int, seed: int,
                                loss: PairwiseLoss | None = None) -> VarianceExpectationReport:
    """Monte Carlo check of the ``(1, 64 B^2)`` variance-expectation bound of the
    least-squares shifted class, on common draws for every candidate."""
    dist = SyntheticDistribution(target, noise)
    B = dist.B
    loss = loss if loss is not None else least_squares(B)
    rng = np.random.default_rng(seed)
    X1, y1 = dist.draw(mc_n, rng)
    X2, y2 = dist.draw(mc_n, rng)
    base = loss.value(BayesPredictor(target)(X1, X2), y1, y2)
    qs = (loss.value(f(X1, X2), y1, y2) - base for f in candidates)
    return variance_expectation_from_samples(qs, B)
