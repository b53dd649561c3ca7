"""Hoeffding decomposition of the shifted pairwise risk and Rademacher chaos
diagnostics.

For the shifted kernel ``q_f(z, z') = l(f(x, x'), y, y') - l(f_ref(x, x'), y, y')``
with ``g(z) = E[q(z, Z)]``:

    h(z)       = E U - g(z)
    hhat(z, w) = E U - h(z) - h(w) - q(z, w)
    E U - U_n  = 2 T_n + W_n,   T_n = mean h(Z_i),  W_n = mean_{i != j} hhat(Z_i, Z_j)

Conditional expectations come either from exact sums over the atoms of a
``DiscreteDistribution`` or from Monte Carlo against a sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PairwiseLoss, SampleSet, loss_matrix, offdiag_mean, pair_values

_DRAW_BLOCK = 1024


# ---------------------------------------------------------------------------
# Discrete distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finitely many atoms ``z_k = (x_k, y_k)`` with probabilities ``p_k``."""

    x: np.ndarray
    y: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=float).reshape(-1)
        p = np.array(self.probs, dtype=float).reshape(-1)
        if not (x.shape[0] == y.size == p.size) or p.size == 0:
            raise ValueError("need one x, y and probability per atom")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        for a in (x, y, p):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def B(self) -> float:
        return float(np.abs(self.y).max())

    @property
    def atoms(self):
        return [((self.x[k], self.y[k]), self.probs[k]) for k in range(self.size)]

    def draw_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.size, size=n, p=self.probs)

    def draw(self, n: int, rng: np.random.Generator):
        k = self.draw_indices(n, rng)
        return self.x[k], self.y[k]

    def sample(self, n: int, seed: int) -> SampleSet:
        X, y = self.draw(n, np.random.default_rng(seed))
        return SampleSet(X, y, max(self.B, 1e-300), seed=seed, target_id="discrete")

    def index_of(self, X, y) -> np.ndarray:
        """Atom index of every ``(X[i], y[i])``; raises if a point is not an atom."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        hit = np.all(X[:, None, :] == self.x[None, :, :], axis=2) & (y[:, None] == self.y[None, :])
        if not np.all(hit.any(axis=1)):
            bad = int(np.flatnonzero(~hit.any(axis=1))[0])
            raise ValueError(f"sample point {bad} is not an atom of the distribution")
        return hit.argmax(axis=1)

    @classmethod
    def from_target(cls, target, sigma: float, n_x: int, seed: int) -> "DiscreteDistribution":
        """``n_x`` uniform design points, each with labels ``f(x) +- sigma`` at
        probability ``1 / (2 n_x)``, so ``E[Y | x] = f(x)`` exactly."""
        rng = np.random.default_rng(seed)
        xs = rng.random((n_x, target.d))
        fx = target(xs)
        X = np.repeat(xs, 2, axis=0)
        y = np.column_stack([fx + sigma, fx - sigma]).ravel()
        return cls(X, y, np.full(2 * n_x, 1.0 / (2 * n_x)))

    @classmethod
    def random(cls, rng: np.random.Generator, d: int = 1, max_atoms: int = 10,
               label_scale: float = 1.0) -> "DiscreteDistribution":
        k = int(rng.integers(1, max_atoms + 1))
        p = rng.random(k) + 0.05
        p /= p.sum()
        p[-1] = 1.0 - p[:-1].sum()
        return cls(rng.random((k, d)), rng.uniform(-label_scale, label_scale, k), p)


class DiscreteBayes:
    """Least-squares Bayes predictor ``m(x) - m(x')`` of a discrete distribution,
    with ``m(x) = E[Y | X = x]``."""

    def __init__(self, dist: DiscreteDistribution):
        self.dist = dist

    def regression(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        same = np.all(X[:, None, :] == self.dist.x[None, :, :], axis=2)
        w = same * self.dist.probs
        mass = w.sum(axis=1)
        if np.any(mass == 0):
            raise ValueError("regression function queried off the support")
        return (w @ self.dist.y) / mass

    def __call__(self, x1, x2):
        return self.regression(x1) - self.regression(x2)


# ---------------------------------------------------------------------------
# Kernels and decompositions
# ---------------------------------------------------------------------------


def _q_pairs(f, f_ref, loss: PairwiseLoss, X1, y1, X2, y2) -> np.ndarray:
    return loss.value(f(X1, X2), y1, y2) - loss.value(f_ref(X1, X2), y1, y2)


def kernel_matrix(f, f_ref, S: SampleSet, loss: PairwiseLoss) -> np.ndarray:
    """``Q[i, j] = q_f(Z_i, Z_j)`` with the diagonal set to 0."""
    Q = loss_matrix(pair_values(f, S.x), S.y, loss) - loss_matrix(pair_values(f_ref, S.x), S.y, loss)
    np.fill_diagonal(Q, 0.0)
    return Q


def _full_kernel(f, f_ref, loss, X, y) -> np.ndarray:
    """Kernel over all ordered pairs of ``(X, y)``, diagonal included."""
    n = y.size
    ii, jj = np.divmod(np.arange(n * n), n)
    return _q_pairs(f, f_ref, loss, X[ii], y[ii], X[jj], y[jj]).reshape(n, n)


@dataclass
class HoeffdingDecomposition:
    u_n: float
    expected_u: float
    h_values: np.ndarray
    t_n: float
    hhat_matrix: np.ndarray
    w_n: float
    residual_se: float = 0.0
    atom_hhat: np.ndarray | None = None
    atom_probs: np.ndarray | None = None
    backend: str = "exact"

    @property
    def residual(self) -> float:
        """``E U - U_n - 2 T_n - W_n``."""
        return self.expected_u - self.u_n - 2.0 * self.t_n - self.w_n

    def degeneracy(self) -> np.ndarray:
        """``sum_w hhat(z, w) p(w)`` for every atom ``z`` (exact backend only)."""
        if self.atom_hhat is None:
            raise ValueError("degeneracy needs the exact backend")
        return self.atom_hhat @ self.atom_probs

    def summary_row(self) -> tuple:
        return (self.u_n, self.expected_u, self.t_n, self.w_n, self.residual, self.residual_se)


def _assemble(Q: np.ndarray, g: np.ndarray, eu: float, centre: float) -> tuple:
    h = centre - g
    H = g[:, None] + g[None, :] - centre - Q
    np.fill_diagonal(H, 0.0)
    return h, H, offdiag_mean(Q), float(h.mean()), offdiag_mean(H)


def hoeffding_decompose_exact(f, f_ref, S: SampleSet, dist: DiscreteDistribution,
                              loss: PairwiseLoss) -> HoeffdingDecomposition:
    """Decomposition with conditional expectations summed over the atoms."""
    idx = dist.index_of(S.x, S.y)
    QA = _full_kernel(f, f_ref, loss, dist.x, dist.y)
    gA = QA @ dist.probs
    eu = float(dist.probs @ gA)
    HA = gA[:, None] + gA[None, :] - eu - QA
    Q = QA[np.ix_(idx, idx)].copy()
    np.fill_diagonal(Q, 0.0)
    h, H, u, t, w = _assemble(Q, gA[idx], eu, eu)
    return HoeffdingDecomposition(u, eu, h, t, H, w, 0.0, HA, dist.probs.copy(), "exact")


def _conditional_means(f, f_ref, loss, X, y, Xm, ym) -> np.ndarray:
    m = ym.size
    g = np.empty(y.size)
    for i in range(y.size):
        Xi = np.broadcast_to(X[i], (m, X.shape[1]))
        g[i] = _q_pairs(f, f_ref, loss, Xi, np.full(m, y[i]), Xm, ym).mean()
    return g


def hoeffding_decompose_mc(f, f_ref, S: SampleSet, dist, mc_budget: int, seed: int,
                           loss: PairwiseLoss) -> HoeffdingDecomposition:
    """Decomposition with conditional expectations by Monte Carlo.

    ``dist`` is any sampler with ``draw(n, rng) -> (X, y)``.  ``E[q(Z_i, Z)]``
    averages over ``mc_budget`` fresh draws.  ``E U`` is estimated from
    ``mc_budget`` independent pairs, and the centring constant inside ``h`` and
    ``hhat`` from a second, independent set of pairs, so the identity residual
    is the difference of two unbiased estimates with standard error
    ``residual_se`` of order ``1 / sqrt(mc_budget)``.
    """
    rng = np.random.default_rng(seed)
    Xm, ym = dist.draw(mc_budget, rng)
    g = _conditional_means(f, f_ref, loss, S.x, S.y, Xm, ym)
    pairs = []
    for _ in range(2):
        X1, y1 = dist.draw(mc_budget, rng)
        X2, y2 = dist.draw(mc_budget, rng)
        pairs.append(_q_pairs(f, f_ref, loss, X1, y1, X2, y2))
    eu, centre = float(pairs[0].mean()), float(pairs[1].mean())
    se = float(np.sqrt((pairs[0].var(ddof=1) + pairs[1].var(ddof=1)) / mc_budget)) if mc_budget > 1 else 0.0
    h, H, u, t, w = _assemble(kernel_matrix(f, f_ref, S, loss), g, eu, centre)
    return HoeffdingDecomposition(u, eu, h, t, H, w, se, backend="mc")


def decompose(f, f_ref, S: SampleSet, dist, loss: PairwiseLoss,
              mc_budget: int = 100_000, seed: int = 0) -> HoeffdingDecomposition:
    """Exact backend for a ``DiscreteDistribution``, Monte Carlo otherwise."""
    if isinstance(dist, DiscreteDistribution):
        return hoeffding_decompose_exact(f, f_ref, S, dist, loss)
    return hoeffding_decompose_mc(f, f_ref, S, dist, mc_budget, seed, loss)


# ---------------------------------------------------------------------------
# Chaos diagnostics
# ---------------------------------------------------------------------------


def rademacher_block(seed: int, block: int, n: int, size: int = _DRAW_BLOCK) -> np.ndarray:
    """Sign vectors ``block * size ... (block + 1) * size - 1`` for ``seed``.

    Keyed by ``(seed, block)`` so any draw range can be regenerated on its own.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))
    return rng.integers(0, 2, (size, n), dtype=np.int8) * 2.0 - 1.0


def rademacher_draws(seed: int, n: int, count: int) -> np.ndarray:
    blocks = -(-count // _DRAW_BLOCK)
    E = np.concatenate([rademacher_block(seed, b, n) for b in range(blocks)]) if blocks else np.empty((0, n))
    return E[:count]


@dataclass
class ChaosDiagnostics:
    z_eps_mean: float
    u_eps_mean: float
    m_mean: float
    f_sup: float
    d_sup: float
    mc_draws: int
    seed: int
    z_draws: np.ndarray
    u_draws: np.ndarray
    m_draws: np.ndarray
    n: int

    def stderr(self, name: str) -> float:
        v = getattr(self, f"{name}_draws")
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0

    @property
    def aggregate(self) -> float:
        """``E Z + E U + E M + F n`` with the unspecified constant set to 1."""
        return self.z_eps_mean + self.u_eps_mean + self.m_mean + self.f_sup * self.n

    def draw_rows(self):
        return [(k, self.z_draws[k], self.u_draws[k], self.m_draws[k]) for k in range(self.mc_draws)]


def chaos_from_matrices(H_list, mc_draws: int, seed: int) -> ChaosDiagnostics:
    """Diagnostics for a finite class given its ``hhat`` matrices (zero diagonal)."""
    if len(H_list) == 0:
        raise ValueError("candidate list is empty")
    Hs = np.stack([np.asarray(H, dtype=float) for H in H_list])
    n = Hs.shape[1]
    off = ~np.eye(n, dtype=bool)
    f_sup = float(np.abs(Hs[:, off]).max()) if n > 1 else 0.0
    d_sup = float(np.sqrt((Hs[:, off] ** 2).mean(axis=1)).max()) if n > 1 else 0.0
    z = np.empty(mc_draws)
    u = np.empty(mc_draws)
    m = np.empty(mc_draws)
    for b in range(-(-mc_draws // _DRAW_BLOCK)):
        lo, hi = b * _DRAW_BLOCK, min((b + 1) * _DRAW_BLOCK, mc_draws)
        E = rademacher_block(seed, b, n)[: hi - lo]
        HE = np.einsum("fij,kj->kfi", Hs, E)
        z[lo:hi] = np.abs(np.einsum("kfi,ki->kf", HE, E)).max(axis=1)
        u[lo:hi] = np.sqrt((HE * HE).sum(axis=2)).max(axis=1)
        m[lo:hi] = np.abs(HE).max(axis=(1, 2))
    return ChaosDiagnostics(float(z.mean()), float(u.mean()), float(m.mean()),
                            f_sup, d_sup, mc_draws, seed, z, u, m, n)


def chaos_diagnostics(candidates, f_ref, S: SampleSet, loss: PairwiseLoss, mc_draws: int,
                      seed: int, dist=None, mc_budget: int = 100_000) -> ChaosDiagnostics:
    """Rademacher chaos quantities over a finite candidate class.

    Per sign vector ``e``: ``Z = max_f |e' H_f e|``, ``U = max_f ||H_f e||_2``,
    ``M = max_f max_k |(H_f e)_k|``.  ``F`` and ``D`` are the sup and L2 norms of
    the ``hhat`` entries over ``i != j``.
    """
    if len(candidates) == 0:
        raise ValueError("candidate list is empty")
    if dist is None:
        raise ValueError("a distribution is needed for the conditional expectations")
    Hs = [decompose(f, f_ref, S, dist, loss, mc_budget, seed).hhat_matrix for f in candidates]
    return chaos_from_matrices(Hs, mc_draws, seed)


def estimation_error_split(f_hat, f_H, f_ref, S: SampleSet, loss: PairwiseLoss, dist,
                           mc_budget: int = 100_000, seed: int = 0) -> dict:
    """``S1 = 2 T_n(f_hat) - 2 T_n(f_H)`` and ``S2 = W_n(f_hat) - W_n(f_H)``.

    Both decompositions use the same backend and seed.
    """
    a = decompose(f_hat, f_ref, S, dist, loss, mc_budget, seed)
    b = decompose(f_H, f_ref, S, dist, loss, mc_budget, seed)
    return {"s1": 2.0 * a.t_n - 2.0 * b.t_n, "s2": a.w_n - b.w_n, "hat": a, "best": b}
