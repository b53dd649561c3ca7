import itertools
import math

import numpy as np
import pytest

from pairlearn.antisym_net import NetComplexity, init_net
from pairlearn.capacity import (FunctionClassSample, capacity_report, covering_curve, covering_number_exact,
                                covering_number_greedy, fixed_point, fit_capacity_exponents, greedy_net,
                                local_complexity, local_complexity_curve, net_inequality_levels, pdim_budget,
                                shifted_class, shifted_class_atoms, size_network, star_hull_grid)
from pairlearn.core import least_squares
from pairlearn.ustat import DiscreteBayes, DiscreteDistribution


def random_class(rng, k=None, p=None):
    k = k or int(rng.integers(1, 7))
    p = p or int(rng.integers(1, 9))
    return FunctionClassSample(rng.normal(size=(k, p)), rng.random(p) + 0.1)


def brute_cover(cls, eps):
    """Smallest subset of the class that is an eps-net, by exhaustive search."""
    D = cls.distances()
    for size in range(1, cls.size + 1):
        for sub in itertools.combinations(range(cls.size), size):
            if np.all(D[list(sub)].min(axis=0) <= eps):
                return size
    raise AssertionError("unreachable")


# -- covering numbers ---------------------------------------------------------


def test_greedy_trivial_examples():
    one = FunctionClassSample([[0.3, -0.2]], [0.5, 0.5])
    assert covering_number_greedy(one, 1e-9) == 1
    two = FunctionClassSample([[0.0], [1.0]], [1.0])
    assert covering_number_greedy(two, 1.5) == 1
    assert covering_number_greedy(two, 0.4) == 2
    with pytest.raises(ValueError):
        covering_number_greedy(two, 0.0)


def test_greedy_net_is_valid_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(30):
        cls = random_class(rng)
        eps = np.sort(rng.uniform(0.05, 3.0, 6))
        for e in eps:
            net = greedy_net(cls, e)
            assert np.all(cls.distances()[net].min(axis=0) <= e)
        counts = covering_curve(cls, eps)
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert counts == [covering_number_greedy(cls, e) for e in eps]


def test_exact_cover_matches_brute_force_and_brackets_greedy():
    rng = np.random.default_rng(1)
    for _ in range(60):
        cls = random_class(rng)
        for e in rng.uniform(0.1, 2.5, 3):
            exact = covering_number_exact(cls, e)
            assert exact == brute_cover(cls, e)
            greedy = covering_number_greedy(cls, e)
            # greedy centres are pairwise more than e apart, so no internal e/2-ball holds two of them
            assert exact <= greedy <= brute_cover(cls, e / 2)


def test_greedy_can_exceed_twice_exact():
    # point 2 is within 2 of every other point, but farthest-first from point 0 never picks it
    pts = [[2, 1, 2], [3, 2, 0], [2, 2, 1], [1, 2, 0], [2, 3, 0], [1, 3, 2]]
    cls = FunctionClassSample(np.array(pts, float), np.ones(3))
    assert covering_number_exact(cls, 2.0) == 1
    assert covering_number_greedy(cls, 2.0) == 3
    assert covering_number_greedy(cls, 2.0) <= covering_number_exact(cls, 1.0)


def test_exact_cover_with_external_centres():
    cls = FunctionClassSample([[0.0], [2.0]], [1.0])
    mid = FunctionClassSample([[1.0]], [1.0])
    assert covering_number_exact(cls, 1.0, centers=mid) == 1
    with pytest.raises(ValueError, match="cannot cover"):
        covering_number_exact(cls, 0.5, centers=mid)


# -- star hull ---------------------------------------------------------------------


def test_star_hull_examples():
    cls = FunctionClassSample([[1.0, 2.0]], [0.5, 0.5])
    hull = star_hull_grid(cls, 1)
    assert sorted(map(tuple, hull.values)) == [(0.0, 0.0), (1.0, 2.0)]
    hull4 = star_hull_grid(random_class(np.random.default_rng(2), k=3), 4)
    assert np.any(np.all(hull4.values == 0.0, axis=1))
    assert hull4.size == 1 + 3 * 4
    with pytest.raises(ValueError):
        star_hull_grid(cls, 0)


def test_star_hull_net_inequality_small():
    rng = np.random.default_rng(3)
    for _ in range(10):
        cls = random_class(rng, k=int(rng.integers(1, 4)), p=int(rng.integers(1, 5)))
        A = cls.sup_norm()
        for t in np.geomspace(0.2, 1.0, 4) * A:
            hull = star_hull_grid(cls, 4, net_inequality_levels(A, t))
            assert covering_number_exact(hull, t) <= covering_number_exact(cls, t / 2) * math.ceil(A / t)


def test_net_inequality_levels_cover_unit_interval():
    A, t = 3.0, 0.7
    lv = net_inequality_levels(A, t)
    assert lv.size == math.ceil(A / t) and lv.max() <= 1.0
    a = np.linspace(0, 1, 10_001)
    assert np.abs(a[:, None] - lv[None, :]).min(axis=1).max() <= t / (2 * A) + 1e-12


# -- shifted class ---------------------------------------------------------------


def _setup(seed=0, k=4):
    rng = np.random.default_rng(seed)
    dist = DiscreteDistribution.random(rng, max_atoms=8)
    B = dist.B
    ref = DiscreteBayes(dist)
    nets = [init_net(1, [2, 5, 1], 2 * B, seed=seed * 100 + j) for j in range(k)]
    return dist, ref, nets, least_squares(B)


def test_shifted_class_of_reference_is_zero():
    dist, ref, nets, loss = _setup()
    S = dist.sample(6, seed=1)
    assert np.all(shifted_class([ref], ref, S, loss, dist).values == 0.0)


def test_shifted_class_mc_agrees_with_exact():
    dist, ref, nets, loss = _setup(1)
    S = dist.sample(5, seed=2)
    ex = shifted_class(nets, ref, S, loss, dist).values
    mc = shifted_class(nets, ref, S, loss, _Sampler(dist), mc_budget=40_000, seed=3).values
    assert np.abs(ex - mc).max() <= 0.05 * max(1.0, np.abs(ex).max())


class _Sampler:
    # hides the discrete type so the Monte Carlo branch is used
    def __init__(self, dist):
        self.dist = dist

    def draw(self, n, rng):
        return self.dist.draw(n, rng)


def test_lipschitz_contraction_and_uniform_bound():
    for seed in range(8):
        dist, ref, nets, loss = _setup(seed)
        eta, B = nets[0].eta, dist.B
        K = 2 * eta + 4 * B  # Lipschitz constant of the square loss for |t| <= eta, |y - y'| <= 2B
        S = dist.sample(6, seed=seed)
        G = shifted_class(nets, ref, S, loss, dist).values
        assert np.abs(G).max() <= 2 * K * eta + 1e-12
        for a, b in itertools.combinations(range(len(nets)), 2):
            lhs = np.sqrt(np.mean((G[a] - G[b]) ** 2))
            m = dist.size
            Xi = np.repeat(S.x, m, axis=0)
            Xk = np.tile(dist.x, (S.n, 1))
            diff2 = ((nets[a](Xi, Xk) - nets[b](Xi, Xk)) ** 2).reshape(S.n, m) @ dist.probs
            rhs = K * np.sqrt(diff2.mean())
            assert lhs <= rhs + 1e-12


# -- local complexity -------------------------------------------------------------


def test_local_complexity_endpoints():
    dist, ref, nets, loss = _setup(2)
    atoms = shifted_class_atoms(nets, ref, loss, dist)
    assert local_complexity(atoms, 0.0, 10, 500, 0) == 0.0
    big = 10 * (atoms.values**2 @ atoms.weights).max()
    assert local_complexity(atoms, big, 10, 500, 0) == local_complexity(atoms, 2 * big, 10, 500, 0)
    with pytest.raises(ValueError):
        local_complexity(atoms, -1.0, 10, 10, 0)


def test_unconstrained_value_for_single_draw_is_exact_average():
    # with n = 1 the sup deviation is max_g |E g - g(z)|, averaged over atoms z
    dist, ref, nets, loss = _setup(3)
    atoms = shifted_class_atoms(nets, ref, loss, dist)
    V, p = atoms.values, atoms.weights
    mean = V @ p
    exact = float(p @ np.abs(mean[:, None] - V).max(axis=0))
    big = 10 * (V**2 @ p).max() + 1.0
    est = local_complexity_curve(atoms, 1, [big / 2, big], 50_000, 4)
    assert abs(est.phi_values[-1] - exact) <= 3 * est.phi_se[-1] + 1e-15


def test_local_complexity_sub_root_and_monotone():
    dist, ref, nets, loss = _setup(4)
    atoms = shifted_class_atoms(nets, ref, loss, dist)
    r = np.geomspace(1e-6, 10.0, 12)
    est = local_complexity_curve(atoms, 20, r, 2000, 5)
    assert np.all(np.diff(est.phi_values) >= -2 * est.phi_se[1:])
    ratio = est.phi_values / np.sqrt(r)
    band = 2 * est.phi_se / np.sqrt(r)
    assert np.all(np.diff(ratio) <= band[1:] + band[:-1])
    assert len(est.rows()) == r.size


# -- fixed point ------------------------------------------------------------------


@pytest.mark.parametrize("a", [0.1, 1.0, 10.0])
def test_fixed_point_of_scaled_root(a):
    r = np.geomspace(1e-6, 1e4, 30)
    rs = fixed_point(r, a * np.sqrt(r))
    assert abs(rs - a * a) <= 1e-10 * max(1.0, a * a)
    assert abs(fixed_point(r, lambda t: a * math.sqrt(t)) - a * a) <= 1e-10 * max(1.0, a * a)


def test_fixed_point_of_constant():
    r = np.geomspace(1e-3, 10.0, 8)
    assert fixed_point(r, np.full(8, 0.37)) == pytest.approx(0.37, abs=1e-12)


def test_fixed_point_log_example_matches_dense_scan():
    a, b = 0.02, 0.01
    psi = lambda t: np.sqrt(t * (a + b * np.log(1.0 / t)))  # noqa: E731
    grid = np.geomspace(1e-6, 0.5, 400)
    rs = fixed_point(grid, psi(grid))
    dense = np.geomspace(1e-6, 0.5, 2_000_001)
    gap = psi(dense) - dense
    k = int(np.flatnonzero(gap < 0)[0])
    assert abs(rs - dense[k]) <= 1e-6
    assert abs(psi(rs) - rs) <= 1e-6


def test_fixed_point_outside_grid_raises():
    r = np.geomspace(1.0, 2.0, 5)
    with pytest.raises(ValueError, match="fixed point outside grid"):
        fixed_point(r, 10 * np.sqrt(r))
    with pytest.raises(ValueError):
        fixed_point([1.0], [1.0])


# -- budgets and fits ---------------------------------------------------------------


def test_pdim_budget_examples():
    assert pdim_budget(NetComplexity(1, 1, math.e)) == 1
    assert pdim_budget(NetComplexity(3, 10, 20)) == 90
    assert pdim_budget(NetComplexity(3, 20, 20)) == 2 * pdim_budget(NetComplexity(3, 10, 20))


def test_size_network_examples():
    assert size_network(math.exp(3), 1, 1) == (1, 3, 3)
    assert size_network(2, 1, 1000)[0] == 1
    Ls = [size_network(n, 2, 1)[0] for n in range(2, 5000, 37)]
    assert all(a <= b for a, b in zip(Ls, Ls[1:]))
    with pytest.raises(ValueError):
        size_network(1, 1, 1)


def test_fit_exponents_recovers_exact_power_law():
    eps = np.geomspace(0.01, 0.5, 7)
    s, V, res = fit_capacity_exponents(eps, 2.0 * (1 / eps) ** 3)
    assert abs(s - 2.0) <= 1e-9 and abs(V - 3.0) <= 1e-9 and res <= 1e-9
    s, V, res = fit_capacity_exponents(eps, np.full(7, 5.0))
    assert abs(V) <= 1e-12
    with pytest.raises(ValueError):
        fit_capacity_exponents([0.1, 0.1, 0.1], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_capacity_exponents([0.1, 0.2], [1, 2])


def test_capacity_report_on_three_function_hull():
    cls = random_class(np.random.default_rng(6), k=3, p=6)
    hull = star_hull_grid(cls, 8)
    eps = np.geomspace(hull.sup_norm() / 20, hull.sup_norm(), 8)
    rep = capacity_report(hull, eps, NetComplexity(3, 10, 20))
    assert rep.fitted_V >= 0 and rep.fit_residual >= 0 and rep.pdim_budget == 90
    assert all(a >= b for a, b in zip(rep.covering_counts, rep.covering_counts[1:]))
