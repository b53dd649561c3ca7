"""Experiment harness: ``pairlearn {rate,decompose,capacity,gradcheck} --config FILE``.

Config files are flat TOML key/value tables.  Each command writes
``<outdir>/<command>-<timestamp>.csv`` (floats with 17 significant digits,
rows in a fixed order) and ``<outdir>/summary.txt``.  CSV bodies depend only
on the config; timings go to the summary.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .antisym_net import (backward, complexity_of, init_net, kink_margin, numerical_gradient,
                          relative_errors, sized_widths)
from .capacity import (FunctionClassSample, capacity_report, local_complexity_curve, pdim_budget,
                       shifted_class, shifted_class_atoms, size_network, star_hull_grid)
from .core import PairwiseLoss, hinge_ranking, least_squares, metric_margin
from .synth import (BayesPredictor, NoiseModel, SyntheticDistribution, excess_risk_ls, generate_target,
                    sample_data)
from .trainer import TrainConfig, TrainingDiverged, discrete_erm, train_erm
from .ustat import DiscreteBayes, DiscreteDistribution, chaos_from_matrices, decompose

DEFAULTS = {
    "rate": {
        "seed": 0, "outdir": "out", "d": 1, "r": 1, "n_values": [128, 256, 512, 1024, 2048, 4096],
        "seeds": 5, "noise": "uniform", "sigma": 0.3, "k_max": 8, "optimizer": "lbfgs",
        "max_epochs": 300, "learning_rate": 0.1, "pairs_per_point": 64, "width_constant": 4.0,
        "eta_factor": 2.0, "sparsity": 0.0,
    },
    "decompose": {
        "seed": 0, "outdir": "out", "mode": "exact", "d": 1, "r": 1, "n_values": [8, 16, 32, 64],
        "seeds": 40, "sigma": 0.3, "n_x": 5, "k_max": 8, "n_candidates": 16, "hidden": 8,
        "excess_level": 0.01, "spread": 0.1, "mc_budget": 100_000, "mc_draws": 1000,
    },
    "capacity": {
        "seed": 0, "outdir": "out", "d": 1, "r": 1, "n_values": [16, 64, 256], "sigma": 0.3,
        "n_x": 5, "k_max": 8, "n_candidates": 6, "hidden": 8, "mc_draws": 2000, "r_points": 24,
        "eps_points": 12, "alpha_steps": 8,
    },
    "gradcheck": {
        "seed": 0, "outdir": "out", "n_nets": 20, "d_max": 2, "depth_max": 4, "width_max": 6,
        "pairs": 8, "loss": "least_squares", "step": 1e-5, "sparsity": 0.2, "threshold": 1e-3,
        "kink_tries": 200,
    },
}


def load_config(command: str, path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS[command])
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(doc)
    if overrides:
        cfg.update(overrides)
    return cfg


def worker_count() -> int:
    env = os.environ.get("PAIRLEARN_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def _map(fn, jobs):
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


@dataclass
class RunOutput:
    csv_path: Path
    summary_path: Path
    header: list
    rows: list
    summary: dict = field(default_factory=dict)
    exit_code: int = 0
    result: object = None


def write_outputs(command: str, outdir, header, rows, summary: dict) -> tuple[Path, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    csv_path = out / f"{command}-{stamp}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    summary_path = out / "summary.txt"
    with open(summary_path, "w") as fh:
        fh.write(f"command: {command}\ncsv: {csv_path.name}\n")
        for k, v in summary.items():
            fh.write(f"{k}: {_fmt(v) if not isinstance(v, (list, tuple)) else ' '.join(_fmt(x) for x in v)}\n")
    return csv_path, summary_path


def fit_slope(ns, values) -> tuple[float, float]:
    """OLS slope of ``ln value`` on ``ln n`` and its standard error."""
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    if x.size < 2:
        return float("nan"), float("nan")
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    if x.size < 3:
        return float(coef[1]), float("nan")
    resid = y - A @ coef
    s2 = resid @ resid / (x.size - 2)
    return float(coef[1]), float(np.sqrt(s2 / np.sum((x - x.mean()) ** 2)))


# ---------------------------------------------------------------------------
# rate
# ---------------------------------------------------------------------------


RATE_HEADER = ["n", "seed", "L", "W", "U", "hidden_width", "epochs", "final_risk", "excess_risk", "status"]


def _rate_cell(job):
    cfg, n, s = job
    d, r = cfg["d"], cfg["r"]
    start = time.perf_counter()
    target = generate_target(d, r, cfg["k_max"], seed=cfg["seed"] + s)
    noise = NoiseModel(cfg["noise"], cfg["sigma"])
    S = sample_data(target, noise, n, seed=cfg["seed"] + 1000 + s)
    L, W, U = size_network(n, d, r)
    budget = math.ceil(cfg["width_constant"] * W)
    widths = sized_widths(d, L, budget, math.ceil(cfg["width_constant"] * U))
    net = init_net(d, widths, cfg["eta_factor"] * S.B, cfg["sparsity"], seed=cfg["seed"] + s)
    pairs = cfg["pairs_per_point"] * n
    sampled = 0 < pairs < n * (n - 1)
    tc = TrainConfig(learning_rate=cfg["learning_rate"], max_epochs=cfg["max_epochs"],
                     batch_mode="sampled" if sampled else "full", sampled_pairs=pairs if sampled else 0,
                     seed=cfg["seed"] + s, optimizer=cfg["optimizer"])
    loss = least_squares(S.B)
    try:
        fitted, trace = train_erm(net, S, loss, tc)
    except TrainingDiverged as exc:
        row = (n, s, L, W, U, widths[1] if L > 1 else 0, exc.trace.epochs_used, float("nan"), float("nan"),
               "diverged")
        return row, time.perf_counter() - start
    excess = excess_risk_ls(fitted, target).value
    row = (n, s, L, W, U, widths[1] if L > 1 else 0, trace.epochs_used, trace.final_risk, excess, "ok")
    return row, time.perf_counter() - start


@dataclass
class RateStudyResult:
    rows: list
    slope: float
    slope_se: float
    theoretical_slope: float
    medians: dict
    wall_time: float


def rate_study(cfg: dict) -> RateStudyResult:
    start = time.perf_counter()
    jobs = [(cfg, int(n), s) for n in cfg["n_values"] for s in range(cfg["seeds"])]
    out = _map(_rate_cell, jobs)
    rows = sorted((row for row, _ in out), key=lambda r: (r[0], r[1]))
    medians = {}
    for n in sorted(set(r[0] for r in rows)):
        ok = [r[8] for r in rows if r[0] == n and r[9] == "ok"]
        if ok:
            medians[n] = float(np.median(ok))
    ns = sorted(medians)
    if len(ns) >= 2:
        slope, se = fit_slope(ns, [medians[n] for n in ns])
    else:
        slope, se = float("nan"), float("nan")
    theory = -2.0 * cfg["r"] / (2.0 * cfg["r"] + cfg["d"])
    return RateStudyResult(rows, slope, se, theory, medians, time.perf_counter() - start)


def run_rate_study(cfg: dict) -> RunOutput:
    res = rate_study(cfg)
    summary = {
        "fitted_slope": res.slope, "slope_stderr": res.slope_se, "theoretical_slope": res.theoretical_slope,
        "slope_defined": int(not math.isnan(res.slope)),
        "n_values": sorted(res.medians), "median_excess": [res.medians[n] for n in sorted(res.medians)],
        "wall_time_s": res.wall_time,
    }
    csv_path, summary_path = write_outputs("rate", cfg["outdir"], RATE_HEADER, res.rows, summary)
    out = RunOutput(csv_path, summary_path, RATE_HEADER, res.rows, summary)
    out.result = res
    return out


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------


class PerturbedPredictor:
    """``f_ref + c * g`` for an anti-symmetric ``g``."""

    def __init__(self, ref, g, scale: float):
        self.ref, self.g, self.scale = ref, g, scale

    def __call__(self, x1, x2):
        return self.ref(x1, x2) + self.scale * self.g(x1, x2)


def _pair_second_moment_discrete(g, dist: DiscreteDistribution) -> float:
    k = dist.size
    ii, jj = np.divmod(np.arange(k * k), k)
    v = g(dist.x[ii], dist.x[jj])
    return float(np.sum(dist.probs[ii] * dist.probs[jj] * v * v))


def decompose_setup(cfg: dict):
    """Distribution, reference predictor and candidate class.

    Candidates are ``f_ref + c_k g_k`` with random anti-symmetric nets ``g_k``
    normalised to unit second moment, so their excess risks ``c_k^2`` are
    ``excess_level * (1 + spread * k / K)``: close enough that the empirical
    minimiser is rarely the population one.
    """
    rng_seed = cfg["seed"]
    d = cfg["d"]
    target = generate_target(d, cfg["r"], cfg["k_max"], seed=rng_seed)
    if cfg["mode"] == "exact":
        dist = DiscreteDistribution.from_target(target, cfg["sigma"], cfg["n_x"], seed=rng_seed)
        ref = DiscreteBayes(dist)
        moment = lambda g: _pair_second_moment_discrete(g, dist)  # noqa: E731
    elif cfg["mode"] == "mc":
        dist = SyntheticDistribution(target, NoiseModel("uniform", cfg["sigma"]))
        ref = BayesPredictor(target)
        moment = lambda g: excess_risk_ls(  # noqa: E731
            PerturbedPredictor(ref, g, 1.0), target).value
    else:
        raise ValueError(f"unknown decompose mode {cfg['mode']!r}")
    K = cfg["n_candidates"]
    cands = []
    for k in range(K):
        g = init_net(d, [2 * d, cfg["hidden"], 1], 2.0, 0.0, seed=rng_seed * 7919 + k)
        c = math.sqrt(cfg["excess_level"] * (1.0 + cfg["spread"] * k / K) / moment(g))
        cands.append(PerturbedPredictor(ref, g, c))
    return dist, ref, cands


DECOMPOSE_HEADER = ["n", "seed", "idx_hat", "idx_best", "u_n", "expected_u", "t_n", "w_n", "residual",
                    "residual_se", "s1", "s2", "z_eps", "u_eps", "m", "f_sup", "d_sup", "aggregate"]


def _decompose_cell(job):
    cfg, n, s = job
    dist, ref, cands = decompose_setup(cfg)
    B = float(dist.B)
    loss = least_squares(B)
    data_seed = cfg["seed"] * 100_003 + n * 1009 + s
    if isinstance(dist, DiscreteDistribution):
        S = dist.sample(n, data_seed)
    else:
        S = sample_data(dist.target, dist.noise, n, data_seed)
    decs = [decompose(f, ref, S, dist, loss, cfg["mc_budget"], data_seed) for f in cands]
    best = int(np.argmin([dc.expected_u for dc in decs]))
    hat = discrete_erm(cands, S, loss)
    a, b = decs[hat], decs[best]
    chaos = chaos_from_matrices([dc.hhat_matrix for dc in decs], cfg["mc_draws"], data_seed)
    return (n, s, hat, best, a.u_n, a.expected_u, a.t_n, a.w_n, a.residual, a.residual_se,
            2.0 * a.t_n - 2.0 * b.t_n, a.w_n - b.w_n, chaos.z_eps_mean, chaos.u_eps_mean, chaos.m_mean,
            chaos.f_sup, chaos.d_sup, chaos.aggregate)


def run_decompose_study(cfg: dict) -> RunOutput:
    start = time.perf_counter()
    jobs = [(cfg, int(n), s) for n in cfg["n_values"] for s in range(cfg["seeds"])]
    rows = sorted(_map(_decompose_cell, jobs), key=lambda r: (r[0], r[1]))
    ns = sorted(set(r[0] for r in rows))
    med = [float(np.median([abs(r[11]) for r in rows if r[0] == n])) for n in ns]
    summary = {
        "mode": cfg["mode"], "n_values": ns, "median_abs_s2": med,
        "max_abs_residual": max(abs(r[8]) for r in rows),
        "erm_hits_best": sum(r[2] == r[3] for r in rows), "rows": len(rows),
        "wall_time_s": time.perf_counter() - start,
    }
    csv_path, summary_path = write_outputs("decompose", cfg["outdir"], DECOMPOSE_HEADER, rows, summary)
    return RunOutput(csv_path, summary_path, DECOMPOSE_HEADER, rows, summary)


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------


CAPACITY_HEADER = ["section", "n", "index", "x", "value", "stderr"]


def capacity_setup(cfg: dict):
    target = generate_target(cfg["d"], cfg["r"], cfg["k_max"], seed=cfg["seed"])
    dist = DiscreteDistribution.from_target(target, cfg["sigma"], cfg["n_x"], seed=cfg["seed"])
    ref = DiscreteBayes(dist)
    d = cfg["d"]
    B = float(dist.B)
    nets = [init_net(d, [2 * d, cfg["hidden"], 1], 2.0 * B, 0.0, seed=cfg["seed"] * 7919 + k)
            for k in range(cfg["n_candidates"])]
    return dist, ref, nets, least_squares(B)


def run_capacity_report(cfg: dict) -> RunOutput:
    start = time.perf_counter()
    dist, ref, nets, loss = capacity_setup(cfg)
    atoms = shifted_class_atoms(nets, ref, loss, dist)
    A_inf = float(np.abs(atoms.values).max())
    r_max = 4.0 * max(A_inf, A_inf**2)
    r_grid = np.geomspace(r_max * 1e-10, r_max, cfg["r_points"])
    pdim = pdim_budget(complexity_of(nets[0]))
    rows, rstars, fits = [], [], []
    for n in cfg["n_values"]:
        n = int(n)
        est = local_complexity_curve(atoms, n, r_grid, cfg["mc_draws"], cfg["seed"] + n)
        for k, (r, phi, se) in enumerate(est.rows()):
            rows.append(("phi", n, k, r, phi, se))
        S = dist.sample(n, cfg["seed"] + n)
        hull = star_hull_grid(shifted_class(nets, ref, S, loss, dist), cfg["alpha_steps"])
        A = hull.sup_norm()
        eps = np.geomspace(A / 50.0, A, cfg["eps_points"]) if A > 0 else np.geomspace(1e-3, 1.0, cfg["eps_points"])
        rep = capacity_report(hull, eps, complexity_of(nets[0]))
        for k, (e, c) in enumerate(rep.covering_rows()):
            rows.append(("cover", n, k, e, c, 0.0))
        rows.append(("summary_rstar", n, 0, math.log(n) / n, est.fixed_point, 0.0))
        rows.append(("summary_fit", n, 0, rep.fitted_s, rep.fitted_V, rep.fit_residual))
        rows.append(("summary_pdim", n, 0, float(rep.pdim_budget), float(pdim), 0.0))
        rstars.append(est.fixed_point)
        fits.append(rep.fitted_V)
    summary = {
        "n_values": [int(n) for n in cfg["n_values"]], "r_star": rstars, "fitted_V": fits,
        "pdim_budget": pdim, "class_size": len(nets), "wall_time_s": time.perf_counter() - start,
    }
    csv_path, summary_path = write_outputs("capacity", cfg["outdir"], CAPACITY_HEADER, rows, summary)
    return RunOutput(csv_path, summary_path, CAPACITY_HEADER, rows, summary)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


GRADCHECK_HEADER = ["net", "d", "depth", "param", "analytic", "numeric", "rel_error"]


def _make_loss(name: str, B: float) -> PairwiseLoss:
    if name == "least_squares":
        return least_squares(B)
    if name == "hinge_ranking":
        return hinge_ranking()
    if name == "metric_margin":
        return metric_margin(1.0)
    raise ValueError(f"unknown loss {name!r}")


def gradcheck_case(cfg: dict, k: int, net=None):
    """One random net and pair batch placed away from every kink."""
    rng = np.random.default_rng([cfg["seed"], k])
    d = int(rng.integers(1, cfg["d_max"] + 1))
    depth = int(rng.integers(1, cfg["depth_max"] + 1))
    widths = [2 * d] + [int(rng.integers(1, cfg["width_max"] + 1)) for _ in range(depth - 1)] + [1]
    net_seed = int(rng.integers(2**31))
    if net is None:
        net = init_net(d, widths, 2.0, cfg["sparsity"], seed=net_seed)
    d = net.d
    loss = _make_loss(cfg["loss"], 1.0)
    m = cfg["pairs"]
    best, best_margin = None, -1.0
    for _ in range(cfg["kink_tries"]):
        X1, X2 = rng.random((m, d)), rng.random((m, d))
        y1, y2 = rng.uniform(-1, 1, m), rng.uniform(-1, 1, m)
        margin = kink_margin(net, X1, X2, loss, y1, y2)
        if margin > best_margin:
            best, best_margin = (X1, X2, y1, y2), margin
        if margin > 100 * cfg["step"]:
            break
    return net, loss, best, best_margin


def gradcheck_net(cfg: dict, k: int, net=None):
    net, loss, (X1, X2, y1, y2), margin = gradcheck_case(cfg, k, net)
    g = backward(net, X1, X2, loss, y1, y2).flat()
    num = numerical_gradient(net, X1, X2, loss, y1, y2, step=cfg["step"]).flat()
    return net, g, num, relative_errors(g, num), margin


def run_gradcheck(cfg: dict) -> RunOutput:
    start = time.perf_counter()
    rows, worst, margins = [], 0.0, []
    for k in range(cfg["n_nets"]):
        net, g, num, err, margin = gradcheck_net(cfg, k)
        margins.append(margin)
        for p in range(g.size):
            rows.append((k, net.d, net.inner.depth, p, g[p], num[p], err[p]))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    summary = {
        "max_rel_error": worst, "threshold": cfg["threshold"], "n_nets": cfg["n_nets"],
        "min_kink_margin": min(margins), "passed": int(worst <= cfg["threshold"]),
        "wall_time_s": time.perf_counter() - start,
    }
    csv_path, summary_path = write_outputs("gradcheck", cfg["outdir"], GRADCHECK_HEADER, rows, summary)
    return RunOutput(csv_path, summary_path, GRADCHECK_HEADER, rows, summary,
                     exit_code=0 if worst <= cfg["threshold"] else 1)


COMMANDS = {
    "rate": run_rate_study,
    "decompose": run_decompose_study,
    "capacity": run_capacity_report,
    "gradcheck": run_gradcheck,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pairlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file of key = value pairs")
        p.add_argument("--outdir", help="overrides the config's outdir")
    args = parser.parse_args(argv)
    overrides = {"outdir": args.outdir} if args.outdir else None
    try:
        cfg = load_config(args.command, args.config, overrides)
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"pairlearn: {exc}", file=sys.stderr)
        return 2
    out = COMMANDS[args.command](cfg)
    print(out.summary_path.read_text(), end="")
    return out.exit_code


if __name__ == "__main__":
    sys.exit(main())
