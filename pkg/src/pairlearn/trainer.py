"""Pairwise empirical risk minimisation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .antisym_net import AntisymNet, full_pair_risk_and_grad, risk_and_grad
from .core import InsufficientSampleError, PairwiseLoss, SampleSet, empirical_risk


@dataclass
class TrainConfig:
    """Optimiser settings.

    ``batch_mode`` is ``"full"`` (all ordered pairs every epoch) or
    ``"sampled"`` (``sampled_pairs`` ordered pairs ``i != j`` drawn uniformly per
    step).  With ``optimizer="lbfgs"`` a sampled batch is drawn once and kept,
    which turns the objective into a fixed incomplete U-statistic.
    """

    learning_rate: float = 0.1
    max_epochs: int = 5000
    batch_mode: str = "full"
    sampled_pairs: int = 0
    tol: float = 1e-8
    patience: int = 50
    seed: int = 0
    lr_halving: bool = True
    optimizer: str = "gd"

    def __post_init__(self):
        if self.batch_mode not in ("full", "sampled"):
            raise ValueError(f"unknown batch mode {self.batch_mode!r}")
        if self.batch_mode == "sampled" and self.sampled_pairs < 1:
            raise ValueError("sampled mode needs sampled_pairs >= 1")
        if self.optimizer not in ("gd", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class TrainTrace:
    risks: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    epochs_used: int = 0
    wall_time: float = 0.0
    final_risk: float = float("nan")

    def csv_rows(self):
        return [(e, r, lr) for e, (r, lr) in enumerate(zip(self.risks, self.lrs))]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: TrainTrace):
        super().__init__(message)
        self.trace = trace


def _free_index(net: AntisymNet):
    return [np.flatnonzero(m.ravel()) for m in net.inner.masks()]


def _get_flat(net: AntisymNet, idx) -> np.ndarray:
    return np.concatenate([p.ravel()[i] for p, i in zip(net.inner.parameters(), idx)])


def _set_flat(net: AntisymNet, idx, theta: np.ndarray):
    pos = 0
    for p, i in zip(net.inner.parameters(), idx):
        flat = p.reshape(-1)
        flat[i] = theta[pos:pos + i.size]
        pos += i.size


def _grad_flat(grad, idx) -> np.ndarray:
    return np.concatenate([g.ravel()[i] for g, i in zip(grad.arrays(), idx)])


def _sample_pairs(rng: np.random.Generator, n: int, m: int):
    i = rng.integers(0, n, m)
    j = (i + 1 + rng.integers(0, n - 1, m)) % n
    return i, j


def train_erm(net: AntisymNet, S: SampleSet, loss: PairwiseLoss, cfg: TrainConfig):
    """Approximate ``argmin`` of the pairwise empirical risk over the net's
    parameters.  Returns a trained copy and its trace; ``net`` is untouched."""
    if S.n < 2:
        raise InsufficientSampleError("insufficient sample")
    start = time.perf_counter()
    work = net.copy()
    idx = _free_index(work)
    X, y = S.x, S.y
    rng = np.random.default_rng(cfg.seed)

    if cfg.batch_mode == "full":
        def objective(theta, batch=None):
            _set_flat(work, idx, theta)
            r, g = full_pair_risk_and_grad(work, X, y, loss)
            return r, _grad_flat(g, idx)
    else:
        def objective(theta, batch):
            _set_flat(work, idx, theta)
            i, j = batch
            r, g = risk_and_grad(work, X[i], X[j], loss, y[i], y[j])
            return r, _grad_flat(g, idx)

    trace = TrainTrace()
    theta = _get_flat(work, idx)
    if cfg.optimizer == "lbfgs":
        batch = None if cfg.batch_mode == "full" else _sample_pairs(rng, S.n, cfg.sampled_pairs)
        theta = _run_lbfgs(objective, theta, batch, cfg, trace)
    else:
        theta = _run_gd(objective, theta, cfg, trace, rng, S.n)
    _set_flat(work, idx, theta)
    work.inner.apply_masks()
    work.refresh_complexity()
    trace.final_risk = empirical_risk(work, S, loss)
    trace.wall_time = time.perf_counter() - start
    return work, trace


def _run_gd(objective, theta, cfg: TrainConfig, trace: TrainTrace, rng, n):
    sampled = cfg.batch_mode == "sampled"
    batch = _sample_pairs(rng, n, cfg.sampled_pairs) if sampled else None
    risk, grad = objective(theta, batch)
    initial = risk
    lr = cfg.learning_rate
    trace.risks.append(risk)
    trace.lrs.append(lr)
    for epoch in range(1, cfg.max_epochs + 1):
        if sampled:
            batch = _sample_pairs(rng, n, cfg.sampled_pairs)
            risk, grad = objective(theta, batch)
        cand = theta - lr * grad
        new_risk, new_grad = objective(cand, batch)
        if cfg.lr_halving:
            halvings = 0
            while not new_risk <= risk and halvings < 60:
                lr *= 0.5
                halvings += 1
                cand = theta - lr * grad
                new_risk, new_grad = objective(cand, batch)
            if not new_risk <= risk:
                cand, new_risk, new_grad = theta, risk, grad
        theta, risk, grad = cand, new_risk, new_grad
        trace.risks.append(risk)
        trace.lrs.append(lr)
        trace.epochs_used = epoch
        if not np.isfinite(risk) or risk > 1e6 * max(initial, 1e-300):
            raise TrainingDiverged(f"risk {risk:.3g} exceeded 1e6 x initial {initial:.3g}", trace)
        if not sampled and epoch >= cfg.patience and trace.risks[-cfg.patience - 1] - risk < cfg.tol:
            break
    return theta


def _run_lbfgs(objective, theta, batch, cfg: TrainConfig, trace: TrainTrace):
    risk0, _ = objective(theta, batch)
    trace.risks.append(risk0)
    trace.lrs.append(float("nan"))
    last = {}

    def fun(t):
        r, g = objective(t, batch)
        last[t.tobytes()] = r
        return r, g

    def callback(t):
        r = last.get(t.tobytes())
        if r is None:
            r = objective(t, batch)[0]
        trace.risks.append(r)
        trace.lrs.append(float("nan"))
        trace.epochs_used += 1
        last.clear()

    res = optimize.minimize(fun, theta, jac=True, method="L-BFGS-B", callback=callback,
                            options={"maxiter": cfg.max_epochs, "ftol": cfg.tol, "gtol": 1e-10})
    if res.fun > 1e6 * max(risk0, 1e-300):
        raise TrainingDiverged("L-BFGS diverged", trace)
    return res.x


def candidate_risks(candidates, S: SampleSet, loss: PairwiseLoss) -> np.ndarray:
    return np.array([empirical_risk(f, S, loss) for f in candidates])


def discrete_erm(candidates, S: SampleSet, loss: PairwiseLoss) -> int:
    """Index of the first candidate with minimal empirical risk."""
    if len(candidates) == 0:
        raise ValueError("candidate list is empty")
    return int(np.argmin(candidate_risks(candidates, S, loss)))
