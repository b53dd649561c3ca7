"""Structured anti-symmetric ReLU networks.

``f(x, x') = g(pi(h(x, x')), pi(h(x', x)))`` where ``h`` is a sparse deep ReLU
network on the concatenated pair, ``pi`` clamps to ``[-eta/2, eta/2]`` and
``g(u, v) = relu(u - v) - relu(v - u)``.  One parameter set serves both
orderings of the pair, so ``f`` is exactly anti-symmetric.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .core import PairwiseLoss

# Row blocks for all-pairs evaluation are sized to hold about this many
# activations per layer.
_PAIR_BLOCK = 1 << 21


def relu(z):
    return np.maximum(z, 0.0)


def project_eta(t, eta: float):
    """Clamp ``t`` to ``[-eta/2, eta/2]``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    half = 0.5 * eta
    out = np.clip(t, -half, half)
    return float(out) if np.ndim(out) == 0 else out


def project_eta_relu(t, eta: float):
    """The same clamp written as a two-unit ReLU layer."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    half = 0.5 * eta
    out = relu(np.add(t, half)) - relu(np.subtract(t, half)) - half
    return float(out) if np.ndim(out) == 0 else out


def relu_difference(u, v):
    """``u - v`` as ``relu(u - v) - relu(v - u)``."""
    out = relu(np.subtract(u, v)) - relu(np.subtract(v, u))
    return float(out) if np.ndim(out) == 0 else out


def _project_grad(h, half):
    # subgradient of the two-ReLU clamp with relu'(0) = 0
    return ((h > -half) & (h <= half)).astype(float)


@dataclass(frozen=True)
class NetComplexity:
    depth_L: int
    nonzero_weights_W: int
    computation_units_U: int


# pi: 1 -> 2 -> 1 with weights [1, 1], biases [eta/2, -eta/2], output [1, -1]
PROJECTION_COMPLEXITY = NetComplexity(2, 7, 2)
# g: 2 -> 2 -> 1 with weights [[1, -1], [-1, 1]], no biases, output [1, -1]
DIFFERENCE_COMPLEXITY = NetComplexity(2, 7, 2)


def compose_complexity(inner: NetComplexity) -> NetComplexity:
    p, g = PROJECTION_COMPLEXITY, DIFFERENCE_COMPLEXITY
    return NetComplexity(
        inner.depth_L + p.depth_L + g.depth_L,
        2 * (inner.nonzero_weights_W + p.nonzero_weights_W) + g.nonzero_weights_W,
        2 * (inner.computation_units_U + p.computation_units_U) + g.computation_units_U,
    )


class InnerNet:
    """Deep ReLU network ``h: R^{2d} -> R`` with static sparsity masks.

    ``weights[l]`` has shape ``(w_{l+1}, w_l)``; the last layer is the output
    vector ``a`` (shape ``(1, w_{L-1})``) with scalar bias ``biases[-1]``.
    The output bias is never masked.
    """

    def __init__(self, widths, weights, biases, weight_masks=None, bias_masks=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
            raise ValueError("widths must be [2d, w_1, ..., 1]")
        if widths[0] % 2:
            raise ValueError("input width must be 2d")
        self.widths = widths
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[l + 1], widths[l]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l} has inconsistent shape")
        if weight_masks is None:
            weight_masks = [np.ones(W.shape, bool) for W in self.weights]
        if bias_masks is None:
            bias_masks = [np.ones(b.shape, bool) for b in self.biases]
        self.weight_masks = [np.array(m, dtype=bool) for m in weight_masks]
        self.bias_masks = [np.array(m, dtype=bool) for m in bias_masks]
        self.bias_masks[-1][:] = True
        self.apply_masks()

    @property
    def d(self) -> int:
        return self.widths[0] // 2

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def masks(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weight_masks, self.bias_masks):
            out += [W, b]
        return out

    def apply_masks(self):
        for p, m in zip(self.parameters(), self.masks()):
            p *= m

    def copy(self) -> "InnerNet":
        return InnerNet(self.widths, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases],
                        [m.copy() for m in self.weight_masks],
                        [m.copy() for m in self.bias_masks])

    def complexity(self) -> NetComplexity:
        W = 1 + int(np.count_nonzero(self.weights[-1]))
        for T, b in zip(self.weights[:-1], self.biases[:-1]):
            W += int(np.count_nonzero(T)) + int(np.count_nonzero(b))
        return NetComplexity(self.depth, W, int(sum(self.widths[1:-1])))

    # -- forward ----------------------------------------------------------

    def forward(self, Xt: np.ndarray, cache: bool = False):
        Xt = np.atleast_2d(np.asarray(Xt, dtype=float))
        if Xt.shape[1] != self.widths[0]:
            raise ValueError(f"expected inputs of width {self.widths[0]}, got {Xt.shape[1]}")
        A = Xt
        acts = [A]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            Z = A @ W.T + b
            A = Z if l == last else relu(Z)
            if cache:
                acts.append(A)
        out = A[:, 0]
        return (out, acts) if cache else out

    def __call__(self, Xt):
        return self.forward(Xt)

    def _block_rows(self, n: int) -> int:
        return max(1, _PAIR_BLOCK // max(1, n * max(self.widths)))

    def _pair_block(self, P_rows, Q, cache=False):
        """Activations for a block of rows of the all-pairs input."""
        W1, b1 = self.weights[0], self.biases[0]
        Z = (P_rows[:, None, :] + Q[None, :, :] + b1).reshape(-1, W1.shape[0])
        last = len(self.weights) - 1
        pre = [Z]
        A = Z if last == 0 else relu(Z)
        for l in range(1, last + 1):
            Z = A @ self.weights[l].T + self.biases[l]
            pre.append(Z)
            A = Z if l == last else relu(Z)
        return (A[:, 0], pre) if cache else A[:, 0]

    def pair_matrix(self, X: np.ndarray) -> np.ndarray:
        """``H[i, j] = h(X[i], X[j])`` for all ordered pairs."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = self.d
        if X.shape[1] != d:
            raise ValueError(f"expected inputs of dimension {d}, got {X.shape[1]}")
        n = X.shape[0]
        W1 = self.weights[0]
        P = X @ W1[:, :d].T
        Q = X @ W1[:, d:].T
        H = np.empty((n, n))
        step = self._block_rows(n)
        for s in range(0, n, step):
            H[s:s + step] = self._pair_block(P[s:s + step], Q).reshape(-1, n)
        return H


@dataclass
class NetGradient:
    """Gradient arrays aligned with ``InnerNet.weights`` / ``biases``."""

    weights: list
    biases: list

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


class AntisymNet:
    """``f(x, x') = g(pi_eta(h(x, x')), pi_eta(h(x', x)))``; ``|f| <= eta``."""

    def __init__(self, inner: InnerNet, eta: float, seed: int | None = None):
        if not eta > 0:
            raise ValueError("eta must be positive")
        self.inner = inner
        self.eta = float(eta)
        self.seed = seed
        self.complexity = compose_complexity(inner.complexity())

    @property
    def d(self) -> int:
        return self.inner.d

    def copy(self) -> "AntisymNet":
        return AntisymNet(self.inner.copy(), self.eta, self.seed)

    def refresh_complexity(self):
        self.complexity = compose_complexity(self.inner.complexity())

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"expected inputs of dimension {self.d}, got {X.shape[1]}")
        return X

    def __call__(self, x1, x2):
        X1, X2 = self._check(x1), self._check(x2)
        if X1.shape != X2.shape:
            raise ValueError("paired inputs must have equal shapes")
        m = X1.shape[0]
        h = self.inner.forward(np.vstack([np.hstack([X1, X2]), np.hstack([X2, X1])]))
        half = 0.5 * self.eta
        return relu_difference(np.clip(h[:m], -half, half), np.clip(h[m:], -half, half))

    def pair_matrix(self, X):
        X = self._check(X)
        P = np.clip(self.inner.pair_matrix(X), -0.5 * self.eta, 0.5 * self.eta)
        return P - P.T

    def pair_rows(self, X, start: int, stop: int):
        """Rows ``start:stop`` of ``pair_matrix(X)`` without forming the rest."""
        X = self._check(X)
        d, half = self.d, 0.5 * self.eta
        W1 = self.inner.weights[0]
        R = X[start:stop]
        k, n = R.shape[0], X.shape[0]
        fwd = self.inner._pair_block(R @ W1[:, :d].T, X @ W1[:, d:].T).reshape(k, n)
        bwd = self.inner._pair_block(X @ W1[:, :d].T, R @ W1[:, d:].T).reshape(n, k).T
        return np.clip(fwd, -half, half) - np.clip(bwd, -half, half)


def forward(net: AntisymNet, x, x2) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.size != net.d or x2.size != net.d:
        raise ValueError("dimension mismatch")
    return float(net(x[None, :], x2[None, :])[0])


def complexity_of(net: AntisymNet) -> NetComplexity:
    return compose_complexity(net.inner.complexity())


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------


def backward(net: AntisymNet, X1, X2, loss: PairwiseLoss, y1, y2,
             pair_weights=None) -> NetGradient:
    """Gradient of ``(1/m) sum_k w_k l(f(x1_k, x2_k), y1_k, y2_k)``."""
    return risk_and_grad(net, X1, X2, loss, y1, y2, pair_weights)[1]


def risk_and_grad(net: AntisymNet, X1, X2, loss, y1, y2, pair_weights=None):
    X1, X2 = net._check(X1), net._check(X2)
    m = X1.shape[0]
    w = np.ones(m) if pair_weights is None else np.asarray(pair_weights, dtype=float)
    inner = net.inner
    half = 0.5 * net.eta
    U = np.vstack([np.hstack([X1, X2]), np.hstack([X2, X1])])
    h, acts = inner.forward(U, cache=True)
    hu, hv = h[:m], h[m:]
    f = np.clip(hu, -half, half) - np.clip(hv, -half, half)
    risk = float(np.sum(w * loss.value(f, y1, y2)) / m)
    gf = w * loss.derivative(f, y1, y2) / m
    gh = np.concatenate([gf * _project_grad(hu, half), -gf * _project_grad(hv, half)])
    return risk, _backprop(inner, acts, gh)


def _backprop(inner: InnerNet, acts, gh) -> NetGradient:
    L = len(inner.weights)
    dWs, dbs = [None] * L, [None] * L
    delta = gh[:, None]
    for l in range(L - 1, -1, -1):
        dWs[l] = (delta.T @ acts[l]) * inner.weight_masks[l]
        dbs[l] = delta.sum(axis=0) * inner.bias_masks[l]
        if l > 0:
            delta = (delta @ inner.weights[l]) * (acts[l] > 0)
    return NetGradient(dWs, dbs)


def full_pair_risk_and_grad(net: AntisymNet, X, y, loss: PairwiseLoss, want_grad=True):
    """Empirical risk over all ordered pairs ``i != j`` and its gradient.

    Evaluates ``h`` once per ordered pair; the reversed ordering is the
    transposed matrix, so each pair costs one inner forward pass.
    """
    inner = net.inner
    X = net._check(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    half = 0.5 * net.eta
    H = inner.pair_matrix(X)
    P = np.clip(H, -half, half)
    F = P - P.T
    Lm = loss.value(F, y[:, None], y[None, :])
    np.fill_diagonal(Lm, 0.0)
    denom = n * (n - 1)
    risk = float(Lm.sum() / denom)
    if not want_grad:
        return risk, None
    G = loss.derivative(F, y[:, None], y[None, :]) / denom
    np.fill_diagonal(G, 0.0)
    dH = _project_grad(H, half) * (G - G.T)

    Lyr = len(inner.weights)
    W1 = inner.weights[0]
    P1 = X @ W1[:, :d].T
    Q1 = X @ W1[:, d:].T
    dWs = [np.zeros_like(W) for W in inner.weights]
    dbs = [np.zeros_like(b) for b in inner.biases]
    row_sum = np.zeros((n, W1.shape[0]))
    col_sum = np.zeros((n, W1.shape[0]))
    step = inner._block_rows(n)
    for s in range(0, n, step):
        rows = slice(s, s + step)
        k = P1[rows].shape[0]
        _, pre = inner._pair_block(P1[rows], Q1, cache=True)
        delta = dH[rows].reshape(-1, 1)
        for l in range(Lyr - 1, 0, -1):
            A_prev = relu(pre[l - 1])
            dWs[l] += delta.T @ A_prev
            dbs[l] += delta.sum(axis=0)
            delta = (delta @ inner.weights[l]) * (pre[l - 1] > 0)
        D = delta.reshape(k, n, -1)
        row_sum[rows] += D.sum(axis=1)
        col_sum += D.sum(axis=0)
    dWs[0] = np.hstack([row_sum.T @ X, col_sum.T @ X])
    dbs[0] = row_sum.sum(axis=0)
    for l in range(Lyr):
        dWs[l] *= inner.weight_masks[l]
        dbs[l] *= inner.bias_masks[l]
    return risk, NetGradient(dWs, dbs)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def init_net(d: int, widths, eta: float, sparsity: float = 0.0, seed: int = 0) -> AntisymNet:
    """He-initialised structured net; entries are masked with prob. ``sparsity``.

    Hidden biases put each unit's kink through the activation of a random
    probe input from ``[0, 1]^{2d}``, so no unit starts dead on the domain.
    The output layer is scaled by ``eta / 4`` so that ``h`` starts inside the
    projection window; a saturated clamp on both orderings has zero gradient.
    """
    widths = [int(w) for w in widths]
    if widths[0] != 2 * d or widths[-1] != 1:
        raise ValueError("widths must start at 2d and end at 1")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    Ws, bs, Wm, bm = [], [], [], []
    L = len(widths) - 1
    probe = rng.random((64, 2 * d))
    for l in range(L):
        fan_in, fan_out = widths[l], widths[l + 1]
        std = np.sqrt(2.0 / fan_in) * (0.25 * eta if l == L - 1 else 1.0)
        W = rng.normal(0.0, std, (fan_out, fan_in))
        Wmask = rng.random((fan_out, fan_in)) >= sparsity
        W *= Wmask
        Ws.append(W)
        Wm.append(Wmask)
        if l < L - 1:
            Z = probe @ W.T
            b = rng.uniform(-0.5, 0.5, fan_out) / np.sqrt(fan_in)
            for u in range(fan_out):
                # kink strictly between two distinct probe values; a single
                # probe could sit in a region where the layer input is constant
                vals = np.unique(Z[:, u])
                if vals.size >= 2:
                    i, j = np.sort(rng.choice(vals.size, 2, replace=False))
                    b[u] = -(vals[i] + rng.uniform(0.05, 0.95) * (vals[j] - vals[i]))
            bmask = rng.random(fan_out) >= sparsity
            bs.append(b * bmask)
            bm.append(bmask)
            probe = relu(probe @ W.T + b * bmask)
        else:
            bs.append(np.zeros(1))
            bm.append(np.ones(1, bool))
    return AntisymNet(InnerNet(widths, Ws, bs, Wm, bm), eta, seed)


def weight_count(d: int, depth: int, width: int) -> int:
    """Nonzero-weight count of a dense inner net with equal hidden widths."""
    if depth == 1:
        return 2 * d + 1
    return (width * 2 * d + width) + (depth - 2) * (width * width + width) + (width + 1)


def hidden_width_for_budget(d: int, depth: int, W_budget: int) -> int:
    """Largest equal hidden width whose dense weight count fits ``W_budget``."""
    w = 1
    while weight_count(d, depth, w + 1) <= W_budget:
        w += 1
    return w


def sized_widths(d: int, depth: int, W_budget: int, U_budget: int | None = None) -> list[int]:
    w = hidden_width_for_budget(d, depth, W_budget)
    if U_budget is not None and depth > 1:
        w = max(1, min(w, U_budget // (depth - 1)))
    return [2 * d] + [w] * (depth - 1) + [1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _pack_mask(m: np.ndarray) -> str:
    return base64.b64encode(np.packbits(m.ravel()).tobytes()).decode("ascii")


def _unpack_mask(s: str, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(s), dtype=np.uint8))
    return bits[: int(np.prod(shape))].astype(bool).reshape(shape)


def net_to_dict(net: AntisymNet) -> dict:
    inner = net.inner
    return {
        "widths": inner.widths,
        "eta": net.eta,
        "seed": net.seed,
        "weights": [W.ravel().tolist() for W in inner.weights],
        "biases": [b.tolist() for b in inner.biases],
        "weight_masks": [_pack_mask(m) for m in inner.weight_masks],
        "bias_masks": [_pack_mask(m) for m in inner.bias_masks],
    }


def net_from_dict(doc: dict) -> AntisymNet:
    widths = doc["widths"]
    shapes = [(widths[l + 1], widths[l]) for l in range(len(widths) - 1)]
    Ws = [np.array(w, dtype=float).reshape(s) for w, s in zip(doc["weights"], shapes)]
    bs = [np.array(b, dtype=float) for b in doc["biases"]]
    Wm = [_unpack_mask(m, s) for m, s in zip(doc["weight_masks"], shapes)]
    bm = [_unpack_mask(m, (s[0],)) for m, s in zip(doc["bias_masks"], shapes)]
    return AntisymNet(InnerNet(widths, Ws, bs, Wm, bm), doc["eta"], doc.get("seed"))


def net_to_json(net: AntisymNet) -> str:
    return json.dumps(net_to_dict(net))


def net_from_json(text: str) -> AntisymNet:
    return net_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def kink_margin(net: AntisymNet, X1, X2, loss: PairwiseLoss, y1, y2) -> float:
    """Smallest distance of any pre-activation, clamp input or hinge argument
    to its kink over the batch."""
    X1, X2 = net._check(X1), net._check(X2)
    m = X1.shape[0]
    U = np.vstack([np.hstack([X1, X2]), np.hstack([X2, X1])])
    inner = net.inner
    A = U
    margin = np.inf
    last = len(inner.weights) - 1
    for l, (W, b) in enumerate(zip(inner.weights, inner.biases)):
        Z = A @ W.T + b
        if l < last:
            # a unit with a masked bias and all-zero inputs stays at 0 under any
            # small perturbation, so it is not at a kink
            fed = (A != 0).astype(float) @ (W != 0).T.astype(float) > 0
            live = fed | inner.bias_masks[l]
            if live.any():
                margin = min(margin, float(np.min(np.abs(Z[live]))))
            A = relu(Z)
        else:
            A = Z
    h = A[:, 0]
    half = 0.5 * net.eta
    margin = min(margin, float(np.min(np.abs(np.abs(h) - half))))
    f = np.clip(h[:m], -half, half) - np.clip(h[m:], -half, half)
    if loss.kind.value == "hinge_ranking":
        s = np.sign(np.subtract(y1, y2))
        active = s != 0
        if active.any():
            margin = min(margin, float(np.min(np.abs(1.0 - s[active] * f[active]))))
    elif loss.kind.value == "metric_margin":
        tau = np.where(np.equal(y1, y2), 1.0, -1.0)
        margin = min(margin, float(np.min(np.abs(1.0 + tau * (f - loss.bias_b)))))
    return margin


def numerical_gradient(net: AntisymNet, X1, X2, loss, y1, y2, step: float = 1e-5,
                       pair_weights=None) -> NetGradient:
    """Central finite differences over every parameter entry.

    Perturbations go through the mask, so masked entries see no change and
    get an exact zero.
    """
    work = net.copy()
    m = np.asarray(X1).shape[0]
    w = np.ones(m) if pair_weights is None else np.asarray(pair_weights, dtype=float)

    def objective():
        f = work(X1, X2)
        return float(np.sum(w * loss.value(f, y1, y2)) / m)

    grads = []
    for p, mask in zip(work.inner.parameters(), work.inner.masks()):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            p *= mask
            up = objective()
            p[idx] = orig - step
            p *= mask
            down = objective()
            p[idx] = orig
            g[idx] = (up - down) / (2.0 * step)
        grads.append(g)
    return NetGradient(grads[0::2], grads[1::2])


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs finite-difference
    round-off on near-zero gradient entries."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
