"""Small float64 layer set with hand-written reverse passes.

Every layer comes as a single-example function (the reference semantics)
plus a batched ``*_forward`` / ``*_backward`` pair used for training.  The
forward half returns a cache; the backward half consumes it.  Handing a
backward function a ``None`` cache raises, which is the "backward before
forward" error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

GATES = ("f", "i", "o", "c")
INIT_SCALE = 0.08


class ShapeError(ValueError):
    pass


def _need_cache(cache):
    if cache is None:
        raise RuntimeError("backward called before forward")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LstmParams:
    """Gate weights: W_* is hidden x input, U_* is hidden x hidden."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    U_f: np.ndarray
    U_i: np.ndarray
    U_o: np.ndarray
    U_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        h, d = self.W_f.shape
        for g in GATES:
            if getattr(self, f"W_{g}").shape != (h, d):
                raise ShapeError(f"W_{g} shape mismatch")
            if getattr(self, f"U_{g}").shape != (h, h):
                raise ShapeError(f"U_{g} shape mismatch")
            if getattr(self, f"b_{g}").shape != (h,):
                raise ShapeError(f"b_{g} shape mismatch")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden: int,
             forget_bias: float = 1.0) -> "LstmParams":
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = init_uniform(rng, (hidden, input_dim))
        for g in GATES:
            kw[f"U_{g}"] = init_uniform(rng, (hidden, hidden))
        for g in GATES:
            kw[f"b_{g}"] = np.full(hidden, forget_bias if g == "f" else 0.0)
        return cls(**kw)

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmParams":
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = np.zeros((hidden, input_dim))
            kw[f"U_{g}"] = np.zeros((hidden, hidden))
            kw[f"b_{g}"] = np.zeros(hidden)
        return cls(**kw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{k}_{g}": getattr(self, f"{k}_{g}") for k in "WUb" for g in GATES}

    def stacked(self):
        W = np.concatenate([getattr(self, f"W_{g}") for g in GATES], axis=0)
        U = np.concatenate([getattr(self, f"U_{g}") for g in GATES], axis=0)
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return W, U, b


@dataclass(frozen=True)
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(np.zeros(hidden), np.zeros(hidden))


def lstm_cell_step(x, prev: LstmState, p: LstmParams) -> LstmState:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.input_dim,):
        raise ShapeError(f"input shape {x.shape}, expected ({p.input_dim},)")
    if prev.h.shape != (p.hidden,) or prev.c.shape != (p.hidden,):
        raise ShapeError("state shape does not match hidden size")
    f = sigmoid(p.W_f @ x + p.U_f @ prev.h + p.b_f)
    i = sigmoid(p.W_i @ x + p.U_i @ prev.h + p.b_i)
    o = sigmoid(p.W_o @ x + p.U_o @ prev.h + p.b_o)
    c = f * prev.c + i * np.tanh(p.W_c @ x + p.U_c @ prev.h + p.b_c)
    h = o * np.tanh(c)
    return LstmState(h, c)


def lstm_forward(seq, p: LstmParams, init: LstmState | None = None):
    """Unroll the cell over ``seq``; returns (per-step states, final state)."""
    if len(seq) == 0:
        raise ValueError("empty sequence")
    state = init if init is not None else LstmState.zeros(p.hidden)
    states = []
    for x in seq:
        state = lstm_cell_step(x, state, p)
        states.append(state)
    return states, state


def lstm_seq_forward(X: np.ndarray, p: LstmParams, h0=None, c0=None):
    """Batched unroll. X is (T, N, D); returns (H, C, cache) with H, C of shape (T, N, H)."""
    T, N, D = X.shape
    if D != p.input_dim:
        raise ShapeError(f"input dim {D}, expected {p.input_dim}")
    Hd = p.hidden
    W, U, b = p.stacked()
    h = np.zeros((N, Hd)) if h0 is None else h0
    c = np.zeros((N, Hd)) if c0 is None else c0
    XW = X.reshape(T * N, D) @ W.T
    XW = XW.reshape(T, N, 4 * Hd)
    Hs = np.empty((T, N, Hd))
    Cs = np.empty((T, N, Hd))
    gates = np.empty((T, N, 4 * Hd))
    hprev = np.empty((T, N, Hd))
    cprev = np.empty((T, N, Hd))
    for t in range(T):
        hprev[t] = h
        cprev[t] = c
        z = XW[t] + h @ U.T + b
        a = np.empty_like(z)
        a[:, :3 * Hd] = sigmoid(z[:, :3 * Hd])
        a[:, 3 * Hd:] = np.tanh(z[:, 3 * Hd:])
        f, i, o, g = a[:, :Hd], a[:, Hd:2 * Hd], a[:, 2 * Hd:3 * Hd], a[:, 3 * Hd:]
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t] = a
        Hs[t] = h
        Cs[t] = c
    cache = (X, p, W, U, gates, hprev, cprev, Cs)
    return Hs, Cs, cache


def lstm_seq_backward(dH: np.ndarray, dc_last: np.ndarray | None, cache):
    """Backprop through time.

    dH is (T, N, H), the loss gradient w.r.t. every emitted hidden state;
    dc_last is the gradient w.r.t. the final cell state.  Returns
    (dX, grads) with grads keyed like ``LstmParams.arrays()``.
    """
    _need_cache(cache)
    X, p, W, U, gates, hprev, cprev, Cs = cache
    T, N, D = X.shape
    Hd = p.hidden
    dZ = np.empty((T, N, 4 * Hd))
    dh_next = np.zeros((N, Hd))
    dc_next = np.zeros((N, Hd)) if dc_last is None else dc_last.copy()
    for t in reversed(range(T)):
        a = gates[t]
        f, i, o, g = a[:, :Hd], a[:, Hd:2 * Hd], a[:, 2 * Hd:3 * Hd], a[:, 3 * Hd:]
        tc = np.tanh(Cs[t])
        dh = dH[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :Hd] = dc * cprev[t] * f * (1.0 - f)
        dz[:, Hd:2 * Hd] = dc * g * i * (1.0 - i)
        dz[:, 2 * Hd:3 * Hd] = dh * tc * o * (1.0 - o)
        dz[:, 3 * Hd:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ U
    dZf = dZ.reshape(T * N, 4 * Hd)
    dU = dZf.T @ hprev.reshape(T * N, Hd)
    dW = dZf.T @ X.reshape(T * N, D)
    db = dZf.sum(axis=0)
    dX = (dZf @ W).reshape(T, N, D)
    grads = {}
    for k, g in enumerate(GATES):
        sl = slice(k * Hd, (k + 1) * Hd)
        grads[f"W_{g}"] = dW[sl]
        grads[f"U_{g}"] = dU[sl]
        grads[f"b_{g}"] = db[sl]
    return dX, grads


# ---------------------------------------------------------------------------
# convolution / pooling / dense

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, H, W, C) -> (N, Ho, Wo, kh, kw, C), a strided view
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    v = v[:, ::stride, ::stride]
    return v.transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1):
    """Valid cross-correlation. x (N,H,W,C), kernels (kh,kw,C,O), bias (O,)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    N, H, W, C = x.shape
    kh, kw, kc, O = kernels.shape
    if kc != C:
        raise ShapeError(f"kernel expects {kc} channels, input has {C}")
    if kh > H or kw > W:
        raise ShapeError("kernel larger than input")
    if bias.shape != (O,):
        raise ShapeError("bias shape mismatch")
    cols = _windows(x, kh, kw, stride)
    Ho, Wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(N * Ho * Wo, kh * kw * C)
    out = cols @ kernels.reshape(kh * kw * C, O) + bias
    return out.reshape(N, Ho, Wo, O), (x.shape, kernels, stride, cols)


def conv2d_backward(dout: np.ndarray, cache, need_input_grad: bool = True):
    _need_cache(cache)
    xshape, kernels, stride, cols = cache
    N, H, W, C = xshape
    kh, kw, _, O = kernels.shape
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, O)
    dK = (cols.T @ d2).reshape(kernels.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = (d2 @ kernels.reshape(kh * kw * C, O).T).reshape(N, Ho, Wo, kh, kw, C)
        dx = np.zeros(xshape)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    return dx, dK, db


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, bias: np.ndarray | None = None) -> np.ndarray:
    """Single-image convolution, x is (H, W, C)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError("conv2d input must be H x W x C")
    if bias is None:
        bias = np.zeros(kernels.shape[3])
    out, _ = conv2d_forward(x[None], kernels, bias, stride)
    return out[0]


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (1, 1, C)."""
    return x.mean(axis=(0, 1), keepdims=True)


def gap_forward(x: np.ndarray):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dout: np.ndarray, cache):
    _need_cache(cache)
    N, H, W, C = cache
    return np.broadcast_to(dout[:, None, None, :] / (H * W), cache).copy()


def dense(x, weights, bias, activation: str = "none") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != x.shape[-1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense shapes x{x.shape} W{weights.shape} b{bias.shape}")
    z = x @ weights.T + bias
    if activation == "tanh":
        return np.tanh(z)
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, activation: str = "none"):
    y = dense(x, weights, bias, activation)
    return y, (x, weights, y, activation)


def dense_backward(dy: np.ndarray, cache):
    _need_cache(cache)
    x, weights, y, activation = cache
    dz = dy * (1.0 - y * y) if activation == "tanh" else dy
    return dz @ weights, dz.T @ x, dz.sum(axis=0)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


# ---------------------------------------------------------------------------
# loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits, label: int):
    """Cross-entropy of a 2-way softmax; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray, reduction: str = "sum"):
    """Batch cross-entropy ("sum" or "mean" over examples) and its gradient."""
    n = logits.shape[0]
    lp = log_softmax(logits)
    losses = -lp[np.arange(n), labels]
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    if reduction == "mean":
        return float(losses.mean()), grad / n
    if reduction == "sum":
        return float(losses.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptState:
    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptState):
    """v <- momentum * v + g; theta <- theta - lr * v.  Updates params in place."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {theta.shape} for {name}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ShapeError(f"velocity shape mismatch for {name}")
        v *= opt.momentum
        v += g
        theta -= opt.lr * v
    return params


# ---------------------------------------------------------------------------
# gradient checking

def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray],
               epsilon: float = 1e-5,
               max_checks: int | None = None,
               rng: np.random.Generator | None = None,
               names=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` evaluates the loss at the current contents of ``params``
    (mutated in place here) and returns (loss, grads).  When ``max_checks``
    is set, that many coordinates are sampled uniformly over all selected
    parameter entries instead of checking every one.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss, grads = loss_fn()
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    names = list(params) if names is None else list(names)
    coords = [(k, j) for k in names for j in range(params[k].size)]
    if max_checks is not None and max_checks < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for k, j in coords:
        arr = params[k]
        orig = arr.flat[j]
        arr.flat[j] = orig + epsilon
        lp, _ = loss_fn()
        arr.flat[j] = orig - epsilon
        lm, _ = loss_fn()
        arr.flat[j] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError("non-finite loss")
        num = (lp - lm) / (2 * epsilon)
        worst = max(worst, relative_error(float(grads[k].reshape(-1)[j]), num))
    return worst
