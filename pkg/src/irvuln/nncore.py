"""Neural-network primitives with hand-written backpropagation.

Everything is double precision. The LSTM cell uses logistic sigmoid gates
and ReLU for the candidate and cell-output nonlinearities; the ReLU
subgradient at 0 is 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

Array = np.ndarray


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function (no overflow for large |x|)."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def dense_forward(weight: Array, x: Array) -> Array:
    """weight @ x with an explicit dimension check (no bias)."""
    weight = np.asarray(weight, dtype=float)
    x = np.asarray(x, dtype=float)
    if weight.ndim != 2 or x.shape[0] != weight.shape[1]:
        raise ValueError(f"dimension mismatch: weight {weight.shape}, x {x.shape}")
    return weight @ x


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Array:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass(eq=False)
class LstmParams:
    """One LSTM cell. Gate rows of `weight` are stacked [input; forget; output;
    candidate], each block hidden_dim wide, acting on [x ⊕ h_prev]."""

    weight: Array  # (4M, input_dim + M)
    bias: Array    # (4M,)
    hidden_dim: int
    use_bias: bool = True

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1] - self.hidden_dim

    @classmethod
    def create(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int,
               use_bias: bool = True) -> "LstmParams":
        w = init_uniform(rng, (4 * hidden_dim, input_dim + hidden_dim),
                         input_dim + hidden_dim)
        return cls(w, np.zeros(4 * hidden_dim), hidden_dim, use_bias)


def lstm_step(params: LstmParams, x: Array, h_prev: Array, c_prev: Array):
    """One recurrence step; returns (h, c)."""
    m = params.hidden_dim
    if x.shape[0] != params.input_dim or h_prev.shape[0] != m or c_prev.shape[0] != m:
        raise ValueError("dimension mismatch in lstm_step")
    u = np.concatenate([x, h_prev])
    z = params.weight @ u
    if params.use_bias:
        z = z + params.bias
    i = sigmoid(z[:m])
    f = sigmoid(z[m:2 * m])
    o = sigmoid(z[2 * m:3 * m])
    g = relu(z[3 * m:])
    c = f * c_prev + i * g
    h = o * relu(c)
    return h, c


class LstmCache:
    """Per-sequence forward intermediates needed by backpropagation."""

    __slots__ = ("U", "I", "F", "O", "G", "Zg", "C", "CPrev", "H")

    def __init__(self, length, input_dim, hidden_dim):
        m = hidden_dim
        self.U = np.empty((length, input_dim + m))
        self.I = np.empty((length, m))
        self.F = np.empty((length, m))
        self.O = np.empty((length, m))
        self.G = np.empty((length, m))
        self.Zg = np.empty((length, m))
        self.C = np.empty((length, m))
        self.CPrev = np.empty((length, m))
        self.H = np.empty((length, m))


def lstm_sequence_forward(params: LstmParams, xs: Array):
    """Run the cell over xs (L, D) from zero initial state.

    Returns (H, cache) where H[t] is the hidden state after consuming xs[t].
    """
    length = xs.shape[0]
    m = params.hidden_dim
    d = params.input_dim
    cache = LstmCache(length, d, m)
    h = np.zeros(m)
    c = np.zeros(m)
    # input-to-gate projections for the whole sequence in one product;
    # the loop only adds the recurrent term
    zx = xs @ params.weight[:, :d].T
    if params.use_bias:
        zx += params.bias
    wh = params.weight[:, d:]
    cache.U[:, :d] = xs
    for t in range(length):
        cache.U[t, d:] = h
        z = zx[t] + wh @ h
        gates = sigmoid(z[:3 * m])
        i, f, o = gates[:m], gates[m:2 * m], gates[2 * m:]
        zg = z[3 * m:]
        g = relu(zg)
        cache.I[t] = i
        cache.F[t] = f
        cache.O[t] = o
        cache.G[t] = g
        cache.Zg[t] = zg
        cache.CPrev[t] = c
        c = f * c + i * g
        h = o * relu(c)
        cache.C[t] = c
        cache.H[t] = h
    return cache.H, cache


def lstm_sequence_backward(params: LstmParams, cache: LstmCache, dH: Array):
    """Backprop through time.

    dH[t] is the upstream gradient on the hidden state at step t. Returns
    (dweight, dbias, dX) with dX[t] the gradient on input xs[t].
    """
    m = params.hidden_dim
    d = params.input_dim
    length = dH.shape[0]
    # per-step gate-preactivation gradients; weight/bias/input gradients
    # fall out of single products over the whole sequence afterwards
    dZ = np.empty((length, 4 * m))
    whT = params.weight[:, d:].T
    dh_carry = np.zeros(m)
    dc_carry = np.zeros(m)
    for t in range(length - 1, -1, -1):
        i, f, o, g = cache.I[t], cache.F[t], cache.O[t], cache.G[t]
        c = cache.C[t]
        rc = relu(c)
        dh = dH[t] + dh_carry
        do = dh * rc
        dc = dc_carry + dh * o * (c > 0)
        dz = dZ[t]
        dz[:m] = dc * g * i * (1.0 - i)
        dz[m:2 * m] = dc * cache.CPrev[t] * f * (1.0 - f)
        dz[2 * m:3 * m] = do * o * (1.0 - o)
        dz[3 * m:] = dc * i * (cache.Zg[t] > 0)
        dh_carry = whT @ dz
        dc_carry = dc * f
    dw = dZ.T @ cache.U
    db = dZ.sum(axis=0) if params.use_bias else np.zeros_like(params.bias)
    dX = dZ @ params.weight[:, :d]
    return dw, db, dX


@dataclass(eq=False)
class BlstmOutput:
    """Per-position hidden states of both directions.

    backward_states[t] is the backward cell's output AT position t (so
    backward_states[0] is its final computed state).
    """

    forward_states: Array  # (L, M)
    backward_states: Array  # (L, M)


def blstm_forward(fwd: LstmParams, bwd: LstmParams, inputs: Array) -> BlstmOutput:
    """Bidirectional pass over inputs (L, D) from zero initial states."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("blstm_forward requires a non-empty (L, D) input")
    hf, _ = lstm_sequence_forward(fwd, inputs)
    hb_rev, _ = lstm_sequence_forward(bwd, inputs[::-1])
    return BlstmOutput(hf, hb_rev[::-1].copy())


def softmax(logits: Array) -> Array:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: Array, label: int):
    """Stable cross-entropy for a 2-class logit vector.

    Returns (loss, dlogits) with dlogits = softmax(logits) - one_hot(label).
    """
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits)
    lse = m + np.log(np.exp(logits - m).sum())
    loss = lse - logits[label]
    dlogits = np.exp(logits - lse)
    dlogits[label] -= 1.0
    return loss, dlogits


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """In-place p <- p - lr * g for every tensor."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        p -= lr * g
    return params


def gradient_check(loss_fn, grad_fn, params: dict, h: float = 1e-5,
                   num_coords: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    Samples at least num_coords coordinates across all tensors (all of them
    when there are fewer) and returns the max relative error
    |a - n| / max(|a|, |n|, 1e-8). Discrepancies below 1e-9 are treated as
    exact matches: central differences at this step size cannot resolve
    them, and an actual backprop defect shows up at gradient scale.
    """
    base = loss_fn(params)
    if not np.isfinite(base):
        raise NumericError("non-finite loss in gradient_check")
    grads = grad_fn(params)
    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if total <= num_coords:
        coords = np.arange(total)
    else:
        coords = rng.choice(total, size=num_coords, replace=False)
    offsets = np.cumsum([0] + sizes)
    max_err = 0.0
    for flat in coords:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = int(flat - offsets[k])
        p = params[name]
        orig = p.flat[idx]
        p.flat[idx] = orig + h
        up = loss_fn(params)
        p.flat[idx] = orig - h
        down = loss_fn(params)
        p.flat[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite loss in gradient_check")
        numeric = (up - down) / (2.0 * h)
        analytic = grads[name].flat[idx]
        diff = abs(analytic - numeric)
        if diff < 1e-9:
            continue
        err = diff / max(abs(analytic), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err
