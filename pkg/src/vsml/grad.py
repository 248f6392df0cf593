"""Reverse-mode gradients written out by hand, a finite-difference checker, and Adam.

Only the pieces needed for cloning regressions and the SGD baselines are
covered: the LSTM cell, linear message projections, softmax cross-entropy
and small dense tanh networks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, LstmCellParams, log_softmax, sigmoid, softmax


class GradientFault(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmTape:
    z: np.ndarray
    h: np.ndarray
    u: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    z_new: np.ndarray
    tanh_z: np.ndarray
    h_new: np.ndarray
    clip: float | None = None
    clip_mask_z: np.ndarray | None = None
    clip_mask_h: np.ndarray | None = None

    def replay(self, cell: LstmCellParams):
        z_new, h_new, _ = lstm_forward(cell, self.z, self.h, self.u, clip=self.clip)
        return z_new, h_new


def lstm_forward(cell: LstmCellParams, z, h, u, clip: float | None = None):
    """Cell tick on a stack of sub-RNNs; ``u`` is the concatenated (fwd, bwd) input.

    Shapes: z, h (M, N); u (M, Nf+Nb).  Returns (z', h', tape).
    """
    N = cell.w_rec.shape[-1]
    if z.shape[-1] != N or h.shape[-1] != N or u.shape[-1] != cell.w_in.shape[-1]:
        raise ConfigError(f"tape shapes {z.shape}, {h.shape}, {u.shape} do not match the cell")
    pre = u @ cell.w_in.T + h @ cell.w_rec.T + cell.bias
    i = sigmoid(pre[..., :N])
    f = sigmoid(pre[..., N:2 * N])
    g = np.tanh(pre[..., 2 * N:3 * N])
    o = sigmoid(pre[..., 3 * N:])
    z_new = f * z + i * g
    tz = np.tanh(z_new)
    h_new = o * tz
    tape = LstmTape(z, h, u, i, f, g, o, z_new, tz, h_new)
    if clip is not None:
        tape.clip_mask_z = np.abs(z_new) <= clip
        tape.clip_mask_h = np.abs(h_new) <= clip
        tape.clip = clip
        z_new = np.clip(z_new, -clip, clip)
        h_new = np.clip(h_new, -clip, clip)
    return z_new, h_new, tape


def lstm_backward(cell: LstmCellParams, tape: LstmTape, dz_new, dh_new) -> dict:
    """Gradients of a scalar loss given d loss / d (z', h') for a recorded tick."""
    if dz_new.shape != tape.z_new.shape or dh_new.shape != tape.h_new.shape:
        raise ConfigError("upstream gradient does not match the tape")
    if tape.clip_mask_z is not None:
        dz_new = dz_new * tape.clip_mask_z
        dh_new = dh_new * tape.clip_mask_h
    dz_tot = dz_new + dh_new * tape.o * (1.0 - tape.tanh_z**2)
    d_o = dh_new * tape.tanh_z
    d_i = dz_tot * tape.g
    d_g = dz_tot * tape.i
    d_f = dz_tot * tape.z
    dpre = np.concatenate([
        d_i * tape.i * (1.0 - tape.i),
        d_f * tape.f * (1.0 - tape.f),
        d_g * (1.0 - tape.g**2),
        d_o * tape.o * (1.0 - tape.o),
    ], axis=-1)
    flat = dpre.reshape(-1, dpre.shape[-1])
    return {
        "w_in": flat.T @ tape.u.reshape(-1, tape.u.shape[-1]),
        "w_rec": flat.T @ tape.h.reshape(-1, tape.h.shape[-1]),
        "bias": flat.sum(axis=0),
        "z": dz_tot * tape.f,
        "h": dpre @ cell.w_rec,
        "u": dpre @ cell.w_in,
    }


# --------------------------------------------------------------------------
# linear projection (no bias) and softmax cross-entropy


def linear_forward(W, x):
    return x @ W.T


def linear_backward(W, x, dy) -> dict:
    return {"W": dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1]), "x": dy @ W}


def softmax_xent(logits, y):
    """Summed cross-entropy over rows and its gradient w.r.t. the logits."""
    lp = log_softmax(logits)
    y = np.asarray(y)
    loss = -np.take_along_axis(lp, y[..., None], axis=-1).sum()
    g = softmax(logits)
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], -1) - 1.0, -1)
    return loss, g


# --------------------------------------------------------------------------
# dense tanh network


@dataclass
class DenseNet:
    """Tanh hidden layers, linear output: logits = W_L tanh(... tanh(W_1 x + b_1)) + b_L."""
    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, seed: int) -> "DenseNet":
        rng = np.random.default_rng([seed, 0xD3E])
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            a = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-a, a, (fan_out, fan_in)))
            bs.append(rng.uniform(-a, a, fan_out))
        return cls(ws, bs)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def forward(self, x):
        acts = [np.asarray(x, dtype=np.float64)]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            pre = acts[-1] @ W.T + b
            acts.append(pre if k == len(self.weights) - 1 else np.tanh(pre))
        return acts

    def backward(self, acts, dlogits) -> list:
        """Gradients in the order of :meth:`arrays`."""
        grads = []
        delta = dlogits
        for k in range(len(self.weights) - 1, -1, -1):
            a_in = acts[k]
            grads.append(delta.reshape(-1, delta.shape[-1]).sum(axis=0))
            grads.append(delta.reshape(-1, delta.shape[-1]).T @ a_in.reshape(-1, a_in.shape[-1]))
            if k:
                delta = (delta @ self.weights[k]) * (1.0 - a_in**2)
        return grads[::-1]


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **kw)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(np.array(d["m"], dtype=np.float64), np.array(d["v"], dtype=np.float64), d["t"],
                   d["lr"], d["beta1"], d["beta2"], d["eps"])


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam descent step; mutates ``state`` and returns new params."""
    if grads.shape != state.m.shape or params.shape != grads.shape:
        raise ConfigError("Adam: parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        raise GradientFault("non-finite gradient passed to Adam")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class MultiAdam:
    """Independent Adam moments for a list of arrays sharing hyperparameters."""
    states: list = field(default_factory=list)

    @classmethod
    def for_arrays(cls, arrays, **kw) -> "MultiAdam":
        return cls([AdamState.like(a, **kw) for a in arrays])

    def step(self, arrays, grads) -> list:
        return [adam_step(a, g, s) for a, g, s in zip(arrays, grads, self.states)]


# --------------------------------------------------------------------------
# finite differences


def numerical_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = fn(x)
        flat[j] = orig - step
        fm = fn(x)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * step)
    return g


def fd_check(fn, x: np.ndarray, analytic: np.ndarray, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst relative deviation between ``analytic`` and central differences of ``fn`` at ``x``.

    Entries whose absolute difference is below ``floor`` count as exact.
    """
    num = numerical_grad(fn, x, step)
    analytic = np.asarray(analytic, dtype=np.float64)
    diff = np.abs(num - analytic)
    rel = diff / np.maximum(np.maximum(np.abs(num), np.abs(analytic)), floor)
    rel[diff < floor] = 0.0
    return float(rel.max()) if rel.size else 0.0
