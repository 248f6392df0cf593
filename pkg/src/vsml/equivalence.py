"""A grid of message-passing vanilla RNNs is one RNN with a sparse shared matrix.

Two step functions are provided for the single-layer tanh form
``s_abj <- tanh(sum_i s_abi W_ij + sum_{a',i} s_a'ai C_ij)``: one computes
it through per-cell recurrences and messages, the other through the single
(A*B*N)^2 matrix whose entries are either zero or copies of W, C or W + C.
Agreement of the two is checked numerically by :func:`verify`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError

DENSE_LIMIT = 64  # materialize W~ densely only while A*B*N stays this small


@dataclass
class VanillaSharedRnn:
    W: np.ndarray
    C: np.ndarray
    A: int
    B: int

    def __post_init__(self):
        if self.A != self.B:
            raise ConfigError(f"the single-layer form needs A == B, got A={self.A}, B={self.B}")
        if self.W.shape != self.C.shape or self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ConfigError("W and C must be square and of equal size")

    @property
    def N(self) -> int:
        return self.W.shape[0]


def w_tilde_entry(W, C, c, d, i, a, b, j) -> float:
    if d == a and (d != b or c != a):
        return C[i, j]
    if d != a and d == b and c == a:
        return W[i, j]
    if d == a and d == b and c == a:
        return C[i, j] + W[i, j]
    return 0.0


def w_tilde_block(W, C, c, d, a, b):
    """The N x N block coupling source cell (c, d) to target cell (a, b), or None if zero."""
    use_c = d == a
    use_w = d == b and c == a
    if use_c and use_w:
        return C + W
    if use_c:
        return C
    if use_w:
        return W
    return None


@dataclass
class SparseSharedMatrix:
    W: np.ndarray
    C: np.ndarray
    A: int
    B: int

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def materializable(self) -> bool:
        return self.A * self.B * self.N <= DENSE_LIMIT

    def entry(self, c, d, i, a, b, j) -> float:
        return w_tilde_entry(self.W, self.C, c, d, i, a, b, j)

    def dense6(self) -> np.ndarray:
        """W~ with axes (c, d, i, a, b, j)."""
        if not self.materializable:
            raise ConfigError(f"A*B*N = {self.A * self.B * self.N} exceeds the dense limit {DENSE_LIMIT}")
        A, B, N = self.A, self.B, self.N
        out = np.zeros((A, B, N, A, B, N))
        for c in range(A):
            for d in range(B):
                for a in range(A):
                    for b in range(B):
                        blk = w_tilde_block(self.W, self.C, c, d, a, b)
                        if blk is not None:
                            out[c, d, :, a, b, :] = blk
        return out

    def dense(self) -> np.ndarray:
        n = self.A * self.B * self.N
        return self.dense6().reshape(n, n)

    def nonzero_blocks(self) -> int:
        A, B = self.A, self.B
        return sum(w_tilde_block(self.W, self.C, c, d, a, b) is not None
                   for c in range(A) for d in range(B) for a in range(A) for b in range(B))


def analytic_nonzero_blocks(n: int) -> int:
    """Count of (c, d, a, b) in [n]^4 with d == a, or with d == b, c == a and d != a."""
    return n**3 + n * (n - 1)


def build_w_tilde(W, C, A: int, B: int) -> SparseSharedMatrix:
    rnn = VanillaSharedRnn(np.asarray(W, dtype=np.float64), np.asarray(C, dtype=np.float64), A, B)
    return SparseSharedMatrix(rnn.W, rnn.C, A, B)


def step_via_w_tilde(states, wt: SparseSharedMatrix) -> np.ndarray:
    """s_abj <- tanh(sum_{c,d,i} s_cdi W~_cdiabj)."""
    states = np.asarray(states, dtype=np.float64)
    A, B, N = wt.A, wt.B, wt.N
    if states.shape != (A, B, N):
        raise ConfigError(f"states have shape {states.shape}, expected {(A, B, N)}")
    if wt.materializable:
        return np.tanh((states.reshape(-1) @ wt.dense()).reshape(A, B, N))
    pre = np.zeros((A, B, N))
    for c in range(A):
        for d in range(B):
            for a in range(A):
                for b in range(B):
                    blk = w_tilde_block(wt.W, wt.C, c, d, a, b)
                    if blk is not None:
                        pre[a, b] += states[c, d] @ blk
    return np.tanh(pre)


def step_via_messages(states, W, C) -> np.ndarray:
    """s_abj <- tanh(sum_i s_abi W_ij + sum_{a',i} s_a'ai C_ij); message indexed by the second axis."""
    states = np.asarray(states, dtype=np.float64)
    A, B, N = states.shape
    VanillaSharedRnn(np.asarray(W), np.asarray(C), A, B)
    own = states @ W                              # (A, B, N)
    msg = states.sum(axis=0) @ C                  # m_d = sum_c s_cd C, shape (B, N)
    # cell (a, b) receives the message of column d = a
    return np.tanh(own + msg[:, None, :])


def verify(trials: int = 100, max_dim: int = 3, sizes=(1, 2, 4), seed: int = 0):
    """Yield (trial, A, N, max_abs_deviation) over random instances."""
    rng = np.random.default_rng([seed, 0xE0])
    for t in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        N = int(sizes[int(rng.integers(len(sizes)))])
        W, C = rng.standard_normal((N, N)), rng.standard_normal((N, N))
        s = rng.standard_normal((n, n, N))
        dev = np.max(np.abs(step_via_messages(s, W, C) - step_via_w_tilde(s, build_w_tilde(W, C, n, n))))
        yield t, n, N, float(dev)
