"""Finite-difference sweep over every hand-written gradient in the package."""
from __future__ import annotations

import numpy as np

from .cloning import CloningSample, SweepConfig, _vector_grads, clone_loss
from .core import Dims, LstmCellParams, MetaParams
from .grad import DenseNet, fd_check, linear_backward, linear_forward, lstm_backward, lstm_forward, softmax_xent


def _cell(rng, N, n_in):
    return LstmCellParams(rng.normal(0, 0.6, (4 * N, n_in)), rng.normal(0, 0.6, (4 * N, N)),
                          rng.normal(0, 0.6, 4 * N))


def check_lstm(rng, clip=None) -> dict:
    """Relative FD error for each input of one LSTM tick under a random linear loss."""
    N, n_in, M = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    cell = _cell(rng, N, n_in)
    z, h, u = rng.normal(0, 1, (M, N)), rng.normal(0, 1, (M, N)), rng.normal(0, 1, (M, n_in))
    cz, ch = rng.normal(size=(M, N)), rng.normal(size=(M, N))

    def loss(c, z_, h_, u_):
        zn, hn, _ = lstm_forward(c, z_, h_, u_, clip)
        return float((cz * zn).sum() + (ch * hn).sum())

    _, _, tape = lstm_forward(cell, z, h, u, clip)
    g = lstm_backward(cell, tape, cz, ch)
    errs = {
        "w_in": fd_check(lambda w: loss(LstmCellParams(w, cell.w_rec, cell.bias), z, h, u), cell.w_in, g["w_in"]),
        "w_rec": fd_check(lambda w: loss(LstmCellParams(cell.w_in, w, cell.bias), z, h, u), cell.w_rec, g["w_rec"]),
        "bias": fd_check(lambda b: loss(LstmCellParams(cell.w_in, cell.w_rec, b), z, h, u), cell.bias, g["bias"]),
        "z": fd_check(lambda v: loss(cell, v, h, u), z, g["z"]),
        "h": fd_check(lambda v: loss(cell, z, v, u), h, g["h"]),
        "u": fd_check(lambda v: loss(cell, z, h, v), u, g["u"]),
    }
    return errs


def check_linear(rng) -> dict:
    n_out, n_in, M = (int(v) for v in rng.integers(1, 6, 3))
    W, x, c = rng.normal(size=(n_out, n_in)), rng.normal(size=(M, n_in)), rng.normal(size=(M, n_out))
    g = linear_backward(W, x, c)
    return {"W": fd_check(lambda w: float((c * linear_forward(w, x)).sum()), W, g["W"]),
            "x": fd_check(lambda v: float((c * linear_forward(W, v)).sum()), x, g["x"])}


def check_softmax_xent(rng) -> dict:
    M, C = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits, y = rng.normal(0, 2, (M, C)), rng.integers(0, C, M)
    _, g = softmax_xent(logits, y)
    return {"logits": fd_check(lambda v: softmax_xent(v, y)[0], logits, g)}


def check_dense(rng) -> dict:
    sizes = [int(v) for v in rng.integers(1, 5, int(rng.integers(2, 4)))] + [int(rng.integers(2, 4))]
    net = DenseNet.init(sizes, int(rng.integers(1 << 30)))
    x, y = rng.normal(size=(3, sizes[0])), rng.integers(0, sizes[-1], 3)
    acts = net.forward(x)
    _, dl = softmax_xent(acts[-1], y)
    grads = net.backward(acts, dl)
    out = {}
    arrays = net.arrays()
    for j, arr in enumerate(arrays):
        def f(v, j=j):
            trial = list(arrays)
            trial[j] = v
            probe = DenseNet(trial[0::2], trial[1::2])
            return softmax_xent(probe.forward(x)[-1], y)[0]
        out[f"layer{j // 2}.{'W' if j % 2 == 0 else 'b'}"] = fd_check(f, arr, grads[j])
    return {"dense": max(out.values())}


def check_clone_loss(rng) -> dict:
    dims = Dims(int(rng.integers(2, 5)), 2, 2)
    params = MetaParams.init(dims, int(rng.integers(1 << 30)), scale=3.0)
    M = int(rng.integers(1, 5))
    s = CloningSample.build(rng.normal(size=M), rng.normal(size=M), rng.normal(size=M), rng.normal(size=M), 0.1)
    sweeps = SweepConfig(int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    _, g, _ = clone_loss(params, s, 0.1, sweeps)
    f = lambda t: clone_loss(MetaParams.from_vector(t, dims), s, 0.1, sweeps, with_grad=False)[0]
    return {"clone_loss": fd_check(f, params.to_vector(), _vector_grads(g))}


CHECKS = {
    "lstm": lambda rng: check_lstm(rng),
    "lstm_clipped": lambda rng: check_lstm(rng, clip=4.0),
    "linear": check_linear,
    "softmax_xent": check_softmax_xent,
    "dense": check_dense,
    "clone_loss": check_clone_loss,
}


def run_grad_suite(instances: int = 20, seed: int = 0) -> list:
    """Rows of (operation.input, instance, worst relative error)."""
    rows = []
    for name, check in CHECKS.items():
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            for part, err in check(rng).items():
                rows.append((f"{name}.{part}", i, err))
    return rows
