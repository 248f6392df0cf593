"""Learning algorithm cloning: regress the shared LSTM onto online backprop.

Each sub-RNN keeps a weight ``w`` and bias ``b`` in the first two entries of
its cell state, stored divided by ``SCALE``.  A forward sweep must emit
``y = tanh(x) w + b`` in slot 0 of its forward projection without changing
the state; a backward sweep, given the stored input ``x`` and the incoming
error ``e``, must move ``(w, b)`` by the SGD step and emit the propagated
error ``e * w * (1 - tanh(x)^2)`` in slot 0 of its backward projection.

Between sweeps only ``(w, b)`` survive; every other state entry (and the
whole hidden vector) is zero when a sweep starts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import STATE_CLIP, ConfigError, Dims, LstmCellParams, MetaParams, squash
from .grad import AdamState, adam_step, lstm_backward, lstm_forward
from .trace import MetricTrace

SCALE = 4.0


class CloningStalled(RuntimeError):
    def __init__(self, report, params=None, history=None):
        self.params, self.history = params, history
        super().__init__(f"stage {report['stage']} stopped at loss {report['loss']:.3g} "
                         f"after {report['steps']} steps (threshold {report['threshold']:.3g})")
        self.report = report


# --------------------------------------------------------------------------
# targets


def make_targets(x, w, b, e, alpha):
    """Forward output, SGD updates and propagated error for y = tanh(x) w + b."""
    t = np.tanh(x)
    return t * w + b, -alpha * e * t, -alpha * e, e * w * (1.0 - t**2)


@dataclass
class CloningSample:
    x: np.ndarray
    w: np.ndarray
    b: np.ndarray
    e: np.ndarray
    y: np.ndarray
    dw: np.ndarray
    db: np.ndarray
    ep: np.ndarray

    @classmethod
    def build(cls, x, w, b, e, alpha) -> "CloningSample":
        x, w, b, e = (np.asarray(v, dtype=np.float64).ravel() for v in (x, w, b, e))
        return cls(x, w, b, e, *make_targets(x, w, b, e, alpha))

    def __len__(self):
        return len(self.x)


class StateBuffer:
    """Ring buffer of retained (w, b) sub-RNN states."""

    def __init__(self, capacity: int, rng: np.random.Generator, init_scale: float = 1.0):
        self.capacity = capacity
        self.data = rng.uniform(-init_scale, init_scale, (capacity, 2))
        self.pos = 0

    def sample(self, rng, n: int) -> np.ndarray:
        return self.data[rng.integers(0, self.capacity, n)]

    def append(self, wb) -> None:
        self.data[self.pos] = wb
        self.pos = (self.pos + 1) % self.capacity


# --------------------------------------------------------------------------
# sweeps on isolated sub-RNNs


def canonical_state(w, b, N):
    z = np.zeros(np.shape(w) + (N,))
    z[..., 0] = np.asarray(w) / SCALE
    z[..., 1] = np.asarray(b) / SCALE
    return z, np.zeros_like(z)


def sweep_inputs(dims: Dims, x, e=None):
    u = np.zeros(np.shape(x) + (dims.n_in,))
    u[..., 0] = x
    if e is not None:
        u[..., dims.Nf] = e
    return u


def unroll(cell: LstmCellParams, z, h, u, ticks: int, clip=None):
    tapes = []
    for _ in range(ticks):
        z, h, tape = lstm_forward(cell, z, h, u, clip)
        tapes.append(tape)
    return z, h, tapes


def unroll_backward(cell: LstmCellParams, tapes, dz, dh):
    grads = {k: 0.0 for k in ("w_in", "w_rec", "bias")}
    for tape in reversed(tapes):
        g = lstm_backward(cell, tape, dz, dh)
        for k in grads:
            grads[k] = grads[k] + g[k]
        dz, dh = g["z"], g["h"]
    return grads


@dataclass
class SweepConfig:
    fwd_ticks: int = 2
    bwd_ticks: int = 2

    def __post_init__(self):
        if self.fwd_ticks < 1 or self.bwd_ticks < 1:
            raise ConfigError("sweeps need at least one tick")


def cell_outputs(params: MetaParams, x, w, b, e, sweeps: SweepConfig, clip=None):
    """(y_hat, w_new, b_new, e_hat) for independent sub-RNNs."""
    N = params.dims.N
    z0, h0 = canonical_state(w, b, N)
    _, hf, _ = unroll(params.cell, z0, h0, sweep_inputs(params.dims, x), sweeps.fwd_ticks, clip)
    zb, hb, _ = unroll(params.cell, z0, h0, sweep_inputs(params.dims, x, e), sweeps.bwd_ticks, clip)
    y_hat = hf @ params.proj.fwd[0]
    e_hat = hb @ params.proj.bwd[0]
    return y_hat, SCALE * zb[..., 0], SCALE * zb[..., 1], e_hat


def clone_loss(params: MetaParams, s: CloningSample, alpha: float, sweeps: SweepConfig,
               with_grad: bool = True):
    """Mean of the four squared errors; update errors are measured in units of ``alpha``.

    Returns (loss, grads-as-blocks or None, parts) where parts holds the RNN outputs.
    """
    N, dims = params.dims.N, params.dims
    M = len(s)
    z0, h0 = canonical_state(s.w, s.b, N)
    zf, hf, tf = unroll(params.cell, z0, h0, sweep_inputs(dims, s.x), sweeps.fwd_ticks)
    zb, hb, tb = unroll(params.cell, z0, h0, sweep_inputs(dims, s.x, s.e), sweeps.bwd_ticks)
    y_hat = hf @ params.proj.fwd[0]
    e_hat = hb @ params.proj.bwd[0]
    dw_hat = SCALE * zb[:, 0] - s.w
    db_hat = SCALE * zb[:, 1] - s.b
    r_y, r_e = y_hat - s.y, e_hat - s.ep
    r_w, r_b = (dw_hat - s.dw) / alpha, (db_hat - s.db) / alpha
    loss = float(np.mean(r_y**2 + r_w**2 + r_b**2 + r_e**2) / 4.0)
    parts = {"y": y_hat, "dw": dw_hat, "db": db_hat, "ep": e_hat}
    if not with_grad:
        return loss, None, parts
    c = 2.0 / (4.0 * M)
    g_y, g_e = c * r_y, c * r_e
    # forward sweep
    dhf = g_y[:, None] * params.proj.fwd[0]
    gf = unroll_backward(params.cell, tf, np.zeros_like(zf), dhf)
    # backward sweep
    dzb = np.zeros_like(zb)
    dzb[:, 0] = c * r_w / alpha * SCALE
    dzb[:, 1] = c * r_b / alpha * SCALE
    dhb = g_e[:, None] * params.proj.bwd[0]
    gb = unroll_backward(params.cell, tb, dzb, dhb)
    fwd_proj = np.zeros_like(params.proj.fwd)
    fwd_proj[0] = g_y @ hf
    bwd_proj = np.zeros_like(params.proj.bwd)
    bwd_proj[0] = g_e @ hb
    grads = {"w_in": gf["w_in"] + gb["w_in"], "w_rec": gf["w_rec"] + gb["w_rec"],
             "bias": gf["bias"] + gb["bias"], "fwd_proj": fwd_proj, "bwd_proj": bwd_proj}
    return loss, grads, parts


# --------------------------------------------------------------------------
# training


@dataclass
class CloneConfig:
    N: int = 64
    Nf: int = 8
    Nb: int = 8
    alpha: float = 0.01
    batch_size: int = 256
    buffer_capacity: int = 1024
    lr: float = 1e-3
    lr_final: float | None = None   # exponential decay to this over each stage budget
    fwd_ticks: int = 2
    bwd_ticks: int = 2
    x_scale: float = 1.0
    e_scale: float = 1.0
    wb_scale: float = 1.0
    stages: tuple = (1,)
    thresholds: tuple = (1e-3, 5e-3, 5e-3)
    budgets: tuple = (20000, 5000, 5000)
    data: str = "random"
    shadow_hidden: int = 32
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.stages = tuple(self.stages)
        self.thresholds = tuple(self.thresholds)
        self.budgets = tuple(self.budgets)
        if not set(self.stages) <= {1, 2, 3}:
            raise ConfigError("stages are drawn from 1, 2, 3")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")

    @property
    def dims(self) -> Dims:
        return Dims(self.N, self.Nf, self.Nb)

    @property
    def sweeps(self) -> SweepConfig:
        return SweepConfig(self.fwd_ticks, self.bwd_ticks)

    @property
    def skipped_stage(self) -> bool:
        return 3 in self.stages and 2 not in self.stages

    @classmethod
    def from_dict(cls, d) -> "CloneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cloning keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _vector_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in ("w_in", "w_rec", "bias", "fwd_proj", "bwd_proj")])


def clone_step(params: MetaParams, samples: CloningSample, adam: AdamState, alpha: float,
               sweeps: SweepConfig):
    """One Adam step on the regression loss; returns (new params, loss, parts)."""
    loss, grads, parts = clone_loss(params, samples, alpha, sweeps)
    if not np.isfinite(loss):
        raise FloatingPointError(f"cloning loss became {loss}")
    theta = adam_step(params.to_vector(), _vector_grads(grads), adam)
    return MetaParams.from_vector(theta, params.dims), loss, parts


def random_samples(rng, buffer: StateBuffer, n: int, cfg: CloneConfig) -> CloningSample:
    wb = buffer.sample(rng, n)
    x = cfg.x_scale * rng.standard_normal(n)
    e = rng.uniform(-cfg.e_scale, cfg.e_scale, n)
    return CloningSample.build(x, wb[:, 0], wb[:, 1], e, cfg.alpha)


@dataclass
class ShadowNet:
    """Dense tanh network whose layer k computes y_b = mean_a(tanh(x_a) W_ab + Bias_ab).

    Every connection carries its own bias so that each (a, b) pair maps to one
    sub-RNN.  Updates are plain SGD on the per-connection rule.
    """
    weights: list
    biases: list
    alpha: float = 0.01

    @classmethod
    def init(cls, sizes, seed, alpha=0.01, scale=1.0) -> "ShadowNet":
        rng = np.random.default_rng([seed, 0x5AD])
        ws = [rng.uniform(-scale, scale, (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [rng.uniform(-0.1 * scale, 0.1 * scale, (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(ws, bs, alpha)

    def forward(self, x):
        acts = [np.asarray(x, dtype=np.float64)]
        for W, Bi in zip(self.weights, self.biases):
            a = acts[-1]
            acts.append(np.mean(np.tanh(a)[..., :, None] * W + Bi, axis=-2))
        return acts

    def backward(self, acts, e):
        """Per-layer (x, e) pairs and the SGD updates, from the top error ``e``."""
        records = []
        for k in range(len(self.weights) - 1, -1, -1):
            x = acts[k]
            W = self.weights[k]
            t = np.tanh(x)
            ep = e[..., None, :] * W * (1.0 - t[..., :, None] ** 2)
            records.append((k, x, e))
            e = ep.mean(axis=-1)
        return records[::-1]

    def sgd(self, records) -> None:
        for k, x, e in records:
            t = np.tanh(x)
            dW = -self.alpha * t[..., :, None] * e[..., None, :]
            dB = -self.alpha * np.broadcast_to(e[..., None, :], dW.shape)
            if dW.ndim == 3:
                dW, dB = dW.mean(axis=0), dB.mean(axis=0)
            self.weights[k] = self.weights[k] + dW
            self.biases[k] = self.biases[k] + dB


def shadow_samples(rng, net: ShadowNet, x, y, n: int, alpha: float) -> CloningSample:
    """Per-connection samples from a shadow net's true forward and backward pass, then SGD it."""
    from .core import xent_grad

    acts = net.forward(x)
    e_top = xent_grad(squash(acts[-1]), y)
    records = net.backward(acts, e_top)
    cols = {"x": [], "w": [], "b": [], "e": []}
    for k, xk, ek in records:
        W, Bi = net.weights[k], net.biases[k]
        shape = xk.shape[:-1] + W.shape
        cols["x"].append(np.broadcast_to(xk[..., :, None], shape).ravel())
        cols["w"].append(np.broadcast_to(W, shape).ravel())
        cols["b"].append(np.broadcast_to(Bi, shape).ravel())
        cols["e"].append(np.broadcast_to(ek[..., None, :], shape).ravel())
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    pick = rng.integers(0, len(cat["x"]), n)
    net.sgd(records)
    return CloningSample.build(cat["x"][pick], cat["w"][pick], cat["b"][pick], cat["e"][pick], alpha)


def vsml_samples(rng, params: MetaParams, state: "ClonedNet", x, y, n: int, alpha: float,
                 sweeps: SweepConfig) -> CloningSample:
    """Per-connection samples whose inputs come from the VSML network's own messages."""
    acts, _ = state.forward(params, x, sweeps)
    from .core import xent_grad

    e = xent_grad(squash(acts[-1]), y)
    cols = {"x": [], "w": [], "b": [], "e": []}
    for k in range(state.K - 1, -1, -1):
        xk = acts[k]
        W, Bi = state.w[k], state.b[k]
        shape = xk.shape[:-1] + W.shape
        cols["x"].append(np.broadcast_to(xk[..., :, None], shape).ravel())
        cols["w"].append(np.broadcast_to(W, shape).ravel())
        cols["b"].append(np.broadcast_to(Bi, shape).ravel())
        cols["e"].append(np.broadcast_to(e[..., None, :], shape).ravel())
        e = state.layer_backward(params, k, xk, e, sweeps, commit=True)
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    pick = rng.integers(0, len(cat["x"]), n)
    return CloningSample.build(cat["x"][pick], cat["w"][pick], cat["b"][pick], cat["e"][pick], alpha)


def _stage_source(cfg: CloneConfig, stage: int, rng, dataset):
    """Infinite iterator over (x, y) minibatches for stages 2 and 3."""
    if dataset is not None:
        X, Y = dataset
        while True:
            idx = rng.integers(0, len(Y), 16)
            yield X[idx], Y[idx]
    sizes_in = 16
    u = np.random.default_rng([cfg.seed, 0x51D]).standard_normal((sizes_in, 2))
    while True:
        x = rng.standard_normal((16, sizes_in))
        yield x, np.argmax(x @ u, axis=1)


def run_curriculum(cfg: CloneConfig, params: MetaParams | None = None, dataset=None, log=None):
    """Train V_M through the configured stages; raises CloningStalled if a stage misses its threshold.

    ``dataset`` is an optional (X, Y) pair (flattened inputs in [0, 1], int labels) used by the
    deep stages; otherwise a random linear task stands in.
    """
    rng = np.random.default_rng([cfg.seed, 0xC10E])
    params = params or MetaParams.init(cfg.dims, cfg.seed, forget_bias=1.0)
    adam = AdamState.like(params.to_vector(), lr=cfg.lr)
    buffer = StateBuffer(cfg.buffer_capacity, rng, cfg.wb_scale)
    history = []
    reports = []
    if cfg.skipped_stage:
        reports.append({"warning": "stage 3 requested without stage 2"})
    for stage in cfg.stages:
        threshold, budget = cfg.thresholds[stage - 1], cfg.budgets[stage - 1]
        source = None if stage == 1 else _stage_source(cfg, stage, rng, dataset)
        n_in = 16 if dataset is None else dataset[0].shape[1]
        n_out = 2 if dataset is None else int(dataset[1].max()) + 1
        shadow = ShadowNet.init([n_in, cfg.shadow_hidden, n_out], cfg.seed + stage, cfg.alpha, 0.5)
        net = ClonedNet.init([n_in, cfg.shadow_hidden, n_out], cfg.seed + stage, 0.5)
        smooth = None
        for step in range(budget):
            if cfg.lr_final is not None:
                adam.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (step / max(budget - 1, 1))
            if stage == 1:
                batch = random_samples(rng, buffer, cfg.batch_size, cfg)
            elif stage == 2:
                xb, yb = next(source)
                batch = shadow_samples(rng, shadow, xb, yb, cfg.batch_size, cfg.alpha)
            else:
                xb, yb = next(source)
                batch = vsml_samples(rng, params, net, xb, yb, cfg.batch_size, cfg.alpha, cfg.sweeps)
            params, loss, parts = clone_step(params, batch, adam, cfg.alpha, cfg.sweeps)
            if stage == 1:
                j = int(rng.integers(len(batch)))
                buffer.append(np.clip([parts["dw"][j] + batch.w[j], parts["db"][j] + batch.b[j]],
                                      -SCALE * STATE_CLIP, SCALE * STATE_CLIP))
            smooth = loss if smooth is None else 0.98 * smooth + 0.02 * loss
            history.append((stage, step, loss))
            if log and step % cfg.log_every == 0:
                log({"stage": stage, "step": step, "loss": loss, "smoothed": smooth})
            if step >= 100 and smooth < threshold:
                break
        report = {"stage": stage, "steps": step + 1, "loss": smooth, "threshold": threshold,
                  "passed": bool(smooth < threshold)}
        reports.append(report)
        if not report["passed"]:
            raise CloningStalled(report, params, history)
    return params, history, reports


# --------------------------------------------------------------------------
# running the cloned learning algorithm


@dataclass
class ClonedNet:
    """Retained (w, b) of every sub-RNN of a stack of layers."""
    w: list
    b: list
    clip: float | None = STATE_CLIP

    @classmethod
    def init(cls, widths, seed, scale=0.1, clip=STATE_CLIP) -> "ClonedNet":
        rng = np.random.default_rng([seed, 0xC1D])
        ws = [rng.uniform(-scale, scale, (a, b)) for a, b in zip(widths[:-1], widths[1:])]
        bs = [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])]
        return cls(ws, bs, clip)

    @property
    def K(self) -> int:
        return len(self.w)

    def layer_forward(self, params, k, x, sweeps):
        """x: (M, A) -> forward message slot 0, (M, B); state untouched."""
        W, Bi = self.w[k], self.b[k]
        M = x.shape[0]
        shape = (M,) + W.shape
        z0, h0 = canonical_state(np.broadcast_to(W, shape), np.broadcast_to(Bi, shape), params.dims.N)
        u = sweep_inputs(params.dims, np.broadcast_to(x[:, :, None], shape))
        _, h, _ = unroll(params.cell, z0, h0, u, sweeps.fwd_ticks, self.clip)
        return (h @ params.proj.fwd[0]).mean(axis=1)

    def forward(self, params, x, sweeps):
        acts = [np.asarray(x, dtype=np.float64)]
        for k in range(self.K):
            acts.append(self.layer_forward(params, k, acts[-1], sweeps))
        return acts, squash(acts[-1])

    def layer_backward(self, params, k, x, e, sweeps, commit=True):
        """Backward sweep of layer k over a batch; averages the new (w, b) across the batch."""
        W, Bi = self.w[k], self.b[k]
        M = x.shape[0]
        shape = (M,) + W.shape
        z0, h0 = canonical_state(np.broadcast_to(W, shape), np.broadcast_to(Bi, shape), params.dims.N)
        u = sweep_inputs(params.dims, np.broadcast_to(x[:, :, None], shape), np.broadcast_to(e[:, None, :], shape))
        z, h, _ = unroll(params.cell, z0, h0, u, sweeps.bwd_ticks, self.clip)
        if commit:
            self.w[k] = SCALE * z[..., 0].mean(axis=0)
            self.b[k] = SCALE * z[..., 1].mean(axis=0)
        return (h @ params.proj.bwd[0]).mean(axis=2)


def run_cloned_learner(params: MetaParams, episode, batch: int = 64, hidden=(),
                       sweeps: SweepConfig | None = None, seed: int = 0, clip=STATE_CLIP,
                       init_scale: float = 0.1, zero_error: bool = False) -> MetricTrace:
    """Online learning purely by unrolling the cloned LSTM: forward 1..K, backward K..1.

    Rows of the trace are data points; predictions precede the batch update.
    """
    from .core import softmax, xent, xent_grad

    sweeps = sweeps or SweepConfig()
    widths = [episode.input_dim, *hidden, episode.n_classes]
    net = ClonedNet.init(widths, seed, init_scale, clip)
    T = len(episode)
    losses, preds, probs = np.empty(T), np.empty(T, dtype=np.int64), np.empty((T, episode.n_classes))
    fault = None
    history = []
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, T, batch):
            x, y = episode.x[start:start + batch], episode.y[start:start + batch]
            acts, logits = net.forward(params, x, sweeps)
            if not np.all(np.isfinite(logits)):
                fault = start
                break
            sl = slice(start, start + len(y))
            losses[sl], preds[sl], probs[sl] = xent(logits, y), logits.argmax(axis=1), softmax(logits)
            e = np.zeros_like(logits) if zero_error else xent_grad(logits, y)
            for k in range(net.K - 1, -1, -1):
                e = net.layer_backward(params, k, acts[k], e, sweeps)
            history.append((net.w[0].copy(), net.b[0].copy()))
    n = T if fault is None else fault
    return MetricTrace(losses[:n], preds[:n], episode.y[:n].copy(), probs[:n], fault_step=fault,
                       meta={"batch": batch, "weights": history})


def update_fidelity(params: MetaParams, samples: CloningSample, sweeps: SweepConfig) -> np.ndarray:
    """Relative error of the RNN's (dw, db) against the SGD step, per sample."""
    _, w_new, b_new, _ = cell_outputs(params, samples.x, samples.w, samples.b, samples.e, sweeps)
    got = np.stack([w_new - samples.w, b_new - samples.b], axis=1)
    want = np.stack([samples.dw, samples.db], axis=1)
    return np.linalg.norm(got - want, axis=1) / np.maximum(np.linalg.norm(want, axis=1), 1e-12)
