"""Grids of parameter-shared LSTMs exchanging forward and backward messages.

Every sub-RNN (a, b) of every layer k runs the same LSTM cell.  Its inputs
are the forward message of its row ``a`` and the backward message of its
column ``b``; its hidden state is projected and averaged along a grid axis
to produce the messages of the neighbouring layers.

All grid arrays carry a leading batch axis ``P`` (population members or
replicas).  ``MetaParams`` arrays may carry the same leading axis, in which
case member ``p`` is driven by its own parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OUTPUT_BOUND = 100.0
STATE_CLIP = 4.0
GATES = ("input", "forget", "candidate", "output")


class ConfigError(ValueError):
    """Inconsistent dimensions or configuration."""


class NumericFault(FloatingPointError):
    def __init__(self, layer, a, b, step=None, member=0):
        where = f"layer {layer}, cell ({a}, {b})"
        if step is not None:
            where = f"step {step}, " + where
        super().__init__(f"non-finite state at {where} (batch member {member})")
        self.layer, self.a, self.b, self.step, self.member = layer, a, b, step, member


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _t(m):
    return np.swapaxes(m, -1, -2)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Dims:
    N: int = 16
    Nf: int = 8
    Nb: int = 8

    def __post_init__(self):
        if min(self.N, self.Nf, self.Nb) < 1:
            raise ConfigError(f"all of N, Nf, Nb must be positive, got {self}")

    @property
    def n_in(self) -> int:
        return self.Nf + self.Nb


@dataclass
class LstmCellParams:
    w_in: np.ndarray    # (..., 4N, Nf+Nb)  gate blocks stacked i, f, g, o
    w_rec: np.ndarray   # (..., 4N, N)
    bias: np.ndarray    # (..., 4N)


@dataclass
class MessageProjections:
    fwd: np.ndarray     # (..., Nf, N)
    bwd: np.ndarray     # (..., Nb, N)


BLOCKS = ("w_in", "w_rec", "bias", "fwd_proj", "bwd_proj")


@dataclass
class MetaParams:
    """The shared meta variables: one LSTM cell plus two message projections."""
    cell: LstmCellParams
    proj: MessageProjections
    dims: Dims

    def __post_init__(self):
        N, Nf, Nb = self.dims.N, self.dims.Nf, self.dims.Nb
        want = {"w_in": (4 * N, Nf + Nb), "w_rec": (4 * N, N), "bias": (4 * N,),
                "fwd_proj": (Nf, N), "bwd_proj": (Nb, N)}
        lead = None
        for name, shape in want.items():
            arr = self.block(name)
            got = arr.shape[arr.ndim - len(shape):]
            if got != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected (...,) + {shape}")
            if lead is None:
                lead = arr.shape[: arr.ndim - len(shape)]
            elif arr.shape[: arr.ndim - len(shape)] != lead:
                raise ConfigError("inconsistent batch axes across parameter blocks")

    def block(self, name) -> np.ndarray:
        return {"w_in": self.cell.w_in, "w_rec": self.cell.w_rec, "bias": self.cell.bias,
                "fwd_proj": self.proj.fwd, "bwd_proj": self.proj.bwd}[name]

    def blocks(self) -> dict:
        return {name: self.block(name) for name in BLOCKS}

    @property
    def batched(self) -> bool:
        return self.cell.bias.ndim == 2

    @staticmethod
    def block_shapes(dims: Dims) -> dict:
        N, Nf, Nb = dims.N, dims.Nf, dims.Nb
        return {"w_in": (4 * N, Nf + Nb), "w_rec": (4 * N, N), "bias": (4 * N,),
                "fwd_proj": (Nf, N), "bwd_proj": (Nb, N)}

    @staticmethod
    def count(dims: Dims) -> int:
        return sum(int(np.prod(s)) for s in MetaParams.block_shapes(dims).values())

    @property
    def size(self) -> int:
        return MetaParams.count(self.dims)

    @classmethod
    def from_blocks(cls, blocks: dict, dims: Dims) -> "MetaParams":
        return cls(LstmCellParams(blocks["w_in"], blocks["w_rec"], blocks["bias"]),
                   MessageProjections(blocks["fwd_proj"], blocks["bwd_proj"]), dims)

    @classmethod
    def zeros(cls, dims: Dims) -> "MetaParams":
        return cls.from_blocks({k: np.zeros(s) for k, s in cls.block_shapes(dims).items()}, dims)

    @classmethod
    def init(cls, dims: Dims, seed: int, forget_bias: float = 1.0, scale: float = 1.0) -> "MetaParams":
        """Uniform(+-scale/sqrt(fan_in)) weights, forget-gate bias fixed at ``forget_bias``."""
        rng = np.random.default_rng([seed, 0x1A1])
        N = dims.N
        a = scale / np.sqrt(dims.n_in + N)
        ap = scale / np.sqrt(N)
        shapes = cls.block_shapes(dims)
        blocks = {
            "w_in": rng.uniform(-a, a, shapes["w_in"]),
            "w_rec": rng.uniform(-a, a, shapes["w_rec"]),
            "bias": rng.uniform(-a, a, shapes["bias"]),
            "fwd_proj": rng.uniform(-ap, ap, shapes["fwd_proj"]),
            "bwd_proj": rng.uniform(-ap, ap, shapes["bwd_proj"]),
        }
        blocks["bias"][N:2 * N] = forget_bias
        return cls.from_blocks(blocks, dims)

    def to_vector(self) -> np.ndarray:
        if self.batched:
            P = self.cell.bias.shape[0]
            return np.concatenate([self.block(n).reshape(P, -1) for n in BLOCKS], axis=1)
        return np.concatenate([self.block(n).ravel() for n in BLOCKS])

    @classmethod
    def from_vector(cls, theta: np.ndarray, dims: Dims) -> "MetaParams":
        """Unflatten ``theta`` of shape (D,) or (P, D) (the latter gives batched params)."""
        theta = np.asarray(theta, dtype=np.float64)
        D = cls.count(dims)
        if theta.shape[-1] != D:
            raise ConfigError(f"parameter vector has {theta.shape[-1]} entries, dims need {D}")
        lead = theta.shape[:-1]
        blocks, i = {}, 0
        for name, shape in cls.block_shapes(dims).items():
            n = int(np.prod(shape))
            blocks[name] = theta[..., i:i + n].reshape(lead + shape)
            i += n
        return cls.from_blocks(blocks, dims)

    def copy(self) -> "MetaParams":
        return MetaParams.from_blocks({k: v.copy() for k, v in self.blocks().items()}, self.dims)


# --------------------------------------------------------------------------
# layer layout


@dataclass(frozen=True)
class LayerSpec:
    sizes: tuple            # ((A1, B1), ..., (AK, BK))
    ticks_per_example: int = 2
    read_tick: int = 0      # tick after which the prediction is read and the error fed

    def __post_init__(self):
        sizes = tuple(tuple(int(v) for v in s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ConfigError("need at least one layer")
        for k, (A, B) in enumerate(sizes):
            if A < 1 or B < 1:
                raise ConfigError(f"layer {k} has non-positive size {(A, B)}")
            if k and A != sizes[k - 1][1]:
                raise ConfigError(f"layer {k}: A={A} must equal previous B={sizes[k - 1][1]}")
        if self.ticks_per_example < 1:
            raise ConfigError("ticks_per_example must be positive")
        if not 0 <= self.read_tick < self.ticks_per_example:
            raise ConfigError(f"read_tick {self.read_tick} outside 0..{self.ticks_per_example - 1}")

    @property
    def K(self) -> int:
        return len(self.sizes)

    @property
    def n_in(self) -> int:
        return self.sizes[0][0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1][1]

    @classmethod
    def chain(cls, n_in: int, n_out: int, hidden=(), ticks_per_example: int = 2,
              read_tick: int = 0) -> "LayerSpec":
        widths = [n_in, *hidden, n_out]
        return cls(tuple(zip(widths[:-1], widths[1:])), ticks_per_example, read_tick)

    def hidden(self) -> tuple:
        return tuple(B for _, B in self.sizes[:-1])

    def resized(self, n_in: int, n_out: int) -> "LayerSpec":
        return LayerSpec.chain(n_in, n_out, self.hidden(), self.ticks_per_example, self.read_tick)

    def to_dict(self) -> dict:
        return {"sizes": [list(s) for s in self.sizes], "ticks_per_example": self.ticks_per_example,
                "read_tick": self.read_tick}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(tuple(tuple(s) for s in d["sizes"]), d.get("ticks_per_example", 2), d.get("read_tick", 0))


# --------------------------------------------------------------------------
# the cell


def gate_preactivation(cell: LstmCellParams, h, fwd_in, bwd_in):
    u = np.concatenate([fwd_in, bwd_in], axis=-1)
    return (cell.w_in @ u[..., None])[..., 0] + (cell.w_rec @ h[..., None])[..., 0] + cell.bias


def lstm_cell_step(cell: LstmCellParams, z, h, fwd_in, bwd_in, clip: float | None = None):
    """One LSTM tick of a single sub-RNN (input, forget, candidate, output gates).

    Works on vectors or on stacks of vectors with matching leading axes.
    """
    N = cell.w_rec.shape[-1]
    n_in = cell.w_in.shape[-1]
    z, h = np.asarray(z, dtype=np.float64), np.asarray(h, dtype=np.float64)
    fwd_in, bwd_in = np.asarray(fwd_in, dtype=np.float64), np.asarray(bwd_in, dtype=np.float64)
    if z.shape[-1] != N or h.shape[-1] != N or fwd_in.shape[-1] + bwd_in.shape[-1] != n_in:
        raise ConfigError(
            f"cell expects state {N} and messages totalling {n_in}; got z {z.shape}, h {h.shape}, "
            f"fwd {fwd_in.shape}, bwd {bwd_in.shape}"
        )
    pre = gate_preactivation(cell, h, fwd_in, bwd_in)
    return _gate_update(pre, z, N, clip)


def _gate_scale(N, dtype=np.float64):
    scale = np.full(4 * N, 0.5, dtype=dtype)
    scale[2 * N:3 * N] = 1.0
    return scale


def _gate_update(pre, z, N, clip):
    # sigmoid(x) = (1 + tanh(x/2)) / 2, so one tanh call covers all four gates
    t = np.tanh(pre * _gate_scale(N, pre.dtype))
    ti, tf, g, to = t[..., 0:N], t[..., N:2 * N], t[..., 2 * N:3 * N], t[..., 3 * N:]
    z_new = 0.5 * ((1.0 + tf) * z + (1.0 + ti) * g)
    h_new = 0.5 * (1.0 + to) * np.tanh(z_new)
    if clip is not None:
        np.clip(z_new, -clip, clip, out=z_new)
        np.clip(h_new, -clip, clip, out=h_new)
    return z_new, h_new


# --------------------------------------------------------------------------
# grid state


@dataclass
class SubRnnGrid:
    """States of every layer plus the messages currently on each boundary.

    ``fwd[k]`` is the forward message entering layer k (``fwd[K]`` is the
    network output message); ``bwd[k]`` is the backward message entering
    layer k (``bwd[K-1]`` carries the output error).  ``input_error`` is the
    backward message leaving layer 0.
    """
    z: list
    h: list
    fwd: list
    bwd: list
    input_error: np.ndarray | None = None
    dims: Dims = field(default_factory=Dims)
    spec: LayerSpec | None = None

    @property
    def batch(self) -> int:
        return self.z[0].shape[0]

    def copy(self) -> "SubRnnGrid":
        return SubRnnGrid([a.copy() for a in self.z], [a.copy() for a in self.h],
                          [a.copy() for a in self.fwd], [a.copy() for a in self.bwd],
                          None if self.input_error is None else self.input_error.copy(),
                          self.dims, self.spec)

    def permuted_inputs(self, perm) -> "SubRnnGrid":
        """Copy with the input axis of layer 0 (states and input message) permuted."""
        g = self.copy()
        g.z[0] = g.z[0][:, perm]
        g.h[0] = g.h[0][:, perm]
        g.fwd[0] = g.fwd[0][:, perm]
        return g


def init_states(spec: LayerSpec, dims: Dims, seed: int, batch: int = 1) -> SubRnnGrid:
    """Standard-normal z and h for every cell; zero messages."""
    rng = np.random.default_rng([seed, 0x57A])
    z, h = [], []
    for A, B in spec.sizes:
        z.append(rng.standard_normal((batch, A, B, dims.N)))
        h.append(rng.standard_normal((batch, A, B, dims.N)))
    fwd = [np.zeros((batch, A, dims.Nf)) for A, _ in spec.sizes] + [np.zeros((batch, spec.n_out, dims.Nf))]
    bwd = [np.zeros((batch, B, dims.Nb)) for _, B in spec.sizes]
    return SubRnnGrid(z, h, fwd, bwd, np.zeros((batch, spec.n_in, dims.Nb)), dims, spec)


def layer_preactivation(params: MetaParams, h, fwd_in, bwd_in):
    """Gate pre-activations for all (a, b) cells of one layer at once.

    h: (P, A, B, N); fwd_in: (P, A, Nf); bwd_in: (P, B, Nb).
    """
    Nf = params.dims.Nf
    w_in = params.cell.w_in
    bias = params.cell.bias
    xf = fwd_in @ _t(w_in[..., :, :Nf]) + (bias[:, None, :] if bias.ndim == 2 else bias)  # (P, A, 4N)
    xb = bwd_in @ _t(w_in[..., :, Nf:])                     # (P, B, 4N)
    P, A, B, N = h.shape
    w_rec_t = np.ascontiguousarray(_t(params.cell.w_rec))
    pre = (h.reshape(P, A * B, N) @ w_rec_t).reshape(P, A, B, 4 * N)
    pre += xf[:, :, None, :]
    pre += xb[:, None, :, :]
    return pre


def outgoing_messages(params: MetaParams, h):
    """Averaged projections: forward along axis a, backward along axis b."""
    fwd_out = h.mean(axis=1) @ _t(params.proj.fwd)          # (P, B, Nf)
    bwd_out = h.mean(axis=2) @ _t(params.proj.bwd)          # (P, A, Nb)
    return fwd_out, bwd_out


def _fault_location(grid, k):
    bad = ~(np.isfinite(grid.z[k]) & np.isfinite(grid.h[k]))
    p, a, b, _ = np.argwhere(bad)[0]
    return int(p), int(a), int(b)


def layer_step(grid: SubRnnGrid, params: MetaParams, k: int, clip: float | None = None,
               strict: bool = False) -> None:
    """Update every cell of layer ``k`` in place and emit its outgoing messages."""
    if not 0 <= k < len(grid.z):
        raise ConfigError(f"layer index {k} out of range")
    pre = layer_preactivation(params, grid.h[k], grid.fwd[k], grid.bwd[k])
    grid.z[k], grid.h[k] = _gate_update(pre, grid.z[k], params.dims.N, clip)
    if strict and not (np.isfinite(grid.z[k]).all() and np.isfinite(grid.h[k]).all()):
        p, a, b = _fault_location(grid, k)
        raise NumericFault(k, a, b, member=p)
    fwd_out, bwd_out = outgoing_messages(params, grid.h[k])
    grid.fwd[k + 1] = fwd_out
    if k > 0:
        grid.bwd[k - 1] = bwd_out
    else:
        grid.input_error = bwd_out


# --------------------------------------------------------------------------
# data in, predictions out


def _floats(x):
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def feed_input(x, Nf: int, n_in: int | None = None) -> np.ndarray:
    """Place datum x (shape (..., A)) in slot 0 of each row's forward message."""
    x = _floats(x)
    if n_in is not None and x.shape[-1] != n_in:
        raise ConfigError(f"input has {x.shape[-1]} dims but the grid expects {n_in}")
    msg = np.zeros(x.shape + (Nf,), dtype=x.dtype)
    msg[..., 0] = x
    return msg


def feed_error(e, Nb: int, n_out: int | None = None) -> np.ndarray:
    e = _floats(e)
    if n_out is not None and e.shape[-1] != n_out:
        raise ConfigError(f"error has {e.shape[-1]} dims but the grid has {n_out} outputs")
    msg = np.zeros(e.shape + (Nb,), dtype=e.dtype)
    msg[..., 0] = e
    return msg


def squash(v):
    return OUTPUT_BOUND * np.tanh(v / OUTPUT_BOUND)


def read_output(grid: SubRnnGrid) -> np.ndarray:
    """Logits from slot 0 of the final forward message, squashed to +-100."""
    return squash(grid.fwd[-1][..., 0])


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def xent(logits, y):
    """Cross-entropy per row; y holds integer labels."""
    lp = log_softmax(logits)
    return -np.take_along_axis(lp, np.asarray(y)[..., None], axis=-1)[..., 0]


def xent_grad(logits, y):
    """d xent / d logits = softmax - onehot."""
    g = softmax(logits)
    np.put_along_axis(g, np.asarray(y)[..., None], np.take_along_axis(g, np.asarray(y)[..., None], -1) - 1.0, -1)
    return g


@dataclass
class StepResult:
    logits: np.ndarray
    probs: np.ndarray
    loss: np.ndarray | None
    error: np.ndarray | None


def inner_step(grid: SubRnnGrid, params: MetaParams, x, y=None, ticks: int | None = None,
               clip: float | None = None, strict: bool = False) -> StepResult:
    """Feed one example and run every layer for a group of ticks.

    The prediction is read after tick ``spec.read_tick`` and its error is fed
    back straight away, so any later ticks of the group see the input and its
    error together, and the stale error is cleared when the next input
    arrives.  With ``read_tick`` on the last tick the error is instead
    consumed by the next example.
    """
    spec = grid.spec
    ticks = spec.ticks_per_example if ticks is None else ticks
    read = min(spec.read_tick, ticks - 1)
    x = _floats(x)
    if x.ndim == 1:
        x = np.broadcast_to(x, (grid.batch,) + x.shape)
    grid.fwd[0] = feed_input(x, params.dims.Nf, spec.n_in)
    if read < ticks - 1:
        # the previous error was already seen alongside its own input
        grid.bwd[-1] = np.zeros_like(grid.bwd[-1])
    result = None
    for tick in range(ticks):
        for k in range(spec.K):
            layer_step(grid, params, k, clip, strict)
        if tick != read:
            continue
        logits = read_output(grid)
        probs = softmax(logits)
        if y is None:
            result = StepResult(logits, probs, None, None)
            continue
        y = np.broadcast_to(np.asarray(y), (grid.batch,))
        e = xent_grad(logits, y)
        grid.bwd[-1] = feed_error(e, params.dims.Nb, spec.n_out)
        result = StepResult(logits, probs, xent(logits, y), e)
    return result


def run_episode_batch(params: MetaParams, spec: LayerSpec, X, Y, state_seeds,
                      clip: float | None = None, record_probs: bool = False, dtype=np.float64):
    """Run P episodes side by side (member p uses params[p] if batched).

    X: (P, T, A), Y: (P, T).  Returns dict of (P, T) arrays: loss, predicted,
    and optionally probs (P, T, B).  ``dtype=np.float32`` trades precision for
    speed in population evaluation.
    """
    X = np.asarray(X, dtype=dtype)
    P, T, _ = X.shape
    grid = _stacked_init(spec, params.dims, state_seeds)
    if dtype != np.float64:
        params = MetaParams.from_blocks({k: v.astype(dtype) for k, v in params.blocks().items()}, params.dims)
        for attr in ("z", "h", "fwd", "bwd"):
            setattr(grid, attr, [a.astype(dtype) for a in getattr(grid, attr)])
    loss = np.empty((P, T))
    pred = np.empty((P, T), dtype=np.int64)
    probs = np.empty((P, T, spec.n_out)) if record_probs else None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            r = inner_step(grid, params, X[:, t], Y[:, t], clip=clip)
            loss[:, t] = r.loss
            pred[:, t] = np.argmax(r.logits, axis=-1)
            if record_probs:
                probs[:, t] = r.probs
    return {"loss": loss, "predicted": pred, "probs": probs}


def _stacked_init(spec, dims, state_seeds) -> SubRnnGrid:
    grids = [init_states(spec, dims, int(s)) for s in state_seeds]
    if len(grids) == 1:
        return grids[0]
    g0 = grids[0]
    cat = lambda attr: [np.concatenate([getattr(g, attr)[i] for g in grids]) for i in range(len(getattr(g0, attr)))]
    return SubRnnGrid(cat("z"), cat("h"), cat("fwd"), cat("bwd"),
                      np.concatenate([g.input_error for g in grids]), dims, spec)


def run_episode(params: MetaParams, spec: LayerSpec, episode, state_seed: int,
                clip: float | None = None, strict: bool = True):
    """Single-learner meta-test unroll returning a MetricTrace."""
    from .trace import MetricTrace

    if episode.input_dim != spec.n_in or episode.n_classes != spec.n_out:
        raise ConfigError(
            f"episode is {episode.input_dim}->{episode.n_classes} but grid is {spec.n_in}->{spec.n_out}"
        )
    grid = init_states(spec, params.dims, state_seed)
    T = len(episode)
    loss, pred = np.empty(T), np.empty(T, dtype=np.int64)
    probs = np.empty((T, spec.n_out))
    fault = None
    for t in range(T):
        try:
            r = inner_step(grid, params, episode.x[t], episode.y[t], clip=clip, strict=strict)
        except NumericFault as exc:
            exc.step = t
            fault = t
            loss, pred, probs = loss[:t], pred[:t], probs[:t]
            break
        if not np.isfinite(r.logits).all():
            fault = t
            loss, pred, probs = loss[:t], pred[:t], probs[:t]
            break
        loss[t], pred[t], probs[t] = r.loss[0], np.argmax(r.logits[0]), r.probs[0]
    return MetricTrace(loss, pred, episode.y[:len(loss)].copy(), probs, fault_step=fault,
                       meta={"episode_seed": episode.seed, "state_seed": state_seed})
