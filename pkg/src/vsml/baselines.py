"""Comparison learners: an ES-trained LSTM (Meta RNN) and online SGD/Adam on dense tanh nets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, log_softmax, sigmoid, softmax, xent, xent_grad
from .grad import DenseNet, GradientFault, MultiAdam, softmax_xent
from .trace import MetricTrace, cumulative_accuracy


# --------------------------------------------------------------------------
# Meta RNN


@dataclass
class MetaRnnLearner:
    """One LSTM fed concat(padded input, previous error); linear readout to ``n_classes`` logits."""
    input_dim: int
    n_classes: int
    hidden: int = 16
    init_seed: int = 0

    @property
    def n_in(self) -> int:
        return self.input_dim + self.n_classes

    def shapes(self) -> dict:
        H = self.hidden
        return {"w_in": (4 * H, self.n_in), "w_rec": (4 * H, H), "bias": (4 * H,),
                "w_out": (self.n_classes, H), "b_out": (self.n_classes,)}

    @property
    def dim(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def unpack(self, theta) -> dict:
        """Split (D,) or (P, D) vectors into named arrays with an optional leading batch axis."""
        theta = np.asarray(theta)
        lead = theta.shape[:-1]
        if theta.shape[-1] != self.dim:
            raise ConfigError(f"Meta RNN expects {self.dim} parameters, got {theta.shape[-1]}")
        out, pos = {}, 0
        for name, shape in self.shapes().items():
            n = int(np.prod(shape))
            out[name] = theta[..., pos:pos + n].reshape(lead + shape)
            pos += n
        return out

    def initial_vector(self) -> np.ndarray:
        rng = np.random.default_rng([self.init_seed, 0x3E7A])
        parts = []
        H = self.hidden
        for name, shape in self.shapes().items():
            bound = 1.0 / np.sqrt(H if name != "w_in" else self.n_in)
            a = rng.uniform(-bound, bound, shape)
            if name == "bias":
                a[H:2 * H] += 1.0
            parts.append(a.ravel())
        return np.concatenate(parts)

    def pad(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] > self.input_dim:
            raise ConfigError(f"input of size {x.shape[-1]} exceeds the Meta RNN's {self.input_dim}; "
                              "unlike VSML it cannot be reshaped")
        out = np.zeros(x.shape[:-1] + (self.input_dim,), dtype=x.dtype)
        out[..., :x.shape[-1]] = x
        return out

    def step(self, p: dict, c, h, x, prev_error):
        """One tick for a batch of learners; returns (c', h', logits over n_classes)."""
        H = self.hidden
        u = np.concatenate([x, prev_error], axis=-1)
        pre = (np.einsum("...gi,...i->...g", p["w_in"], u)
               + np.einsum("...gi,...i->...g", p["w_rec"], h) + p["bias"])
        i, f = sigmoid(pre[..., :H]), sigmoid(pre[..., H:2 * H])
        g, o = np.tanh(pre[..., 2 * H:3 * H]), sigmoid(pre[..., 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        logits = np.einsum("...ch,...h->...c", p["w_out"], h) + p["b_out"]
        return c, h, logits

    def run(self, thetas, X, Y, n_classes: int, dtype=np.float64):
        """Unroll P learners over (P, T, A) inputs; returns (P, T) losses and predictions."""
        if n_classes > self.n_classes:
            raise ConfigError(f"task has {n_classes} classes, Meta RNN reads out {self.n_classes}")
        p = {k: v.astype(dtype) for k, v in self.unpack(np.atleast_2d(thetas)).items()}
        X = self.pad(np.asarray(X, dtype=dtype))
        P, T = X.shape[:2]
        c = np.zeros((P, self.hidden), dtype=dtype)
        h = np.zeros_like(c)
        err = np.zeros((P, self.n_classes), dtype=dtype)
        loss, pred = np.empty((P, T)), np.empty((P, T), dtype=np.int64)
        probs = np.empty((P, T, n_classes))
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(T):
                c, h, logits = self.step(p, c, h, X[:, t], err)
                logits = logits[:, :n_classes].astype(np.float64)
                loss[:, t] = xent(logits, Y[:, t])
                pred[:, t] = logits.argmax(axis=1)
                probs[:, t] = softmax(logits)
                err[:] = 0.0
                err[:, :n_classes] = xent_grad(logits, Y[:, t])
        return loss, pred, probs

    def evaluate(self, thetas, episodes, state_seeds=None, dtype=np.float64):
        losses, accs = np.empty(len(episodes)), np.empty(len(episodes))
        for m, ep in enumerate(episodes):
            loss, pred, _ = self.run(thetas[m:m + 1], ep.x[None], ep.y[None], ep.n_classes, dtype)
            bad = not np.all(np.isfinite(loss))
            losses[m] = np.inf if bad else loss.sum()
            accs[m] = 0.0 if bad else float(np.mean(pred[0] == ep.y))
        return losses, accs

    def trace(self, theta, episode) -> MetricTrace:
        loss, pred, probs = self.run(theta[None], episode.x[None], episode.y[None], episode.n_classes)
        return MetricTrace(loss[0], pred[0], episode.y.copy(), probs[0], meta={"learner": "meta-rnn"})

    def to_checkpoint(self, theta) -> dict:
        return {"version": 1, "kind": "meta-rnn", "input_dim": self.input_dim, "n_classes": self.n_classes,
                "hidden": self.hidden, "theta": [float(v) for v in theta]}

    def from_checkpoint(self, doc) -> np.ndarray:
        if doc.get("kind") != "meta-rnn":
            raise ConfigError(f"checkpoint kind {doc.get('kind')!r} is not a Meta RNN")
        if (doc["input_dim"], doc["n_classes"], doc["hidden"]) != (self.input_dim, self.n_classes, self.hidden):
            raise ConfigError("checkpoint Meta RNN shape differs from the configured learner")
        return np.array(doc["theta"], dtype=np.float64)

    @classmethod
    def from_doc(cls, doc) -> tuple["MetaRnnLearner", np.ndarray]:
        learner = cls(doc["input_dim"], doc["n_classes"], doc["hidden"])
        return learner, learner.from_checkpoint(doc)


# --------------------------------------------------------------------------
# online gradient descent


@dataclass
class SgdLearner:
    """Dense tanh network trained online, one example at a time."""
    input_dim: int
    n_classes: int
    hidden: tuple = ()
    optimizer: str = "sgd"
    lr: float | None = None
    seed: int = 0

    DEFAULT_LR = {"sgd": 1e-2, "adam": 1e-3}

    def __post_init__(self):
        if self.optimizer not in self.DEFAULT_LR:
            raise ConfigError(f"optimizer must be one of {sorted(self.DEFAULT_LR)}, got {self.optimizer!r}")
        if self.lr is None:
            self.lr = self.DEFAULT_LR[self.optimizer]
        self.hidden = tuple(self.hidden)
        self.net = DenseNet.init([self.input_dim, *self.hidden, self.n_classes], self.seed)
        self.adam = MultiAdam.for_arrays(self.net.arrays(), lr=self.lr) if self.optimizer == "adam" else None

    @classmethod
    def deep(cls, input_dim, n_classes, **kw) -> "SgdLearner":
        return cls(input_dim, n_classes, hidden=(160,), **kw)

    def predict(self, x) -> np.ndarray:
        return self.net.forward(np.atleast_2d(x))[-1][0]

    def online_step(self, x, y):
        """Forward, record prediction, then one optimizer step.  Returns (logits, loss)."""
        acts = self.net.forward(np.atleast_2d(x))
        logits = acts[-1]
        loss, dlogits = softmax_xent(logits, np.atleast_1d(y))
        grads = self.net.backward(acts, dlogits)
        arrays = self.net.arrays()
        if self.adam is not None:
            new = self.adam.step(arrays, grads)
        else:
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise GradientFault("non-finite gradient in online SGD")
            new = [a - self.lr * g for a, g in zip(arrays, grads)]
        self.net.weights, self.net.biases = new[0::2], new[1::2]
        return logits[0], float(loss)

    def run(self, episode) -> MetricTrace:
        T = len(episode)
        loss, pred = np.empty(T), np.empty(T, dtype=np.int64)
        probs = np.empty((T, self.n_classes))
        fault = None
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(T):
                try:
                    logits, loss[t] = self.online_step(episode.x[t], episode.y[t])
                except GradientFault:
                    fault = t
                    break
                if not np.all(np.isfinite(logits)):
                    fault = t
                    break
                pred[t], probs[t] = logits.argmax(), softmax(logits)
        n = T if fault is None else fault
        return MetricTrace(loss[:n], pred[:n], episode.y[:n].copy(), probs[:n], fault_step=fault,
                           meta={"learner": self.optimizer, "lr": self.lr, "hidden": list(self.hidden)})


def final_cum_acc(trace: MetricTrace) -> float:
    return float(cumulative_accuracy(trace.correct)[-1]) if len(trace.correct) else 0.0
