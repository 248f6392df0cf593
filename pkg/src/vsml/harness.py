"""Meta-testing, introspection and cloned-learner runs shared by the CLI and the scripts."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .baselines import MetaRnnLearner, SgdLearner
from .cloning import SweepConfig, run_cloned_learner
from .core import ConfigError, LayerSpec, MetaParams, run_episode
from .es import TaskDistribution, derive_seed
from .tasks import Episode, repeated_pairs
from .trace import MetricTrace, aggregate_curves, second_presentation_accuracy


@dataclass
class LoadedLearner:
    kind: str
    params: MetaParams | None = None
    layer_spec: LayerSpec | None = None
    meta_rnn: MetaRnnLearner | None = None
    theta: np.ndarray | None = None
    doc: dict | None = None


def load_learner(path) -> LoadedLearner:
    doc = ckpt.load(path)
    kind = doc.get("kind", "vsml")
    if kind == "vsml":
        params, spec, _ = ckpt.params_from_dict(doc)
        return LoadedLearner("vsml", params, spec or LayerSpec.chain(1, 1), doc=doc)
    if kind == "meta-rnn":
        learner, theta = MetaRnnLearner.from_doc(doc)
        return LoadedLearner("meta-rnn", meta_rnn=learner, theta=theta, doc=doc)
    raise ConfigError(f"unknown checkpoint kind {kind!r}")


def episode_seeds(seed: int, n: int) -> list:
    return [derive_seed(seed, 0x7E57, i) for i in range(n)]


def trace_learner(kind: str, episode: Episode, seed: int, loaded: LoadedLearner | None = None,
                  hidden=(), lr=None, clip=None) -> MetricTrace:
    """One online episode for any learner kind; VSML grids are resized to the episode."""
    if kind == "vsml":
        if loaded is None or loaded.kind != "vsml":
            raise ConfigError("the vsml learner needs a VSML checkpoint")
        spec = loaded.layer_spec.resized(episode.input_dim, episode.n_classes)
        return run_episode(loaded.params, spec, episode, seed, clip=clip, strict=False)
    if kind == "meta-rnn":
        if loaded is None or loaded.kind != "meta-rnn":
            raise ConfigError("the meta-rnn learner needs a Meta RNN checkpoint")
        return loaded.meta_rnn.trace(loaded.theta, episode)
    if kind in ("sgd", "adam"):
        return SgdLearner(episode.input_dim, episode.n_classes, hidden, kind, lr, seed).run(episode)
    raise ConfigError(f"unknown learner {kind!r}")


def meta_test(kind: str, tasks: TaskDistribution, n_episodes: int, seed: int, loaded=None,
              length=None, hidden=(), lr=None, clip=None) -> list:
    traces = []
    for s in episode_seeds(seed, n_episodes):
        ep = tasks.sample(s, length)
        traces.append(trace_learner(kind, ep, s, loaded, hidden, lr, clip))
    return traces


def curves_csv(traces) -> str:
    """step, mean_cum_acc, std_cum_acc, n over the steps every trace reached."""
    T = min(len(t) for t in traces)
    if T == 0:
        mean, std = np.zeros(0), np.zeros(0)
    else:
        mean, std = aggregate_curves([t.cum_acc[:T] for t in traces])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mean_cum_acc", "std_cum_acc", "n"])
    for t in range(T):
        w.writerow([t, repr(float(mean[t])), repr(float(std[t])), len(traces)])
    return buf.getvalue()


def introspection_trace(kind: str, tasks: TaskDistribution, seed: int, protocol: str, length: int,
                        loaded=None, hidden=(), lr=None, clip=None) -> MetricTrace:
    """Full-probability trace; the repeated-pairs stream shows each example twice in a row."""
    s = episode_seeds(seed, 1)[0]
    if protocol == "repeated-pairs":
        ep = repeated_pairs(tasks.sample(s, length))
    elif protocol == "full-stream":
        ep = tasks.sample(s, length)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    trace = trace_learner(kind, ep, s, loaded, hidden, lr, clip)
    trace.meta = {**trace.meta, "protocol": protocol, "repeated": protocol == "repeated-pairs"}
    return trace


def introspection_summary(trace: MetricTrace) -> dict:
    out = {"steps": len(trace), "final_cum_acc": float(trace.cum_acc[-1]) if len(trace) else 0.0}
    if trace.meta.get("repeated"):
        out["second_presentation_acc"] = second_presentation_accuracy(trace)
        out["first_presentation_acc"] = float(trace.correct[0::2].mean())
    return out


def cloned_run(params: MetaParams, episode: Episode, batch: int, hidden=(), sweeps: SweepConfig | None = None,
               seed: int = 0, clip=None, init_scale: float = 0.1) -> MetricTrace:
    return run_cloned_learner(params, episode, batch, hidden, sweeps, seed, clip, init_scale)


def batch_losses(trace: MetricTrace, batch: int) -> np.ndarray:
    """Mean cross-entropy of each update's batch, from a per-datum cloned-learner trace."""
    n = len(trace) // batch
    return trace.loss[:n * batch].reshape(n, batch).mean(axis=1)


def block_means(values, width: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // width
    return values[:n * width].reshape(n, width).mean(axis=1)
