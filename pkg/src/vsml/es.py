"""Evolution strategies over the flattened meta parameters.

Each outer step draws a population of Gaussian perturbations (mirrored in
pairs by default), evaluates every member on one freshly initialised online
episode, turns episode losses into centred ranks and applies Adam to the
resulting search-gradient estimate.  All randomness is derived from
``(seed, step, pair)`` so a run can be resumed from any checkpoint and
reproduce the unbroken trajectory exactly.
"""
from __future__ import annotations

import csv
import ctypes
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .core import ConfigError, Dims, LayerSpec, MetaParams, run_episode_batch
from .grad import AdamState, adam_step
from .tasks import Episode, RawDataset, TaskSpec, load_dataset, make_episode

METRIC_COLUMNS = ["step", "mean_loss", "best_loss", "mean_cum_acc"]


class EsAbort(RuntimeError):
    pass


def tune_allocator() -> None:
    """Keep large numpy buffers on the heap (glibc); avoids repeated page faults."""
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 31)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


@dataclass
class EsConfig:
    population_size: int = 1024
    noise_std: float = 0.05
    outer_steps: int = 10000
    lr: float = 0.025
    beta1: float = 0.9
    beta2: float = 0.999
    episode_length: int = 500
    antithetic: bool = True
    rank_shaping: bool = True
    seed: int = 0
    checkpoint_every: int = 50
    workers: int = 1
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be > 0")
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2")
        if self.antithetic and self.population_size % 2:
            raise ConfigError("antithetic sampling needs an even population_size")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if self.outer_steps < 0 or self.workers < 1 or self.checkpoint_every < 1:
            raise ConfigError("outer_steps >= 0, workers >= 1 and checkpoint_every >= 1 required")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "EsConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ES keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class FitnessRecord:
    member: int
    noise_seed: int
    sign: int
    loss: float
    cum_acc: float
    diverged: bool = False


# --------------------------------------------------------------------------
# seeds and noise


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def member_noise(noise_seed: int, dim: int) -> np.ndarray:
    return np.random.default_rng(noise_seed).standard_normal(dim)


def population_plan(cfg: EsConfig, step: int) -> list[tuple[int, int, int]]:
    """(noise_seed, sign, episode_seed) per member, mirrored pairs adjacent."""
    plan = []
    if cfg.antithetic:
        for pair in range(cfg.population_size // 2):
            ns, es = derive_seed(cfg.seed, step, pair, 0), derive_seed(cfg.seed, step, pair, 1)
            plan += [(ns, 1, es), (ns, -1, es)]
    else:
        for m in range(cfg.population_size):
            plan.append((derive_seed(cfg.seed, step, m, 0), 1, derive_seed(cfg.seed, step, m, 1)))
    return plan


# --------------------------------------------------------------------------
# gradient estimate


def centered_ranks(losses: np.ndarray) -> np.ndarray:
    n = len(losses)
    ranks = np.empty(n)
    ranks[np.argsort(losses, kind="stable")] = np.arange(n)
    return ranks / (n - 1) - 0.5


def shaped_fitness(records: list[FitnessRecord], rank_shaping: bool) -> np.ndarray:
    losses = np.array([r.loss for r in records], dtype=np.float64)
    bad = np.array([r.diverged or not np.isfinite(r.loss) for r in records])
    if bad.all():
        raise EsAbort(f"all {len(records)} population members diverged")
    if bad.any():
        losses[bad] = losses[~bad].max()
    return centered_ranks(losses) if rank_shaping else losses


def es_gradient(dim: int, records: list[FitnessRecord], sigma: float, rank_shaping: bool = True,
                antithetic: bool = True) -> np.ndarray:
    """Search-gradient estimate of the expected loss, (1 / (sigma P)) sum_m f_m s_m eps_m."""
    f = shaped_fitness(records, rank_shaping)
    if not antithetic:
        f = f - f.mean()
    g = np.zeros(dim)
    cache = {}
    for r, fm in zip(records, f):
        if r.noise_seed not in cache:
            cache = {r.noise_seed: member_noise(r.noise_seed, dim)}
        g += (fm * r.sign) * cache[r.noise_seed]
    return g / (sigma * len(records))


# --------------------------------------------------------------------------
# task sampling


@dataclass
class TaskDistribution:
    tasks: list
    weights: list | None = None
    data_root: str | None = None
    _datasets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("task distribution is empty")
        w = np.ones(len(self.tasks)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.tasks) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("task weights must be non-negative, one per task, not all zero")
        self.weights = list(w / w.sum())

    def dataset(self, spec: TaskSpec) -> RawDataset | None:
        if spec.is_synthetic:
            return None
        key = (spec.source, spec.split)
        if key not in self._datasets:
            self._datasets[key] = load_dataset(spec.source, spec.split, self.data_root)
        return self._datasets[key]

    def sample(self, episode_seed: int, length: int | None = None) -> Episode:
        rng = np.random.default_rng([episode_seed, 0x7A5])
        spec = self.tasks[int(rng.choice(len(self.tasks), p=self.weights))]
        if length is not None:
            spec = spec.with_(length=length)
        return make_episode(spec, episode_seed, self.dataset(spec))

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_datasets"] = {}
        return state


# --------------------------------------------------------------------------
# learners


@dataclass
class VsmlLearner:
    """Evaluates flattened meta parameters by unrolling VSML grids sized per episode."""
    dims: Dims = field(default_factory=Dims)
    hidden: tuple = ()
    ticks_per_example: int = 2
    read_tick: int = 0
    clip: float | None = None
    max_cells: int = 1 << 20
    init_seed: int = 0
    init_scale: float = 1.0

    @property
    def dim(self) -> int:
        return MetaParams.count(self.dims)

    def initial_vector(self) -> np.ndarray:
        return MetaParams.init(self.dims, self.init_seed, scale=self.init_scale).to_vector()

    def layer_spec(self, n_in: int, n_out: int) -> LayerSpec:
        return LayerSpec.chain(n_in, n_out, self.hidden, self.ticks_per_example, self.read_tick)

    def to_params(self, theta) -> MetaParams:
        return MetaParams.from_vector(theta, self.dims)

    def evaluate(self, thetas: np.ndarray, episodes: list, state_seeds: list, dtype=np.float64):
        """Episode loss sums and final cumulative accuracies for each (theta, episode) row."""
        n = len(episodes)
        losses, accs = np.empty(n), np.empty(n)
        groups = {}
        for m, ep in enumerate(episodes):
            groups.setdefault((ep.input_dim, ep.n_classes, len(ep)), []).append(m)
        for (A, B, _), members in groups.items():
            spec = self.layer_spec(A, B)
            cells = sum(a * b for a, b in spec.sizes)
            chunk = max(1, self.max_cells // cells)
            for start in range(0, len(members), chunk):
                idx = members[start:start + chunk]
                params = MetaParams.from_vector(thetas[idx], self.dims)
                X = np.stack([episodes[m].x for m in idx])
                Y = np.stack([episodes[m].y for m in idx])
                out = run_episode_batch(params, spec, X, Y, [state_seeds[m] for m in idx],
                                        clip=self.clip, dtype=dtype)
                losses[idx] = out["loss"].sum(axis=1)
                accs[idx] = (out["predicted"] == Y).mean(axis=1)
        return losses, accs


@dataclass
class QuadraticObjective:
    """f(theta) = sum (theta - center)^2, a sanity target for the outer loop."""
    dims: int = 20
    start: float = 1.0
    center: float = 0.0

    @property
    def dim(self) -> int:
        return self.dims

    def initial_vector(self) -> np.ndarray:
        return np.full(self.dims, self.start)

    def evaluate(self, thetas, episodes, state_seeds, dtype=np.float64):
        loss = ((np.asarray(thetas) - self.center) ** 2).sum(axis=1)
        return loss, np.zeros(len(loss))

    def to_checkpoint(self, theta) -> dict:
        return {"kind": "quadratic", "theta": np.asarray(theta).tolist()}

    def from_checkpoint(self, doc) -> np.ndarray:
        return np.array(doc["theta"], dtype=np.float64)


def _evaluate_chunk(learner, thetas, episodes, state_seeds, dtype):
    tune_allocator()
    return learner.evaluate(thetas, episodes, state_seeds, dtype)


def evaluate_member(learner, theta: np.ndarray, tasks: TaskDistribution, T: int, seed: int,
                    dtype=np.float64) -> FitnessRecord:
    """Fresh states, T online steps, summed loss; non-finite results are flagged, not raised."""
    ep = tasks.sample(seed, T)
    with np.errstate(all="ignore"):
        loss, acc = learner.evaluate(np.asarray(theta)[None], [ep], [seed], dtype)
    diverged = not np.isfinite(loss[0])
    return FitnessRecord(0, seed, 1, float(loss[0]), float(acc[0]), diverged)


def evaluate_population(learner, theta: np.ndarray, cfg: EsConfig, tasks: TaskDistribution, step: int,
                        pool: ProcessPoolExecutor | None = None) -> list[FitnessRecord]:
    plan = population_plan(cfg, step)
    D = len(theta)
    thetas = np.empty((len(plan), D))
    cache = {}
    for m, (ns, sign, _) in enumerate(plan):
        if ns not in cache:
            cache = {ns: member_noise(ns, D)}
        thetas[m] = theta + sign * cfg.noise_std * cache[ns]
    episodes = [tasks.sample(es, cfg.episode_length) for _, _, es in plan]
    seeds = [es for _, _, es in plan]
    with np.errstate(all="ignore"):
        if pool is None or cfg.workers == 1:
            losses, accs = learner.evaluate(thetas, episodes, seeds, cfg.dtype)
        else:
            bounds = np.linspace(0, len(plan), cfg.workers + 1).astype(int)
            futures = [pool.submit(_evaluate_chunk, learner, thetas[a:b], episodes[a:b], seeds[a:b], cfg.dtype)
                       for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            # merged in member order regardless of completion order
            parts = [f.result() for f in futures]
            losses = np.concatenate([p[0] for p in parts])
            accs = np.concatenate([p[1] for p in parts])
    return [FitnessRecord(m, ns, sign, float(losses[m]), float(accs[m]), not np.isfinite(losses[m]))
            for m, (ns, sign, _) in enumerate(plan)]


# --------------------------------------------------------------------------
# outer loop


@dataclass
class MetaTrainResult:
    theta: np.ndarray
    adam: AdamState
    rows: list
    last_step: int


def _checkpoint_doc(learner, theta, adam, step, cfg):
    if isinstance(learner, VsmlLearner):
        doc = ckpt.params_to_dict(learner.to_params(theta),
                                  learner.layer_spec(1, 1),
                                  seeds={"es_seed": cfg.seed})
    else:
        doc = learner.to_checkpoint(theta)
        doc["seeds"] = {"es_seed": cfg.seed}
    doc["optimizer"] = {"adam": adam.to_dict(), "next_step": step + 1, "es": asdict(cfg)}
    return doc


def _format_row(row) -> list:
    return [row["step"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]]


def meta_train(cfg: EsConfig, learner, tasks: TaskDistribution, out_dir=None, resume=None,
               log=None) -> MetaTrainResult:
    """Run (or resume) the outer loop; writes metrics.csv, timing.csv and checkpoints under out_dir."""
    tune_allocator()
    theta = learner.initial_vector()
    adam = AdamState.like(theta, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    start = 0
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        doc = ckpt.load(resume) if not isinstance(resume, dict) else resume
        theta = _theta_from_checkpoint(learner, doc)
        adam = AdamState.from_dict(doc["optimizer"]["adam"])
        start = doc["optimizer"]["next_step"]
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        rows = _read_rows(out / "metrics.csv", start)
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    t0 = time.perf_counter()
    timings = []
    try:
        for step in range(start, cfg.outer_steps):
            records = evaluate_population(learner, theta, cfg, tasks, step, pool)
            g = es_gradient(len(theta), records, cfg.noise_std, cfg.rank_shaping, cfg.antithetic)
            theta = adam_step(theta, g, adam)
            finite = [r.loss for r in records if not r.diverged]
            row = {"step": step, "mean_loss": float(np.mean(finite)), "best_loss": float(np.min(finite)),
                   "mean_cum_acc": float(np.mean([r.cum_acc for r in records]))}
            rows.append(row)
            timings.append((step, time.perf_counter() - t0))
            if log:
                log(row)
            last = step == cfg.outer_steps - 1
            if out is not None and ((step + 1) % cfg.checkpoint_every == 0 or last):
                ckpt.save(out / "checkpoints" / f"step_{step:06d}.json",
                          _checkpoint_doc(learner, theta, adam, step, cfg))
                _write_rows(out / "metrics.csv", rows)
                _append_timing(out / "timing.csv", timings)
                timings = []
    finally:
        if pool is not None:
            pool.shutdown()
    return MetaTrainResult(theta, adam, rows, cfg.outer_steps - 1)


def _theta_from_checkpoint(learner, doc) -> np.ndarray:
    if doc.get("kind", "vsml") == "vsml":
        params, _, _ = ckpt.params_from_dict(doc)
        return params.to_vector()
    return learner.from_checkpoint(doc)


def _read_rows(path: Path, upto: int) -> list:
    if not path.exists() or upto == 0:
        return []
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if int(r["step"]) < upto]
    return [{"step": int(r["step"]), **{k: float(r[k]) for k in METRIC_COLUMNS[1:]}} for r in rows]


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(_format_row(row))


def _append_timing(path: Path, timings) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["step", "wall_time_s"])
        for step, t in timings:
            w.writerow([step, f"{t:.3f}"])


def config_summary(cfg: EsConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
