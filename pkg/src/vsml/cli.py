"""Command line entry point: ``vsml <command> [options]``.

Exit codes: 0 ok, 1 invalid configuration or input, 2 numeric fault,
3 a verification check failed.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .baselines import MetaRnnLearner
from .cloning import CloneConfig, CloningStalled, SweepConfig, run_curriculum
from .config import LEARNERS, ExperimentConfig
from .core import ConfigError, NumericFault
from .equivalence import verify
from .es import EsAbort, TaskDistribution, config_summary, meta_train
from .grad import GradientFault
from .gradcheck import run_grad_suite
from .harness import (batch_losses, cloned_run, curves_csv, introspection_summary, introspection_trace,
                      load_learner, meta_test)
from .plotting import PlotSpec, SchemaError, render_plot
from .tasks import IdxFormatError, TaskError, TaskSpec, load_dataset, rescale

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class CheckFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def parse_task(value: str) -> TaskSpec:
    """A JSON object, a path to one, or a bare source name."""
    if value.lstrip().startswith("{"):
        return TaskSpec.from_dict(json.loads(value))
    if os.path.exists(value):
        return TaskSpec.from_dict(json.loads(Path(value).read_text()))
    return TaskSpec(source=value)


def mnist_subset(root, seed: int, n: int = 1000, side: int = 14):
    raw = load_dataset("mnist", "train", root)
    idx = np.random.default_rng([seed, 0x5B5]).choice(len(raw.labels), min(n, len(raw.labels)), replace=False)
    X = np.stack([rescale(raw.images[i] / 255.0, side).ravel() for i in idx])
    return X, raw.labels[idx].astype(np.int64)


def load_config(args, mode: str) -> ExperimentConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        doc.setdefault("mode", mode)
        if doc["mode"] != mode:
            raise ConfigError(f"config is for mode {doc['mode']!r}, not {mode!r}")
    else:
        doc = {"mode": mode}
    cfg = ExperimentConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "learner", None):
        cfg.learner = args.learner
    if getattr(args, "task", None):
        cfg.tasks, cfg.task_weights = [parse_task(t) for t in args.task], None
    return cfg


def prepare_out(args, cfg: ExperimentConfig) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        shutil.copyfile(args.config, out / "config.json")
    else:
        (out / "config.json").write_text(json.dumps({"mode": cfg.mode}, sort_keys=True) + "\n")
    overrides = {k: v for k, v in (("seed", args.seed), ("learner", getattr(args, "learner", None)),
                                   ("task", getattr(args, "task", None)), ("workers", getattr(args, "workers", None)),
                                   ("checkpoint", getattr(args, "checkpoint", None)),
                                   ("clone_mode", getattr(args, "mode", None)), ("data", getattr(args, "data", None))) if v is not None}
    if overrides:
        (out / "overrides.json").write_text(json.dumps(overrides, sort_keys=True, indent=1) + "\n")
    return out


def write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def say(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_meta_train(args) -> int:
    cfg = load_config(args, "meta-train")
    es = cfg.es
    es.seed = cfg.seed
    if args.workers:
        es.workers = args.workers
    es.validate()
    tasks = cfg.distribution(args.data_root)
    if cfg.learner == "vsml":
        learner = cfg.architecture.learner(cfg.seed)
    elif cfg.learner == "meta-rnn":
        dims = [t.input_dim(tasks.dataset(t)) for t in cfg.tasks]
        learner = MetaRnnLearner(max(dims), max(t.n_classes for t in cfg.tasks), init_seed=cfg.seed)
    else:
        raise ConfigError(f"meta-train needs learner vsml or meta-rnn, got {cfg.learner!r}")
    out = prepare_out(args, cfg)
    resume = args.checkpoint
    result = meta_train(es, learner, tasks, out_dir=out, resume=resume,
                        log=None if args.quiet else say)
    if out is not None and result.rows:
        render_plot(out / "metrics.csv", PlotSpec.learning_curve(title="meta training"),
                    out / "plots" / "meta_training.svg")
    say({"done": True, "final": result.rows[-1] if result.rows else None})
    return EXIT_OK


def cmd_meta_test(args) -> int:
    cfg = load_config(args, "meta-test")
    mt = cfg.meta_test
    loaded = load_learner(args.checkpoint) if args.checkpoint else None
    if cfg.learner in ("vsml", "meta-rnn") and loaded is None:
        raise ConfigError(f"learner {cfg.learner} needs --checkpoint")
    tasks = cfg.distribution(args.data_root)
    out = prepare_out(args, cfg)
    traces = meta_test(cfg.learner, tasks, mt.episodes, cfg.seed, loaded, mt.length, mt.hidden, mt.lr, mt.clip)
    faults = [i for i, t in enumerate(traces) if t.fault_step is not None]
    if out is not None:
        for i, t in enumerate(traces):
            write(out / "traces" / f"episode_{i:03d}.csv", t.to_csv())
        write(out / "metrics.csv", curves_csv(traces))
        render_plot(out / "metrics.csv", PlotSpec.learning_curve(("mean_cum_acc",), f"meta test ({cfg.learner})"),
                    out / "plots" / "meta_test.svg")
    finals = [float(t.cum_acc[-1]) if len(t) else 0.0 for t in traces]
    say({"learner": cfg.learner, "episodes": len(traces), "final_cum_acc_mean": float(np.mean(finals)),
         "final_cum_acc_std": float(np.std(finals)), "faulted_episodes": faults})
    return EXIT_NUMERIC if faults else EXIT_OK


def cmd_clone(args) -> int:
    cfg = load_config(args, "clone")
    cc = cfg.cloning
    cc.seed = cfg.seed
    if args.mode:
        cc.stages = (1,) if args.mode == "shallow" else (1, 2, 3)
    if args.data:
        cc.data = args.data
    dataset = None
    if cc.data == "mnist-subset" and set(cc.stages) - {1}:
        dataset = mnist_subset(args.data_root, cfg.seed)
    elif cc.data not in ("random", "mnist-subset"):
        raise ConfigError(f"cloning data must be random or mnist-subset, got {cc.data!r}")
    out = prepare_out(args, cfg)
    log_rows = []

    def log(row):
        log_rows.append(row)
        if not args.quiet:
            say(row)

    try:
        params, history, reports = run_curriculum(cc, dataset=dataset, log=log)
        status = EXIT_OK
    except CloningStalled as exc:
        params, history, reports = exc.params, exc.history, [exc.report]
        say({"stalled": exc.report})
        status = EXIT_CHECK
    if out is not None:
        ckpt.save_params(out / "checkpoints" / "clone.json", params, seeds={"seed": cfg.seed},
                         extra={"cloning": cc.to_dict(), "reports": reports})
        lines = ["stage,step,loss"] + [f"{s},{t},{repr(float(l))}" for s, t, l in history]
        write(out / "metrics.csv", "\n".join(lines) + "\n")
        render_plot(out / "metrics.csv", PlotSpec("step", ["loss"], "cloning regression", "loss"),
                    out / "plots" / "cloning.svg")
    say({"reports": reports})
    return status


def cmd_run_cloned(args) -> int:
    cfg = load_config(args, "run-cloned")
    if not args.checkpoint:
        raise ConfigError("run-cloned needs --checkpoint from the clone command")
    loaded = load_learner(args.checkpoint)
    if loaded.kind != "vsml":
        raise ConfigError("run-cloned needs a VSML checkpoint")
    extra = loaded.doc.get("extra", {}).get("cloning", {})
    sweeps = SweepConfig(extra.get("fwd_ticks", 2), extra.get("bwd_ticks", 2))
    rc = cfg.run_cloned
    tasks = cfg.distribution(args.data_root)
    episode = tasks.sample(cfg.seed, rc.steps * rc.batch)
    out = prepare_out(args, cfg)
    trace = cloned_run(loaded.params, episode, rc.batch, rc.hidden, sweeps, cfg.seed, rc.clip, rc.init_scale)
    losses = batch_losses(trace, rc.batch)
    if out is not None:
        write(out / "traces" / "cloned.csv", trace.to_csv())
        lines = ["step,batch_loss"] + [f"{i},{repr(float(v))}" for i, v in enumerate(losses)]
        write(out / "metrics.csv", "\n".join(lines) + "\n")
        render_plot(out / "metrics.csv", PlotSpec("step", ["batch_loss"], "cloned learner", "cross-entropy"),
                    out / "plots" / "cloned.svg")
    say({"steps": len(losses), "first_loss": float(losses[0]) if len(losses) else None,
         "last_loss": float(losses[-1]) if len(losses) else None,
         "final_cum_acc": float(trace.cum_acc[-1]) if len(trace) else None, "fault_step": trace.fault_step})
    return EXIT_NUMERIC if trace.fault_step is not None else EXIT_OK


def cmd_verify_equivalence(args) -> int:
    cfg = load_config(args, "verify-equivalence")
    eq = cfg.equivalence
    tol = eq.get("tolerance", 1e-8)
    t0 = time.perf_counter()
    rows = list(verify(eq.get("trials", 100), eq.get("max_dim", 3), tuple(eq.get("sizes", (1, 2, 4))), cfg.seed))
    worst = max(r[3] for r in rows)
    out = prepare_out(args, cfg)
    if out is not None:
        lines = ["trial,A,N,max_abs_dev"] + [f"{t},{n},{N},{repr(d)}" for t, n, N, d in rows]
        write(out / "metrics.csv", "\n".join(lines) + "\n")
    ok = worst < tol
    say({"instances": len(rows), "max_abs_dev": worst, "tolerance": tol, "passed": ok,
         "seconds": round(time.perf_counter() - t0, 3)})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_grad_check(args) -> int:
    cfg = load_config(args, "grad-check")
    gc = cfg.grad_check
    rows = run_grad_suite(gc.get("instances", 20), gc.get("seed", cfg.seed))
    tol = gc.get("tolerance", 1e-4)
    out = prepare_out(args, cfg)
    if out is not None:
        lines = ["operation,instance,rel_err"] + [f"{op},{i},{repr(e)}" for op, i, e in rows]
        write(out / "metrics.csv", "\n".join(lines) + "\n")
    worst = {}
    for op, _, e in rows:
        worst[op] = max(worst.get(op, 0.0), e)
    ok = all(v < tol for v in worst.values())
    say({"worst_rel_err": worst, "tolerance": tol, "passed": ok})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_introspect(args) -> int:
    cfg = load_config(args, "introspect")
    ic, mt = cfg.introspect, cfg.meta_test
    loaded = load_learner(args.checkpoint) if args.checkpoint else None
    if cfg.learner in ("vsml", "meta-rnn") and loaded is None:
        raise ConfigError(f"learner {cfg.learner} needs --checkpoint")
    tasks = cfg.distribution(args.data_root)
    out = prepare_out(args, cfg)
    trace = introspection_trace(cfg.learner, tasks, cfg.seed, ic.protocol, ic.length, loaded,
                                mt.hidden, mt.lr, mt.clip)
    summary = introspection_summary(trace)
    if out is not None:
        write(out / "traces" / "introspection.csv", trace.to_csv())
        write(out / "metrics.csv", trace.to_csv())
        render_plot(out / "traces" / "introspection.csv",
                    PlotSpec.introspection(trace.probs.shape[1], f"introspection ({cfg.learner}, {ic.protocol})"),
                    out / "plots" / "introspection.svg")
    say({"learner": cfg.learner, **summary})
    return EXIT_NUMERIC if trace.fault_step is not None else EXIT_OK


COMMANDS = {
    "meta-train": (cmd_meta_train, "meta-train V_M with evolution strategies"),
    "meta-test": (cmd_meta_test, "run a learner online on fresh episodes"),
    "clone": (cmd_clone, "clone online backprop into the LSTM (curriculum)"),
    "run-cloned": (cmd_run_cloned, "run the cloned learning algorithm on a task"),
    "verify-equivalence": (cmd_verify_equivalence, "check the grid/sparse-matrix equivalence"),
    "grad-check": (cmd_grad_check, "finite-difference check of every hand-written gradient"),
    "introspect": (cmd_introspect, "record a full-probability trace (repeated-pairs protocol)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--data-root", default=os.environ.get("DATA_ROOT"), help="IDX dataset root (or DATA_ROOT)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--learner", choices=LEARNERS)
        p.add_argument("--task", action="append", help="task source name, JSON object or JSON file; repeatable")
        p.add_argument("--checkpoint", help="checkpoint to load (or resume from, for meta-train)")
        p.add_argument("--quiet", action="store_true")
        if name == "clone":
            p.add_argument("--mode", choices=("shallow", "deep"), help="curriculum stages 1 or 1-3")
            p.add_argument("--data", choices=("random", "mnist-subset"), help="data for the deep stages")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (ConfigError, TaskError, IdxFormatError, SchemaError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericFault, GradientFault, EsAbort, FloatingPointError) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
