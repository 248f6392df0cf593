"""Shallow learning-algorithm cloning on random data, then run the cloned learner.

Writes results/clone_shallow (V_M checkpoint and regression curve), results/cloned_run
(online learning driven only by the cloned LSTM) and results/clone_fidelity.json.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from vsml import checkpoint as ckpt
from vsml.cli import main
from vsml.cloning import CloneConfig, StateBuffer, SweepConfig, random_samples, update_fidelity

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "scripts" / "configs"


def fidelity(path: Path, n: int = 4000, seed: int = 6060) -> dict:
    params, _, doc = ckpt.load_params(path)
    cfg = CloneConfig.from_dict(doc["extra"]["cloning"])
    rng = np.random.default_rng(seed)
    rel = update_fidelity(params, random_samples(rng, StateBuffer(4096, rng, cfg.wb_scale), n, cfg),
                          SweepConfig(cfg.fwd_ticks, cfg.bwd_ticks))
    return {"samples": n, "within_5pct": float(np.mean(rel < 0.05)),
            "quantiles": {q: float(np.quantile(rel, q)) for q in (0.1, 0.5, 0.9)}}


def main_() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--results", default=str(ROOT / "results"))
    ap.add_argument("--skip-clone", action="store_true")
    args = ap.parse_args()
    res = Path(args.results)
    out = res / "clone_shallow"
    if not args.skip_clone:
        code = main(["clone", "--config", str(CONFIGS / "clone_shallow.json"), "--out", str(out), "--quiet"])
        print("clone exit code", code)
    ck = out / "checkpoints" / "clone.json"
    report = fidelity(ck)
    (res / "clone_fidelity.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    main(["run-cloned", "--config", str(CONFIGS / "run_cloned.json"), "--checkpoint", str(ck),
          "--out", str(res / "cloned_run")])


if __name__ == "__main__":
    main_()
