"""Desk-scale meta-training from scratch, then transfer and introspection runs.

Writes results/desk (training), results/desk_transfer (a held-out projection)
and results/introspect_{vsml,adam}.  Roughly 10 minutes on one CPU core.
"""
import argparse
import json
from pathlib import Path

from vsml.cli import main

ROOT = Path(__file__).resolve().parent.parent
CONFIG = ROOT / "scripts" / "configs" / "desk_meta_train.json"
TRANSFER_SEED = 2


def task(projection_seed):
    doc = json.loads(CONFIG.read_text())["tasks"][0]
    return json.dumps({**doc, "projection_seed": projection_seed})


def run(argv):
    print("vsml", " ".join(argv), flush=True)
    code = main(argv)
    if code != 0:
        raise SystemExit(code)


def checkpoint(out: Path) -> str:
    return str(sorted((out / "checkpoints").glob("step_*.json"))[-1])


def main_() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--results", default=str(ROOT / "results"))
    ap.add_argument("--skip-train", action="store_true", help="reuse an existing results/desk run")
    args = ap.parse_args()
    res = Path(args.results)
    desk = res / "desk"
    if not args.skip_train:
        run(["meta-train", "--config", str(CONFIG), "--out", str(desk), "--quiet"])
    ck = checkpoint(desk)
    run(["meta-test", "--config", str(ROOT / "scripts" / "configs" / "desk_meta_test.json"), "--checkpoint", ck,
         "--task", task(TRANSFER_SEED), "--out", str(res / "desk_transfer")])
    streams = {"random": json.dumps({"source": "random", "dims": 64, "n_points": 20}), "clusters": task(1)}
    for name, stream in streams.items():
        for learner in ("vsml", "adam"):
            extra = ["--checkpoint", ck] if learner == "vsml" else []
            run(["introspect", "--learner", learner, "--task", stream,
                 "--out", str(res / f"introspect_{name}_{learner}")] + extra)


if __name__ == "__main__":
    main_()
