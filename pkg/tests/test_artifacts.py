"""Properties of the shipped cloned learner (results/clone_shallow)."""
from pathlib import Path

import numpy as np
import pytest

from vsml import checkpoint as ckpt
from vsml.cloning import SweepConfig, run_cloned_learner
from vsml.tasks import linear_toy_episode

CLONE = Path(__file__).resolve().parent.parent / "results" / "clone_shallow" / "checkpoints" / "clone.json"


@pytest.fixture(scope="module")
def cloned():
    if not CLONE.exists():
        pytest.fail("missing results/clone_shallow; run scripts/clone_shallow.py")
    params, _, doc = ckpt.load_params(CLONE)
    c = doc["extra"]["cloning"]
    return params, SweepConfig(c["fwd_ticks"], c["bwd_ticks"])


def test_cloned_learner_solves_linear_toy(cloned):
    params, sweeps = cloned
    trace = run_cloned_learner(params, linear_toy_episode(3, 500 * 16), batch=16, sweeps=sweeps, seed=3)
    assert trace.fault_step is None and trace.cum_acc[-1] > 0.9


def test_zero_error_keeps_weights_still(cloned):
    params, sweeps = cloned
    trace = run_cloned_learner(params, linear_toy_episode(4, 100 * 16), batch=16, sweeps=sweeps, seed=4,
                               zero_error=True)
    w0 = trace.meta["weights"][0][0]
    drift = max(np.abs(w - w0).max() for w, _ in trace.meta["weights"])
    # 100 updates: under 1.5e-3 per update, well below an alpha-sized SGD step
    assert drift < 0.15
