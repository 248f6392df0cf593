import numpy as np
import pytest

from vsml.core import ConfigError, Dims
from vsml.es import (EsAbort, EsConfig, FitnessRecord, QuadraticObjective, TaskDistribution, VsmlLearner,
                     centered_ranks, derive_seed, es_gradient, evaluate_population, meta_train, member_noise,
                     population_plan)
from vsml.tasks import TaskSpec


def sphere_records(theta, sigma, pairs, seed=0):
    recs = []
    for p in range(pairs):
        ns = derive_seed(seed, p)
        eps = member_noise(ns, len(theta))
        for sign in (1, -1):
            v = theta + sign * sigma * eps
            recs.append(FitnessRecord(len(recs), ns, sign, float(v @ v), 0.0))
    return recs


def test_centered_ranks():
    r = centered_ranks(np.array([3.0, -1.0, 10.0, 0.0]))
    assert np.allclose(r, [1 / 6, -0.5, 0.5, -1 / 6])


def test_es_estimate_unshaped_matches_analytic():
    # per-coordinate noise scales with |theta|, so coordinates are kept equal in magnitude
    theta = np.array([1.0, -1.0])
    g = es_gradient(len(theta), sphere_records(theta, 0.01, 10_000), 0.01, rank_shaping=False)
    assert np.all(np.abs(g - 2 * theta) <= 0.05 * np.abs(2 * theta))


def test_all_diverged_aborts():
    recs = [FitnessRecord(i, 1, 1, float("nan"), 0.0, True) for i in range(4)]
    with pytest.raises(EsAbort):
        es_gradient(3, recs, 0.1)


def test_diverged_members_ranked_worst():
    theta = np.ones(3)
    recs = sphere_records(theta, 0.1, 4)
    recs[0] = FitnessRecord(0, recs[0].noise_seed, 1, float("inf"), 0.0, True)
    g = es_gradient(3, recs, 0.1)
    assert np.all(np.isfinite(g))


def test_population_plan_mirrored():
    plan = population_plan(EsConfig(population_size=6, seed=3), 7)
    assert [s for _, s, _ in plan] == [1, -1] * 3
    assert plan[0][0] == plan[1][0] and plan[0][2] == plan[1][2]
    assert len({p[0] for p in plan}) == 3


@pytest.mark.parametrize("kw", [{"noise_std": 0}, {"population_size": 3}, {"population_size": 1},
                                {"episode_length": 0}, {"precision": "half"}, {"workers": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EsConfig(**kw)


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        EsConfig.from_dict({"popsize": 4})


def quad_run(steps=200, **kw):
    cfg = EsConfig(population_size=64, noise_std=0.05, outer_steps=steps, lr=0.05, episode_length=1,
                   precision="float64", **kw)
    return meta_train(cfg, QuadraticObjective(20), TaskDistribution([TaskSpec(length=1)]))


def test_quadratic_reduced():
    res = quad_run()
    assert (res.theta**2).sum() < 20.0 / 100


def test_resume_matches_unbroken(tmp_path):
    cfg = dict(population_size=8, noise_std=0.05, lr=0.05, episode_length=1, precision="float64",
               checkpoint_every=5)
    tasks = TaskDistribution([TaskSpec(length=1)])
    full = meta_train(EsConfig(outer_steps=10, **cfg), QuadraticObjective(5), tasks, tmp_path / "a")
    meta_train(EsConfig(outer_steps=5, **cfg), QuadraticObjective(5), tasks, tmp_path / "b")
    resumed = meta_train(EsConfig(outer_steps=10, **cfg), QuadraticObjective(5), tasks, tmp_path / "b",
                         resume=tmp_path / "b" / "checkpoints" / "step_000004.json")
    assert np.array_equal(full.theta, resumed.theta)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_vsml_population_workers_agree():
    tasks = TaskDistribution([TaskSpec(source="clusters", dims=16, length=5)])
    learner = VsmlLearner(Dims(4, 2, 2))
    theta = learner.initial_vector()
    one = evaluate_population(learner, theta, EsConfig(population_size=4, episode_length=5), tasks, 0)
    two = evaluate_population(learner, theta, EsConfig(population_size=4, episode_length=5, workers=2), tasks, 0)
    assert [r.loss for r in one] == [r.loss for r in two]


def test_vsml_meta_train_deterministic(tmp_path):
    tasks = TaskDistribution([TaskSpec(source="clusters", dims=16, length=6)])
    cfg = EsConfig(population_size=4, outer_steps=2, episode_length=6, checkpoint_every=1)
    for d in ("a", "b"):
        meta_train(cfg, VsmlLearner(Dims(4, 2, 2)), tasks, tmp_path / d)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "timing.csv").exists()
