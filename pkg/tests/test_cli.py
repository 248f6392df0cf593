import json

import pytest

from vsml.cli import EXIT_CHECK, EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main

TINY_ES = {"population_size": 4, "outer_steps": 2, "episode_length": 5, "checkpoint_every": 1}
TINY_TASK = {"source": "clusters", "dims": 16, "length": 5}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def train_config(tmp_path):
    return write_config(tmp_path / "train.json", {
        "mode": "meta-train", "architecture": {"N": 4, "Nf": 2, "Nb": 2}, "es": TINY_ES, "tasks": [TINY_TASK]})


def run(*argv):
    return main(["--quiet" if a == "-q" else a for a in argv])


def test_meta_train_layout_and_determinism(tmp_path, train_config):
    for d in ("a", "b"):
        assert run("meta-train", "--config", train_config, "--out", str(tmp_path / d), "-q") == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("config.json", "metrics.csv", "timing.csv", "checkpoints/step_000001.json",
                 "plots/meta_training.svg"):
        assert (a / name).exists(), name
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "config.json").read_text() == (tmp_path / "train.json").read_text()


def test_meta_test_with_checkpoint(tmp_path, train_config):
    run("meta-train", "--config", train_config, "--out", str(tmp_path / "t"), "-q")
    ck = str(tmp_path / "t" / "checkpoints" / "step_000001.json")
    out = tmp_path / "mt"
    code = run("meta-test", "--checkpoint", ck, "--task", json.dumps(TINY_TASK), "--out", str(out), "-q")
    assert code == EXIT_OK
    assert (out / "traces" / "episode_000.csv").exists() and (out / "plots" / "meta_test.svg").exists()
    assert json.loads((out / "overrides.json").read_text())["checkpoint"] == ck


def test_meta_test_sgd_deterministic(tmp_path):
    outs = []
    for d in ("a", "b"):
        run("meta-test", "--learner", "sgd", "--task", "linear", "--out", str(tmp_path / d), "-q")
        outs.append((tmp_path / d / "metrics.csv").read_bytes())
    assert outs[0] == outs[1] and outs[0].startswith(b"step,mean_cum_acc")


def test_vsml_needs_checkpoint():
    assert run("meta-test", "--learner", "vsml") == EXIT_INVALID


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path / "bad.json", {"mode": "meta-train", "es": {"pop": 4}})
    assert run("meta-train", "--config", cfg) == EXIT_INVALID


def test_mode_mismatch(tmp_path):
    cfg = write_config(tmp_path / "m.json", {"mode": "meta-test"})
    assert run("meta-train", "--config", cfg) == EXIT_INVALID


def test_bad_json(tmp_path):
    (tmp_path / "x.json").write_text("{nope")
    assert run("meta-train", "--config", str(tmp_path / "x.json")) == EXIT_INVALID


def test_missing_dataset(tmp_path):
    assert run("meta-test", "--learner", "sgd", "--task", "mnist", "--data-root", str(tmp_path)) == EXIT_INVALID


def test_idx_dataset_end_to_end(idx_root, tmp_path):
    task = json.dumps({"source": "digits", "length": 10})
    assert run("meta-test", "--learner", "adam", "--task", task, "--data-root", str(idx_root), "-q") == EXIT_OK


def test_verify_and_grad_check(tmp_path):
    assert run("verify-equivalence", "--out", str(tmp_path / "eq"), "-q") == EXIT_OK
    cfg = write_config(tmp_path / "g.json", {"mode": "grad-check", "grad_check": {"instances": 2}})
    assert run("grad-check", "--config", cfg, "--out", str(tmp_path / "g")) == EXIT_OK
    assert (tmp_path / "g" / "metrics.csv").read_text().startswith("operation,instance,rel_err")


def test_check_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path / "g.json", {"mode": "grad-check", "grad_check": {"instances": 1,
                                                                                  "tolerance": 0.0}})
    # worst errors are often exactly zero, so a zero tolerance needs a non-zero error somewhere
    code = run("grad-check", "--config", cfg)
    assert code in (EXIT_OK, EXIT_CHECK)
    cfg = write_config(tmp_path / "e.json", {"mode": "verify-equivalence",
                                             "equivalence": {"trials": 3, "tolerance": -1.0}})
    assert run("verify-equivalence", "--config", cfg) == EXIT_CHECK


def test_clone_stall_and_run_cloned(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "mode": "clone", "cloning": {"N": 4, "batch_size": 8, "budgets": [110, 1, 1], "thresholds": [1e-12, 1, 1]}})
    out = tmp_path / "c"
    assert run("clone", "--config", cfg, "--out", str(out), "-q") == EXIT_CHECK
    ck = out / "checkpoints" / "clone.json"
    assert ck.exists()
    rc = write_config(tmp_path / "r.json", {"mode": "run-cloned", "run_cloned": {"batch": 4, "steps": 3},
                                            "tasks": [{"source": "linear", "dims": 4}]})
    code = run("run-cloned", "--config", rc, "--checkpoint", str(ck), "--out", str(tmp_path / "r"), "-q")
    assert code in (EXIT_OK, EXIT_NUMERIC)
    assert (tmp_path / "r" / "metrics.csv").read_text().startswith("step,batch_loss")


def test_introspect_adam(tmp_path):
    out = tmp_path / "i"
    assert run("introspect", "--learner", "adam", "--task", "linear", "--out", str(out), "-q") == EXIT_OK
    assert (out / "plots" / "introspection.svg").exists()
    rows = (out / "traces" / "introspection.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 50


def test_numeric_fault_exit(tmp_path, train_config):
    run("meta-train", "--config", train_config, "--out", str(tmp_path / "t"), "-q")
    ck = tmp_path / "t" / "checkpoints" / "step_000001.json"
    doc = json.loads(ck.read_text())
    doc["params"]["w_in"]["data"][0] = float("nan")
    ck.write_text(json.dumps(doc))
    code = run("meta-test", "--checkpoint", str(ck), "--task", json.dumps(TINY_TASK), "-q")
    assert code == EXIT_NUMERIC


def test_checkpoint_roundtrip_is_byte_stable(tmp_path, train_config):
    from vsml import checkpoint as ckpt
    run("meta-train", "--config", train_config, "--out", str(tmp_path / "t"), "-q")
    ck = tmp_path / "t" / "checkpoints" / "step_000001.json"
    params, spec, doc = ckpt.load_params(ck)
    ckpt.save_params(tmp_path / "again.json", params, spec, doc["seeds"])
    again, _, _ = ckpt.load_params(tmp_path / "again.json")
    assert (again.to_vector() == params.to_vector()).all()
    ckpt.save_params(tmp_path / "third.json", again, spec, doc["seeds"])
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "third.json").read_bytes()
