import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsml.core import ConfigError
from vsml.equivalence import (SparseSharedMatrix, analytic_nonzero_blocks, build_w_tilde, step_via_messages,
                              step_via_w_tilde, verify, w_tilde_entry)


def test_verify_all_instances_agree():
    rows = list(verify(trials=100))
    assert len(rows) == 100
    assert max(r[3] for r in rows) < 1e-8


@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_paths_agree(n, N, seed):
    rng = np.random.default_rng(seed)
    W, C = rng.standard_normal((N, N)), rng.standard_normal((N, N))
    s = rng.standard_normal((n, n, N))
    assert np.allclose(step_via_messages(s, W, C), step_via_w_tilde(s, build_w_tilde(W, C, n, n)),
                       rtol=0, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_nonzero_block_count(n):
    wt = build_w_tilde(np.eye(2), np.eye(2), n, n)
    assert wt.nonzero_blocks() == analytic_nonzero_blocks(n)


def test_case_table():
    W, C = np.array([[2.0]]), np.array([[3.0]])
    # (c, d, i, a, b, j)
    assert w_tilde_entry(W, C, 0, 0, 0, 0, 0, 0) == 5.0     # d = a = b, c = a
    assert w_tilde_entry(W, C, 1, 0, 0, 0, 1, 0) == 3.0     # d = a only
    assert w_tilde_entry(W, C, 0, 1, 0, 0, 1, 0) == 2.0     # d = b, c = a, d != a
    assert w_tilde_entry(W, C, 1, 1, 0, 0, 0, 0) == 0.0


def test_lazy_path_matches_dense():
    rng = np.random.default_rng(3)
    W, C = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    s = rng.standard_normal((5, 5, 4))          # 100 > dense limit
    wt = build_w_tilde(W, C, 5, 5)
    assert not wt.materializable
    assert np.allclose(step_via_w_tilde(s, wt), step_via_messages(s, W, C), atol=1e-12)


def test_dense_refuses_large():
    wt = SparseSharedMatrix(np.eye(4), np.eye(4), 5, 5)
    with pytest.raises(ConfigError):
        wt.dense()


def test_rectangular_grid_rejected():
    with pytest.raises(ConfigError):
        build_w_tilde(np.eye(2), np.eye(2), 2, 3)
