import itertools

import numpy as np
import pytest

from vsml.trace import MetricTrace, aggregate_curves, cumulative_accuracy, second_presentation_accuracy


def hand_curve(bits):
    out, hits = [], 0
    for t, b in enumerate(bits, start=1):
        hits += b
        out.append(hits / t)
    return out


@pytest.mark.parametrize("bits", list(itertools.product([0, 1], repeat=4)))
def test_cumulative_accuracy_exhaustive(bits):
    assert np.allclose(cumulative_accuracy(bits), hand_curve(bits), rtol=0, atol=1e-15)


def test_empty_trace_rejected():
    with pytest.raises(ValueError):
        cumulative_accuracy([])


def make_trace():
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
    return MetricTrace(np.array([0.1, 0.2, 0.3, 0.4]), probs.argmax(1), np.array([0, 0, 1, 1]), probs)


def test_csv_columns_and_rows():
    text = make_trace().to_csv()
    lines = text.splitlines()
    assert lines[0] == "step,loss,correct,predicted,label,prob_0,prob_1"
    assert lines[1].startswith("0,0.1,1,0,0,")
    assert len(lines) == 5


def test_second_presentation():
    assert second_presentation_accuracy(make_trace()) == 0.5


def test_aggregate():
    mean, std = aggregate_curves([[0, 1], [1, 1]])
    assert np.allclose(mean, [0.5, 1]) and np.allclose(std, [0.5, 0])
