"""Per-step learner records, cumulative accuracy and CSV export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


def cumulative_accuracy(correct) -> np.ndarray:
    """Running mean of first-presentation correctness: curve[t] = mean(c[:t+1])."""
    c = np.asarray(correct, dtype=np.float64)
    if c.size == 0:
        raise ValueError("cumulative accuracy of an empty trace")
    return np.cumsum(c) / np.arange(1, len(c) + 1)


@dataclass
class MetricTrace:
    loss: np.ndarray        # (T,)
    predicted: np.ndarray   # (T,) int
    label: np.ndarray       # (T,) int
    probs: np.ndarray       # (T, B)
    fault_step: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def correct(self) -> np.ndarray:
        return (self.predicted == self.label).astype(np.int64)

    @property
    def cum_acc(self) -> np.ndarray:
        return cumulative_accuracy(self.correct)

    def __len__(self):
        return len(self.loss)

    def to_csv(self) -> str:
        B = self.probs.shape[1] if self.probs.ndim == 2 else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "correct", "predicted", "label"] + [f"prob_{i}" for i in range(B)])
        for t in range(len(self)):
            w.writerow([t, repr(float(self.loss[t])), int(self.correct[t]), int(self.predicted[t]),
                        int(self.label[t])] + [repr(float(p)) for p in self.probs[t]])
        return buf.getvalue()


def second_presentation_accuracy(trace: MetricTrace) -> float:
    """Accuracy on odd steps of a repeated-pairs stream."""
    return float(trace.correct[1::2].mean())


def aggregate_curves(curves) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(curves, dtype=np.float64)
    return arr.mean(axis=0), arr.std(axis=0)
