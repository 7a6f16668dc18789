"""Binary detection metrics with the abnormal class as positive."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    scores_path: str | None = None

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    @property
    def false_negatives(self) -> int:
        return self.fn

    @property
    def false_positives(self) -> int:
        return self.fp

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(accuracy=self.accuracy, f1=self.f1, total=self.total)
        return out


def _as_bool(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        bad = set(np.unique(arr)) - {"normal", "abnormal"}
        if bad:
            raise ValueError(f"unknown labels {sorted(bad)}")
        return arr == "abnormal"
    return arr.astype(bool)


def confusion(predicted: Sequence, truth: Sequence, scores_path: str | None = None) -> MetricsReport:
    """Counts from parallel label sequences ('normal'/'abnormal' strings or booleans)."""
    p, t = _as_bool(predicted), _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    return MetricsReport(tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)), fp=int(np.sum(p & ~t)),
                         fn=int(np.sum(~p & t)), scores_path=scores_path)
