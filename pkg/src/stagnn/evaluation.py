"""RMSE and the asymmetric C-MAPSS score."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError


@dataclass
class PredictionSet:
    unit_ids: np.ndarray
    true_rul: np.ndarray
    predicted_rul: np.ndarray

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids, dtype=np.int64)
        self.true_rul = np.asarray(self.true_rul, dtype=np.float64)
        self.predicted_rul = np.asarray(self.predicted_rul, dtype=np.float64)
        if not (len(self.unit_ids) == len(self.true_rul) == len(self.predicted_rul)):
            raise ValueError("prediction arrays differ in length")

    def __len__(self) -> int:
        return len(self.unit_ids)

    @classmethod
    def from_errors(cls, errors, true_rul=None) -> "PredictionSet":
        """Build a set whose ``predicted - true`` equals ``errors``."""
        errors = np.asarray(errors, dtype=np.float64)
        true = np.full(len(errors), 100.0) if true_rul is None else np.asarray(true_rul, dtype=np.float64)
        return cls(np.arange(1, len(errors) + 1), true, true + errors)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["unit_id", "true_rul", "predicted_rul"])
        for u, y, p in zip(self.unit_ids, self.true_rul, self.predicted_rul):
            out.writerow([int(u), repr(float(y)), repr(float(p))])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load_csv(cls, path) -> "PredictionSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [int(r["unit_id"]) for r in rows],
            [float(r["true_rul"]) for r in rows],
            [float(r["predicted_rul"]) for r in rows],
        )


def _errors(preds: PredictionSet) -> np.ndarray:
    if len(preds) == 0:
        raise UsageError("metrics need at least one prediction")
    return preds.predicted_rul - preds.true_rul


def rmse(preds: PredictionSet) -> float:
    d = _errors(preds)
    return float(np.sqrt(np.mean(d * d)))


def score(preds: PredictionSet) -> float:
    """Sum of ``exp(-d/13) - 1`` for early and ``exp(d/10) - 1`` for late predictions."""
    d = _errors(preds)
    early = d < 0
    # expm1 keeps tiny errors from rounding to a zero penalty
    penalty = np.where(early, np.expm1(-np.where(early, d, 0.0) / 13.0), np.expm1(np.where(early, 0.0, d) / 10.0))
    return float(penalty.sum())


def predict_windows(model, windows, batch_size: int = 512) -> np.ndarray:
    preds = [
        model.forward(windows.batch(np.arange(i, min(i + batch_size, len(windows)))), training=False).prediction.data
        for i in range(0, len(windows), batch_size)
    ]
    return np.concatenate(preds) if preds else np.empty(0)


def evaluate(model, test_windows, r_max: float = 125.0):
    """Eval-mode predictions on the test windows, clamped to ``[0, r_max]``.

    Returns ``(PredictionSet, rmse, score)``.
    """
    if len(test_windows) == 0:
        raise UsageError("empty test set")
    raw = predict_windows(model, test_windows)
    preds = PredictionSet(test_windows.unit_ids, test_windows.labels, np.clip(raw, 0.0, r_max))
    return preds, rmse(preds), score(preds)
