"""Multi-label continual-learning scores: PWJS, final average PWJS, adjusted forgetting."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def predict_labels(logits, threshold: float = 0.5, allowed=None) -> np.ndarray:
    """Boolean multi-hot predictions ``sigmoid(logit) > threshold``.

    ``allowed`` (boolean or 0/1 over classes) restricts predictions, e.g. to
    the classes introduced so far.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    logits = np.asarray(logits, dtype=np.float64)
    # sigmoid(z) > t  <=>  z > logit(t); avoids overflow in exp
    pred = logits > np.log(threshold / (1.0 - threshold))
    if allowed is not None:
        pred &= np.asarray(allowed, dtype=bool)
    return pred


def pwjs_per_sample(y_true, y_pred) -> np.ndarray:
    """Jaccard times precision per row of two multi-hot matrices, in [0, 1].

    An empty prediction scores 1 when the truth is empty too and 0 otherwise.
    """
    y_true = np.atleast_2d(np.asarray(y_true, dtype=bool))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=bool))
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    inter = (y_true & y_pred).sum(axis=1).astype(np.float64)
    union = (y_true | y_pred).sum(axis=1).astype(np.float64)
    npred = y_pred.sum(axis=1).astype(np.float64)
    score = np.zeros(len(y_true))
    nz = npred > 0
    score[nz] = (inter[nz] / union[nz]) * (inter[nz] / npred[nz])
    score[union == 0] = 1.0
    return score


def pwjs(y_true, y_pred) -> float:
    """Precision-weighted Jaccard similarity in percent, averaged over samples."""
    if len(y_true) == 0:
        raise ValueError("pwjs needs at least one sample")
    return float(100.0 * pwjs_per_sample(y_true, y_pred).mean())


def sets_to_multihot(sets, num_classes: int) -> np.ndarray:
    out = np.zeros((len(sets), num_classes), dtype=bool)
    for i, s in enumerate(sets):
        for c in s:
            if not 0 <= c < num_classes:
                raise ValueError(f"label {c} outside [0, {num_classes})")
            out[i, c] = True
    return out


class ResultMatrix:
    """Lower-triangular R[j, k]: score on task k after training task j (0-based)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def __setitem__(self, jk, value: float) -> None:
        j, k = jk
        if not 0 <= k <= j < self.num_tasks:
            raise IndexError(f"R[{j},{k}] outside the lower triangle of a {self.num_tasks}-task matrix")
        self.values[j, k] = value

    def __getitem__(self, jk) -> float:
        return float(self.values[jk])

    def __eq__(self, other) -> bool:
        return (isinstance(other, ResultMatrix) and self.num_tasks == other.num_tasks
                and np.array_equal(self.values, other.values, equal_nan=True))

    @classmethod
    def from_array(cls, arr) -> "ResultMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        m = cls(arr.shape[0])
        for j in range(m.num_tasks):
            for k in range(j + 1):
                m[j, k] = arr[j, k]
        return m

    def row_complete(self, j: int) -> bool:
        return bool(np.isfinite(self.values[j, : j + 1]).all())

    def to_csv(self, path=None) -> str:
        """Rows ``j,k,pwjs`` with 1-based task indices and 4 decimals."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "k", "pwjs"])
        for j in range(self.num_tasks):
            for k in range(j + 1):
                if np.isfinite(self.values[j, k]):
                    w.writerow([j + 1, k + 1, f"{self.values[j, k]:.4f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ResultMatrix":
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        n = max(int(r["j"]) for r in rows)
        m = cls(n)
        for r in rows:
            m[int(r["j"]) - 1, int(r["k"]) - 1] = float(r["pwjs"])
        return m


def final_average_pwjs(matrix: ResultMatrix) -> float:
    """Mean of the last row."""
    last = matrix.num_tasks - 1
    if not matrix.row_complete(last):
        raise ValueError("final_average_pwjs: last row of the result matrix is incomplete")
    return float(matrix.values[last].mean())


def adjusted_forgetting(matrix: ResultMatrix) -> float:
    """Mean relative drop from each task's best earlier score to its final score, in [0, 100]."""
    n = matrix.num_tasks
    if n < 2:
        raise ValueError("adjusted_forgetting needs at least two tasks")
    R = matrix.values
    if not all(matrix.row_complete(j) for j in range(n)):
        raise ValueError("adjusted_forgetting: result matrix has missing cells")
    best = np.array([R[m : n - 1, m].max() for m in range(n - 1)])
    final = R[n - 1, : n - 1]
    terms = np.zeros(n - 1)
    pos = best > 0
    terms[pos] = np.maximum((best[pos] - final[pos]) / best[pos], 0.0)
    return float(100.0 * terms.mean())
