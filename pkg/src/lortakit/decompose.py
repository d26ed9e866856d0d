"""
Post-hoc CP compression of trained matrix adapters.

Each ``d x d`` update is reshaped into a ``d x d/H x H`` tensor whose slice
``h`` is the column block of head ``h`` (the same layout the adapters use
when concatenating heads), fitted with a rank-``r`` CP model by ALS, and the
fit quality is summarised over all matrices.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .adapters import matrix_to_head_tensor
from .errors import NonFiniteError, ShapeError
from .tensor_core import FitReport, cp_als_restarts


@dataclass
class DecompositionStats:
    reports: list[FitReport]
    skipped: list[int]

    def _values(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.reports])

    def summary(self, attr: str) -> dict[str, float]:
        v = self._values(attr)
        return {"mean": float(v.mean()), "median": float(np.median(v)), "max": float(v.max()), "std": float(v.std())}

    @property
    def relative_error(self) -> dict[str, float]:
        return self.summary("relative_error")

    @property
    def r_squared(self) -> dict[str, float]:
        return self.summary("r_squared")

    def table(self) -> list[list[str]]:
        """Rows of the ``Metric / Mean / Median / Max / Std`` table."""
        rows = [["Metric", "Mean", "Median", "Max", "Std"]]
        for label, stats in (("Relative Error", self.relative_error), ("R^2", self.r_squared)):
            rows.append([label] + [f"{stats[k]:.6g}" for k in ("mean", "median", "max", "std")])
        return rows

    def write(self, path, delimiter: str = ",") -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, delimiter=delimiter).writerows(self.table())


def decompose_adapter(
    updates,
    H: int,
    rank: int,
    restarts: int = 3,
    seed: int = 0,
    max_iters: int = 500,
    tol: float = 1e-8,
) -> DecompositionStats:
    """Fit a rank-``rank`` CP model to every update reshaped as ``d x d/H x H``.

    All-zero matrices are skipped with a warning since their relative error is
    undefined. The best of ``restarts`` seeded ALS runs is kept per matrix.
    """
    reports, skipped = [], []
    for i, w in enumerate(updates):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"update {i} must be a square matrix, got shape {w.shape}")
        if w.shape[1] % H:
            raise ShapeError(f"d={w.shape[1]} is not divisible by H={H}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"update {i} contains non-finite values")
        if not np.any(w):
            warnings.warn(f"update {i} is all zeros; skipped", RuntimeWarning, stacklevel=2)
            skipped.append(i)
            continue
        t = matrix_to_head_tensor(w, H)
        _, report = cp_als_restarts(t, rank, restarts=restarts, seed=seed, max_iters=max_iters, tol=tol)
        reports.append(report)
    if not reports:
        raise ValueError("no non-zero updates to decompose")
    return DecompositionStats(reports, skipped)
