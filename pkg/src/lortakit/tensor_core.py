"""
Dense tensor helpers and CP (CANDECOMP/PARAFAC) machinery.

Tensors are plain float64 ``numpy.ndarray`` objects (row-major). A CP model
``[[A_1, ..., A_N]]`` is kept as a list of factor matrices sharing a column
count, wrapped in :class:`CPModel`.

Unfolding convention
--------------------
``unfold(t, n)`` puts mode ``n`` on the rows; the remaining modes index the
columns in their natural order with the *first* remaining mode varying
fastest and the *last* remaining mode varying slowest. With this convention
the mode-n unfolding of ``[[A_1, ..., A_N]]`` is

    A_n @ khatri_rao([A_N, ..., A_{n+1}, A_{n-1}, ..., A_1]).T

which is what :func:`cp_als` relies on.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

#: Ridge added to the Gram matrix of every ALS least-squares subproblem.
ALS_RIDGE = 1e-12


def as_tensor(t) -> np.ndarray:
    """Validate ``t`` as a dense tensor and return it as a float64 array."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeError("a tensor needs at least one mode")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


@dataclass
class CPModel:
    """Factor matrices ``A_n`` (``I_n x R``) of a rank-``R`` CP model."""

    factors: list[np.ndarray]

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=np.float64) for f in self.factors]
        if not self.factors:
            raise ShapeError("a CP model needs at least one factor")
        for f in self.factors:
            if f.ndim != 2:
                raise ShapeError(f"factor matrices must be 2-D, got shape {f.shape}")
        ranks = {f.shape[1] for f in self.factors}
        if len(ranks) != 1:
            raise ShapeError(f"factor column counts disagree: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self) -> int:
        return len(self.factors)

    def n_params(self) -> int:
        return sum(f.size for f in self.factors)


@dataclass
class FitReport:
    relative_error: float
    r_squared: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)


def _einsum_letters(n: int) -> str:
    letters = string.ascii_lowercase.replace("z", "")
    if n > len(letters):
        raise ShapeError(f"order {n} is too large")
    return letters[:n]


def reconstruct(model: CPModel) -> np.ndarray:
    """Full tensor ``sum_f A_1[:, f] o A_2[:, f] o ... o A_N[:, f]``."""
    if not isinstance(model, CPModel):
        model = CPModel(list(model))
    modes = _einsum_letters(model.ndim)
    expr = ",".join(m + "z" for m in modes) + "->" + modes
    return np.einsum(expr, *model.factors, optimize=True)


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, ``I_mode x prod(other extents)``."""
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise ShapeError(f"mode {mode} out of range for an order-{t.ndim} tensor")
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(mat: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise ShapeError(f"mode {mode} out of range for an order-{len(shape)} tensor")
    moved = (shape[mode],) + shape[:mode] + shape[mode + 1:]
    mat = np.asarray(mat)
    if mat.size != np.prod(shape) or mat.shape[0] != shape[mode]:
        raise ShapeError(f"cannot fold a {mat.shape} matrix into {shape} at mode {mode}")
    return np.moveaxis(np.reshape(mat, moved, order="F"), 0, mode)


def khatri_rao(*matrices: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; the first matrix's row index varies slowest.

    Column ``f`` of ``khatri_rao(a, b)`` is ``kron(a[:, f], b[:, f])``.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if any(m.ndim != 2 for m in mats):
        raise ShapeError("khatri_rao expects matrices")
    cols = {m.shape[1] for m in mats}
    if len(cols) != 1:
        raise ShapeError(f"column counts disagree: {sorted(cols)}")
    modes = _einsum_letters(len(mats))
    expr = ",".join(m + "z" for m in modes) + "->" + modes + "z"
    return np.einsum(expr, *mats).reshape(-1, cols.pop())


def slice_tensor(t: np.ndarray, fixed: Mapping[int, int]) -> np.ndarray:
    """Copy of ``t`` with the modes in ``fixed`` pinned to the given indices.

    Free modes keep their original order. Fixing every mode is rejected.
    """
    t = np.asarray(t)
    if len(fixed) >= t.ndim:
        raise ShapeError("at least one mode must stay free")
    index: list = [slice(None)] * t.ndim
    for mode, i in fixed.items():
        if not 0 <= mode < t.ndim:
            raise ShapeError(f"mode {mode} out of range for an order-{t.ndim} tensor")
        if not 0 <= i < t.shape[mode]:
            raise ShapeError(f"index {i} out of range for mode {mode} (extent {t.shape[mode]})")
        index[mode] = i
    return np.array(t[tuple(index)], copy=True)


def cp_slice(model: CPModel, fixed: Sequence[int]) -> np.ndarray:
    """Frontal slice ``X[:, :, i_3, ..., i_N]`` straight from the factors.

    Evaluates ``A_1 @ Diag(A_3[i_3]) ... Diag(A_N[i_N]) @ A_2.T`` without
    forming the full tensor.
    """
    if len(fixed) != model.ndim - 2:
        raise ShapeError(f"need {model.ndim - 2} indices, got {len(fixed)}")
    weights = np.ones(model.rank)
    for factor, i in zip(model.factors[2:], fixed):
        weights = weights * factor[i]
    return (model.factors[0] * weights) @ model.factors[1].T


def fit_metrics(t: np.ndarray, approx: np.ndarray) -> tuple[float, float]:
    """Relative Frobenius error and R^2 of ``approx`` against ``t``.

    R^2 uses the total sum of squares about the mean of all entries; for a
    constant tensor (zero spread) the uncentered sum of squares is used.
    """
    resid = t - approx
    sse = float(np.vdot(resid, resid))
    norm2 = float(np.vdot(t, t))
    rel = float(np.sqrt(sse / norm2))
    centered = t - t.mean()
    sst = float(np.vdot(centered, centered))
    if sst <= 1e-14 * norm2:
        sst = norm2
    return rel, 1.0 - sse / sst


def _rebalance(factors: list[np.ndarray]) -> None:
    """Spread each component's scale evenly across modes (in place)."""
    norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])
    if np.any(norms == 0):
        return
    target = np.exp(np.mean(np.log(norms), axis=0))
    for f, n in zip(factors, norms):
        f *= target / n


def cp_als(
    t,
    rank: int,
    max_iters: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
) -> tuple[CPModel, FitReport]:
    """Fit a rank-``rank`` CP model to ``t`` by alternating least squares.

    Factors start i.i.d. uniform on [-1, 1] from ``numpy.random.default_rng(seed)``.
    Each sweep solves the normal equations of every mode in turn with a ridge of
    :data:`ALS_RIDGE` on the Gram matrix. Iteration stops once the relative error
    changes by less than ``tol`` between sweeps, or after ``max_iters`` sweeps.
    """
    t = as_tensor(t)
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if not np.all(np.isfinite(t)):
        raise NonFiniteError("input tensor contains non-finite entries")
    if not np.any(t):
        raise ValueError("cannot fit a CP model to an all-zero tensor")

    rng = np.random.default_rng(seed)
    factors = [rng.uniform(-1.0, 1.0, size=(n, rank)) for n in t.shape]
    unfoldings = [unfold(t, n) for n in range(t.ndim)]
    eye = np.eye(rank)

    history: list[float] = []
    converged = False
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        for n in range(t.ndim):
            others = [factors[m] for m in reversed(range(t.ndim)) if m != n]
            gram = np.ones((rank, rank))
            for f in others:
                gram *= f.T @ f
            mttkrp = unfoldings[n] @ khatri_rao(*others)
            try:
                factors[n] = np.linalg.solve(gram + ALS_RIDGE * eye, mttkrp.T).T
            except np.linalg.LinAlgError:
                factors[n] = mttkrp @ np.linalg.pinv(gram + ALS_RIDGE * eye)
        _rebalance(factors)
        rel, _ = fit_metrics(t, reconstruct(CPModel(factors)))
        history.append(rel)
        if abs(prev - rel) < tol:
            converged = True
            break
        prev = rel

    model = CPModel(factors)
    rel, r2 = fit_metrics(t, reconstruct(model))
    return model, FitReport(rel, r2, it, converged, history)


def cp_als_restarts(t, rank: int, restarts: int = 3, seed: int = 0, **options):
    """Best (lowest relative error) of ``restarts`` seeded :func:`cp_als` runs."""
    best = None
    for k in range(restarts):
        model, report = cp_als(t, rank, seed=seed + k, **options)
        if best is None or report.relative_error < best[1].relative_error:
            best = (model, report)
    return best
