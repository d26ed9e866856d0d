import csv

import numpy as np
import pytest

from lortakit.adapters import head_tensor_to_matrix, matrix_to_head_tensor
from lortakit.decompose import DecompositionStats, decompose_adapter
from lortakit.errors import NonFiniteError, ShapeError
from lortakit.tensor_core import CPModel, reconstruct


def cp_structured_update(d, H, rank, seed):
    rng = np.random.default_rng(seed)
    t = reconstruct(CPModel([rng.standard_normal((d, rank)), rng.standard_normal((d // H, rank)),
                             rng.standard_normal((H, rank))]))
    return head_tensor_to_matrix(t)


def test_recovers_cp_structured_updates():
    updates = [cp_structured_update(32, 4, 3, seed) for seed in range(4)]
    stats = decompose_adapter(updates, H=4, rank=3, max_iters=5000, tol=1e-14)
    assert stats.relative_error["max"] < 1e-6
    assert stats.r_squared["mean"] > 1 - 1e-10


def test_diagonal_rank1_single_head():
    stats = decompose_adapter([np.diag([3.0, 1.0])], H=1, rank=1)
    assert stats.relative_error["mean"] == pytest.approx(1 / np.sqrt(10), abs=1e-8)
    # centered: entries 3, 0, 0, 1 have mean 1 and centered sum of squares 6
    assert stats.r_squared["mean"] == pytest.approx(1 - 1 / 6, abs=1e-8)


def test_zero_matrix_skipped_with_warning():
    updates = [np.zeros((8, 8)), cp_structured_update(8, 2, 1, 0)]
    with pytest.warns(RuntimeWarning, match="update 0"):
        stats = decompose_adapter(updates, H=2, rank=1)
    assert stats.skipped == [0] and len(stats.reports) == 1


def test_all_zero_input_rejected():
    with pytest.warns(RuntimeWarning):
        with pytest.raises(ValueError):
            decompose_adapter([np.zeros((4, 4))], H=2, rank=1)


def test_scaling_invariance():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 16))
    a = decompose_adapter([w], H=4, rank=2)
    b = decompose_adapter([1000.0 * w], H=4, rank=2)
    assert b.relative_error["mean"] == pytest.approx(a.relative_error["mean"], rel=1e-6)
    assert b.r_squared["mean"] == pytest.approx(a.r_squared["mean"], rel=1e-6)


def test_error_decreases_with_rank():
    w = np.random.default_rng(1).standard_normal((12, 12))
    errors = [decompose_adapter([w], H=3, rank=r, restarts=3).relative_error["mean"] for r in (1, 2, 4, 8)]
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


def test_stats_summary_values():
    updates = [cp_structured_update(8, 2, 2, s) + 0.1 * np.random.default_rng(s).standard_normal((8, 8))
               for s in range(3)]
    stats = decompose_adapter(updates, H=2, rank=1)
    errs = np.array([r.relative_error for r in stats.reports])
    assert stats.relative_error == pytest.approx(
        {"mean": errs.mean(), "median": np.median(errs), "max": errs.max(), "std": errs.std()})


def test_table_and_write(tmp_path):
    stats = decompose_adapter([cp_structured_update(8, 2, 1, 0)], H=2, rank=1)
    table = stats.table()
    assert table[0] == ["Metric", "Mean", "Median", "Max", "Std"]
    assert [row[0] for row in table[1:]] == ["Relative Error", "R^2"]
    path = tmp_path / "decompose.csv"
    stats.write(path)
    with open(path) as fh:
        assert list(csv.reader(fh)) == table
    assert isinstance(stats, DecompositionStats)


def test_reshape_uses_head_column_blocks():
    w = np.arange(16.0).reshape(4, 4)
    t = matrix_to_head_tensor(w, 2)
    assert t.shape == (4, 2, 2)
    np.testing.assert_array_equal(t[:, :, 0], w[:, :2])
    np.testing.assert_array_equal(head_tensor_to_matrix(t), w)


def test_rejects_bad_updates():
    with pytest.raises(ShapeError):
        decompose_adapter([np.ones((4, 6))], H=2, rank=1)
    with pytest.raises(ShapeError):
        decompose_adapter([np.ones((6, 6))], H=4, rank=1)
    with pytest.raises(NonFiniteError):
        decompose_adapter([np.full((4, 4), np.nan)], H=2, rank=1)
