import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snscore.model import BoundaryError, ModelError, fit_ml
from snscore.scores import (
    ScoreMatrix,
    casewise_scores,
    cumulative_process,
    inverse_sqrt,
    order_by_auxiliary,
    partial_cumsum,
)

from conftest import random_dataset


def test_stable_tie_order():
    S = np.arange(6.0)[:, None]
    M = order_by_auxiliary(S, [2, 1, 2, 1, 0, 2])
    np.testing.assert_array_equal(M.order, [4, 1, 3, 0, 2, 5])
    np.testing.assert_array_equal(M.scores[:, 0], [4, 1, 3, 0, 2, 5])
    np.testing.assert_array_equal(M.raw, S)


def test_rejects_nonfinite_aux():
    with pytest.raises(ValueError):
        order_by_auxiliary(np.ones((3, 1)), [0, np.nan, 1])


def test_score_matrix_validation():
    with pytest.raises(ValueError):
        ScoreMatrix(np.ones((3, 1)), [0, 0, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        ScoreMatrix(np.ones((3, 1)), [0, 1, 2], [2, 1, 0])


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    S = rng.normal(size=(20, 3))
    S -= S.mean(axis=0)
    M = order_by_auxiliary(S, rng.normal(size=20), names=("a", "b", "c"))
    M.to_csv(tmp_path / "s.csv")
    back = ScoreMatrix.from_csv(tmp_path / "s.csv")
    np.testing.assert_allclose(back.scores, M.scores)
    np.testing.assert_array_equal(back.order, M.order)
    assert back.names == M.names


def test_csv_warns_on_nonzero_sum(tmp_path):
    (tmp_path / "s.csv").write_text("a,aux\n1,0\n2,1\n3,2\n")
    with pytest.warns(UserWarning, match="sum to zero"):
        ScoreMatrix.from_csv(tmp_path / "s.csv")


def test_partial_cumsum_directions():
    X = np.array([1.0, -1.0, 2.0, -2.0])
    assert partial_cumsum(X, 1, 3)[0] == 2.0
    assert partial_cumsum(X, 4, 2)[0] == -1.0
    assert partial_cumsum(X, 2, 2)[0] == -1.0
    with pytest.raises(IndexError):
        partial_cumsum(X, 0, 2)


@given(arrays(float, (12, 2), elements=st.floats(-10, 10)), st.integers(1, 12), st.integers(1, 12))
def test_partial_cumsum_symmetric(X, a, b):
    np.testing.assert_allclose(partial_cumsum(X, a, b), partial_cumsum(X, b, a), atol=1e-9)


def test_inverse_sqrt():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    info = A @ A.T + np.eye(4)
    R = inverse_sqrt(info)
    np.testing.assert_allclose(R @ info @ R, np.eye(4), atol=1e-10)
    with pytest.raises(ValueError, match="positive definite"):
        inverse_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="symmetric"):
        inverse_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_cumulative_process_definition():
    rng = np.random.default_rng(2)
    S = rng.normal(size=(50, 2))
    info = np.array([[2.0, 0.5], [0.5, 1.0]])
    P = cumulative_process(S, info)
    k = 17
    expected = inverse_sqrt(info) @ S[:k].sum(axis=0) / np.sqrt(50)
    np.testing.assert_allclose(P.B[k - 1], expected)


def test_casewise_scores_sorted_and_centered():
    data = random_dataset(3, sizes=(8,) * 10)
    fit = fit_ml(data)
    M = casewise_scores(fit, data)
    assert np.all(np.diff(M.aux_sorted) >= 0)
    assert np.abs(M.scores.sum(axis=0)).max() <= 1e-6 * data.n
    assert M.names == fit.spec.names


def test_boundary_refused():
    rng = np.random.default_rng(4)
    J, m = 20, 5
    X = np.column_stack([np.ones(J * m), rng.normal(size=J * m)])
    e = rng.normal(size=(J, m))
    y = X @ [1.0, 2.0] + (e - e.mean(axis=1, keepdims=True)).ravel()
    from snscore.model import LongDataset

    data = LongDataset(np.repeat(np.arange(J), m), y, X, X[:, :1], rng.normal(size=J * m),
                       ("(Intercept)", "x"), ("(Intercept)",))
    fit = fit_ml(data)
    with pytest.raises(BoundaryError):
        casewise_scores(fit, data)
    M = casewise_scores(fit, data, allow_boundary=True)
    assert M.boundary == ("var((Intercept))",)


def test_nonconverged_refused(sleepstudy):
    from snscore.model import FitOptions

    fit = fit_ml(sleepstudy, opts=FitOptions(max_iter=1))
    with pytest.raises(ModelError):
        casewise_scores(fit, sleepstudy)
