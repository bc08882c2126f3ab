"""Casewise scores, auxiliary ordering and cumulative score processes.

Positions in this module follow the usual 1-based convention of the
partial-sum formulas: ``partial_cumsum(S, 1, k)`` is the sum of the first
``k`` ordered scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import BoundaryError, FittedLmm, LongDataset, ModelError, casewise_score_rows

# allocation rule version, bumped if the level-1 split of cluster scores changes
ALLOCATION_VERSION = 1


def score_sum_tolerance(n: int) -> float:
    return 1e-6 * n


@dataclass(frozen=True)
class ScoreMatrix:
    """Scores sorted by the auxiliary variable.

    ``scores[i]`` is the score of the ``i``-th smallest case; ``order[i]`` is
    that case's row in the original data.
    """

    scores: np.ndarray
    order: np.ndarray
    aux_sorted: np.ndarray
    names: tuple[str, ...] = ()
    boundary: tuple[str, ...] = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        if scores.ndim == 1:
            scores = scores[:, None]
        n = scores.shape[0]
        order = np.asarray(self.order, dtype=np.intp)
        aux = np.asarray(self.aux_sorted, dtype=float)
        if order.shape != (n,) or aux.shape != (n,):
            raise ValueError("order and aux_sorted must have one entry per score row")
        if not np.array_equal(np.sort(order), np.arange(n)):
            raise ValueError("order is not a permutation")
        if np.any(np.diff(aux) < 0):
            raise ValueError("aux_sorted is not nondecreasing")
        names = tuple(self.names) or tuple(f"s{j}" for j in range(scores.shape[1]))
        if len(names) != scores.shape[1]:
            raise ValueError("one name per score column required")
        scores.setflags(write=False)
        for attr, value in (("scores", scores), ("order", order), ("aux_sorted", aux),
                            ("names", names)):
            object.__setattr__(self, attr, value)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def q(self) -> int:
        return self.scores.shape[1]

    @property
    def raw(self) -> np.ndarray:
        """Scores back in original row order."""
        out = np.empty_like(self.scores)
        out[self.order] = self.scores
        return out

    def columns(self, cols=None) -> np.ndarray:
        """Ordered scores restricted to ``cols`` (names or positions)."""
        return self.scores[:, self.col_index(cols)]

    def col_index(self, cols=None) -> list[int]:
        if cols is None:
            return list(range(self.q))
        if isinstance(cols, (str, int, np.integer)):
            cols = [cols]
        idx = []
        for c in cols:
            if isinstance(c, (int, np.integer)):
                if not 0 <= c < self.q:
                    raise IndexError(f"column {c} out of range")
                idx.append(int(c))
            elif c in self.names:
                idx.append(self.names.index(c))
            else:
                raise KeyError(f"unknown score column {c!r}")
        if not idx:
            raise ValueError("no columns selected")
        return idx

    def to_csv(self, path, aux_name: str = "aux") -> None:
        """Write scores in original row order with an auxiliary column."""
        df = pd.DataFrame(self.raw, columns=list(self.names))
        aux = np.empty(self.n)
        aux[self.order] = self.aux_sorted
        df[aux_name] = aux
        df.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, aux: str = "aux", columns=None) -> "ScoreMatrix":
        """Read externally produced scores; warns if they do not sum to ~0."""
        df = pd.read_csv(path)
        if aux not in df.columns:
            raise ValueError(f"{path}: no auxiliary column {aux!r}")
        cols = list(columns) if columns else [c for c in df.columns if c != aux]
        if df[cols + [aux]].isna().any().any():
            raise ValueError(f"{path}: missing values")
        S = order_by_auxiliary(df[cols].to_numpy(float), df[aux].to_numpy(float), names=cols)
        sums = np.abs(S.scores.sum(axis=0))
        if sums.max() > score_sum_tolerance(S.n):
            warnings.warn(f"score columns do not sum to zero (max |sum| = {sums.max():.3g})",
                          stacklevel=2)
        return S


def order_by_auxiliary(S, aux, names=(), boundary=()) -> ScoreMatrix:
    """Sort score rows by ``aux`` ascending; ties keep original row order."""
    S = np.asarray(S, dtype=float)
    aux = np.asarray(aux, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if aux.shape != (S.shape[0],):
        raise ValueError("aux must have one value per score row")
    if not np.all(np.isfinite(aux)):
        raise ValueError("auxiliary variable has non-finite values")
    order = np.argsort(aux, kind="stable")
    return ScoreMatrix(S[order], order, aux[order], tuple(names), tuple(boundary))


def casewise_scores(fitted: FittedLmm, data: LongDataset, allow_boundary: bool = False) -> ScoreMatrix:
    """Observation-level scores at the fitted parameters, ordered by ``data.aux``.

    Fits with a variance estimate on the boundary are refused unless
    ``allow_boundary``; in that case the affected columns are listed in
    ``ScoreMatrix.boundary`` so callers can decline to test them.
    """
    if not fitted.converged:
        raise ModelError(f"scores requested for a non-converged fit ({fitted.message})")
    if fitted.boundary and not allow_boundary:
        raise BoundaryError(
            "variance estimate on the boundary for "
            f"{', '.join(fitted.boundary)}; score-based tests assume an interior optimum"
        )
    raw = casewise_score_rows(fitted.spec, fitted.theta, data)
    return order_by_auxiliary(raw, data.aux, fitted.spec.names, fitted.boundary)


def _check_pos(n: int, *idx: int) -> None:
    for i in idx:
        if not 1 <= i <= n:
            raise IndexError(f"position {i} outside 1..{n}")


def _ordered(S) -> np.ndarray:
    if isinstance(S, ScoreMatrix):
        return S.scores
    S = np.asarray(S, dtype=float)
    return S[:, None] if S.ndim == 1 else S


def partial_cumsum(S, a: int, b: int) -> np.ndarray:
    """Sum of ordered scores from position ``a`` to ``b`` (1-based, inclusive).

    For ``a > b`` the sum runs backward from ``a`` down to ``b``; as a total
    it equals the forward sum over the same range.
    """
    X = _ordered(S)
    _check_pos(X.shape[0], a, b)
    if a <= b:
        return X[a - 1 : b].sum(axis=0)
    return X[b - 1 : a][::-1].sum(axis=0)


@dataclass(frozen=True)
class CumProcess:
    """Decorrelated cumulative score process; row ``k`` is ``B(k/n)``."""

    B: np.ndarray
    info_root_inv: np.ndarray
    names: tuple[str, ...] = ()
    aux_sorted: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.B.shape[0]


def inverse_sqrt(info: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root via eigendecomposition."""
    info = np.atleast_2d(np.asarray(info, dtype=float))
    if not np.allclose(info, info.T, rtol=1e-10, atol=0):
        raise ValueError("information matrix is not symmetric")
    w, U = np.linalg.eigh(info)
    if w.min() <= 0:
        raise ValueError(f"information matrix not positive definite (smallest eigenvalue {w.min():.3g})")
    return (U / np.sqrt(w)) @ U.T


def cumulative_process(S, info) -> CumProcess:
    """``B(k/n) = n^{-1/2} I^{-1/2} sum_{i<=k} s_(i)`` for ``k = 1..n``."""
    X = _ordered(S)
    n = X.shape[0]
    root = inverse_sqrt(info)
    if root.shape[0] != X.shape[1]:
        raise ValueError("information dimension does not match score columns")
    B = np.cumsum(X, axis=0) @ root.T / np.sqrt(n)
    names = S.names if isinstance(S, ScoreMatrix) else ()
    aux = S.aux_sorted if isinstance(S, ScoreMatrix) else None
    return CumProcess(B, root, names, aux)
