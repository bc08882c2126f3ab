"""Fluctuation statistics on ordered scores.

Traditional statistics (CvM, DM, maxLM) aggregate the decorrelated cumulative
score process. The self-normalized statistic replaces the fixed information
normalizer with the k-dependent matrix ``V_n(k)`` built from forward and
backward partial sums around each candidate change point ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scores import CumProcess, ScoreMatrix, _check_pos, _ordered, inverse_sqrt, partial_cumsum

KINDS = ("cvm", "dm", "maxlm", "sn", "sn_w", "sn_ord")

# V_n(k) is treated as singular when its smallest eigenvalue falls below this
# fraction of its average eigenvalue
SINGULAR_RTOL = 1e-10
# Woodbury updates are used when the rank-6 update is cheaper than inverting
WOODBURY_RANK = 6


@dataclass
class StatTrace:
    """Per-k values of a statistic (``k`` is 1-based)."""

    k_grid: np.ndarray
    values: np.ndarray
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    aux: np.ndarray | None = None

    @property
    def argmax_k(self) -> int:
        return int(self.k_grid[np.argmax(self.values)])

    @property
    def argmax_aux(self) -> float | None:
        if self.aux is None:
            return None
        return float(self.aux[self.argmax_k - 1])

    def aux_at(self) -> np.ndarray:
        if self.aux is None:
            return np.full(len(self.k_grid), np.nan)
        return self.aux[self.k_grid - 1]


@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    kind: str
    value: float
    trace: StatTrace
    tested_params: tuple[str, ...]
    alpha: float | None = None
    critical_value: float | None = None
    p_value: float | None = None
    n: int = 0

    @property
    def reject(self) -> bool | None:
        if self.critical_value is None:
            return None
        return bool(self.value > self.critical_value)

    def recompute(self) -> float:
        """Statistic value from the stored per-k trace."""
        if self.kind == "cvm":
            return float(self.trace.values.sum() / self.n)
        return float(self.trace.values.max())

    def to_dict(self) -> dict:
        return {
            "statistic": self.kind,
            "tested_params": list(self.tested_params),
            "value": self.value,
            "alpha": self.alpha,
            "critical_value": self.critical_value,
            "p_value": self.p_value,
            "reject": self.reject,
            "argmax_k": self.trace.argmax_k,
            "argmax_aux": self.trace.argmax_aux,
            "n": self.n,
            "skipped_k": self.trace.skipped.tolist(),
        }

    def trace_frame(self):
        import pandas as pd

        df = pd.DataFrame({"k": self.trace.k_grid, "aux": self.trace.aux_at(),
                           "value": self.trace.values})
        df["critical_value"] = self.critical_value if self.critical_value is not None else np.nan
        return df


# -- traditional statistics ---------------------------------------------------


def _process_cols(P: CumProcess, cols) -> tuple[np.ndarray, tuple[str, ...]]:
    if P.n == 0:
        raise ValueError("empty process")
    if cols is None:
        idx = list(range(P.B.shape[1]))
    else:
        if isinstance(cols, (str, int, np.integer)):
            cols = [cols]
        idx = [P.names.index(c) if isinstance(c, str) else int(c) for c in cols]
    if not idx:
        raise ValueError("no columns selected")
    names = tuple(P.names[i] for i in idx) if P.names else tuple(str(i) for i in idx)
    return P.B[:, idx], names


def cvm_stat(P: CumProcess, cols=None) -> TestResult:
    """``n^-1 sum_k B(k/n)'B(k/n)`` over the selected columns."""
    B, names = _process_cols(P, cols)
    n = P.n
    values = np.einsum("kj,kj->k", B, B)
    trace = StatTrace(np.arange(1, n + 1), values, aux=P.aux_sorted)
    return TestResult("cvm", float(values.sum() / n), trace, names, n=n)


def cvm_from_scores(S, info) -> float:
    """CvM in its unscaled form ``n^-2 sum_k B*_{1,k}' I^-1 B*_{1,k}``."""
    X = _ordered(S)
    n = X.shape[0]
    cs = np.cumsum(X, axis=0)
    return float(np.einsum("ka,ab,kb->", cs, np.linalg.inv(np.atleast_2d(info)), cs) / n**2)


def dm_stat(P: CumProcess, cols=None) -> TestResult:
    """Double maximum: ``max_k max_j |B_j(k/n)|``."""
    B, names = _process_cols(P, cols)
    values = np.abs(B).max(axis=1)
    trace = StatTrace(np.arange(1, P.n + 1), values, aux=P.aux_sorted)
    return TestResult("dm", float(values.max()), trace, names, n=P.n)


def maxlm_window(n: int, trim: float) -> np.ndarray:
    if not 0 < trim < 0.5:
        raise ValueError("trim must lie in (0, 0.5)")
    lo, hi = max(1, math.ceil(n * trim)), min(n - 1, math.floor(n * (1 - trim)))
    if lo > hi:
        raise ValueError(f"trimming window empty for n={n}, trim={trim}")
    return np.arange(lo, hi + 1)


def maxlm_stat(P: CumProcess, cols=None, trim: float = 0.1) -> TestResult:
    """``max_k {t(1-t)}^-1 sum_j B_j(t)^2`` over ``k`` in the trimmed window."""
    B, names = _process_cols(P, cols)
    ks = maxlm_window(P.n, trim)
    t = ks / P.n
    values = np.einsum("kj,kj->k", B[ks - 1], B[ks - 1]) / (t * (1 - t))
    trace = StatTrace(ks, values, aux=P.aux_sorted)
    return TestResult("maxlm", float(values.max()), trace, names, n=P.n)


# -- self-normalization building blocks (direct, literal forms) ---------------


def _cols(S, cols) -> np.ndarray:
    if isinstance(S, ScoreMatrix):
        return S.columns(cols)
    X = _ordered(S)
    return X if cols is None else X[:, np.atleast_1d(cols)]


def t_vec(S, k: int, cols=None) -> np.ndarray:
    """``n^-1/2 (B*_{1,k} - (k/n) B*_{1,n})``."""
    X = _cols(S, cols)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise IndexError(f"k={k} outside 1..{n - 1}")
    return (partial_cumsum(X, 1, k) - k / n * partial_cumsum(X, 1, n)) / np.sqrt(n)


def c_matrix(S, a: int, b: int, cols=None) -> np.ndarray:
    """Deviations of partial sums from their linear interpolation, ``q x m``.

    Forward (``a <= b``) column ``j`` is ``B*_{a,a+j-1} - (j/m) B*_{a,b}``;
    backward (``a > b``) column ``j`` is ``B*_{a,a-j+1} - (j/m) B*_{a,b}``.
    """
    X = _cols(S, cols)
    n = X.shape[0]
    _check_pos(n, a, b)
    m = abs(b - a) + 1
    step = 1 if a <= b else -1
    seg = X[a - 1 : b] if step == 1 else X[b - 1 : a][::-1]
    partial = np.cumsum(seg, axis=0)  # row j-1 is B*_{a, a+step(j-1)}
    j = np.arange(1, m + 1)[:, None]
    return (partial - j / m * partial[-1]).T


def v_matrix(S, k: int, cols=None) -> np.ndarray:
    """``n^-2 [C_{1,k} C_{1,k}' + C_{n,k+1} C_{n,k+1}']``."""
    X = _cols(S, cols)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise IndexError(f"k={k} outside 1..{n - 1}")
    F = c_matrix(X, 1, k)
    B = c_matrix(X, n, k + 1)
    return (F @ F.T + B @ B.T) / n**2


def v_matrix_sweep_direct(S, cols=None) -> np.ndarray:
    """``V_n(k)^-1`` for ``k = 1..n-1`` by building and inverting each matrix."""
    X = _cols(S, cols)
    n = X.shape[0]
    out = np.full((n - 1, X.shape[1], X.shape[1]), np.nan)
    for k in range(1, n):
        V = v_matrix(X, k)
        if not _singular(V[None], _scale(X))[0]:
            out[k - 1] = np.linalg.inv(V)
    return out


# -- recursive forms ----------------------------------------------------------


def _accumulate(x: np.ndarray):
    """Running sums for the forward deviation matrices of ``x`` (``..., n, q``).

    Returns partial sums ``S_k``, ``U_k = sum_j j S_j`` and
    ``F(k) = sum_{j<=k} (S_j - (j/k) S_k)(S_j - (j/k) S_k)'`` for ``k = 1..n``.
    """
    n = x.shape[-2]
    j = np.arange(1, n + 1, dtype=float)
    S = np.cumsum(x, axis=-2)
    A = np.cumsum(S[..., :, None] * S[..., None, :], axis=-3)
    U = np.cumsum(j[:, None] * S, axis=-2)
    SU = S[..., :, None] * U[..., None, :]
    SS = S[..., :, None] * S[..., None, :]
    Q = j * (j + 1) * (2 * j + 1) / 6
    F = A - (SU + np.swapaxes(SU, -1, -2)) / j[:, None, None] + (Q / j**2)[:, None, None] * SS
    return S, U, F


def v_stack(X: np.ndarray) -> np.ndarray:
    """``V_n(k)`` for ``k = 1..n-1`` from running sums, ``(..., n-1, q, q)``.

    Scores are centered first; the deviation matrices are invariant to a
    common shift, and centering keeps the running sums small.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[-2]
    x = X - X.mean(axis=-2, keepdims=True)
    _, _, F = _accumulate(x)
    _, _, G = _accumulate(x[..., ::-1, :])
    V = F[..., : n - 1, :, :] + G[..., n - 2 :: -1, :, :]
    return V / n**2


def t_stack(X: np.ndarray) -> np.ndarray:
    """``T_n(k)`` for ``k = 1..n-1``, ``(..., n-1, q)``."""
    n = X.shape[-2]
    S = np.cumsum(X, axis=-2)
    k = np.arange(1, n, dtype=float)[:, None]
    return (S[..., : n - 1, :] - k / n * S[..., n - 1 : n, :]) / np.sqrt(n)


def _singular(V: np.ndarray, scale=None) -> np.ndarray:
    """Flag ``V_n(k)`` that are numerically singular.

    ``scale`` is the mean squared (uncentered) score per column; matrices
    whose trace is below ``SINGULAR_RTOL`` times its sum are pure rounding
    noise from cancellation and are flagged as well.
    """
    q = V.shape[-1]
    floor = 0.0 if scale is None else SINGULAR_RTOL * np.sum(scale, axis=-1)
    floor = np.asarray(floor)[..., None]  # broadcast over the k axis
    if q == 1:
        return ~(V[..., 0, 0] > floor)
    w = np.linalg.eigvalsh(V)
    tr = w.sum(axis=-1)
    return ~(tr > floor) | (w[..., 0] < SINGULAR_RTOL * tr / q)


def _scale(X: np.ndarray) -> np.ndarray:
    return np.mean(X * X, axis=-2)


def _update_coeffs(k: int) -> np.ndarray:
    """Coefficients of ``F(k) - F(k-1)`` in the basis ``(S_k, x_k, U_{k-1})``."""
    Qk = k * (k + 1) * (2 * k + 1) / 6
    c1 = 1 + Qk / k**2
    if k == 1:
        return np.array([[c1 - 2, 0, 0], [0, 0, 0], [0, 0, 0]], float)
    c2 = (k - 1) * k * (2 * k - 1) / 6 / (k - 1) ** 2
    su = -1 / k + 1 / (k - 1)
    xu = -1 / (k - 1)
    return np.array([[c1 - 2 - c2, c2, su], [c2, -c2, xu], [su, xu, 0.0]])


@dataclass
class SweepResult:
    inverses: np.ndarray  # (n-1, q, q); NaN where V_n(k) is singular
    singular: np.ndarray  # 1-based k with singular V_n(k)
    fallbacks: list[int]  # 1-based k where a low-rank update broke down
    method: str


def v_matrix_sweep_recursive(S, cols=None, method: str = "auto", refresh: int = 64,
                             breakdown_tol: float = 1e-12) -> SweepResult:
    """``V_n(k)^-1`` for all ``k`` using running-sum updates.

    ``V_n(k)`` comes from :func:`v_stack`. With ``method="woodbury"`` each
    inverse is obtained from the previous one by a rank-6 update (three
    forward and three backward vectors); a direct inversion replaces the
    update when the inner system is near singular and every ``refresh``
    steps. ``"batched"`` inverts the stacked matrices in one call. ``"auto"``
    uses Woodbury only when ``q`` exceeds the update rank.
    """
    X = np.asarray(_cols(S, cols), dtype=float)
    n, q = X.shape
    V = v_stack(X)
    sing = _singular(V, _scale(X))
    if method == "auto":
        method = "woodbury" if q > WOODBURY_RANK else "batched"
    out = np.full_like(V, np.nan)
    fallbacks: list[int] = []
    if method == "batched":
        ok = ~sing
        if q == 1:
            out[ok] = 1.0 / V[ok]
        else:
            out[ok] = np.linalg.inv(V[ok])
    elif method == "woodbury":
        x = X - X.mean(axis=0)
        Sf, Uf, _ = _accumulate(x)
        xr = x[::-1]
        Sb, Ub, _ = _accumulate(xr)
        H = None
        anchor = 0
        for k in range(1, n):
            if sing[k - 1]:
                H = None
                continue
            if H is None or k - anchor >= refresh:
                H = np.linalg.inv(V[k - 1])
                anchor = k
                out[k - 1] = H
                continue
            m = n - k
            P = np.column_stack([
                Sf[k - 1], x[k - 1], Uf[k - 2] if k >= 2 else np.zeros(q),
                Sb[m], xr[m], Ub[m - 1] if m >= 1 else np.zeros(q),
            ])
            M = np.zeros((6, 6))
            M[:3, :3] = _update_coeffs(k)
            M[3:, 3:] = -_update_coeffs(m + 1)
            M /= n**2
            HP = H @ P
            inner = np.eye(6) + P.T @ HP @ M
            if 1.0 / np.linalg.cond(inner) < breakdown_tol:
                H = np.linalg.inv(V[k - 1])
                anchor = k
                fallbacks.append(k)
            else:
                H = H - HP @ M @ np.linalg.solve(inner, HP.T)
                H = 0.5 * (H + H.T)
            out[k - 1] = H
    else:
        raise ValueError(f"unknown method {method!r}")
    return SweepResult(out, np.flatnonzero(sing) + 1, fallbacks, method)


# -- self-normalized statistics -----------------------------------------------


def admissible_k(n: int, q: int, trim_boundary: bool = False) -> np.ndarray:
    if trim_boundary:
        return np.arange(q + 1, n - q)
    return np.arange(1, n)


def ordinal_cutpoints(aux_sorted: np.ndarray) -> np.ndarray:
    """Positions ``k`` closing each level of a sorted ordinal variable (except the last)."""
    aux_sorted = np.asarray(aux_sorted)
    ends = np.flatnonzero(np.diff(aux_sorted) != 0) + 1
    return ends


def ordinal_weight(t):
    t = np.asarray(t, dtype=float)
    return 1.0 / (t * (1.0 - t))


def sn_values(X: np.ndarray, ks: np.ndarray | None = None,
              weight: Callable | None = None, trim_boundary: bool = False):
    """Per-k ``w(k/n) T_n(k)' V_n(k)^-1 T_n(k)`` with a leading batch axis allowed.

    Returns ``(ks, values, singular)`` where ``values`` has ``NaN`` at
    singular ``k``.
    """
    X = np.asarray(X, dtype=float)
    n, q = X.shape[-2:]
    if n < 2 * (q + 1):
        raise ValueError(f"need n >= {2 * (q + 1)} observations for {q} tested column(s)")
    if ks is None:
        ks = admissible_k(n, q, trim_boundary)
    ks = np.asarray(ks, dtype=int)
    if ks.size == 0 or ks.min() < 1 or ks.max() > n - 1:
        raise ValueError("evaluation points must lie in 1..n-1")
    V = v_stack(X)[..., ks - 1, :, :]
    T = t_stack(X)[..., ks - 1, :]
    sing = _singular(V, _scale(X))
    if q == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = T[..., 0] ** 2 / V[..., 0, 0]
    else:
        V = np.where(sing[..., None, None], np.eye(q), V)
        vals = np.einsum("...i,...i->...", T, np.linalg.solve(V, T[..., None])[..., 0])
    vals = np.where(sing, np.nan, vals)
    if weight is not None:
        vals = vals * weight(ks / n)
    return ks, vals, sing


def sn_stat(S, cols=None, weight: Callable | None = None, cutpoints=None,
            trim_boundary: bool = False, info=None) -> TestResult:
    """Self-normalized statistic ``sup_k w(k/n) T_n(k)' V_n(k)^-1 T_n(k)``.

    ``cutpoints`` restricts ``k`` to the given positions and applies the
    ordinal weight ``{t(1-t)}^-1``; ``cutpoints="auto"`` derives them from
    the ties in ``S.aux_sorted``. Passing ``info`` decorrelates the selected
    columns by the matching block of ``info^-1/2`` first (experimental, for
    joint tests).
    """
    X = _cols(S, cols)
    names = tuple(S.names[i] for i in S.col_index(cols)) if isinstance(S, ScoreMatrix) \
        else tuple(str(c) for c in np.atleast_1d(range(X.shape[1]) if cols is None else cols))
    aux = S.aux_sorted if isinstance(S, ScoreMatrix) else None
    n = X.shape[0]
    if info is not None:
        info = np.atleast_2d(info)
        if isinstance(S, ScoreMatrix):
            idx = S.col_index(cols)
            info = info[np.ix_(idx, idx)]
        X = X @ inverse_sqrt(info).T
    kind = "sn"
    ks = None
    if cutpoints is not None:
        if isinstance(cutpoints, str) and cutpoints == "auto":
            if aux is None:
                raise ValueError("automatic cutpoints need auxiliary values")
            cutpoints = ordinal_cutpoints(aux)
        ks = np.asarray(cutpoints, dtype=int)
        ks = ks[(ks >= 1) & (ks <= n - 1)]
        if ks.size == 0:
            raise ValueError("no usable cutpoints strictly inside 1..n-1")
        weight, kind = ordinal_weight, "sn_ord"
    elif weight is not None:
        kind = "sn_w"
    ks, vals, sing = sn_values(X, ks=ks, weight=weight, trim_boundary=trim_boundary)
    if sing.all():
        raise ValueError("V_n(k) singular at every evaluation point")
    trace = StatTrace(ks[~sing], vals[~sing], ks[sing], aux)
    return TestResult(kind, float(trace.values.max()), trace, names, n=n)
