"""Two-level linear mixed model: data container, marginal likelihood, ML fit.

The model for cluster ``j`` is

    y_j = X_j beta + Z_j b_j + e_j,   b_j ~ N(0, G),   e_j ~ N(0, sigma2 I)

so that marginally ``y_j ~ N(X_j beta, V_j)`` with ``V_j = Z_j G Z_j' + sigma2 I``.

Parameters are reported in the order ``(beta_1..beta_p, vech(G), sigma2)``
where ``vech`` stacks the lower triangle of ``G`` column by column. For a
random intercept and slope this is ``(var0, cov01, var1)``.

All per-cluster work is done on dense ``m x m`` blocks, batched over clusters
of equal size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize

LOG_2PI = np.log(2.0 * np.pi)
# starting values for relative-factor diagonals that a search left at zero
RESTART_LIFTS = (0.1, 0.5, 1.0)


class ModelError(Exception):
    """Base class for model fitting and evaluation errors."""


class SingularModelError(ModelError):
    """A marginal covariance block is not positive definite."""


class RankDeficientError(ModelError):
    """The fixed-effects design does not have full column rank."""


class BoundaryError(ModelError):
    """A requested operation needs an interior variance estimate."""


def vech_pairs(r: int) -> list[tuple[int, int]]:
    """Lower-triangle index pairs of an ``r x r`` matrix, column-major."""
    return [(a, b) for b in range(r) for a in range(b, r)]


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and parameter labels of a two-level LMM."""

    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]

    @property
    def p(self) -> int:
        return len(self.fixed_names)

    @property
    def r(self) -> int:
        return len(self.random_names)

    @property
    def n_vc(self) -> int:
        """Number of random-effect covariance parameters."""
        return self.r * (self.r + 1) // 2

    @property
    def q(self) -> int:
        return self.p + self.n_vc + 1

    @property
    def names(self) -> tuple[str, ...]:
        vc = []
        for a, b in vech_pairs(self.r):
            if a == b:
                vc.append(f"var({self.random_names[a]})")
            else:
                vc.append(f"cov({self.random_names[b]},{self.random_names[a]})")
        return (*self.fixed_names, *vc, "residual")

    def index(self, name: str | int) -> int:
        """Resolve a parameter name (or integer position) to its column."""
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.q:
                raise IndexError(f"parameter index {name} out of range 0..{self.q - 1}")
            return int(name)
        if name in self.names:
            return self.names.index(name)
        if name.isdigit():
            return self.index(int(name))
        raise KeyError(f"unknown parameter {name!r}; known: {', '.join(self.names)}")

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Split a parameter vector into ``(beta, G, sigma2)``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.q,):
            raise ValueError(f"theta must have length {self.q}, got {theta.shape}")
        beta = theta[: self.p]
        G = np.zeros((self.r, self.r))
        for value, (a, b) in zip(theta[self.p : self.p + self.n_vc], vech_pairs(self.r)):
            G[a, b] = G[b, a] = value
        return beta, G, float(theta[-1])

    def pack(self, beta, G, sigma2: float) -> np.ndarray:
        G = np.asarray(G, dtype=float)
        vc = [G[a, b] for a, b in vech_pairs(self.r)]
        return np.concatenate([np.asarray(beta, dtype=float), vc, [sigma2]])

    def check_theta(self, theta: np.ndarray) -> None:
        _, G, sigma2 = self.unpack(theta)
        if not sigma2 > 0:
            raise ValueError(f"residual variance must be positive, got {sigma2}")
        if self.r and np.linalg.eigvalsh(G).min() < -1e-10 * max(1.0, np.abs(G).max()):
            raise ValueError("random-effect covariance is not positive semi-definite")


@dataclass(frozen=True)
class ClusterBlock:
    """All clusters of one size ``m``, stacked along the leading axis."""

    rows: np.ndarray  # (J_m, m) original row positions
    labels: np.ndarray  # (J_m,) cluster labels
    X: np.ndarray  # (J_m, m, p)
    Z: np.ndarray  # (J_m, m, r)
    y: np.ndarray  # (J_m, m)


@dataclass(frozen=True)
class LongDataset:
    """Long-format observations: one row per level-1 unit.

    ``X`` and ``Z`` are the fixed and random design matrices (intercept
    columns included explicitly), ``aux`` the auxiliary ordering variable.
    """

    cluster: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    aux: np.ndarray
    fixed_names: tuple[str, ...] = ()
    random_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        aux = np.asarray(self.aux, dtype=float)
        cluster = np.asarray(self.cluster)
        n = y.shape[0]
        if n == 0:
            raise ValueError("dataset has no rows")
        X = X.reshape(n, -1)
        Z = Z.reshape(n, -1)
        if cluster.shape != (n,) or aux.shape != (n,):
            raise ValueError("cluster, response and auxiliary columns differ in length")
        for label, arr in (("response", y), ("fixed covariates", X),
                           ("random covariates", Z), ("auxiliary", aux)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{label} contain missing or non-finite values")
        fixed = tuple(self.fixed_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        random = tuple(self.random_names) or tuple(f"z{i}" for i in range(Z.shape[1]))
        if len(fixed) != X.shape[1] or len(random) != Z.shape[1]:
            raise ValueError("covariate names do not match design dimensions")
        for name, value in (("y", y), ("X", X), ("Z", Z), ("aux", aux), ("cluster", cluster),
                            ("fixed_names", fixed), ("random_names", random)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @cached_property
    def cluster_sizes(self) -> dict:
        labels, counts = np.unique(self.cluster, return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    @property
    def balanced(self) -> bool:
        return len(set(self.cluster_sizes.values())) == 1

    def spec(self) -> ModelSpec:
        return ModelSpec(self.fixed_names, self.random_names)

    @cached_property
    def blocks(self) -> tuple[ClusterBlock, ...]:
        codes, labels = pd.factorize(self.cluster, sort=False)
        order = np.argsort(codes, kind="stable")
        sizes = np.bincount(codes)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        out = []
        for m in np.unique(sizes):
            which = np.flatnonzero(sizes == m)
            rows = order[starts[which][:, None] + np.arange(m)[None, :]]
            out.append(ClusterBlock(rows=rows, labels=np.asarray(labels)[which],
                                    X=self.X[rows], Z=self.Z[rows], y=self.y[rows]))
        return tuple(out)

    def with_response(self, y: np.ndarray) -> "LongDataset":
        return LongDataset(self.cluster, y, self.X, self.Z, self.aux,
                           self.fixed_names, self.random_names)


def read_long_csv(path, cluster: str, response: str, fixed: Sequence[str] = (),
                  random: Sequence[str] = (), aux: str | None = None,
                  fixed_intercept: bool = True, random_intercept: bool = True) -> LongDataset:
    """Load a long-format CSV, selecting columns by name.

    Intercept columns are prepended unless disabled. Missing values are
    rejected, not imputed.
    """
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: file is empty") from None
    if df.empty:
        raise ValueError(f"{path}: no data rows")
    wanted = [cluster, response, *fixed, *random] + ([aux] if aux else [])
    missing = [c for c in wanted if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    nulls = [c for c in dict.fromkeys(wanted) if df[c].isna().any()]
    if nulls:
        raise ValueError(f"{path}: missing values in columns {nulls}")

    def design(cols, intercept):
        names = (["(Intercept)"] if intercept else []) + list(cols)
        mats = ([np.ones(len(df))] if intercept else []) + [df[c].to_numpy(float) for c in cols]
        if not mats:
            raise ValueError("design has no columns")
        return np.column_stack(mats), tuple(names)

    X, fixed_names = design(fixed, fixed_intercept)
    Z, random_names = design(random, random_intercept)
    aux_values = df[aux].to_numpy(float) if aux else np.arange(len(df), dtype=float)
    return LongDataset(df[cluster].to_numpy(), df[response].to_numpy(float), X, Z,
                       aux_values, fixed_names, random_names)


# -- per-cluster building blocks ---------------------------------------------


def _cov_blocks(block: ClusterBlock, G: np.ndarray, sigma2: float) -> np.ndarray:
    m = block.y.shape[1]
    V = np.einsum("jia,ab,jkb->jik", block.Z, G, block.Z)
    V += sigma2 * np.eye(m)
    return V


def _cholesky(V: np.ndarray, labels: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        bad = [labels[j] for j in range(V.shape[0])
               if np.linalg.eigvalsh(V[j]).min() <= 0]
        raise SingularModelError(
            f"marginal covariance not positive definite for cluster(s) {bad[:5]}"
        ) from None


def _inverse_and_logdet(V: np.ndarray, labels: np.ndarray):
    L = _cholesky(V, labels)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    Linv = np.linalg.inv(L)
    Vinv = np.swapaxes(Linv, 1, 2) @ Linv
    return Vinv, logdet


def _dV(block: ClusterBlock, spec: ModelSpec) -> list[np.ndarray]:
    """Derivatives of V_j with respect to each variance parameter."""
    Z = block.Z
    out = []
    for a, b in vech_pairs(spec.r):
        D = Z[:, :, a][:, :, None] * Z[:, :, b][:, None, :]
        if a != b:
            D = D + np.swapaxes(D, 1, 2)
        out.append(D)
    out.append(np.broadcast_to(np.eye(block.y.shape[1]), (Z.shape[0],) + (block.y.shape[1],) * 2))
    return out


@dataclass
class _BlockEval:
    block: ClusterBlock
    Vinv: np.ndarray
    logdet: np.ndarray
    resid: np.ndarray
    u: np.ndarray  # Vinv @ resid


def _evaluate(spec: ModelSpec, theta: np.ndarray, data: LongDataset) -> list[_BlockEval]:
    beta, G, sigma2 = spec.unpack(theta)
    out = []
    for block in data.blocks:
        Vinv, logdet = _inverse_and_logdet(_cov_blocks(block, G, sigma2), block.labels)
        resid = block.y - block.X @ beta
        u = np.einsum("jik,jk->ji", Vinv, resid)
        out.append(_BlockEval(block, Vinv, logdet, resid, u))
    return out


def _check_spec(spec: ModelSpec, data: LongDataset) -> None:
    if spec.p != data.X.shape[1] or spec.r != data.Z.shape[1]:
        raise ValueError(f"spec dimensions (p={spec.p}, r={spec.r}) do not match data "
                         f"(p={data.X.shape[1]}, r={data.Z.shape[1]})")


def marginal_loglik(spec: ModelSpec, theta, data: LongDataset) -> float:
    """Marginal log-likelihood ``sum_j log N(y_j; X_j beta, V_j)``."""
    _check_spec(spec, data)
    total = 0.0
    for ev in _evaluate(spec, np.asarray(theta, float), data):
        m = ev.resid.shape[1]
        quad = np.einsum("ji,ji->j", ev.resid, ev.u)
        total += -0.5 * np.sum(m * LOG_2PI + ev.logdet + quad)
    return float(total)


def casewise_score_rows(spec: ModelSpec, theta, data: LongDataset) -> np.ndarray:
    """Observation-level score contributions, ``(n, q)``, in original row order.

    Fixed effects: row ``i`` of cluster ``j`` gets ``x_i (V^-1 r)_i``.
    Variance parameter with derivative matrix ``D``: row ``i`` gets
    ``-0.5 (V^-1 D)_ii + 0.5 (V^-1 r)_i (D V^-1 r)_i``. Rows of a cluster sum
    to that cluster's analytic score.
    """
    _check_spec(spec, data)
    S = np.empty((data.n, spec.q))
    for ev in _evaluate(spec, np.asarray(theta, float), data):
        blk = ev.block
        cols = [blk.X * ev.u[..., None]]
        for D in _dV(blk, spec):
            diag = np.einsum("jik,jki->ji", ev.Vinv, D)
            Du = np.einsum("jik,jk->ji", D, ev.u)
            cols.append((-0.5 * diag + 0.5 * ev.u * Du)[..., None])
        S[blk.rows.ravel()] = np.concatenate(cols, axis=-1).reshape(-1, spec.q)
    return S


def cluster_scores(spec: ModelSpec, theta, data: LongDataset) -> tuple[np.ndarray, list]:
    """Analytic per-cluster scores ``(J, q)`` and the matching cluster labels."""
    _check_spec(spec, data)
    rows, labels = [], []
    for ev in _evaluate(spec, np.asarray(theta, float), data):
        blk = ev.block
        parts = [np.einsum("jia,ji->ja", blk.X, ev.u)]
        for D in _dV(blk, spec):
            tr = np.einsum("jik,jki->j", ev.Vinv, D)
            quad = np.einsum("ji,jik,jk->j", ev.u, D, ev.u)
            parts.append((-0.5 * tr + 0.5 * quad)[:, None])
        rows.append(np.concatenate(parts, axis=1))
        labels.extend(blk.labels.tolist())
    return np.concatenate(rows), labels


def score_vector(spec: ModelSpec, theta, data: LongDataset) -> np.ndarray:
    """Gradient of :func:`marginal_loglik` in the reporting parameterization."""
    return cluster_scores(spec, theta, data)[0].sum(axis=0)


def expected_information(spec: ModelSpec, theta, data: LongDataset) -> np.ndarray:
    """Expected (Fisher) information of the marginal likelihood, ``(q, q)``.

    Block diagonal: ``sum_j X_j' V_j^-1 X_j`` for the fixed effects and
    ``0.5 sum_j tr(V^-1 dV_k V^-1 dV_l)`` for the variance parameters.
    """
    _check_spec(spec, data)
    p, q = spec.p, spec.q
    info = np.zeros((q, q))
    for ev in _evaluate(spec, np.asarray(theta, float), data):
        blk = ev.block
        info[:p, :p] += np.einsum("jia,jik,jkb->ab", blk.X, ev.Vinv, blk.X)
        VD = [ev.Vinv @ D for D in _dV(blk, spec)]
        for k in range(len(VD)):
            for l in range(k, len(VD)):
                val = 0.5 * np.einsum("jab,jba->", VD[k], VD[l])
                info[p + k, p + l] += val
                if k != l:
                    info[p + l, p + k] += val
    info[:p, :p] = 0.5 * (info[:p, :p] + info[:p, :p].T)
    return info


# -- fitting -----------------------------------------------------------------


@dataclass
class FitOptions:
    grad_tol: float = 1e-6
    max_iter: int = 500
    # relative-factor diagonal below this is treated as a boundary estimate
    boundary_tol: float = 1e-4


@dataclass
class FittedLmm:
    spec: ModelSpec
    theta: np.ndarray
    loglik: float
    info: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    boundary: tuple[str, ...] = ()
    message: str = ""

    @property
    def at_boundary(self) -> bool:
        return bool(self.boundary)

    def params(self) -> dict[str, float]:
        return dict(zip(self.spec.names, self.theta.tolist()))

    def to_dict(self) -> dict:
        return {
            "parameters": self.params(),
            "names": list(self.spec.names),
            "theta": self.theta.tolist(),
            "loglik": self.loglik,
            "information": self.info.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "boundary": list(self.boundary),
            "message": self.message,
        }


def _lambda_matrix(lam: np.ndarray, r: int) -> np.ndarray:
    Lam = np.zeros((r, r))
    for value, (a, b) in zip(lam, vech_pairs(r)):
        Lam[a, b] = value
    return Lam


def _profiled_deviance(lam: np.ndarray, spec: ModelSpec, data: LongDataset):
    """Deviance with beta and sigma2 profiled out, and its gradient in ``lam``.

    ``G = sigma2 * Lam Lam'`` with ``Lam`` lower triangular; ``W = V / sigma2``.
    """
    r, p, n = spec.r, spec.p, data.n
    Lam = _lambda_matrix(lam, r)
    T = Lam @ Lam.T
    evals = []
    XtWX = np.zeros((p, p))
    XtWy = np.zeros(p)
    logdet = 0.0
    for block in data.blocks:
        Winv, ld = _inverse_and_logdet(_cov_blocks(block, T, 1.0), block.labels)
        WX = Winv @ block.X
        XtWX += np.einsum("jia,jib->ab", block.X, WX)
        XtWy += np.einsum("jia,ji->a", WX, block.y)
        logdet += ld.sum()
        evals.append((block, Winv))
    beta = np.linalg.solve(XtWX, XtWy)
    rss = 0.0
    M = np.zeros((r, r))
    grad = np.zeros(len(lam))
    vs = []
    for block, Winv in evals:
        resid = block.y - block.X @ beta
        u = np.einsum("jik,jk->ji", Winv, resid)
        rss += np.einsum("ji,ji->", resid, u)
        ZW = np.swapaxes(block.Z, 1, 2) @ Winv
        M += np.einsum("jai,jib->ab", ZW, block.Z)
        vs.append(np.einsum("jia,ji->ja", block.Z, u))
    sigma2 = rss / n
    dev = n * (LOG_2PI + np.log(sigma2) + 1.0) + logdet
    v = np.concatenate(vs)
    MLam = M @ Lam
    LtV = v @ Lam  # rows are (Lam' v_j)'
    for e, (a, b) in enumerate(vech_pairs(r)):
        grad[e] = 2.0 * MLam[a, b] - (2.0 / sigma2) * np.sum(v[:, a] * LtV[:, b])
    return dev, grad, beta, sigma2


def fit_ml(data: LongDataset, spec: ModelSpec | None = None,
           opts: FitOptions | None = None, start: np.ndarray | None = None) -> FittedLmm:
    """Maximum-likelihood fit of the marginal model.

    A bounded quasi-Newton search over the relative covariance factor (with
    ``beta`` and ``sigma2`` profiled out) is followed by Fisher scoring in the
    reporting parameterization until the score vector is below ``grad_tol``.
    """
    spec = spec or data.spec()
    opts = opts or FitOptions()
    _check_spec(spec, data)
    if data.n <= spec.q:
        raise ValueError(f"need more observations ({data.n}) than parameters ({spec.q})")
    if np.linalg.matrix_rank(data.X) < spec.p:
        raise RankDeficientError("fixed-effects design is rank deficient")

    pairs = vech_pairs(spec.r)
    if start is None:
        lam0 = np.array([1.0 if a == b else 0.0 for a, b in pairs])
    else:
        lam0 = np.asarray(start, float)
    bounds = [(0.0, None) if a == b else (None, None) for a, b in pairs]
    is_diag = np.array([a == b for a, b in pairs])

    def search(start):
        return optimize.minimize(
            lambda lam: _profiled_deviance(lam, spec, data)[:2], start, jac=True,
            method="L-BFGS-B", bounds=bounds,
            options={"maxiter": opts.max_iter, "ftol": 1e-14, "gtol": 1e-9},
        )

    res = search(lam0)
    # The deviance is flat to first order in a zero diagonal entry, so a
    # search that reaches the bound cannot tell a boundary optimum from a
    # saddle. Restart with those entries lifted and keep the best result.
    nit = int(res.nit)
    for lift in RESTART_LIFTS:
        at_zero = is_diag & (res.x < opts.boundary_tol)
        if not at_zero.any():
            break
        alt = search(np.where(at_zero, lift, res.x))
        nit += int(alt.nit)
        if alt.fun < res.fun - 1e-10 * abs(res.fun):
            res = alt
    lam = res.x
    _, _, beta, sigma2 = _profiled_deviance(lam, spec, data)
    Lam = _lambda_matrix(lam, spec.r)
    theta = spec.pack(beta, sigma2 * Lam @ Lam.T, sigma2)
    iterations = nit

    diag = np.array([lam[i] for i, (a, b) in enumerate(pairs) if a == b])
    boundary = tuple(spec.names[spec.p: spec.p + spec.n_vc]) if (
        diag.size and diag.min() < opts.boundary_tol) else ()

    # Fisher scoring polish; boundary fits only check the profiled parameters
    free = np.ones(spec.q, bool)
    if boundary:
        free[spec.p: spec.p + spec.n_vc] = False
    g = score_vector(spec, theta, data)
    ll = marginal_loglik(spec, theta, data)
    while not boundary and np.abs(g).max() > opts.grad_tol and iterations < opts.max_iter:
        iterations += 1
        step = np.linalg.solve(expected_information(spec, theta, data), g)
        for _ in range(30):
            cand = theta + step
            try:
                spec.check_theta(cand)
                ll_new = marginal_loglik(spec, cand, data)
            except (ValueError, SingularModelError):
                ll_new = -np.inf
            if ll_new >= ll - 1e-10 * abs(ll):
                break
            step = step / 2
        else:
            break
        theta, ll = cand, ll_new
        g = score_vector(spec, theta, data)

    grad_norm = float(np.abs(g[free]).max())
    converged = bool(grad_norm <= opts.grad_tol and iterations < opts.max_iter)
    message = "" if converged else f"gradient {grad_norm:.3g} above tolerance {opts.grad_tol:g}"
    if boundary:
        message = (message + "; " if message else "") + "random-effect covariance at boundary"
    return FittedLmm(spec=spec, theta=theta, loglik=ll,
                     info=expected_information(spec, theta, data),
                     converged=converged, iterations=iterations,
                     grad_norm=grad_norm, boundary=boundary, message=message)


def information_matrix(fitted: FittedLmm, data: LongDataset) -> np.ndarray:
    """Expected information at the fitted parameters."""
    if not fitted.converged:
        raise ModelError("information requested for a non-converged fit")
    return expected_information(fitted.spec, fitted.theta, data)
