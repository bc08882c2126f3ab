"""Simulated null distributions from discretized Brownian bridges."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .stats import TestResult, maxlm_window, sn_values

logger = logging.getLogger(__name__)

ALPHAS = (0.10, 0.05, 0.01)
NULL_KINDS = ("cvm", "dm", "maxlm", "sn", "sn_w", "sn_ord")


@dataclass
class NullTable:
    kind: str
    q: int
    grid_size: int
    replications: int
    seed: int
    quantiles: dict[float, float]
    samples: np.ndarray | None = None
    options: dict = field(default_factory=dict)

    def critical_value(self, alpha: float = 0.05) -> float:
        for a, v in self.quantiles.items():
            if np.isclose(a, alpha):
                return v
        if self.samples is None:
            raise KeyError(f"no stored quantile for alpha={alpha} and no samples")
        return float(np.quantile(self.samples, 1 - alpha))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = {str(a): v for a, v in self.quantiles.items()}
        d["samples"] = None if self.samples is None else self.samples.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NullTable":
        d = dict(d)
        d["quantiles"] = {float(a): float(v) for a, v in d["quantiles"].items()}
        if d.get("samples") is not None:
            d["samples"] = np.asarray(d["samples"], dtype=float)
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "NullTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def simulate_bridge(n_g: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Standard Brownian bridge on ``{1/n_g, ..., 1}``, ``(n_g, q)``.

    Cumulative sums of ``N(0, 1/n_g)`` increments, minus ``t`` times the
    total, so the final row is exactly zero.
    """
    if n_g < 10:
        raise ValueError("grid size must be at least 10")
    W = np.cumsum(rng.standard_normal((n_g, q)) / np.sqrt(n_g), axis=0)
    t = np.arange(1, n_g + 1)[:, None] / n_g
    B = W - t * W[-1]
    B[-1] = 0.0
    return B


def bridge_functional(kind: str, bridges: np.ndarray, trim: float = 0.1,
                      cutpoints: np.ndarray | None = None,
                      weight: Callable | None = None) -> np.ndarray:
    """Apply a statistic to stacked bridges ``(R, n_g, q)``.

    The bridge increments act as ordered scores with identity information,
    so the traditional statistics read the bridge directly and the
    self-normalized ones run through the same code as real data.
    """
    R, n_g, q = bridges.shape
    if kind == "cvm":
        return np.einsum("rkj,rkj->r", bridges, bridges) / n_g
    if kind == "dm":
        return np.abs(bridges).max(axis=(1, 2))
    if kind == "maxlm":
        ks = maxlm_window(n_g, trim)
        t = ks / n_g
        B = bridges[:, ks - 1]
        return (np.einsum("rkj,rkj->rk", B, B) / (t * (1 - t))).max(axis=1)
    if kind in ("sn", "sn_w", "sn_ord"):
        incr = np.diff(bridges, axis=1, prepend=0.0) * np.sqrt(n_g)
        ks = None
        if kind == "sn_ord":
            if cutpoints is None:
                raise ValueError("sn_ord needs cutpoint fractions")
            ks = np.unique(np.clip(np.rint(np.asarray(cutpoints) * n_g).astype(int), 1, n_g - 1))
            weight = lambda t: 1.0 / (t * (1.0 - t))  # noqa: E731
        elif kind == "sn_w" and weight is None:
            raise ValueError("sn_w needs a weight function")
        _, vals, _ = sn_values(incr, ks=ks, weight=weight if kind != "sn" else None)
        return np.nanmax(vals, axis=-1)
    raise ValueError(f"unknown statistic kind {kind!r}")


def null_distribution(kind: str, q: int = 1, n_g: int = 1000, R: int = 10_000, seed: int = 0,
                      *, trim: float = 0.1, cutpoints=None, weight: Callable | None = None,
                      keep_samples: bool = True, chunk: int = 250) -> NullTable:
    """Monte Carlo null distribution of a statistic.

    Replication ``i`` draws its bridge from the stream seeded by
    ``(seed, i)``, so the table does not depend on ``chunk``.
    """
    if kind not in NULL_KINDS:
        raise ValueError(f"unknown statistic kind {kind!r}")
    if R < 1000:
        logger.warning("null table with only %d replications", R)
    draws = np.empty(R)
    for start in range(0, R, chunk):
        idx = range(start, min(R, start + chunk))
        bridges = np.stack([simulate_bridge(n_g, q, np.random.default_rng([seed, i])) for i in idx])
        draws[start:start + len(idx)] = bridge_functional(kind, bridges, trim, cutpoints, weight)
    draws.sort()
    quantiles = {a: float(np.quantile(draws, 1 - a)) for a in ALPHAS}
    options = {"trim": trim} if kind == "maxlm" else {}
    if cutpoints is not None:
        options["cutpoints"] = [float(c) for c in cutpoints]
    return NullTable(kind, q, n_g, R, seed, quantiles, draws if keep_samples else None, options)


def p_value(table: NullTable, value: float) -> float:
    """``(r + 1) / (R + 1)`` with ``r`` the number of null draws at or above ``value``."""
    if table.samples is None:
        raise ValueError("table has no stored samples; regenerate with keep_samples=True")
    s = table.samples
    r = s.size - np.searchsorted(s, value, side="left")
    return float((r + 1) / (s.size + 1))


def cache_key(kind: str, q: int, n_g: int, R: int, seed: int, trim: float = 0.1,
              cutpoints=None) -> str:
    key = f"{kind}_q{q}_ng{n_g}_R{R}_seed{seed}"
    if kind == "maxlm":
        key += f"_trim{trim:g}"
    if cutpoints is not None:
        key += "_cut" + "-".join(f"{c:.6g}" for c in cutpoints)
    return key


def load_or_build(kind: str, q: int = 1, n_g: int = 1000, R: int = 10_000, seed: int = 0,
                  cache_dir=None, trim: float = 0.1, cutpoints=None) -> NullTable:
    """Fetch a table from the JSON cache, building and storing it if absent."""
    if cache_dir is None:
        return null_distribution(kind, q, n_g, R, seed, trim=trim, cutpoints=cutpoints)
    cache_dir = Path(cache_dir)
    path = cache_dir / (cache_key(kind, q, n_g, R, seed, trim, cutpoints) + ".json")
    if path.exists():
        return NullTable.load(path)
    logger.info("building null table %s", path.name)
    table = null_distribution(kind, q, n_g, R, seed, trim=trim, cutpoints=cutpoints)
    cache_dir.mkdir(parents=True, exist_ok=True)
    table.save(path)
    return table


def grid_drift(kind: str, q: int = 1, n_g: int = 1000, R: int = 10_000, seed: int = 0,
               alpha: float = 0.05, chunk: int = 250, **kw) -> float:
    """Relative change of the critical value when the grid size doubles.

    Both grids use the same bridges: the ``n_g`` grid is every second point
    of the ``2 n_g`` grid, so the drift reflects discretization rather than
    Monte Carlo noise.
    """
    coarse, fine = np.empty(R), np.empty(R)
    for start in range(0, R, chunk):
        idx = range(start, min(R, start + chunk))
        B = np.stack([simulate_bridge(2 * n_g, q, np.random.default_rng([seed, i])) for i in idx])
        fine[start:start + len(idx)] = bridge_functional(kind, B, **kw)
        coarse[start:start + len(idx)] = bridge_functional(kind, B[:, 1::2], **kw)
    a, b = np.quantile(coarse, 1 - alpha), np.quantile(fine, 1 - alpha)
    return float(abs(b - a) / abs(a))


def attach(result: TestResult, table: NullTable, alpha: float = 0.05) -> TestResult:
    """Fill in critical value and p-value from a null table."""
    result.alpha = alpha
    result.critical_value = table.critical_value(alpha)
    result.p_value = p_value(table, result.value) if table.samples is not None else None
    return result
