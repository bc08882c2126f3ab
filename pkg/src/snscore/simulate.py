"""Sleepstudy-style data generator and the power / Type I error study.

Each subject contributes ten observations at Days 0..9. An auxiliary value
drawn from N(0, 1) is attached to every observation (or, optionally, shared
within subject), and cases below the auxiliary median get the changed fixed
effect shifted by ``d`` asymptotic standard errors.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .critvals import NullTable
from .model import FitOptions, LongDataset, ModelError, expected_information, fit_ml
from .pipeline import run_tests

logger = logging.getLogger(__name__)

DAYS = np.arange(10.0)
PARAMS = ("beta0", "beta1", "sigma0_sq", "sigma01", "sigma1_sq", "sigma_r_sq")
STUDY_J = (24, 48, 96)
STUDY_D = (0, 1, 2, 3, 4)
MAX_FAILURE_RATE = 0.02


class StudyError(RuntimeError):
    def __init__(self, msg, table=None):
        super().__init__(msg)
        self.table = table


def param_index(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return PARAMS.index(name)


def default_truth_path() -> Path:
    return Path(str(resources.files("snscore") / "data" / "default_truth.json"))


def default_truth() -> np.ndarray:
    """Frozen sleepstudy ML estimates, ordered as :data:`PARAMS`."""
    cfg = json.loads(default_truth_path().read_text())
    return np.array([cfg["theta"][p] for p in PARAMS])


def truth_to_json(theta, **provenance) -> str:
    return json.dumps({"theta": dict(zip(PARAMS, map(float, theta))), **provenance}, indent=2)


def truth_from_json(text: str) -> np.ndarray:
    cfg = json.loads(text)
    return np.array([cfg["theta"][p] for p in PARAMS])


def sleepstudy_path() -> Path:
    return Path(str(resources.files("snscore") / "data" / "sleepstudy.csv"))


@dataclass(frozen=True)
class SimCondition:
    J: int
    d: float
    changed_param: str = "beta0"
    tested_params: tuple[str, ...] = PARAMS
    kinds: tuple[str, ...] = ("sn", "cvm", "dm", "maxlm")
    replications: int = 500
    seed: int = 0
    aux_level: str = "observation"

    def __post_init__(self):
        if self.aux_level not in ("observation", "subject"):
            raise ValueError("aux_level must be 'observation' or 'subject'")
        if self.J < 2:
            raise ValueError("need at least two subjects")
        if self.changed_param not in ("beta0", "beta1"):
            raise ValueError("only beta0 or beta1 can change")
        if self.d < 0:
            raise ValueError("d must be nonnegative")

    @property
    def n(self) -> int:
        return 10 * self.J

    @property
    def key(self) -> tuple:
        return (self.J, self.d, self.changed_param)

    def stream(self, rep: int) -> np.random.Generator:
        return np.random.default_rng(
            [self.seed, self.J, int(round(self.d * 1000)), param_index(self.changed_param), rep])

    def tag(self) -> str:
        return (f"J{self.J}_d{self.d:g}_{self.changed_param}_{self.aux_level}"
                f"_seed{self.seed}_R{self.replications}")


def design(J: int) -> LongDataset:
    """Sleepstudy design for ``J`` subjects with a zero response."""
    n = 10 * J
    days = np.tile(DAYS, J)
    X = np.column_stack([np.ones(n), days])
    return LongDataset(np.repeat(np.arange(J), 10), np.zeros(n), X, X.copy(), np.zeros(n),
                       ("(Intercept)", "Days"), ("(Intercept)", "Days"))


def asymptotic_se(J: int, truth) -> np.ndarray:
    """Standard errors from the expected information of the no-change model."""
    data = design(J)
    info = expected_information(data.spec(), np.asarray(truth, float), data)
    return np.sqrt(np.diag(np.linalg.inv(info)))


def generate_dataset(cond: SimCondition, truth, rng: np.random.Generator,
                     ase: np.ndarray | None = None) -> LongDataset:
    """Draw one dataset under ``cond``.

    With ``aux_level="observation"`` every observation gets its own
    auxiliary value and the shift applies to observations below the median;
    with ``"subject"`` the value is shared within subject and whole subjects
    below the median are shifted.
    """
    truth = np.asarray(truth, float)
    J = cond.J
    beta = truth[:2]
    G = np.array([[truth[2], truth[3]], [truth[3], truth[4]]])
    sigma2 = truth[5]
    if ase is None:
        ase = asymptotic_se(J, truth)
    b = rng.multivariate_normal(np.zeros(2), G, size=J, method="eigh")
    if cond.aux_level == "subject":
        ability = np.repeat(rng.standard_normal(J), 10)
    else:
        ability = rng.standard_normal(10 * J)
    e = rng.normal(0.0, math.sqrt(sigma2), size=(J, 10))
    below = (ability < np.median(ability)).reshape(J, 10)
    k = param_index(cond.changed_param)
    shift = cond.d * ase[k] * below
    intercept = beta[0] + b[:, :1] + (shift if k == 0 else 0.0)
    slope = beta[1] + b[:, 1:] + (shift if k == 1 else 0.0)
    y = intercept + slope * DAYS[None, :] + e
    base = design(J)
    return LongDataset(base.cluster, y.ravel(), base.X, base.Z, ability,
                       base.fixed_names, base.random_names)


def run_replication(cond: SimCondition, truth, tables: Mapping[str, NullTable], rep: int,
                    alpha: float = 0.05, ase=None, info_scale: str = "total",
                    opts: FitOptions | None = None) -> dict:
    """One dataset: fit, score, test. Returns rejection flags or a failure note."""
    data = generate_dataset(cond, truth, cond.stream(rep), ase)
    try:
        fit = fit_ml(data, opts=opts)
    except ModelError as exc:
        return {"failed": str(exc)}
    if not fit.converged:
        return {"failed": fit.message}
    names = fit.spec.names
    testable = [p for p in cond.tested_params if names[param_index(p)] not in fit.boundary]
    out = {"failed": None, "boundary": bool(fit.boundary), "reject": {}}
    if not testable:
        return out
    try:
        results = run_tests(fit, data, [param_index(p) for p in testable], cond.kinds, tables,
                            alpha, info_scale=info_scale)
    except (ModelError, ValueError) as exc:
        return {"failed": str(exc)}
    for p, res in zip(np.repeat(testable, len(cond.kinds)), results):
        out["reject"][f"{p}|{res.kind}"] = bool(res.reject)
    return out


@dataclass
class PowerTable:
    """Rejection counts keyed by ``(J, d, changed, tested, kind)``."""

    rejections: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)  # (J, d, changed) -> (failed, replications)
    alpha: float = 0.05

    def rate(self, key) -> float:
        return self.rejections[key] / self.tests[key]

    def se(self, key) -> float:
        p = self.rate(key)
        return math.sqrt(p * (1 - p) / self.tests[key])

    def merge(self, other: "PowerTable") -> None:
        for k, v in other.rejections.items():
            self.rejections[k] = self.rejections.get(k, 0) + v
        for k, v in other.tests.items():
            self.tests[k] = self.tests.get(k, 0) + v
        for k, (f, r) in other.failures.items():
            f0, r0 = self.failures.get(k, (0, 0))
            self.failures[k] = (f0 + f, r0 + r)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for key in sorted(self.tests, key=str):
            J, d, changed, tested, kind = key
            rows.append({"n": 10 * J, "J": J, "d": d, "changed": changed, "tested": tested,
                         "statistic": kind, "rejections": self.rejections[key],
                         "tests": self.tests[key], "rate": self.rate(key), "se": self.se(key)})
        return pd.DataFrame(rows)

    def layout(self, changed: str, kind: str = "sn") -> pd.DataFrame:
        """Wide table: rows (n, tested parameter), columns d, values in percent."""
        df = self.to_frame()
        df = df[(df.changed == changed) & (df.statistic == kind)]
        wide = (100 * df.pivot_table(index=["n", "tested"], columns="d", values="rate"))
        order = {p: i for i, p in enumerate(PARAMS)}
        return wide.sort_index(key=lambda s: s.map(order) if s.name == "tested" else s).round(1)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "entries": self.to_frame().to_dict(orient="records"),
            "failures": [{"J": k[0], "d": k[1], "changed": k[2], "failed": f, "replications": r}
                         for k, (f, r) in sorted(self.failures.items(), key=str)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerTable":
        t = cls(alpha=d.get("alpha", 0.05))
        for e in d["entries"]:
            key = (int(e["J"]), float(e["d"]), e["changed"], e["tested"], e["statistic"])
            t.rejections[key] = int(e["rejections"])
            t.tests[key] = int(e["tests"])
        for f in d["failures"]:
            t.failures[(int(f["J"]), float(f["d"]), f["changed"])] = (int(f["failed"]), int(f["replications"]))
        return t


def _run_chunk(args) -> PowerTable:
    cond, truth, tables, reps, alpha, info_scale = args
    ase = asymptotic_se(cond.J, truth)
    table = PowerTable(alpha=alpha)
    failed = 0
    J, d, changed = cond.J, float(cond.d), cond.changed_param
    for rep in reps:
        res = run_replication(cond, truth, tables, rep, alpha, ase, info_scale)
        if res["failed"] is not None:
            failed += 1
            continue
        for label, rej in res["reject"].items():
            tested, kind = label.split("|")
            key = (J, d, changed, tested, kind)
            table.rejections[key] = table.rejections.get(key, 0) + int(rej)
            table.tests[key] = table.tests.get(key, 0) + 1
    table.failures[(J, d, changed)] = (failed, len(reps))
    return table


def run_condition(cond: SimCondition, truth, tables, alpha=0.05, jobs: int = 1,
                  info_scale: str = "total", chunk: int = 50) -> PowerTable:
    chunks = [(cond, truth, tables, range(s, min(cond.replications, s + chunk)), alpha, info_scale)
              for s in range(0, cond.replications, chunk)]
    table = PowerTable(alpha=alpha)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    for part in parts:
        table.merge(part)
    return table


def run_power_study(conds, truth=None, tables: Mapping[str, NullTable] | None = None,
                    jobs: int = 1, alpha: float = 0.05, checkpoint_dir=None,
                    info_scale: str = "total", progress=None) -> PowerTable:
    """Run every condition; per-condition checkpoints make the study resumable.

    Replication ``i`` of a condition uses a stream seeded by
    ``(seed, J, d, changed, i)``, so results do not depend on ``jobs`` or on
    the order of ``conds``.
    """
    truth = default_truth() if truth is None else np.asarray(truth, float)
    tables = tables or {}
    missing = {k for c in conds for k in c.kinds} - set(tables)
    if missing:
        raise ValueError(f"no null tables for {sorted(missing)}")
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    total = PowerTable(alpha=alpha)
    for i, cond in enumerate(conds):
        path = ckpt / f"{cond.tag()}.json" if ckpt else None
        if path is not None and path.exists():
            part = PowerTable.from_dict(json.loads(path.read_text()))
        else:
            part = run_condition(cond, truth, tables, alpha, jobs, info_scale)
            if path is not None:
                path.write_text(json.dumps(part.to_dict()))
        total.merge(part)
        if progress:
            progress(i + 1, len(conds), cond)
    bad = [k for k, (f, r) in total.failures.items() if f > MAX_FAILURE_RATE * r]
    if bad:
        raise StudyError(f"fit failure rate above {MAX_FAILURE_RATE:.0%} in conditions {bad}", total)
    return total
