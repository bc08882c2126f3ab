"""Fit -> scores -> statistics, shared by the CLI and the simulation harness."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .critvals import NullTable, attach
from .model import BoundaryError, FittedLmm, LongDataset
from .scores import ScoreMatrix, casewise_scores, cumulative_process
from .stats import TestResult, cvm_stat, dm_stat, maxlm_stat, sn_stat

TRADITIONAL = ("cvm", "dm", "maxlm")


def process_information(fitted: FittedLmm, n: int, info_scale: str = "total") -> np.ndarray:
    """Information matrix used to decorrelate the cumulative process.

    ``"total"`` is the expected information of the whole sample, as returned
    by the fit; ``"per_obs"`` divides it by ``n``.
    """
    if info_scale == "total":
        return fitted.info
    if info_scale == "per_obs":
        return fitted.info / n
    raise ValueError(f"unknown info_scale {info_scale!r}")


def run_tests(fitted: FittedLmm, data: LongDataset, params: Iterable, kinds: Iterable[str] = ("sn",),
              tables: Mapping[str, NullTable] | None = None, alpha: float = 0.05,
              scores: ScoreMatrix | None = None, trim: float = 0.1,
              info_scale: str = "total", cutpoints=None) -> list[TestResult]:
    """Test each parameter separately with each requested statistic.

    Parameters on the boundary of the variance-component space are refused.
    """
    spec = fitted.spec
    idx = [spec.index(p) for p in params]
    boundary = [spec.names[i] for i in idx if spec.names[i] in fitted.boundary]
    if boundary:
        raise BoundaryError(f"cannot test boundary parameter(s) {', '.join(boundary)}")
    if scores is None:
        scores = casewise_scores(fitted, data, allow_boundary=True)
    kinds = list(kinds)
    P = None
    if any(k in TRADITIONAL for k in kinds):
        P = cumulative_process(scores, process_information(fitted, data.n, info_scale))
    out = []
    for i in idx:
        for kind in kinds:
            if kind == "sn":
                res = sn_stat(scores, [i])
            elif kind == "sn_ord":
                res = sn_stat(scores, [i], cutpoints="auto" if cutpoints is None else cutpoints)
            elif kind == "cvm":
                res = cvm_stat(P, [i])
            elif kind == "dm":
                res = dm_stat(P, [i])
            elif kind == "maxlm":
                res = maxlm_stat(P, [i], trim=trim)
            else:
                raise ValueError(f"unsupported statistic {kind!r}")
            if tables and kind in tables:
                attach(res, tables[kind], alpha)
            else:
                res.alpha = alpha
            out.append(res)
    return out
