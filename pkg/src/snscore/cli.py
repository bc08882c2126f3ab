"""Command-line front end.

Subcommands: ``fit``, ``test``, ``critvals``, ``power`` and ``trace``. Every
command accepts ``--config FILE``; keys in that JSON object override the
corresponding flags (dashes or underscores both work). JSON outputs carry a
``config`` echo and package ``versions``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .critvals import ALPHAS, attach, load_or_build
from .model import BoundaryError, FitOptions, ModelError, fit_ml, read_long_csv
from .pipeline import TRADITIONAL, run_tests
from .scores import ScoreMatrix, casewise_scores, cumulative_process
from .simulate import STUDY_D, PARAMS, SimCondition, StudyError, default_truth, run_power_study
from .stats import cvm_stat, dm_stat, maxlm_stat, ordinal_cutpoints, sn_stat

logger = logging.getLogger("snscore")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 1, 2, 3
TEST_KINDS = ("sn", "sn_ord", "cvm", "dm", "maxlm")


class UsageError(Exception):
    pass


class NonConvergence(Exception):
    pass


def versions() -> dict:
    return {"snscore": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "python": platform.python_version()}


def _csv_list(text):
    if text is None or isinstance(text, list):
        return text
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _num_list(text, cast):
    return [cast(t) for t in _csv_list(text)] if text is not None else None


# -- argument parsing ----------------------------------------------------------


def _data_flags(p: argparse.ArgumentParser, aux: bool = False) -> None:
    p.add_argument("--data", help="long-format CSV")
    p.add_argument("--cluster", help="cluster id column")
    p.add_argument("--response", help="response column")
    p.add_argument("--fixed", default="", help="comma-separated fixed-effect columns")
    p.add_argument("--random", default="", help="comma-separated random-slope columns")
    p.add_argument("--no-fixed-intercept", action="store_true")
    p.add_argument("--no-random-intercept", action="store_true")
    p.add_argument("--max-iter", type=int, default=500, help="fit iteration limit")
    if aux:
        p.add_argument("--aux", help="auxiliary column used to order the scores")


def _null_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--null-cache", help="directory of cached null tables")
    p.add_argument("--null-reps", type=int, default=10_000, help="bridge replications per table")
    p.add_argument("--grid-size", type=int, default=1000, help="bridge grid size")
    p.add_argument("--trim", type=float, default=0.1, help="maxLM trimming fraction")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="snscore", description=__doc__.splitlines()[0])
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file whose keys override flags")
        p.add_argument("--out", help="output path (JSON unless stated otherwise)")
        return p

    p = add("fit", "fit the mixed model by maximum likelihood")
    _data_flags(p)

    p = add("test", "fit the model and run fluctuation tests on its scores")
    _data_flags(p, aux=True)
    _null_flags(p)
    p.add_argument("--params", help="comma-separated parameter names or positions (default: all)")
    p.add_argument("--stats", default="sn", help=f"comma-separated subset of {','.join(TEST_KINDS)}")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0, help="seed of the null tables")
    p.add_argument("--trace-out", help="per-k trace CSV (default: --out with .csv suffix)")
    p.add_argument("--info-scale", choices=("total", "per_obs"), default="total")

    p = add("critvals", "simulate null tables")
    _null_flags(p)
    p.add_argument("--stats", default="sn,cvm,dm,maxlm")
    p.add_argument("--q", type=int, default=1, help="number of jointly tested parameters")
    p.add_argument("--seed", type=int, default=0)

    p = add("power", "run the simulation study")
    _null_flags(p)
    p.add_argument("--J", default="24", help="comma-separated numbers of subjects")
    p.add_argument("--d", default=",".join(map(str, STUDY_D)), help="comma-separated change sizes")
    p.add_argument("--changed", default="beta0", help="comma-separated changing parameters")
    p.add_argument("--params", default=",".join(PARAMS), help="tested parameters")
    p.add_argument("--stats", default="sn,cvm,dm,maxlm")
    p.add_argument("--replications", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--aux-level", choices=("observation", "subject"), default="observation")
    p.add_argument("--info-scale", choices=("total", "per_obs"), default="total")
    p.add_argument("--checkpoint-dir", help="per-condition checkpoints (resumable)")
    p.add_argument("--truth", help="JSON file with a 'theta' mapping (default: frozen sleepstudy fit)")

    p = add("trace", "statistics and per-k trace from a score CSV")
    _null_flags(p)
    p.add_argument("--scores", help="CSV with one column per score and an auxiliary column")
    p.add_argument("--aux", default="aux")
    p.add_argument("--params", help="score columns to test (default: all but aux)")
    p.add_argument("--stats", default="sn")
    p.add_argument("--info", help="JSON file with an information matrix (needed by cvm/dm/maxlm)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    return top


def parse_config(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        for key, value in cfg.items():
            attr = key.replace("-", "_")
            if attr == "command" or not hasattr(args, attr):
                raise UsageError(f"config key {key!r} is not an option of '{args.command}'")
            setattr(args, attr, value)
    for name in ("data", "scores", "truth", "info"):
        path = getattr(args, name, None)
        if path is not None and not Path(path).is_file():
            raise UsageError(f"--{name}: file {path} does not exist")
    return args


def echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}


def _write_json(obj: dict, out) -> None:
    text = json.dumps(obj, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- commands -----------------------------------------------------------------


def _load(args, aux: bool = False):
    for name in ("data", "cluster", "response"):
        if not getattr(args, name):
            raise UsageError(f"--{name} is required")
    return read_long_csv(args.data, args.cluster, args.response, _csv_list(args.fixed) or [],
                         _csv_list(args.random) or [], args.aux if aux else None,
                         not args.no_fixed_intercept, not args.no_random_intercept)


def _fit(data, args):
    fit = fit_ml(data, opts=FitOptions(max_iter=args.max_iter))
    if not fit.converged:
        raise NonConvergence(f"fit did not converge: {fit.message}")
    return fit


def cmd_fit(args) -> int:
    data = _load(args)
    fit = _fit(data, args)
    _write_json({"fit": fit.to_dict(), "n": data.n, "clusters": data.n_clusters,
                 "balanced": data.balanced, "config": echo(args), "versions": versions()}, args.out)
    return EXIT_OK


def _check_kinds(kinds, allowed=TEST_KINDS):
    bad = [k for k in kinds if k not in allowed]
    if bad or not kinds:
        raise UsageError(f"unknown statistic(s) {bad}; choose from {', '.join(allowed)}")
    return kinds


def _table(args, kind, cutpoints=None):
    return load_or_build(kind, 1, args.grid_size, args.null_reps, args.seed, args.null_cache,
                         trim=args.trim, cutpoints=cutpoints)


def _tables_for(args, kinds, scores: ScoreMatrix):
    tables, cut = {}, None
    for kind in kinds:
        if kind == "sn_ord":
            cut = ordinal_cutpoints(scores.aux_sorted)
            if cut.size == 0:
                raise UsageError("sn_ord needs an auxiliary variable with at least two levels")
            tables[kind] = _table(args, kind, cut / scores.n)
        else:
            tables[kind] = _table(args, kind)
    return tables, cut


def _write_traces(results, path) -> None:
    frames = []
    for r in results:
        df = r.trace_frame()
        df.insert(0, "statistic", r.kind)
        df.insert(0, "param", ",".join(r.tested_params))
        frames.append(df)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def _trace_path(args):
    if getattr(args, "trace_out", None):
        return args.trace_out
    return str(Path(args.out).with_suffix(".csv")) if args.out else None


def cmd_test(args) -> int:
    if not args.aux:
        raise UsageError("--aux is required")
    kinds = _check_kinds(_csv_list(args.stats))
    data = _load(args, aux=True)
    fit = _fit(data, args)
    spec = fit.spec
    params = _csv_list(args.params) or list(spec.names)
    try:
        params = [int(p) if str(p).isdigit() else p for p in params]
        [spec.index(p) for p in params]
    except (KeyError, ValueError, IndexError) as exc:
        raise UsageError(f"unknown parameter: {exc}") from None
    scores = casewise_scores(fit, data, allow_boundary=True)
    tables, cut = _tables_for(args, kinds, scores)
    results = run_tests(fit, data, params, kinds, tables, args.alpha, scores=scores,
                        trim=args.trim, info_scale=args.info_scale, cutpoints=cut)
    trace = _trace_path(args)
    if trace:
        _write_traces(results, trace)
    _write_json({"results": [r.to_dict() for r in results], "fit": fit.to_dict(),
                 "config": echo(args), "versions": versions()}, args.out)
    return EXIT_OK


def cmd_critvals(args) -> int:
    kinds = _check_kinds(_csv_list(args.stats), ("sn", "cvm", "dm", "maxlm"))
    if args.q < 1:
        raise UsageError("--q must be positive")
    out = {}
    for kind in kinds:
        t = load_or_build(kind, args.q, args.grid_size, args.null_reps, args.seed, args.null_cache,
                          trim=args.trim)
        out[kind] = {str(a): t.critical_value(a) for a in ALPHAS}
    _write_json({"critical_values": out, "config": echo(args), "versions": versions()}, args.out)
    return EXIT_OK


def cmd_power(args) -> int:
    kinds = _check_kinds(_csv_list(args.stats), ("sn", "cvm", "dm", "maxlm"))
    tested = tuple(_csv_list(args.params))
    unknown = [p for p in tested + tuple(_csv_list(args.changed)) if p not in PARAMS]
    if unknown:
        raise UsageError(f"unknown parameter(s) {unknown}; choose from {', '.join(PARAMS)}")
    truth = default_truth()
    if args.truth:
        cfg = json.loads(Path(args.truth).read_text())
        truth = np.array([cfg["theta"][p] for p in PARAMS])
    try:
        conds = [SimCondition(J, d, changed, tested, tuple(kinds), args.replications, args.seed,
                              args.aux_level)
                 for changed in _csv_list(args.changed)
                 for J in _num_list(args.J, int) for d in _num_list(args.d, float)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tables = {k: _table(args, k) for k in kinds}

    def progress(i, total, cond):
        print(f"[{i}/{total}] {cond.tag()}", file=sys.stderr, flush=True)

    try:
        table = run_power_study(conds, truth, tables, args.jobs, args.alpha, args.checkpoint_dir,
                                args.info_scale, progress)
        code = EXIT_OK
    except StudyError as exc:
        logger.error("%s", exc)
        table, code = exc.table, EXIT_NUMERIC
    payload = {"power": table.to_dict(), "config": echo(args), "versions": versions()}
    if args.out:
        out = Path(args.out)
        _write_json(payload, out.with_suffix(".json"))
        frames = []
        for changed in _csv_list(args.changed):
            for kind in kinds:
                wide = table.layout(changed, kind).reset_index()
                wide.insert(0, "statistic", kind)
                wide.insert(0, "changed", changed)
                frames.append(wide)
        pd.concat(frames, ignore_index=True).to_csv(out.with_suffix(".csv"), index=False)
    else:
        _write_json(payload, None)
    return code


def cmd_trace(args) -> int:
    if not args.scores:
        raise UsageError("--scores is required")
    kinds = _check_kinds(_csv_list(args.stats))
    S = ScoreMatrix.from_csv(args.scores, aux=args.aux)
    cols = _csv_list(args.params) or list(S.names)
    try:
        S.col_index(cols)
    except (KeyError, IndexError) as exc:
        raise UsageError(f"unknown score column: {exc}") from None
    P = None
    if any(k in TRADITIONAL for k in kinds):
        if not args.info:
            raise UsageError("--info is required for the traditional statistics")
        info = np.asarray(json.loads(Path(args.info).read_text()), dtype=float)
        if info.shape != (S.q, S.q):
            raise UsageError(f"information matrix must be {S.q} x {S.q}")
        P = cumulative_process(S, info)
    tables, cut = _tables_for(args, kinds, S)
    results = []
    for c in cols:
        for kind in kinds:
            if kind == "sn":
                res = sn_stat(S, [c])
            elif kind == "sn_ord":
                res = sn_stat(S, [c], cutpoints=cut)
            elif kind == "cvm":
                res = cvm_stat(P, [c])
            elif kind == "dm":
                res = dm_stat(P, [c])
            else:
                res = maxlm_stat(P, [c], trim=args.trim)
            results.append(attach(res, tables[kind], args.alpha))
    if args.out:
        _write_traces(results, args.out)
        summary = Path(args.out).with_suffix(".json")
        _write_json({"results": [r.to_dict() for r in results], "config": echo(args),
                     "versions": versions()}, summary)
    else:
        _write_traces(results, sys.stdout)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "critvals": cmd_critvals, "power": cmd_power,
            "trace": cmd_trace}


def main(argv=None) -> int:
    try:
        args = parse_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    except UsageError as exc:
        print(f"snscore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"snscore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergence as exc:
        print(f"snscore: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except BoundaryError as exc:
        print(f"snscore: refused: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, np.linalg.LinAlgError) as exc:
        print(f"snscore: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"snscore: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
