"""Command-line interface: ``spatialvr fit | simulate | report``.

Exit codes: 0 success, 2 invalid input, 3 fit finished but some R-hat
exceeds 1.01, 4 sampler initialisation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .files import atomic_write_text, csv_text, sha256_file

logger = logging.getLogger("spatialvr")

EXIT_OK, EXIT_INPUT, EXIT_RHAT, EXIT_INIT = 0, 2, 3, 4
RHAT_LIMIT = 1.01
THREADS_ENV = "SPATIALVR_THREADS"


class InputError(Exception):
    """Bad arguments or input files; reported on one line with exit code 2."""


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _methods(text: str) -> list[str]:
    from .fit import METHODS

    out = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise InputError(f"unknown method(s) {bad}; choose from {','.join(METHODS)}")
    return list(dict.fromkeys(out))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, command: str, config: dict, seed: int, inputs: list[Path], finished: bool = False,
                    started: str | None = None) -> str:
    started = started or _now()
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "tool": "spatialvr",
        "version": __version__,
        "started": started,
        "finished": _now() if finished else None,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return started


def _fit_config(args):
    from .sampler import FitConfig

    base = FitConfig.fast() if args.fast else FitConfig()
    iters = args.iters if args.iters is not None else base.iterations
    warmup = args.warmup if args.warmup is not None else (base.warmup if args.iters is None else iters // 2)
    try:
        return FitConfig(
            chains=args.chains if args.chains is not None else base.chains,
            iterations=iters,
            warmup=warmup,
            seed=args.seed,
        )
    except ValueError as exc:
        raise InputError(str(exc))


# -- fit ----------------------------------------------------------------------


def _draws_csv(archive) -> str:
    header = ["chain", "draw", *archive.columns, "accept_stat", "divergent", "tree_depth"]
    rows = []
    counters: dict[int, int] = {}
    for k in range(archive.values.shape[0]):
        c = int(archive.chain[k])
        d = counters.get(c, 0)
        counters[c] = d + 1
        rows.append([c, d, *map(repr, archive.values[k].tolist()), repr(float(archive.accept_stat[k])),
                     int(archive.divergent[k]), int(archive.tree_depth[k])])
    return csv_text(header, rows)


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def cmd_fit(args) -> int:
    from .effects import EFFECT_COLUMNS, effects_rows, post_windows, summarize_estimate, summary_dict
    from .fit import BAYESIAN, fit_method, method_config, prepare, to_original
    from .model import SvrHyperPriors
    from .panel import PanelFormatError, ZeroVarianceError, load_panel_csv

    data_path = Path(args.data)
    if not data_path.is_file():
        raise InputError(f"data file not found: {data_path}")
    inputs = [data_path]
    if args.meta:
        if not Path(args.meta).is_file():
            raise InputError(f"metadata file not found: {args.meta}")
        inputs.append(Path(args.meta))
    priors = SvrHyperPriors()
    if args.config:
        if not Path(args.config).is_file():
            raise InputError(f"config file not found: {args.config}")
        inputs.append(Path(args.config))
        try:
            priors = SvrHyperPriors.from_json(args.config)
        except (ValueError, TypeError) as exc:
            raise InputError(f"{args.config}: {exc}")
    methods = _methods(args.methods)
    fitcfg = _fit_config(args)
    try:
        data = load_panel_csv(data_path, t0=args.t0, meta=args.meta)
        model_data, scaling, D = prepare(data, detrend_series=not args.no_detrend)
        windows = post_windows(data)
    except (PanelFormatError, ZeroVarianceError, ValueError, KeyError) as exc:
        raise InputError(f"{data_path}: {exc}")

    out = Path(args.out)
    workers = _threads(args.threads)
    config = {
        "data": str(data_path), "t0": data.t0, "meta": args.meta, "methods": methods, "detrend": not args.no_detrend,
        "fit": asdict(fitcfg), "priors": priors.to_dict(), "threads": workers,
    }
    started = _write_manifest(out, "fit", config, fitcfg.seed, inputs)

    effect_rows, summaries, worst = [], {}, 1.0
    for m in methods:
        logger.info("fitting %s", m)
        est = fit_method(m, model_data, D, method_config(fitcfg, m), priors, workers)
        est = to_original(est, scaling, data.n_treated, data.t0, data.n_times)
        summ = summarize_estimate(est, data.treated, data.t0, windows)
        effect_rows.extend(effects_rows(summ, data, windows))
        summaries[m] = summary_dict(summ, data)
        if m in BAYESIAN and est.archive is not None:
            atomic_write_text(out / f"draws_{m}.csv", _draws_csv(est.archive))
            atomic_write_text(out / f"diagnostics_{m}.json",
                              json.dumps(_clean({"summary": est.archive.summary, **est.diagnostics}), indent=1) + "\n")
        r = est.diagnostics.get("max_rhat")
        if r is not None and not math.isnan(r):
            worst = max(worst, r)
    atomic_write_text(out / "effects.csv", csv_text(EFFECT_COLUMNS, effect_rows))
    atomic_write_text(out / "summary.json", json.dumps(_clean(summaries), indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "fit", config, fitcfg.seed, inputs, finished=True, started=started)
    if worst > RHAT_LIMIT:
        print(f"warning: max R-hat {worst:.4f} exceeds {RHAT_LIMIT}; results written but flagged", file=sys.stderr)
        return EXIT_RHAT
    return EXIT_OK


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .sampler import FitConfig
    from .simulation import full_grid, grid_from_json, metrics_csv, run_grid

    inputs = []
    opts = {}
    if args.paper_grid:
        grid = full_grid(seed=args.seed)
    elif args.grid:
        gpath = Path(args.grid)
        if not gpath.is_file():
            raise InputError(f"grid file not found: {gpath}")
        inputs.append(gpath)
        try:
            defn = json.loads(gpath.read_text())
            defn.setdefault("seed", args.seed)
            grid, opts = grid_from_json(defn)
        except (ValueError, TypeError, KeyError) as exc:
            raise InputError(f"{gpath}: invalid grid: {exc}")
    else:
        raise InputError("one of --grid or --paper-grid is required")
    L = args.replications if args.replications is not None else int(opts.get("L", 200))
    if L < 1:
        raise InputError("--replications must be >= 1")
    methods = _methods(args.methods if args.methods else ",".join(opts.get("methods", ["svr"])))
    try:
        if args.fit_iters is not None:
            fitcfg = FitConfig(iterations=args.fit_iters, warmup=args.fit_iters // 2, seed=args.seed)
        elif "fitcfg" in opts:
            fitcfg = FitConfig(**{**opts["fitcfg"], "seed": args.seed})
        else:
            fitcfg = FitConfig.fast(seed=args.seed) if args.fast else FitConfig(seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid fit configuration: {exc}")

    out = Path(args.out)
    workers = _threads(args.threads)
    config = {"scenarios": len(grid), "grid": [asdict(c) for c in grid], "L": L, "methods": methods,
              "fit": asdict(fitcfg), "threads": workers}
    started = _write_manifest(out, "simulate", config, args.seed, inputs)
    rows = run_grid(grid, methods, L, fitcfg, out_dir=out, workers=workers, max_scenarios=args.stop_after)
    complete = len(rows) == len(grid) * len(methods)
    if complete:
        atomic_write_text(out / "metrics.csv", metrics_csv(rows))
        _write_manifest(out, "simulate", config, args.seed, inputs, finished=True, started=started)
    else:
        print(f"stopped after {len(rows) // len(methods)} of {len(grid)} scenarios; rerun to resume", file=sys.stderr)
    flagged = [r for r in rows if r.get("flagged")]
    for r in flagged:
        print(f"flagged: {r['method']} T0={r['t0']} post={r['t_post']} rho2_s={r['rho2_s']} {r['error_mode']}: "
              f"{r['n_failed']} failed replications", file=sys.stderr)
    return EXIT_OK


# -- report -------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    import csv

    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def simulation_tables(rows: list[dict]) -> list[dict]:
    """Long rows keyed by (metric, T0, post length, error mode, rho2_s), one column per method."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    keys = list(dict.fromkeys((r["t0"], r["t_post"], r["error_mode"], r["rho2_s"]) for r in rows))
    index = {(r["t0"], r["t_post"], r["error_mode"], r["rho2_s"], r["method"]): r for r in rows}
    out = []
    for metric in ("bias", "mse", "acp"):
        for t0, tp, mode, rho in keys:
            rec = {"metric": metric, "t0": t0, "t_post": tp, "error_mode": mode, "rho2_s": rho}
            for m in methods:
                r = index.get((t0, tp, mode, rho, m))
                rec[m] = r[metric] if r else ""
            out.append(rec)
    return out


def fit_tables(summary: dict) -> list[dict]:
    """Per method and phase: an estimate row and a CI row, one column per treated unit (by distance)."""
    out = []
    for method, body in summary.items():
        for phase, units in body["phases"].items():
            order = sorted(units, key=lambda u: units[u]["distance"])

            def cell(v):
                return "" if v is None else f"{v:.3f}"

            est = {"method": method, "phase": phase, "row": "estimate"}
            ci = {"method": method, "phase": phase, "row": "CI"}
            for u in order:
                col = f"{u} ({units[u]['distance']:g})"
                est[col] = cell(units[u]["median"])
                lo, hi = units[u]["lo"], units[u]["hi"]
                ci[col] = "" if lo is None else f"({cell(lo)}, {cell(hi)})"
            out.extend([est, ci])
        rm = {"method": method, "phase": "pre", "row": "RMSPE"}
        for u, v in body["rmspe"].items():
            col = next((k for k in out[-1] if k.startswith(f"{u} (")), u)
            rm[col] = "" if v is None else f"{v:.3f}"
        out.append(rm)
    return out


def cmd_report(args) -> int:
    src = Path(args.inp)
    if not src.is_dir():
        raise InputError(f"not a directory: {src}")
    if (src / "metrics.csv").is_file():
        table = simulation_tables(_read_csv(src / "metrics.csv"))
        name = "report_simulation"
    elif (src / "summary.json").is_file():
        table = fit_tables(json.loads((src / "summary.json").read_text()))
        name = "report_fit"
    else:
        raise InputError(f"{src}: no metrics.csv or summary.json to report on")
    if not table:
        raise InputError(f"{src}: nothing to report")
    if args.format == "json":
        text = json.dumps(table, indent=1) + "\n"
    else:
        header = list(dict.fromkeys(k for row in table for k in row))
        text = csv_text(header, [[row.get(h, "") for h in header] for row in table])
    atomic_write_text(src / f"{name}.{args.format}", text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialvr", description="Spatial vertical regression for panel causal studies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit methods on a panel and write effects")
    f.add_argument("--data", required=True, help="long-format panel CSV")
    g = f.add_mutually_exclusive_group()
    g.add_argument("--t0", type=int, help="number of pre-treatment periods")
    g.add_argument("--meta", help="JSON with t0 and optional phases")
    f.add_argument("--config", help="JSON of hyperprior overrides")
    f.add_argument("--methods", default="svr", help="comma list of svr,sc,sr,ols,bvr,bsc (default: svr)")
    f.add_argument("--chains", type=int)
    f.add_argument("--iters", type=int, help="iterations per chain including warmup")
    f.add_argument("--warmup", type=int)
    f.add_argument("--fast", action="store_true", help="3 x 2000 iterations, 1000 warmup")
    f.add_argument("--seed", type=int, default=20240101)
    f.add_argument("--no-detrend", action="store_true", help="skip removing the control-mean trend")
    f.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or CPU count)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the simulation grid")
    s.add_argument("--grid", help="grid definition JSON")
    s.add_argument("--paper-grid", action="store_true", help="the full 84-scenario design")
    s.add_argument("--replications", type=int)
    s.add_argument("--methods", help="comma list (default: from the grid file or svr)")
    s.add_argument("--fit-iters", type=int, help="sampler iterations per chain (warmup = half)")
    s.add_argument("--fast", action="store_true", help="fast sampler preset")
    s.add_argument("--seed", type=int, default=20240101)
    s.add_argument("--threads", type=int)
    s.add_argument("--stop-after", type=int, help="stop after this many newly computed scenarios")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="consolidate fit or simulation outputs into tables")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .sampler import SamplerInitError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SamplerInitError as exc:
        print(f"error: sampler initialisation failed: {exc}", file=sys.stderr)
        return EXIT_INIT


if __name__ == "__main__":
    sys.exit(main())
