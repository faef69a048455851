"""Command-line harness: replicated experiments, trace files and summaries.

Usage::

    bqo run CONFIG.json [--seed S] [--reps R] [--budget N] [--algo a,b]
                        [--problem NAME] [--out DIR] [--workers W]
    bqo selfcheck
    bqo plotdata TRACE_DIR [--out FILE]

Exit codes: 0 success, 1 configuration error, 2 check or run failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .driver import ALGORITHMS, Settings, run_bqo
from .errors import ConfigurationError
from .problems import make_problem

CONFIG_KEYS = {"problem", "algorithms", "budget", "n0", "replications", "seed", "out",
               "workers", "settings", "per_algorithm"}
EXIT_OK, EXIT_CONFIG, EXIT_FAIL = 0, 1, 2


def fmt(v):
    """17 significant digits, exact on round trip for doubles."""
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def replication_seed(base_seed, replication):
    """Independent seed for replication ``r``, unaffected by other replications."""
    ss = np.random.SeedSequence([int(base_seed), int(replication)])
    return int(ss.generate_state(2, dtype=np.uint64)[0])


# -- configuration --------------------------------------------------------------

def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, overrides=None):
    """Read and validate a JSON experiment config; flags in ``overrides`` win."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "problem":
            cfg["problem"] = dict(cfg.get("problem") or {}, name=v)
        else:
            cfg[k] = v
    return validate_config(cfg)


def validate_config(cfg):
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if "problem" not in cfg or not isinstance(cfg["problem"], dict):
        raise ConfigurationError("field 'problem': expected an object with a 'name'")
    cfg = dict(cfg)
    cfg.setdefault("algorithms", ["bqo_mc"])
    cfg.setdefault("budget", 50)
    cfg.setdefault("n0", None)
    cfg.setdefault("replications", 1)
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "bqo_out")
    cfg.setdefault("workers", None)
    cfg.setdefault("settings", {})
    cfg.setdefault("per_algorithm", {})
    if isinstance(cfg["algorithms"], str):
        cfg["algorithms"] = [a for a in cfg["algorithms"].split(",") if a]
    for a in cfg["algorithms"]:
        if a not in ALGORITHMS:
            raise ConfigurationError(f"field 'algorithms': unknown tag {a!r}; expected {ALGORITHMS}")
    if not cfg["algorithms"]:
        raise ConfigurationError("field 'algorithms': at least one algorithm is required")
    for key in ("budget", "replications", "seed"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise ConfigurationError(f"field {key!r}: expected an integer")
    if cfg["replications"] < 1:
        raise ConfigurationError("field 'replications': must be >= 1")
    if cfg["budget"] < 0:
        raise ConfigurationError("field 'budget': must be >= 0")
    for a in cfg["per_algorithm"]:
        if a not in ALGORITHMS:
            raise ConfigurationError(f"field 'per_algorithm': unknown tag {a!r}")
    make_problem(cfg["problem"])
    for a in cfg["algorithms"]:
        settings_for(cfg, a)
    return cfg


def settings_for(cfg, algo):
    raw = _merge(cfg["settings"], cfg["per_algorithm"].get(algo, {}))
    raw = dict(raw, acquisition=algo, budget=cfg["budget"])
    if cfg["n0"] is not None:
        raw["n0"] = cfg["n0"]
    try:
        return Settings.from_dict(raw)
    except TypeError as exc:
        raise ConfigurationError(f"field 'settings': {exc}") from exc


# -- traces ---------------------------------------------------------------------

def trace_columns(problem):
    cols = ["replication", "iteration", "algorithm"]
    cols += [f"x_{i}" for i in range(problem.dim_x)]
    cols += [f"w_{i}" for i in range(problem.dim_w)]
    cols += ["y"] + [f"xrec_{i}" for i in range(problem.dim_x)]
    if problem.has_true_G:
        cols.append("true_G")
    cols.append("max_a")
    return cols


def row_cells(row, problem):
    def vec(v, n):
        v = list(v)
        return [fmt(v[i]) if i < len(v) else "" for i in range(n)]

    cells = [str(row["replication"]), str(row["iteration"]), row["algorithm"]]
    cells += vec(row["x"], problem.dim_x) + vec(row["w"], problem.dim_w)
    cells += [fmt(row["y"])] + vec(row["x_rec"], problem.dim_x)
    if problem.has_true_G:
        cells.append(fmt(row["true_G"]))
    cells.append(fmt(row["max_a"]))
    return cells


def write_trace(path, trace, problem):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_columns(problem))
        for row in trace:
            w.writerow(row_cells(row, problem))
    # wall-clock times vary between runs, so they live beside the trace
    with open(str(path)[:-4] + ".timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "elapsed_s"])
        for row in trace:
            w.writerow([row["iteration"], fmt(row["elapsed"])])


def read_trace(path):
    """Parse a trace file back into rows of floats, ints and strings."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k in ("replication", "iteration"):
                    row[k] = int(v)
                elif k == "algorithm":
                    row[k] = v
                else:
                    row[k] = None if v == "" else float(v)
            rows.append(row)
    return rows


def trace_name(algo, rep):
    return f"trace_{algo}_r{rep:04d}.csv"


def _job(args):
    cfg, algo, rep, out = args
    problem = make_problem(cfg["problem"])
    settings = settings_for(cfg, algo)
    seed = replication_seed(cfg["seed"], rep)
    try:
        trace = run_bqo(problem, settings, np.random.default_rng(seed), replication=rep)
    except Exception as exc:  # recorded per replication, reported in the summary
        return {"algorithm": algo, "replication": rep, "seed": seed, "rows": 0, "aborted": 1,
                "message": f"{type(exc).__name__}: {exc}"}
    write_trace(Path(out) / trace_name(algo, rep), trace, problem)
    return {"algorithm": algo, "replication": rep, "seed": seed, "rows": len(trace),
            "aborted": int(trace.aborted), "message": trace.message}


# -- summaries ------------------------------------------------------------------

def summarize(traces, status=None):
    """Per-algorithm, per-iteration mean and standard error.

    ``traces`` maps ``(algorithm, replication)`` to parsed rows.  Returns a
    list of dicts with ``n`` replications contributing at each iteration.
    """
    failed = {}
    for s in status or []:
        failed[s["algorithm"]] = failed.get(s["algorithm"], 0) + int(s["aborted"])
    by = {}
    for (algo, _), rows in traces.items():
        for r in rows:
            by.setdefault((algo, r["iteration"]), []).append(r)
    out = []
    for (algo, it) in sorted(by):
        rows = by[(algo, it)]
        rec = {"algorithm": algo, "iteration": it, "n": len(rows), "failed": failed.get(algo, 0)}
        for key in ("true_G", "max_a"):
            vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=float)
            rec[f"mean_{key}"] = float(vals.mean()) if vals.size else None
            rec[f"se_{key}"] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else None
        out.append(rec)
    return out


SUMMARY_COLUMNS = ["algorithm", "iteration", "n", "mean_true_G", "se_true_G", "mean_max_a",
                   "se_max_a", "failed"]


def write_summary(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rec in summary:
            w.writerow([rec["algorithm"], rec["iteration"], rec["n"]]
                       + [fmt(rec[k]) for k in SUMMARY_COLUMNS[3:7]] + [rec["failed"]])


def load_traces(directory):
    traces = {}
    for p in sorted(Path(directory).glob("trace_*.csv")):
        if p.name.endswith(".timing.csv"):
            continue
        rows = read_trace(p)
        if rows:
            traces[(rows[0]["algorithm"], rows[0]["replication"])] = rows
    return traces


def load_status(directory):
    p = Path(directory) / "runs.csv"
    if not p.exists():
        return []
    with open(p, newline="") as fh:
        return list(csv.DictReader(fh))


# -- commands -------------------------------------------------------------------

def cmd_run(cfg, log=print):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    jobs = [(cfg, a, r, str(out)) for a in cfg["algorithms"] for r in range(cfg["replications"])]
    workers = cfg["workers"] or os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        status = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            status = list(pool.map(_job, jobs))
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["algorithm", "replication", "seed", "rows", "aborted", "message"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(status)
    write_summary(out / "summary.csv", summarize(load_traces(out), status))
    bad = [s for s in status if s["aborted"]]
    for s in bad:
        log(f"replication {s['replication']} of {s['algorithm']} aborted: {s['message']}")
    log(f"wrote {len(jobs) - len(bad)} complete traces to {out}")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_plotdata(directory, out=None, log=print):
    traces = load_traces(directory)
    if not traces:
        raise ConfigurationError(f"no trace files in {directory}")
    out = Path(out) if out else Path(directory) / "plot.csv"
    write_summary(out, summarize(traces, load_status(directory)))
    log(f"wrote {out}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="bqo", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run replicated experiments from a JSON config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--reps", type=int, dest="replications")
    r.add_argument("--budget", type=int)
    r.add_argument("--algo", dest="algorithms")
    r.add_argument("--problem")
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    sub.add_parser("selfcheck", help="fast numerical self-checks")
    p = sub.add_parser("plotdata", help="aggregate trace files into mean and SE per iteration")
    p.add_argument("directory")
    p.add_argument("--out")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            over = {k: getattr(args, k) for k in ("seed", "replications", "budget", "algorithms",
                                                  "problem", "out", "workers")}
            return cmd_run(load_config(args.config, over))
        if args.command == "plotdata":
            return cmd_plotdata(args.directory, args.out)
        from .selfcheck import run_checks
        return EXIT_OK if run_checks() else EXIT_FAIL
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
