"""Command line: ``rcmlab run|plot|validate|env-dump``.

Exit codes: 0 success, 2 success with warnings (censored scales,
non-convergent moments), 1 failure (bad config, failed checks, errors).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .env import sample_environment, save_environment
from .errors import RCMError
from .experiments import run_experiment

__all__ = ["main", "emit_plot_data", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_WARN = 0, 1, 2


def _header(sha: str) -> str:
    return f"# rcmlab-schema={SCHEMA_VERSION} config_sha256={sha}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_csv(path: Path, sha: str, rows: list) -> None:
    keys: list = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        fh.write(_header(sha) + "\n")
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _resolve_outdir(cfg, config_path: Path, override: str | None) -> Path:
    if override:
        return Path(override)
    out = Path(cfg.output.directory)
    return out if out.is_absolute() else config_path.parent / out


def cmd_run(args) -> int:
    path = Path(args.config)
    try:
        cfg, sha = load_config(path)
    except RCMError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    if args.threads is not None:
        cfg.ensemble.threads = args.threads
    outdir = _resolve_outdir(cfg, path, args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        res = run_experiment(cfg, outdir)
    except (RCMError, ValueError) as exc:
        print(f"{path}: experiment {cfg.experiment} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_csv(outdir / "results.csv", sha, res.rows)
    with open(outdir / "results.jsonl", "w") as fh:
        head = dict(record="header", schema=SCHEMA_VERSION, config_sha256=sha, experiment=cfg.experiment,
                    environment=cfg.spec().to_dict(), status=res.status)
        fh.write(json.dumps(_jsonable(head), sort_keys=True) + "\n")
        for rec in res.records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
        for w in res.warnings:
            fh.write(json.dumps({"record": "warning", "message": w}, sort_keys=True) + "\n")
        for f in res.failures:
            fh.write(json.dumps({"record": "failure", "message": f}, sort_keys=True) + "\n")
    finished = _dt.datetime.now(_dt.timezone.utc)
    lines = [_header(sha), f"experiment: {cfg.experiment}", f"config: {path}",
             f"started: {started.isoformat()}", f"finished: {finished.isoformat()}",
             f"status: {res.status.upper()}", ""]
    lines += res.summary
    if res.warnings:
        lines += ["", "warnings:"] + [f"  {w}" for w in res.warnings]
    if res.failures:
        lines += ["", "failures:"] + [f"  {f}" for f in res.failures]
    (outdir / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[5:]))
    return {"ok": EXIT_OK, "warn": EXIT_WARN, "fail": EXIT_FAIL}[res.status]


def cmd_validate(args) -> int:
    try:
        cfg, sha = load_config(args.config)
    except RCMError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    print(f"{args.config}: OK ({cfg.experiment}, sha256 {sha[:12]})")
    return EXIT_OK


def cmd_env_dump(args) -> int:
    path = Path(args.config)
    try:
        cfg, _ = load_config(path)
        env = sample_environment(cfg.spec())
    except RCMError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out) if args.out else _resolve_outdir(cfg, path, None) / "environment.rcmb"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_environment(out, env)
    print(f"wrote {out} (d={env.d}, L={env.L}, {env.a.size} edges)")
    return EXIT_OK


# --------------------------------------------------------------------------
# Plot data
# --------------------------------------------------------------------------

def _plot_csv(path: Path, sha: str, columns: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(sha) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def emit_plot_data(results_dir) -> list[Path]:
    """Write per-figure CSVs (x, y, ci_lo, ci_hi, ...) next to the results.

    Raises
    ------
    FileNotFoundError
        If the directory holds no ``results.jsonl``.
    """
    d = Path(results_dir)
    src = d / "results.jsonl"
    if not src.is_file():
        raise FileNotFoundError(f"no results in {d} (missing results.jsonl)")
    records = [json.loads(ln) for ln in src.read_text().splitlines() if ln.strip()]
    head = records[0]
    sha, kind = head["config_sha256"], head["experiment"]
    written = []

    def emit(name, columns, rows):
        p = d / name
        _plot_csv(p, sha, columns, rows)
        written.append(p)

    for rec in records[1:]:
        r = rec.get("record")
        if kind == "clt-scan" and r == "moment_norm" and rec["statistic"] == "phi":
            emit(f"plot_CR_p{rec['p']:g}.csv", ["R", "y", "ci_lo", "ci_hi", "non_convergent"],
                 [(R, n["value"], n["ci_lo"], n["ci_hi"], int(n["non_convergent"])) for R, n in zip(rec["R"], rec["norms"])])
        elif kind == "growth" and r == "growth_curve":
            cols = ["x", "y", "ci_lo", "ci_hi", "shape_ref"]
            dim = rec["d"]
            c = rec["fits"]["shape"]["c"]
            rows = []
            for x, n in zip(rec["x"], rec["curve"]):
                ref = math.sqrt(x) if dim == 1 else (math.sqrt(math.log1p(x)) if dim == 2 else 1.0)
                row = [x, n["value"], n["ci_lo"], n["ci_hi"], c * ref]
                if dim == 2:
                    row.append(math.sqrt(math.log1p(x)))
                rows.append(row)
            if dim == 2:
                cols.append("log_half_1px")
            emit("plot_growth.csv", cols, rows)
        elif kind == "scales" and r == "r_diamond_tail":
            emit("plot_r_diamond_tail.csv", ["m", "y", "ci_lo", "ci_hi", "log2_y"],
                 [(t["m"], t["probability"], t["probability"], t["probability"],
                   math.log2(t["probability"]) if t["probability"] > 0 else "-inf") for t in rec["tail"]])
        elif kind == "meyers" and r == "meyers":
            rows = []
            for R, alphas in rec["alpha"].items():
                a = np.array([x for x in alphas if x is not None], dtype=float)
                lo, hi = (np.quantile(a, [0.025, 0.975]) if len(a) > 1 else (a.mean(), a.mean()))
                rows.append((float(R), float(a.mean()), float(lo), float(hi)))
            emit("plot_hole_filling.csv", ["R", "y", "ci_lo", "ci_hi"], rows)
        elif kind == "green" and r == "green_norm":
            emit("plot_green_norm.csv", ["x", "y", "ci_lo", "ci_hi"],
                 [(x, n, n, n) for x, n in zip(rec["radii"], rec["norms"])])
    if not written:
        raise FileNotFoundError(f"no plottable records for experiment {kind!r} in {d}")
    return written


def cmd_plot(args) -> int:
    try:
        written = emit_plot_data(args.results)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcmlab", description="Random conductance model corrector laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the experiment described by a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--threads", type=int, help="worker processes (overrides the config and RCMLAB_THREADS)")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("plot", help="write per-figure CSVs from a results directory")
    p.add_argument("results")
    p.set_defaults(func=cmd_plot)
    p = sub.add_parser("validate", help="check a config file against the schema")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("env-dump", help="sample the configured environment and write it in binary form")
    p.add_argument("config")
    p.add_argument("--out", help="output file (default <output.directory>/environment.rcmb)")
    p.set_defaults(func=cmd_env_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
