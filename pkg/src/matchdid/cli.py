"""Command-line front end: ``matchdid {match,did,trend,simulate}``.

Exit codes: 0 success, 1 internal error, 2 invalid input, 3 infeasible
matching problem. Every command writes its outputs atomically (all files
are staged as temporaries and renamed only once everything has been
computed) together with ``manifest.json`` echoing the resolved settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .did import (
    DEFAULT_ALPHA,
    PanelDataset,
    pairs_from_assignment,
    paired_did,
    parallel_trend_test,
    regression_did,
)
from .errors import DataError, DomainError, InfeasibleError, MatchDidError
from .matching import METRICS, CovariateSample, PairAssignment, match_sample, standardized_differences
from .simulation import TABLES, run_table, table_scenarios

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3

DEFAULTS = {
    "match": {"k": 1, "metric": "rank-mahalanobis", "caliper": True, "penalty_scale": None,
              "alpha": DEFAULT_ALPHA, "out": "."},
    "did": {"pairs": None, "pre": None, "post": None, "period_order": None,
            "alpha": DEFAULT_ALPHA, "out": "."},
    "trend": {"pre1": None, "pre2": None, "period_order": None, "alpha": DEFAULT_ALPHA, "out": "."},
    "simulate": {"table": None, "reps": 1000, "seed": 0, "workers": 1, "scenario": {},
                 "alpha": DEFAULT_ALPHA, "out": "."},
}


class UsageError(DataError):
    """Invalid command-line or config input."""


# --------------------------------------------------------------------------
# input


def _fmt(x) -> str:
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _read_rows(path, expected_prefix):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UsageError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    if header[:len(expected_prefix)] != list(expected_prefix):
        raise UsageError(f"{path}: line 1: header must start with {','.join(expected_prefix)}, got {','.join(header)}")
    body = [(i, r) for i, r in enumerate(rows[1:], start=2) if any(c.strip() for c in r)]
    return header, body


def _flag(value, line, what):
    v = value.strip()
    if v not in ("0", "1"):
        raise ValueError(f"line {line}: {what} must be 0 or 1, got {value!r}")
    return v == "1"


def _number(value, line, what):
    try:
        x = float(value)
    except ValueError:
        raise ValueError(f"line {line}: {what} is not a number: {value!r}") from None
    if not math.isfinite(x):
        raise ValueError(f"line {line}: {what} must be finite")
    return x


def read_covariate_file(path) -> CovariateSample:
    """``unit_id,treated,<covariate...>`` CSV into a :class:`CovariateSample`."""
    header, body = _read_rows(path, ("unit_id", "treated"))
    names = header[2:]
    if not names:
        raise UsageError(f"{path}: line 1: no covariate columns")
    errors, ids, flags, values = [], [], [], []
    for line, row in body:
        try:
            if len(row) != len(header):
                raise ValueError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0].strip())
            flags.append(_flag(row[1], line, "treated"))
            values.append([_number(v, line, names[j]) for j, v in enumerate(row[2:])])
        except ValueError as exc:
            errors.append(str(exc))
    if not errors:
        seen = set()
        for (line, _), uid in zip(body, ids):
            if uid in seen:
                errors.append(f"line {line}: duplicate unit_id {uid!r}")
            seen.add(uid)
    if errors:
        raise UsageError(f"{path}: " + "; ".join(errors))
    if not body:
        raise UsageError(f"{path}: no data rows")
    return CovariateSample.from_arrays(values, flags, ids, names)


def read_panel_file(path, period_order=None) -> PanelDataset:
    """``unit_id,group,period,outcome`` CSV into a :class:`PanelDataset`."""
    header, body = _read_rows(path, ("unit_id", "group", "period", "outcome"))
    if len(header) != 4:
        raise UsageError(f"{path}: line 1: unexpected extra columns {header[4:]}")
    errors, recs = [], []
    for line, row in body:
        try:
            if len(row) != 4:
                raise ValueError(f"line {line}: expected 4 fields, got {len(row)}")
            recs.append((row[0].strip(), _flag(row[1], line, "group"), row[2].strip(),
                         _number(row[3], line, "outcome")))
        except ValueError as exc:
            errors.append(str(exc))
    if errors:
        raise UsageError(f"{path}: " + "; ".join(errors))
    if not recs:
        raise UsageError(f"{path}: no data rows")
    return PanelDataset.from_records(recs, period_order)


def read_pairs_file(path) -> PairAssignment:
    header, body = _read_rows(path, ("treated_id", "control_id"))
    tids, cids = [], []
    for line, row in body:
        if len(row) < 2:
            raise UsageError(f"{path}: line {line}: expected treated_id,control_id")
        tids.append(row[0].strip())
        cids.append(row[1].strip())
    dup_t = sorted({t for t in tids if tids.count(t) > 1})
    if dup_t:
        raise UsageError(f"{path}: paired analysis needs 1:1 pairs; treated ids repeated: {dup_t}")
    dup_c = sorted({c for c in cids if cids.count(c) > 1})
    if dup_c:
        raise UsageError(f"{path}: control ids used more than once: {dup_c}")
    pairs = tuple((i, (i,)) for i in range(len(tids)))
    return PairAssignment(pairs=pairs, total_distance=math.nan, controls_per_treated=1,
                          treated_ids=tuple(tids), control_ids=tuple(cids))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# output


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def write_outputs(out_dir, files: dict) -> None:
    """Write ``{name: text}`` into ``out_dir``; nothing is renamed into place until all are staged."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=out)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def _manifest(command, resolved, inputs) -> str:
    doc = {
        "command": command,
        "version": __version__,
        "resolved_config": resolved,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_match(cfg: dict) -> dict:
    sample = read_covariate_file(cfg["covariate_file"])
    k = int(cfg["k"])
    if cfg["metric"] not in METRICS:
        raise UsageError(f"unknown metric {cfg['metric']!r}")
    if sample.n_treated == 0 or sample.n_control == 0:
        raise UsageError("covariate file needs both treated and control units")
    if sample.n_control < k * sample.n_treated:
        raise InfeasibleError(f"1:{k} matching of {sample.n_treated} treated units needs "
                              f"{k * sample.n_treated} controls, file has {sample.n_control}")
    assignment, _, model = match_sample(sample, k=k, metric=cfg["metric"], caliper=cfg["caliper"],
                                       penalty_scale=cfg["penalty_scale"])
    balance = standardized_differences(sample, assignment)
    pairs_csv = _csv_text(["treated_id", "control_id", "distance"], assignment.id_pairs())
    balance_csv = _csv_text(
        ["covariate", "treated_mean", "all_controls_mean", "matched_controls_mean",
         "std_diff_before", "std_diff_after"],
        [(r.covariate, r.treated_mean, r.all_controls_mean, r.matched_controls_mean,
          r.std_diff_before, r.std_diff_after) for r in balance],
    )
    lines = [f"matched {sample.n_treated} treated units to {k} control(s) each "
             f"({cfg['metric']}, caliper {'on' if cfg['caliper'] else 'off'})",
             f"total distance {assignment.total_distance:.6g}"]
    if model.penalized:
        lines.append("warning: propensity model separated; ridge-penalized fit used")
    lines.append(f"{'covariate':<24}{'before':>10}{'after':>10}")
    for r in balance:
        lines.append(f"{r.covariate:<24}{r.std_diff_before:>10.3f}{r.std_diff_after:>10.3f}")
    return {"pairs.csv": pairs_csv, "balance.csv": balance_csv, "summary.txt": "\n".join(lines) + "\n"}


def _period_order(cfg):
    po = cfg.get("period_order")
    if isinstance(po, str):
        po = [p.strip() for p in po.split(",") if p.strip()]
    return po


def cmd_did(cfg: dict) -> dict:
    panel = read_panel_file(cfg["panel_file"], _period_order(cfg))
    pre, post = cfg["pre"], cfg["post"]
    if (pre is None) != (post is None):
        raise UsageError("give both --pre and --post or neither")
    if pre is None:
        if len(panel.periods) != 2:
            raise UsageError(f"panel has {len(panel.periods)} periods; choose two with --pre/--post")
        pre, post = (panel.label(p) for p in panel.periods)
    b, a = panel.ordinal(pre), panel.ordinal(post)
    if cfg["pairs"]:
        assignment = read_pairs_file(cfg["pairs"])
        est = paired_did(pairs_from_assignment(panel, assignment, b, a), cfg["alpha"])
        method = "paired"
    else:
        est = regression_did(panel.restrict([b, a]), cfg["alpha"], b, a)
        method = "regression"
    level = round(100 * (1 - est.alpha))
    text = (f"{method} difference-in-differences, {pre} -> {post}\n"
            f"estimate {est.point:.4g} ({level}% CI {est.ci_low:.4g}, {est.ci_high:.4g})\n"
            f"se {est.se:.4g}, df {est.df}, n {est.n}\n")
    did_csv = _csv_text(["method", "pre", "post", "point", "se", "df", "ci_low", "ci_high", "alpha", "n"],
                        [(method, pre, post, est.point, est.se, est.df, est.ci_low, est.ci_high, est.alpha, est.n)])
    return {"did.csv": did_csv, "summary.txt": text}


def cmd_trend(cfg: dict) -> dict:
    panel = read_panel_file(cfg["panel_file"], _period_order(cfg))
    p1, p2 = cfg["pre1"], cfg["pre2"]
    if p1 is None or p2 is None:
        if len(panel.periods) != 2 or (p1 or p2):
            raise UsageError("name the two pre-periods with --pre1 and --pre2")
        p1, p2 = (panel.label(p) for p in panel.periods)
    res = parallel_trend_test(panel, (panel.ordinal(p1), panel.ordinal(p2)))
    means = _csv_text(["group", "period", "mean_outcome", "n"], panel.group_period_means())
    trend = _csv_text(["pre1", "pre2", "tau_hat", "se", "p_value", "df"],
                      [(p1, p2, res.tau_hat, res.se, res.p_value, res.df)])
    text = (f"pre-period trend test {p1} -> {p2}\n"
            f"tau_hat {res.tau_hat:.4g}, se {res.se:.4g}, p-value {res.p_value:.4g} (df {res.df})\n")
    return {"trend.csv": trend, "trend_means.csv": means, "summary.txt": text}


def _table_text(table, summaries) -> str:
    lines = [f"table {table}"]
    last = None
    for s in summaries:
        if s.scenario != last:
            lines.append(f"[{s.scenario}]")
            last = s.scenario
        lines.append(f"  {s.strategy:<8} mean {s.mean:6.2f} ({s.sd:.2f})  median {s.median:6.2f} ({s.mad_scaled:.2f})"
                     f"  coverage {s.coverage:.2f} ({s.mean_ci_length:.2f})")
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg: dict) -> dict:
    table = cfg["table"]
    if table not in TABLES:
        raise UsageError(f"--table must be one of {TABLES}, got {table}")
    overrides = cfg["scenario"] or {}
    if not isinstance(overrides, dict):
        raise UsageError("config 'scenario' must be a JSON object")
    try:
        scenarios = table_scenarios(table, int(cfg["seed"]), overrides)
    except TypeError as exc:
        raise UsageError(f"invalid scenario override: {exc}") from exc
    cfg["scenario_configs"] = {sc.label: asdict(sc.config) for sc in scenarios}
    if int(cfg["reps"]) < 2:
        raise UsageError("--reps must be at least 2")
    summaries = run_table(table, int(cfg["reps"]), int(cfg["seed"]), workers=int(cfg["workers"]),
                          alpha=float(cfg["alpha"]), scenarios=scenarios)
    rows = [(s.scenario, s.strategy, s.mean, s.sd, s.median, s.mad_scaled, s.coverage, s.mean_ci_length)
            for s in summaries]
    body = _csv_text(["scenario", "strategy", "mean", "sd", "median", "mad", "coverage", "mean_ci_length"], rows)
    return {f"table{table}.csv": body, "summary.txt": _table_text(table, summaries)}


COMMANDS = {"match": cmd_match, "did": cmd_did, "trend": cmd_trend, "simulate": cmd_simulate}
INPUT_KEYS = {"match": ("covariate_file",), "did": ("panel_file", "pairs"), "trend": ("panel_file",), "simulate": ()}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON object of settings; explicit flags take precedence")
    common.add_argument("--out", default=None, help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--alpha", type=float, default=None, help="1 - confidence level (default 0.05)")

    parser = argparse.ArgumentParser(prog="matchdid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[common], help="optimal 1:k matching and balance table")
    p.add_argument("covariate_file", nargs="?")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--metric", choices=METRICS, default=None)
    p.add_argument("--caliper", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--penalty-scale", dest="penalty_scale", type=float, default=None)

    p = sub.add_parser("did", parents=[common], help="difference-in-differences estimate")
    p.add_argument("panel_file", nargs="?")
    p.add_argument("--pairs", default=None, help="pairs.csv from 'match'; omit for the regression estimate")
    p.add_argument("--pre", default=None)
    p.add_argument("--post", default=None)
    p.add_argument("--period-order", dest="period_order", default=None, help="comma-separated period labels")

    p = sub.add_parser("trend", parents=[common], help="pre-period parallel trend test")
    p.add_argument("panel_file", nargs="?")
    p.add_argument("--pre1", default=None)
    p.add_argument("--pre2", default=None)
    p.add_argument("--period-order", dest="period_order", default=None)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo reproduction of a results table")
    p.add_argument("--table", type=int, default=None, help=f"one of {TABLES}")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="worker processes (results do not depend on it)")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a single JSON object")
        if "resolved_config" in loaded:  # replaying a manifest
            if loaded.get("command") != args.command:
                raise UsageError(f"manifest is for '{loaded.get('command')}', not '{args.command}'")
            loaded = {k: v for k, v in loaded["resolved_config"].items() if k != "scenario_configs"}
        unknown = set(loaded) - set(cfg) - {"seed"} - set(INPUT_KEYS[args.command])
        if unknown:
            raise UsageError(f"unknown config keys for '{args.command}': {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        cfg[key] = value
    for key in INPUT_KEYS[args.command][:1]:
        if not cfg.get(key):
            raise UsageError(f"missing input file ({key})")
    if cfg.get("table") is not None:
        try:
            cfg["table"] = int(cfg["table"])
        except (TypeError, ValueError):
            raise UsageError(f"invalid table {cfg['table']!r}") from None
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        files = COMMANDS[args.command](cfg)
        inputs = [cfg.get(k) for k in INPUT_KEYS[args.command]]
        resolved = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
        files["manifest.json"] = _manifest(args.command, resolved, inputs)
        write_outputs(cfg["out"], files)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MatchDidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    sys.stdout.write(files["summary.txt"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
