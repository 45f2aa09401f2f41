"""Command line entry point: ``tcri <subcommand> [options]``.

Errors go to stderr as one line ``error: <kind>: <message>`` with a nonzero
exit status (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ..models import save_checkpoint
from ..objectives import PRESETS
from ..scm_data import disc_conditional_closed_form, disc_conditional_exact, sample_lemma1_counterexample, write_csv
from ..selection import STRATEGIES
from ..trainer import evaluate, write_log
from . import runner
from .scenario import ScenarioError, build_domains, load_scenario
from .stats import format_stats_table, read_stats_csv, write_stats_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    p.add_argument("--scenario", default=None, help="scenario file or bundled scenario name")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="tcri", description="Two-representation domain generalization experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write the scenario's datasets as CSV")

    t = sub.add_parser("train", parents=[common], help="one training run")
    t.add_argument("--heldout", default=None, help="domain id left out of training")
    t.add_argument("--hp-index", type=int, default=0, help="row of the scenario hp grid")
    t.add_argument("--preset", choices=sorted(PRESETS), default=None, help="use a preset instead of the grid")
    t.add_argument("--trial", type=int, default=0)

    s = sub.add_parser("sweep", parents=[common], help="hp grid x trials over the protocol")
    s.add_argument("--trials", type=int, default=None, help="override the scenario trial count")
    s.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("select", parents=[common], help="apply a selection strategy to a manifest")
    c.add_argument("--strategy", choices=STRATEGIES, action="append", required=True)
    c.add_argument("--manifest", default=None, help="default: <out-dir>/manifest.csv")

    r = sub.add_parser("report", parents=[common], help="render stats or table-1 CSVs")
    r.add_argument("--input", action="append", default=None, help="stats_*.csv or table1.csv; default: all in out-dir")

    d = sub.add_parser("demo-lemma1", parents=[common], help="empirical vs analytic disc conditional")
    d.add_argument("--r", type=float, default=1.0)
    d.add_argument("--d1", type=float, default=0.0)
    d.add_argument("--d2", type=float, default=0.5)
    d.add_argument("--n", type=int, default=100_000)
    d.add_argument("--bins", type=int, default=20)
    return p


def _scenario(args, required=True):
    if args.scenario is None:
        if required:
            raise UsageError("--scenario is required for this command")
        return None
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_scenario(args.scenario, overrides)


def cmd_generate(args) -> None:
    sc = _scenario(args)
    out = Path(args.out_dir) / "datasets"
    out.mkdir(parents=True, exist_ok=True)
    if sc.protocol == "table1-replication":
        for t in range(sc.trials):
            write_csv(build_domains(sc, t), out / f"trial_{t}.csv")
    else:
        write_csv(build_domains(sc), out / "domains.csv")
    print(out)


def cmd_train(args) -> None:
    sc = _scenario(args)
    raw = dict(sc.raw)
    if args.preset is not None:
        raw["hp_grid"] = [{"preset": args.preset}]
        k = 0
    else:
        k = args.hp_index
        if not 0 <= k < len(sc.hp_grid):
            raise UsageError(f"--hp-index must lie in 0..{len(sc.hp_grid) - 1}")
    out = Path(args.out_dir)
    for sub in ("checkpoints", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if sc.protocol == "table1-replication":
        if args.heldout is not None:
            raise UsageError("table1-replication has no held-out domain")
        held = None
    else:
        ids = sc.domain_ids
        if args.heldout is None:
            raise UsageError(f"--heldout is required; one of {ids}")
        if args.heldout not in ids:
            raise UsageError(f"unknown domain {args.heldout!r}; one of {ids}")
        held = ids.index(args.heldout)
    row = runner.run_cell(raw, runner.Cell(held, k, args.trial), str(out))
    if row["status"] != "ok":
        raise RuntimeError(row.get("error", "training failed"))
    keys = [c for c in ("phi_00", "phi_10", "val_accuracy", "ci_score", "heldout_accuracy", "heldout_risk") if c in row]
    print(" ".join(f"{c}={runner._fmt(row[c])}" for c in keys))


def cmd_sweep(args) -> None:
    sc = _scenario(args)
    if args.trials is not None:
        sc = sc.with_trials(args.trials)
    res = runner.run_scenario(sc, args.out_dir, workers=args.workers)
    ok = sum(r["status"] == "ok" for r in res.rows)
    print(f"runs={len(res.rows)} ok={ok} failed={len(res.rows) - ok} manifest={Path(args.out_dir) / 'manifest.csv'}")


def cmd_select(args) -> None:
    path = Path(args.manifest) if args.manifest else Path(args.out_dir) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    rows = runner.read_manifest(path)
    if rows and "heldout" not in rows[0]:
        raise ValueError("manifest has no held-out domains; selection does not apply")
    for strat in args.strategy:
        runner.apply_selection(rows, strat)
    runner.write_manifest(rows, path, runner.MANIFEST_COLUMNS)
    for strat in args.strategy:
        stats = runner.compute_stats(rows, strat)
        write_stats_csv(stats, path.parent / f"stats_{strat}.csv")
        print(f"[{strat}]")
        print(format_stats_table(stats), end="")


def _report_one(path: Path, out: Path) -> str:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if header == runner.TABLE1_SUMMARY_COLUMNS:
        summary = runner.read_table1_summary(path)
        runner.write_table1_summary(summary, out / path.name)
        text = runner.format_table1(summary)
    else:
        stats = read_stats_csv(path)
        write_stats_csv(stats, out / path.name)
        text = format_stats_table(stats)
    (out / (path.stem + ".txt")).write_text(text)
    return text


def cmd_report(args) -> None:
    out = Path(args.out_dir)
    if args.input:
        inputs = [Path(p) for p in args.input]
    else:
        inputs = sorted(out.glob("stats_*.csv")) + sorted(out.glob("table1.csv"))
    if not inputs:
        raise FileNotFoundError(f"nothing to report in {out}")
    out.mkdir(parents=True, exist_ok=True)
    for p in inputs:
        print(f"[{p.stem}]")
        print(_report_one(p, out), end="")


def lemma1_curve(r: float, d1: float, d2: float, n: int, bins: int, seed: int) -> list[dict]:
    """Binned empirical P(y=1 | z1) with standard errors, beside the exact and closed-form values."""
    ds = sample_lemma1_counterexample(d1, d2, r, n, seed)
    z1, y = ds.features[:, 0], ds.targets
    edges = np.linspace(d1 - r, d1 + r, bins + 1)
    idx = np.clip(np.searchsorted(edges, z1, side="right") - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        m = idx == b
        cnt = int(m.sum())
        mid = 0.5 * (edges[b] + edges[b + 1])
        p = float(y[m].mean()) if cnt else float("nan")
        se = float(np.sqrt(p * (1 - p) / cnt)) if cnt else float("nan")
        inside = abs(mid) < r
        rows.append(
            {
                "z1": float(mid),
                "count": cnt,
                "empirical": p,
                "stderr": se,
                "exact": float(disc_conditional_exact(mid, d2, r)),
                "analytic": float(disc_conditional_closed_form(mid, d2, r)) if inside else float("nan"),
            }
        )
    return rows


def cmd_demo_lemma1(args) -> None:
    if not args.r > 0 or args.n < 1 or args.bins < 1:
        raise UsageError("--r must be positive and --n, --bins at least 1")
    rows = lemma1_curve(args.r, args.d1, args.d2, args.n, args.bins, args.seed or 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "lemma1.csv"
    cols = ["z1", "count", "empirical", "stderr", "exact", "analytic"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: runner._fmt(v) for k, v in row.items()})
    print(path)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "select": cmd_select,
    "report": cmd_report,
    "demo-lemma1": cmd_demo_lemma1,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return _fail("usage", exc, 2)
    except ScenarioError as exc:
        return _fail("scenario", exc, 1)
    except runner.ScenarioFailed as exc:
        return _fail("scenario-failed", exc, 1)
    except FileNotFoundError as exc:
        return _fail("not-found", exc, 1)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
