"""Scenario execution: cells of (held-out domain, hp point, trial), manifest, stats.

Every cell is independent and deterministic given the scenario, so cells may
run in a process pool; results are reduced in cell order. Paths written into
the manifest are relative to the output directory so that two runs into
different directories produce identical trees.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..kernels_ci import DegenerateClassesError
from ..models import save_checkpoint
from ..objectives import TcriHyperParams, erm_preset
from ..scm_data import DatasetError, split_train_val, write_csv
from ..selection import Candidate, select, validation_metrics
from ..trainer import TrainingDiverged, evaluate, ols_solve, train, write_log
from .scenario import Scenario, build_domains, derive_seed, scenario_from_dict
from .stats import DomainStats, report_stats, write_stats_csv

HP_FIELDS = ["alpha", "beta", "lam", "penalty", "irm_norm", "y_bins"]
MANIFEST_COLUMNS = (
    ["heldout", "algorithm", "hp_index"]
    + HP_FIELDS
    + ["trial", "trial_seed", "status", "val_risk", "val_accuracy", "ci_score"]
    + ["heldout_risk", "heldout_accuracy", "checkpoint_path", "log_path"]
)
TABLE1_COLUMNS = (
    ["algorithm", "hp_index"] + HP_FIELDS
    + ["trial", "trial_seed", "status", "phi_00", "phi_10", "oracle_coef", "total", "checkpoint_path", "log_path"]
)
TABLE1_SUMMARY_COLUMNS = ["model", "phi_00", "phi_00_std", "phi_10", "phi_10_std", "trials"]


class ScenarioFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    heldout: int | None
    hp_index: int
    trial: int

    @property
    def tag(self) -> str:
        h = "all" if self.heldout is None else f"h{self.heldout}"
        return f"{h}_k{self.hp_index}_t{self.trial}"


@dataclass
class ScenarioResult:
    rows: list[dict]
    stats: dict[str, dict[str, DomainStats]] = field(default_factory=dict)
    table1: dict[str, dict] = field(default_factory=dict)


def trial_seed(sc: Scenario, trial: int) -> int:
    return derive_seed(sc.seed, 7919, trial)


def algorithm_labels(sc: Scenario) -> list[str]:
    return [hp.name for hp in sc.hp_grid]


def enumerate_cells(sc: Scenario) -> list[Cell]:
    ks = range(len(sc.hp_grid))
    ts = range(sc.trials)
    if sc.protocol == "table1-replication":
        return [Cell(None, k, t) for k in ks for t in ts]
    return [Cell(h, k, t) for h in sc.heldout_indices() for k in ks for t in ts]


def _fit(sc: Scenario, arch, train_sets, hp: TcriHyperParams, seed: int):
    cfg = sc.train_config(seed)
    warm = sc.train.get("warm_start")
    weights_erm = hp.alpha == 1.0 and hp.beta == 0.0 and hp.lam == 0.0
    if warm == "erm" and not weights_erm:
        steps = int(sc.train.get("warm_start_steps", cfg.max_steps))
        pre = train(None, train_sets, erm_preset(y_bins=hp.y_bins), replace(cfg, max_steps=steps, restarts=1), arch)
        return train(pre.model, train_sets, hp, replace(cfg, restarts=1))
    if warm not in (None, "erm"):
        raise ValueError(f"unknown warm_start {warm!r}")
    return train(None, train_sets, hp, cfg, arch)


def _hp_cols(hp: TcriHyperParams) -> dict:
    return {k: getattr(hp, k) for k in HP_FIELDS}


def _split(sc: Scenario, domains, heldout: int):
    train_sets, val_sets = [], []
    for i, ds in enumerate(domains):
        if i == heldout:
            continue
        tr, va = split_train_val(ds, 1.0 - sc.val_frac, derive_seed(sc.seed, 31, i))
        train_sets.append(tr)
        val_sets.append(va)
    return train_sets, val_sets


def run_cell(raw: dict, cell: Cell, out_dir: str) -> dict:
    """Train and score one cell; a diverged run returns a row with status ``failed``."""
    sc = scenario_from_dict(raw)
    hp = sc.hp_grid[cell.hp_index]
    seed = trial_seed(sc, cell.trial)
    out = Path(out_dir)
    ckpt = Path("checkpoints") / f"{cell.tag}.ckpt"
    logp = Path("logs") / f"{cell.tag}.csv"
    if sc.protocol == "table1-replication":
        return _run_table1_cell(sc, cell, hp, seed, out, ckpt, logp)
    domains = build_domains(sc)
    train_sets, val_sets = _split(sc, domains, cell.heldout)
    arch = sc.arch_config(len(train_sets), train_sets[0].n_features)
    row = {
        "heldout": domains[cell.heldout].domain_id,
        "algorithm": hp.name,
        "hp_index": cell.hp_index,
        **_hp_cols(hp),
        "trial": cell.trial,
        "trial_seed": seed,
        "status": "ok",
        "checkpoint_path": "",
        "log_path": "",
    }
    try:
        res = _fit(sc, arch, train_sets, hp, derive_seed(seed, cell.heldout))
        vm = validation_metrics(res.model, val_sets, hp)
    except (TrainingDiverged, DatasetError, DegenerateClassesError) as exc:
        row.update(status="failed", error=str(exc).replace("\n", " "))
        return row
    # the held-out domain is touched only here, after training and scoring
    ev = evaluate(res.model, domains[cell.heldout])
    save_checkpoint(res.model, out / ckpt)
    write_log(res.log, out / logp)
    row.update(
        val_risk=vm["val_risk"],
        val_accuracy=vm["val_accuracy"],
        ci_score=vm["ci_score"],
        heldout_risk=ev["risk"],
        heldout_accuracy=ev["accuracy"],
        checkpoint_path=ckpt.as_posix(),
        log_path=logp.as_posix(),
    )
    return row


def oracle_coefficient(domains) -> float:
    """No-intercept least squares of y on the pooled causal latent."""
    zc = np.vstack([d.latent_causal for d in domains])
    y = np.concatenate([d.targets for d in domains])
    return float(ols_solve(zc, y)[0])


def _run_table1_cell(sc, cell, hp, seed, out, ckpt, logp) -> dict:
    domains = build_domains(sc, cell.trial)
    arch = sc.arch_config(len(domains), domains[0].n_features)
    row = {
        "algorithm": hp.name,
        "hp_index": cell.hp_index,
        **_hp_cols(hp),
        "trial": cell.trial,
        "trial_seed": seed,
        "status": "ok",
        "oracle_coef": oracle_coefficient(domains),
        "checkpoint_path": "",
        "log_path": "",
    }
    try:
        res = _fit(sc, arch, domains, hp, seed)
    except TrainingDiverged as exc:
        row.update(status="failed", error=str(exc))
        return row
    w = res.model.params["phi.w"].value
    save_checkpoint(res.model, out / ckpt)
    write_log(res.log, out / logp)
    row.update(
        phi_00=float(w[0, 0]),
        phi_10=float(w[1, 0]),
        total=res.final.total,
        checkpoint_path=ckpt.as_posix(),
        log_path=logp.as_posix(),
    )
    return row


# ------------------------------------------------------------------ reduction


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_manifest(rows: list[dict], path, columns: list[str]) -> None:
    cols = list(columns)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})


def _parse(v: str):
    if v == "":
        return None
    try:
        f = float(v)
    except ValueError:
        return v
    return int(v) if v.lstrip("-").isdigit() else f


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _group_order(rows, key):
    seen = []
    for r in rows:
        if r[key] not in seen:
            seen.append(r[key])
    return seen


def _hp_from_row(r: dict) -> TcriHyperParams:
    return TcriHyperParams(
        alpha=float(r["alpha"]),
        beta=float(r["beta"]),
        lam=float(r["lam"]),
        penalty=r["penalty"],
        irm_norm=r["irm_norm"],
        y_bins=int(r["y_bins"]),
        name=r["algorithm"],
    )


def apply_selection(rows: list[dict], strategy: str) -> None:
    """Flag one successful row per (held-out domain, algorithm) in ``selected_<strategy>``."""
    col = f"selected_{strategy}"
    for r in rows:
        r[col] = 0
    for held in _group_order(rows, "heldout"):
        for alg in _group_order(rows, "algorithm"):
            group = [r for r in rows if r["heldout"] == held and r["algorithm"] == alg and r["status"] == "ok"]
            if not group:
                continue
            cands = []
            for r in group:
                acc = r["heldout_accuracy"]
                # regression: treat negative risk as the score to maximise
                oracle = acc if acc is not None else -r["heldout_risk"]
                vm = {"val_risk": r["val_risk"], "val_accuracy": r["val_accuracy"], "ci_score": r["ci_score"]}
                cands.append(Candidate(None, _hp_from_row(r), int(r["trial_seed"]), vm, r["checkpoint_path"], held, oracle))
            win = select(cands, strategy)
            group[cands.index(win)][col] = 1


def compute_stats(rows: list[dict], strategy: str) -> dict[str, DomainStats]:
    """DomainStats per algorithm from the trials of the selected hp point on each held-out domain."""
    col = f"selected_{strategy}"
    out = {}
    for alg in _group_order(rows, "algorithm"):
        results = {}
        for held in _group_order(rows, "heldout"):
            win = [r for r in rows if r["heldout"] == held and r["algorithm"] == alg and r.get(col) == 1]
            if not win:
                continue
            k = win[0]["hp_index"]
            vals = [
                r["heldout_accuracy"] if r["heldout_accuracy"] is not None else r["heldout_risk"]
                for r in rows
                if r["heldout"] == held and r["algorithm"] == alg and r["hp_index"] == k and r["status"] == "ok"
            ]
            results[held] = vals
        if results:
            out[alg] = report_stats(results)
    return out


def summarize_table1(rows: list[dict]) -> dict[str, dict]:
    """Mean and sample std of the Phi entries per algorithm, with the OLS oracle first."""

    def agg(vals):
        v = np.asarray(vals, dtype=np.float64)
        return math.fsum(v) / v.size, float(np.std(v, ddof=1)) if v.size > 1 else 0.0

    oracle = {}
    for r in rows:
        oracle.setdefault(r["trial"], r["oracle_coef"])
    m, s = agg(list(oracle.values()))
    out = {"oracle": {"phi_00": m, "phi_00_std": s, "phi_10": 0.0, "phi_10_std": 0.0, "trials": len(oracle)}}
    for alg in _group_order(rows, "algorithm"):
        ok = [r for r in rows if r["algorithm"] == alg and r["status"] == "ok"]
        if not ok:
            continue
        m0, s0 = agg([r["phi_00"] for r in ok])
        m1, s1 = agg([r["phi_10"] for r in ok])
        out[alg] = {"phi_00": m0, "phi_00_std": s0, "phi_10": m1, "phi_10_std": s1, "trials": len(ok)}
    return out


def write_table1_summary(summary: dict[str, dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(TABLE1_SUMMARY_COLUMNS)
        for name, s in summary.items():
            w.writerow([name] + [_fmt(s[c]) for c in TABLE1_SUMMARY_COLUMNS[1:]])


def read_table1_summary(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != TABLE1_SUMMARY_COLUMNS:
        raise ValueError(f"{path}: not a table-1 summary")
    return {r["model"]: {c: _parse(r[c]) for c in TABLE1_SUMMARY_COLUMNS[1:]} for r in rows}


def format_table1(summary: dict[str, dict]) -> str:
    lines = ["model      | Phi_00          | Phi_10", "-----------+-----------------+----------------"]
    for name, s in summary.items():
        a = f"{s['phi_00']:.3f} +/- {s['phi_00_std']:.3f}"
        b = f"{s['phi_10']:.3f} +/- {s['phi_10_std']:.3f}"
        lines.append(f"{name:<10} | {a:<15} | {b}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ top level


def _check_cells(sc: Scenario, rows: list[dict]) -> None:
    key = (lambda r: (r["hp_index"],)) if sc.protocol == "table1-replication" else (lambda r: (r["heldout"], r["hp_index"]))
    groups: dict[tuple, list[str]] = {}
    for r in rows:
        groups.setdefault(key(r), []).append(r["status"])
    dead = [k for k, st in groups.items() if all(s == "failed" for s in st)]
    if dead:
        raise ScenarioFailed(f"every trial failed for cell(s) {dead}")


def run_scenario(sc: Scenario, out_dir, workers: int = 1, strategies: list[str] | None = None) -> ScenarioResult:
    out = Path(out_dir)
    for sub in ("datasets", "checkpoints", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if sc.protocol == "table1-replication":
        for t in range(sc.trials):
            write_csv(build_domains(sc, t), out / "datasets" / f"trial_{t}.csv")
    else:
        write_csv(build_domains(sc), out / "datasets" / "domains.csv")

    cells = enumerate_cells(sc)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [sc.raw] * len(cells), cells, [str(out)] * len(cells)))
    else:
        rows = [run_cell(sc.raw, c, str(out)) for c in cells]

    if sc.protocol == "table1-replication":
        write_manifest(rows, out / "manifest.csv", TABLE1_COLUMNS)
        _check_cells(sc, rows)
        summary = summarize_table1(rows)
        write_table1_summary(summary, out / "table1.csv")
        return ScenarioResult(rows, table1=summary)

    result = ScenarioResult(rows)
    for strat in strategies or sc.selection:
        apply_selection(rows, strat)
    write_manifest(rows, out / "manifest.csv", MANIFEST_COLUMNS)
    _check_cells(sc, rows)
    for strat in strategies or sc.selection:
        result.stats[strat] = compute_stats(rows, strat)
        write_stats_csv(result.stats[strat], out / f"stats_{strat}.csv")
    return result
