"""Full-batch gradient descent over training domains."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import diff_core as dc
from .models import TcriModel, forward_general, init_model
from .objectives import Batch, LossBreakdown, TcriHyperParams, make_batch, risk, tcri_total
from .scm_data import DomainDataset

LOG_COLUMNS = ["step", "domain_id", "l_phi", "l_phi_psi", "l_irm", "l_ci", "total"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last: LossBreakdown | None):
        super().__init__(f"non-finite objective at step {step}; last finite total={getattr(last, 'total', None)}")
        self.step = step
        self.last_breakdown = last


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_steps: int = 1000
    ols_inner: bool = True
    grad_clip: float | None = None
    seed: int = 0
    log_every: int = 50
    # multi-start: `restarts` fresh initialisations trained for `restart_steps`,
    # the lowest-objective one continues
    restarts: int = 1
    restart_steps: int = 200
    record_wallclock: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_steps < 1 or self.log_every < 1 or self.restarts < 1:
            raise ValueError("max_steps, log_every and restarts must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")


@dataclass
class TrainResult:
    model: TcriModel
    log: list[dict]
    final: LossBreakdown
    steps: int


def ols_solve(design, targets) -> np.ndarray:
    """Least-squares coefficients; the minimum-norm solution when rank deficient."""
    a = np.asarray(design, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 1 or y.shape[0] != a.shape[0]:
        raise ValueError("design and targets must have the same, positive, row count")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
        raise ValueError("ols_solve input must be finite")
    return np.linalg.lstsq(a, y, rcond=None)[0]


def _ols_applicable(model: TcriModel) -> bool:
    return model.arch.is_linear and model.arch.task == "regression"


def solve_domain_heads(model: TcriModel, batches: list[Batch]) -> None:
    """Set each per-domain predictor to its exact least-squares fit on [phi, psi]."""
    for b in batches:
        h = model.featurize(b.x)
        z = np.hstack([model.phi(h).value, model.psi(h).value])
        prefix = f"theta_e.{b.domain_index}"
        has_bias = prefix + ".b" in model.params
        design = np.hstack([z, np.ones((z.shape[0], 1))]) if has_bias else z
        coef = ols_solve(design, b.y)
        model.set_value(prefix + ".w", coef[: z.shape[1], None])
        if has_bias:
            model.set_value(prefix + ".b", coef[-1:])


def _step(model: TcriModel, batches, hp, cfg, frozen: set[str]):
    params = {k: p for k, p in model.trainable().items() if k not in frozen}
    with dc.Tape() as tape:
        total, bd = tcri_total(model, batches, hp, compute_inactive=False)
    if not np.isfinite(bd.total):
        return None, bd
    grads = dc.backward(total, tape, wrt=list(params.values()))
    gvec = [grads[p] for p in params.values()]
    if cfg.grad_clip is not None:
        nrm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gvec)))
        if nrm > cfg.grad_clip:
            gvec = [g * (cfg.grad_clip / nrm) for g in gvec]
    for p, g in zip(params.values(), gvec):
        p.value = p.value - cfg.learning_rate * g
    return total, bd


def _run(model, batches, hp, cfg, steps, log, step0, t0):
    ols = cfg.ols_inner and _ols_applicable(model)
    frozen = {k for k in model.params if k.startswith("theta_e.")} if ols else set()
    last = None
    for step in range(step0, step0 + steps):
        if ols:
            solve_domain_heads(model, batches)
        _, bd = _step(model, batches, hp, cfg, frozen)
        if not np.isfinite(bd.total) or any(not np.isfinite(p.value).all() for p in model.params.values()):
            raise TrainingDiverged(step, last)
        last = bd
        if log is not None and (step % cfg.log_every == 0):
            _append_log(log, step, bd, t0 if cfg.record_wallclock else None)
    return last


def _append_log(log: list[dict], step: int, bd: LossBreakdown, t0: float | None) -> None:
    for dom in bd.per_domain:
        row = {"step": step, "domain_id": dom.domain_id, **dom.row()}
        if t0 is not None:
            row["wall_clock"] = time.perf_counter() - t0
        log.append(row)


def final_breakdown(model: TcriModel, batches: list[Batch], hp: TcriHyperParams) -> LossBreakdown:
    if model.arch.is_linear and model.arch.task == "regression":
        solve_domain_heads(model, batches)
    return tcri_total(model, batches, hp, compute_inactive=True)[1]


def train(
    model: TcriModel | None,
    domains: list[DomainDataset],
    hp: TcriHyperParams,
    cfg: TrainConfig,
    arch=None,
) -> TrainResult:
    """Train on every domain as one full batch per step.

    ``model`` may be None when ``cfg.restarts > 1``; fresh models are then
    built from ``arch`` with seeds derived from ``cfg.seed``.
    """
    if not domains:
        raise ValueError("train needs at least one domain")
    t0 = time.perf_counter()
    if cfg.restarts > 1:
        if arch is None:
            arch = model.arch
        model = _multi_start(domains, hp, cfg, arch, t0)
        remaining = max(cfg.max_steps - cfg.restart_steps, 0)
        start = cfg.restart_steps
    else:
        if model is None:
            model = init_model(arch, cfg.seed)
        remaining, start = cfg.max_steps, 0
    if model.num_domains != len(domains):
        raise ValueError(f"model has {model.num_domains} domain heads but {len(domains)} domains were given")
    batches = [make_batch(ds, i, model.arch.task, hp.y_bins) for i, ds in enumerate(domains)]
    log: list[dict] = []
    if remaining:
        _run(model, batches, hp, cfg, remaining, log, start, t0)
    final = final_breakdown(model, batches, hp)
    _append_log(log, cfg.max_steps, final, t0 if cfg.record_wallclock else None)
    return TrainResult(model, log, final, cfg.max_steps)


def restart_seeds(seed: int, restarts: int) -> list[int]:
    ss = np.random.SeedSequence([seed, 0x7C21])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(restarts)]


def _multi_start(domains, hp, cfg, arch, t0) -> TcriModel:
    if arch.num_domains != len(domains):
        raise ValueError(f"arch has {arch.num_domains} domain heads but {len(domains)} domains were given")
    batches = [make_batch(ds, i, arch.task, hp.y_bins) for i, ds in enumerate(domains)]
    best, best_total = None, np.inf
    for s in restart_seeds(cfg.seed, cfg.restarts):
        m = init_model(arch, s)
        try:
            _run(m, batches, hp, cfg, min(cfg.restart_steps, cfg.max_steps), None, 0, t0)
        except TrainingDiverged:
            continue
        total = final_breakdown(m, batches, hp).total
        if total < best_total:
            best, best_total = m, total
    if best is None:
        raise TrainingDiverged(0, None)
    return best


def evaluate(model: TcriModel, ds: DomainDataset) -> dict:
    """Risk and (binary tasks) accuracy of the shared predictor; score > 0 means class 1."""
    scores = forward_general(model, ds.features).value
    if scores.shape != ds.targets.shape:
        raise ValueError("shape mismatch between scores and targets")
    out = {"risk": risk(scores, ds.targets, model.arch.task), "accuracy": None}
    if model.arch.task == "binary":
        out["accuracy"] = float(np.mean((scores > 0).astype(np.float64) == ds.targets))
    return out


def write_log(log: list[dict], path) -> None:
    cols = list(LOG_COLUMNS)
    if log and "wall_clock" in log[0]:
        cols.append("wall_clock")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
