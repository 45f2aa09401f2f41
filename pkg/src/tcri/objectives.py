"""Loss terms of the two-representation objective and their per-domain composition."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diff_core as dc
from . import kernels_ci
from .diff_core import Tensor
from .models import TcriModel, forward_domain, forward_general
from .scm_data import DomainDataset

PENALTIES = ("hsic", "cov")
IRM_NORMS = ("l2", "squared-l2")


@dataclass(frozen=True)
class TcriHyperParams:
    alpha: float = 0.75
    beta: float = 10.0
    lam: float = 0.1
    penalty: str = "hsic"
    irm_norm: str = "l2"
    y_bins: int = 8
    name: str = "tcri"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.irm_norm not in IRM_NORMS:
            raise ValueError(f"irm_norm must be one of {IRM_NORMS}")
        if self.y_bins < 1:
            raise ValueError("y_bins must be positive")

    def sort_key(self) -> tuple:
        return (self.alpha, self.beta, self.lam, self.penalty, self.irm_norm, self.y_bins, self.name)

    def as_row(self) -> dict:
        return asdict(self)


def erm_preset(**kw) -> TcriHyperParams:
    return TcriHyperParams(**{"alpha": 1.0, "beta": 0.0, "lam": 0.0, "name": "erm", **kw})


def irm_preset(**kw) -> TcriHyperParams:
    return TcriHyperParams(**{"alpha": 1.0, "beta": 0.0, "lam": 0.1, "name": "irm", **kw})


def tcri_preset(**kw) -> TcriHyperParams:
    return TcriHyperParams(**{"alpha": 0.75, "beta": 10.0, "lam": 0.1, "name": "tcri", **kw})


PRESETS = {"erm": erm_preset, "irm": irm_preset, "tcri": tcri_preset}


@dataclass
class Batch:
    """One domain's full batch: inputs, targets and the conditioning labels."""

    x: Tensor
    y: np.ndarray
    cond_labels: np.ndarray
    num_classes: int
    domain_index: int
    domain_id: str = ""

    def __len__(self) -> int:
        return self.y.shape[0]


def make_batch(ds: DomainDataset, domain_index: int, task: str, y_bins: int) -> Batch:
    if len(ds) == 0:
        raise ValueError("empty batch")
    if task == "binary":
        labels = ds.targets.astype(np.int64)
        k = 2
    else:
        labels = kernels_ci.quantile_bins(ds.targets, y_bins)
        k = y_bins
    return Batch(Tensor(ds.features), ds.targets, labels, k, domain_index, ds.domain_id)


@dataclass
class LossBreakdown:
    l_phi: float
    l_phi_psi: float
    l_irm: float
    l_ci: float
    total: float
    per_domain: list["LossBreakdown"] = field(default_factory=list)
    domain_id: str = ""

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("l_phi", "l_phi_psi", "l_irm", "l_ci", "total")}


def _risk_t(pred: Tensor, y: np.ndarray, task: str) -> Tensor:
    if pred.shape != y.shape:
        raise dc.ShapeError(f"predictions {pred.shape} vs targets {y.shape}")
    if y.size == 0:
        raise ValueError("empty batch")
    if task == "regression":
        return dc.mean(dc.square(dc.sub(pred, y)))
    # logistic loss on raw scores: softplus(s) - y*s
    return dc.mean(dc.sub(dc.softplus(pred), dc.mul(pred, y)))


def risk(predictions, targets, task: str) -> float:
    """Mean squared error (regression) or mean logistic loss on raw scores (binary)."""
    p = np.asarray(predictions.value if isinstance(predictions, Tensor) else predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(_risk_t(Tensor(p), y, task).value)


def loss_phi(model: TcriModel, batch: Batch) -> Tensor:
    return _risk_t(forward_general(model, batch.x), batch.y, model.arch.task)


def loss_phi_psi(model: TcriModel, batch: Batch, domain_index: int | None = None) -> Tensor:
    i = batch.domain_index if domain_index is None else domain_index
    return _risk_t(forward_domain(model, batch.x, i), batch.y, model.arch.task)


def loss_irm(model: TcriModel, batch: Batch, squared: bool = False) -> Tensor:
    """Norm of the gradient of the domain risk w.r.t. the shared predictor.

    The shared predictor is linear, so its risk gradient has a closed form
    that is itself built from differentiable primitives:
    ``Z^T r / n`` (and ``mean(r)`` for the bias) with ``r = 2 (s - y)`` for
    squared loss or ``r = sigmoid(s) - y`` for logistic loss.
    """
    z = model.phi(model.featurize(batch.x))
    s = model.general_head(z)
    n = len(batch)
    if model.arch.task == "regression":
        r = dc.scale(dc.sub(s, batch.y), 2.0)
    else:
        r = dc.sub(dc.sigmoid(s), batch.y)
    parts = [dc.reshape(dc.scale(dc.matmul(dc.transpose(z), r), 1.0 / n), (-1,))]
    if "theta_c.b" in model.params:
        parts.append(dc.reshape(dc.mean(r), (1,)))
    g = parts[0] if len(parts) == 1 else dc.concat(parts, axis=0)
    return dc.l2norm(g, squared=squared)


def loss_ci(model: TcriModel, batch: Batch, hp: TcriHyperParams) -> Tensor:
    h = model.featurize(batch.x)
    phi, psi = model.phi(h), model.psi(h)
    fn = kernels_ci.conditional_hsic_t if hp.penalty == "hsic" else kernels_ci.conditional_cross_cov_t
    return fn(phi, psi, batch.cond_labels, batch.num_classes)


def tcri_total(
    model: TcriModel,
    batches: list[Batch],
    hp: TcriHyperParams,
    compute_inactive: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Mean over domains of a*L_phi + (1-a)*L_phi+psi + lam*L_irm + beta*L_ci.

    With ``compute_inactive=False`` terms whose weight is zero are skipped and
    reported as 0.0.
    """
    if not batches:
        raise ValueError("tcri_total needs at least one domain batch")
    weights = {"l_phi": hp.alpha, "l_phi_psi": 1.0 - hp.alpha, "l_irm": hp.lam, "l_ci": hp.beta}
    terms = {
        "l_phi": lambda b: loss_phi(model, b),
        "l_phi_psi": lambda b: loss_phi_psi(model, b),
        "l_irm": lambda b: loss_irm(model, b, squared=hp.irm_norm == "squared-l2"),
        "l_ci": lambda b: loss_ci(model, b, hp),
    }
    total = None
    per_domain = []
    for b in batches:
        vals = {}
        dom = None
        for key, fn in terms.items():
            w = weights[key]
            if w == 0.0 and not compute_inactive:
                vals[key] = 0.0
                continue
            t = fn(b)
            vals[key] = float(t.value)
            if w != 0.0:
                wt = dc.scale(t, w)
                dom = wt if dom is None else dc.add(dom, wt)
        if dom is None:
            dom = dc.Tensor(0.0)
        per_domain.append(LossBreakdown(**vals, total=float(dom.value), domain_id=b.domain_id))
        total = dom if total is None else dc.add(total, dom)
    total = dc.scale(total, 1.0 / len(batches))
    e = len(batches)
    agg = {k: math.fsum(getattr(p, k) for p in per_domain) / e for k in weights}
    return total, LossBreakdown(**agg, total=float(total.value), per_domain=per_domain)


def with_overrides(hp: TcriHyperParams, **kw) -> TcriHyperParams:
    return replace(hp, **kw)
