"""Choosing one model from a sweep: by CI score, validation accuracy, or target data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import TcriModel
from .objectives import TcriHyperParams, loss_ci, make_batch
from .scm_data import DomainDataset
from .trainer import evaluate

STRATEGIES = ("ci", "val-acc", "oracle")


@dataclass
class Candidate:
    model: TcriModel | None
    hp: TcriHyperParams
    trial_seed: int
    val_metrics: dict = field(default_factory=dict)
    checkpoint_path: str = ""
    heldout: str = ""
    oracle_accuracy: float | None = None

    @property
    def ci_score(self) -> float:
        return self.val_metrics["ci_score"]


def ci_score(model: TcriModel, val, hp: TcriHyperParams) -> float:
    """Mean over validation domains of the conditional dependence between the two heads.

    ``val`` is one dataset or a list of them, in training-domain order; the
    estimator family (hsic or cov) follows ``hp.penalty``.
    """
    if isinstance(val, DomainDataset):
        val = [val]
    if not val:
        raise ValueError("ci_score needs validation data")
    scores = []
    for i, ds in enumerate(val):
        if len(ds) == 0:
            raise ValueError(f"validation split {ds.domain_id!r} is empty")
        batch = make_batch(ds, min(i, model.num_domains - 1), model.arch.task, hp.y_bins)
        scores.append(float(loss_ci(model, batch, hp).value))
    return float(np.mean(scores))


def validation_metrics(model: TcriModel, val: list[DomainDataset], hp: TcriHyperParams) -> dict:
    """Pooled validation risk/accuracy plus the CI score."""
    pooled = DomainDataset(
        np.vstack([d.features for d in val]), np.concatenate([d.targets for d in val]), "val"
    )
    ev = evaluate(model, pooled)
    return {"val_risk": ev["risk"], "val_accuracy": ev["accuracy"], "ci_score": ci_score(model, val, hp)}


def _metric(c: Candidate, strategy: str, oracle_ds: DomainDataset | None) -> float:
    if strategy == "ci":
        return c.val_metrics["ci_score"]
    if strategy == "val-acc":
        acc = c.val_metrics.get("val_accuracy")
        # regression has no accuracy; fall back to lowest risk
        return -acc if acc is not None else c.val_metrics["val_risk"]
    if oracle_ds is not None and c.model is not None:
        ev = evaluate(c.model, oracle_ds)
        return -ev["accuracy"] if ev["accuracy"] is not None else ev["risk"]
    if c.oracle_accuracy is None:
        raise ValueError("oracle selection needs held-out target data")
    return -c.oracle_accuracy


def select(candidates: list[Candidate], strategy: str, oracle_ds: DomainDataset | None = None) -> Candidate:
    """Best candidate under ``strategy``; ties go to the lowest trial seed, then hp order."""
    if not candidates:
        raise ValueError("no candidates to select from")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "oracle" and oracle_ds is None and any(c.oracle_accuracy is None for c in candidates):
        raise ValueError("oracle selection needs held-out target data")
    keyed = [((_metric(c, strategy, oracle_ds), c.trial_seed, c.hp.sort_key()), i) for i, c in enumerate(candidates)]
    return candidates[min(keyed)[1]]
