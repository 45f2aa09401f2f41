"""Scenario files: YAML mappings with a ``schema`` version field.

A scenario names a data generator, the domains it produces, a protocol, a
hyperparameter grid and the training setup. Bundled scenarios live in
``tcri/scenarios`` and can be referred to by bare name.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..models import ArchConfig
from ..objectives import PRESETS, TcriHyperParams
from ..scm_data import (
    ContinuousScmSpec,
    DomainDataset,
    SpuriousBinarySpec,
    add_pool_tag,
    make_worst_case_split,
    sample_continuous_scm,
    sample_spurious_binary,
)
from ..selection import STRATEGIES
from ..trainer import TrainConfig

SCHEMA_VERSION = 1
PROTOCOLS = ("leave-one-out", "fixed-holdout", "table1-replication")
KINDS = ("continuous", "spurious_binary", "worst_case")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    kind: str
    protocol: str
    domains: list[dict]
    hp_grid: list[TcriHyperParams]
    trials: int = 1
    selection: list[str] = field(default_factory=lambda: ["ci", "val-acc", "oracle"])
    seed: int = 0
    data: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    heldout: list[int] = field(default_factory=list)
    val_frac: float = 0.2
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.protocol not in PROTOCOLS:
            raise ScenarioError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.trials < 1:
            raise ScenarioError("trials must be positive")
        if not self.hp_grid:
            raise ScenarioError("hp_grid is empty")
        if self.protocol == "leave-one-out" and len(self.domain_ids) < 2:
            raise ScenarioError("leave-one-out needs at least two domains")
        if self.protocol == "fixed-holdout":
            n = len(self.domain_ids)
            if not self.heldout or any(not 0 <= i < n for i in self.heldout) or len(self.heldout) >= n:
                raise ScenarioError("fixed-holdout needs held-out indices leaving at least one training domain")
        bad = [s for s in self.selection if s not in STRATEGIES]
        if bad:
            raise ScenarioError(f"unknown selection strategies {bad}")
        if not 0.0 < self.val_frac < 1.0:
            raise ScenarioError("val_frac must lie in (0, 1)")

    @property
    def domain_ids(self) -> list[str]:
        if self.kind == "worst_case":
            return _worst_case_ids(self.domains)
        return [d.get("id", f"d{i}") for i, d in enumerate(self.domains)]

    @property
    def task(self) -> str:
        return "regression" if self.kind == "continuous" else "binary"

    def heldout_indices(self) -> list[int]:
        if self.protocol == "leave-one-out":
            return list(range(len(self.domain_ids)))
        if self.protocol == "fixed-holdout":
            return list(self.heldout)
        return []

    def arch_config(self, num_train_domains: int, input_dim: int) -> ArchConfig:
        return ArchConfig(input_dim=input_dim, num_domains=num_train_domains, task=self.task, **self.arch)

    def train_config(self, seed: int) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k not in ("warm_start", "warm_start_steps")}
        return TrainConfig(seed=seed, **kw)

    def with_trials(self, trials: int) -> "Scenario":
        out = copy.deepcopy(self)
        out.trials = trials
        out.raw["trials"] = trials
        out.__post_init__()
        return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _worst_case_ids(domains: list[dict]) -> list[str]:
    ids = []
    for d in domains:
        if "cross" in d:
            a, b = d["cross"]
            ids += [f"{a}x{b}", f"{b}x{a}"]
        elif d.get("standalone", False):
            ids.append(d["id"])
    return ids


def parse_hp(entry: dict) -> TcriHyperParams:
    entry = dict(entry)
    preset = entry.pop("preset", None)
    if "lambda" in entry:
        entry["lam"] = entry.pop("lambda")
    if preset is None:
        return TcriHyperParams(**entry)
    if preset not in PRESETS:
        raise ScenarioError(f"unknown preset {preset!r}")
    return PRESETS[preset](**entry)


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    schema = raw.get("schema")
    if schema != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario schema {schema!r}; this build reads schema {SCHEMA_VERSION}")
    known = {
        "schema", "name", "kind", "protocol", "domains", "hp_grid", "trials", "selection",
        "seed", "data", "arch", "train", "heldout", "val_frac",
    }
    extra = set(raw) - known
    if extra:
        raise ScenarioError(f"unknown scenario keys {sorted(extra)}")
    try:
        return Scenario(
            name=str(raw["name"]),
            kind=raw["kind"],
            protocol=raw["protocol"],
            domains=list(raw["domains"]),
            hp_grid=[parse_hp(h) for h in raw["hp_grid"]],
            trials=int(raw.get("trials", 1)),
            selection=list(raw.get("selection", ["ci", "val-acc", "oracle"])),
            seed=int(raw.get("seed", 0)),
            data=dict(raw.get("data", {})),
            arch=dict(raw.get("arch", {})),
            train=dict(raw.get("train", {})),
            heldout=list(raw.get("heldout", [])),
            val_frac=float(raw.get("val_frac", 0.2)),
            raw=copy.deepcopy(raw),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing required key {exc.args[0]!r}") from None
    except TypeError as exc:
        raise ScenarioError(str(exc)) from None


def builtin_names() -> list[str]:
    pkg = resources.files("tcri") / "scenarios"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def load_scenario(ref: str | Path, overrides: dict | None = None) -> Scenario:
    """Load from a path, or from a bundled scenario name such as ``cmnist``."""
    path = Path(ref)
    if path.exists():
        text = path.read_text()
    else:
        res = resources.files("tcri") / "scenarios" / f"{ref}.yaml"
        if not res.is_file():
            raise ScenarioError(f"no scenario file or bundled scenario named {str(ref)!r}")
        text = res.read_text()
    raw = yaml.safe_load(text)
    if overrides:
        raw = {**raw, **overrides}
    return scenario_from_dict(raw)


def build_domains(sc: Scenario, trial: int = 0) -> list[DomainDataset]:
    """Generate every domain of the scenario.

    Data depend on the scenario seed only, except in the table-1 protocol where
    each trial draws fresh data.
    """
    base = derive_seed(sc.seed, trial) if sc.protocol == "table1-replication" else sc.seed
    data = sc.data
    if sc.kind == "continuous":
        return [
            sample_continuous_scm(
                ContinuousScmSpec(
                    float(d["sigma_c"]),
                    float(d["sigma_eta"]),
                    int(d.get("n_samples", data.get("n_samples", 1000))),
                    derive_seed(base, i),
                    d.get("id", f"d{i}"),
                )
            )
            for i, d in enumerate(sc.domains)
        ]
    if sc.kind == "spurious_binary":
        return [_binary(d, data, derive_seed(base, i), d.get("id", f"d{i}")) for i, d in enumerate(sc.domains)]
    out = []
    pools = {}
    for i, d in enumerate(sc.domains):
        if "cross" in d:
            continue
        ds = _binary(d, data, derive_seed(base, i), d["id"])
        pools[d["id"]] = add_pool_tag(ds, float(d["tag"]), float(data.get("tag_noise", 0.5)), derive_seed(base, i, 1))
    for d in sc.domains:
        if "cross" in d:
            a, b = d["cross"]
            out.extend(make_worst_case_split(pools[a], pools[b]))
        elif d.get("standalone", False):
            out.append(pools[d["id"]])
    return out


def _binary(d: dict, data: dict, seed: int, domain_id: str) -> DomainDataset:
    return sample_spurious_binary(
        SpuriousBinarySpec(
            flip_prob=float(d.get("flip_prob", data.get("flip_prob", 0.5))),
            label_noise=float(d.get("label_noise", data.get("label_noise", 0.25))),
            n_samples=int(d.get("n_samples", data.get("n_samples", 1000))),
            causal_dim=int(data.get("causal_dim", 5)),
            spurious_dim=int(data.get("spurious_dim", 5)),
            seed=seed,
            separation=float(data.get("separation", 1.0)),
            domain_id=domain_id,
        )
    )
