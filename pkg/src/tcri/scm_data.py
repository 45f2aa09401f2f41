"""Synthetic domain generators.

Each generator is a pure function of its spec (seed included) and returns a
:class:`DomainDataset`. Latent causal / spurious blocks are kept alongside
the observed features for oracle checks only; training code never reads them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# scale of the exponential noise on y in the continuous simulation
Y_NOISE_SCALE = 0.25


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ContinuousScmSpec:
    sigma_c: float
    sigma_eta: float
    n_samples: int = 1000
    seed: int = 0
    domain_id: str = ""

    def __post_init__(self):
        if not (self.sigma_c > 0 and self.sigma_eta > 0):
            raise DatasetError("exponential scales must be positive")
        if self.n_samples < 1:
            raise DatasetError("n_samples must be at least 1")


@dataclass(frozen=True)
class SpuriousBinarySpec:
    flip_prob: float
    label_noise: float = 0.25
    n_samples: int = 1000
    causal_dim: int = 5
    spurious_dim: int = 5
    seed: int = 0
    # class-mean offset of the causal clusters, per coordinate
    separation: float = 1.0
    domain_id: str = ""

    def __post_init__(self):
        for name in ("flip_prob", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1], got {v}")
        if self.n_samples < 1 or self.causal_dim < 1 or self.spurious_dim < 1:
            raise DatasetError("sample count and block widths must be positive")


@dataclass
class DomainDataset:
    features: np.ndarray
    targets: np.ndarray
    domain_id: str
    latent_causal: np.ndarray | None = None
    latent_spurious: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if self.features.ndim != 2:
            raise DatasetError("features must be an n x d matrix")
        n = self.features.shape[0]
        if self.targets.shape[0] != n:
            raise DatasetError(f"{n} feature rows but {self.targets.shape[0]} targets")
        for name in ("latent_causal", "latent_spurious"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=np.float64)
            if m.ndim == 1:
                m = m[:, None]
            if m.shape[0] != n:
                raise DatasetError(f"{name} has {m.shape[0]} rows, expected {n}")
            setattr(self, name, m)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index, domain_id: str | None = None) -> "DomainDataset":
        index = np.asarray(index)
        return DomainDataset(
            self.features[index],
            self.targets[index],
            self.domain_id if domain_id is None else domain_id,
            None if self.latent_causal is None else self.latent_causal[index],
            None if self.latent_spurious is None else self.latent_spurious[index],
            dict(self.meta),
        )


def _require_classes(ds: DomainDataset, what: str) -> None:
    counts = [int(np.sum(ds.targets == c)) for c in (0, 1)]
    if min(counts) < 2:
        raise DatasetError(f"{what}: each class needs at least 2 rows, got counts {counts}")


def sample_continuous_scm(spec: ContinuousScmSpec) -> DomainDataset:
    """z_c ~ Exp(sigma_c), y = z_c + Exp(0.25), z_e = y + Exp(sigma_eta); X = [z_c, z_e].

    Exponentials are parameterised by scale (mean).
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    zc = rng.exponential(spec.sigma_c, n)
    y = zc + rng.exponential(Y_NOISE_SCALE, n)
    ze = y + rng.exponential(spec.sigma_eta, n)
    return DomainDataset(
        np.column_stack([zc, ze]),
        y,
        spec.domain_id or f"scm_{spec.sigma_c:g}_{spec.sigma_eta:g}",
        zc[:, None],
        ze[:, None],
    )


def sample_spurious_binary(spec: SpuriousBinarySpec) -> DomainDataset:
    """Binary task whose spurious block is generated from the noisy label.

    Causal block: a Gaussian cluster pair with means +/- separation. The clean
    label is the sign of the causal coordinate sum, then flipped with
    probability ``label_noise``. The spurious block is +/-1 encoding the noisy
    label, flipped as a whole with probability ``flip_prob``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    cluster = rng.integers(0, 2, n)
    zc = rng.standard_normal((n, spec.causal_dim)) + (2.0 * cluster - 1.0)[:, None] * spec.separation
    clean = (zc.sum(axis=1) > 0).astype(np.int64)
    y = np.where(rng.random(n) < spec.label_noise, 1 - clean, clean)
    colour = np.where(rng.random(n) < spec.flip_prob, 1 - y, y)
    ze = np.repeat((2.0 * colour - 1.0)[:, None], spec.spurious_dim, axis=1)
    ds = DomainDataset(
        np.hstack([zc, ze]),
        y.astype(np.float64),
        spec.domain_id or f"flip_{spec.flip_prob:g}",
        zc,
        ze,
        {"clean_label": clean},
    )
    _require_classes(ds, "sample_spurious_binary")
    return ds


def make_worst_case_split(pool_a: DomainDataset, pool_b: DomainDataset) -> tuple[DomainDataset, DomainDataset]:
    """Cross two pools so that pool identity flips its association with the label.

    The first output holds class 1 from ``pool_a`` and class 0 from ``pool_b``;
    the second holds class 1 from ``pool_b`` and class 0 from ``pool_a``.
    """
    for ds, name in ((pool_a, "pool_a"), (pool_b, "pool_b")):
        if not np.all(np.isin(ds.targets, (0.0, 1.0))):
            raise DatasetError(f"{name} is not binary-labelled")
        if np.sum(ds.targets == 1) == 0 or np.sum(ds.targets == 0) == 0:
            raise DatasetError(f"{name} is missing a class")
    if pool_a.n_features != pool_b.n_features:
        raise DatasetError("pools must share a feature width")

    def cross(pos: DomainDataset, negs: DomainDataset, name: str) -> DomainDataset:
        p = pos.subset(np.flatnonzero(pos.targets == 1))
        q = negs.subset(np.flatnonzero(negs.targets == 0))

        def stack(a, b):
            return None if a is None or b is None else np.vstack([a, b])

        return DomainDataset(
            np.vstack([p.features, q.features]),
            np.concatenate([p.targets, q.targets]),
            name,
            stack(p.latent_causal, q.latent_causal),
            stack(p.latent_spurious, q.latent_spurious),
        )

    a, b = pool_a.domain_id, pool_b.domain_id
    return cross(pool_a, pool_b, f"{a}x{b}"), cross(pool_b, pool_a, f"{b}x{a}")


def add_pool_tag(ds: DomainDataset, tag: float, noise: float = 0.5, seed: int = 0) -> DomainDataset:
    """Append one feature column ``tag + noise * N(0, 1)`` identifying the source pool."""
    rng = np.random.default_rng(seed)
    col = tag + noise * rng.standard_normal(len(ds))
    spur = col[:, None] if ds.latent_spurious is None else np.hstack([ds.latent_spurious, col[:, None]])
    return DomainDataset(
        np.hstack([ds.features, col[:, None]]), ds.targets, ds.domain_id, ds.latent_causal, spur, dict(ds.meta)
    )


def sample_lemma1_counterexample(d1: float, d2: float, r: float, n: int, seed: int = 0) -> DomainDataset:
    """Two uniform causes of a disc-membership label.

    z1 ~ U(d1 - r, d1 + r), z2 ~ U(d2 - r, d2 + r), y = 1 iff z1^2 + z2^2 > r^2.
    """
    if not r > 0:
        raise DatasetError("r must be positive")
    if d1 < 0 or d2 < 0:
        raise DatasetError("domain offsets must be non-negative")
    if n < 1:
        raise DatasetError("n must be positive")
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(d1 - r, d1 + r, n)
    z2 = rng.uniform(d2 - r, d2 + r, n)
    y = (z1**2 + z2**2 > r**2).astype(np.float64)
    z = np.column_stack([z1, z2])
    return DomainDataset(z, y, f"disc_d1={d1:g}_d2={d2:g}", z.copy(), None)


def disc_conditional_exact(z1, d2: float, r: float) -> np.ndarray:
    """P(y = 1 | z1) for the disc counterexample with z2 ~ U(d2 - r, d2 + r)."""
    z1 = np.asarray(z1, dtype=np.float64)
    s = np.sqrt(np.clip(r * r - z1 * z1, 0.0, None))
    inside = np.clip(np.minimum(s, d2 + r) - np.maximum(-s, d2 - r), 0.0, None)
    return 1.0 - inside / (2.0 * r)


def disc_conditional_closed_form(z1, d2: float, r: float) -> np.ndarray:
    """The published closed form (2 sqrt(r^2 - z1^2) - d2) / (2 r)."""
    z1 = np.asarray(z1, dtype=np.float64)
    return (2.0 * np.sqrt(r * r - z1 * z1) - d2) / (2.0 * r)


def split_train_val(ds: DomainDataset, frac: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Random disjoint row split with ``round(frac * n)`` rows in the first part."""
    if not 0.0 < frac < 1.0:
        raise DatasetError("frac must lie strictly between 0 and 1")
    n = len(ds)
    if n < 2:
        raise DatasetError("need at least two rows to split")
    k = int(round(frac * n))
    if k == 0 or k == n:
        raise DatasetError(f"split of {n} rows at frac={frac} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def relabel(ds: DomainDataset, domain_id: str) -> DomainDataset:
    return replace(ds, domain_id=domain_id)


# CSV ------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_csv(datasets, path) -> None:
    """Columnar CSV: domain_id, y, x_0.., then zc_*/ze_* when every dataset carries them."""
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets:
        raise DatasetError("nothing to write")
    d = datasets[0].n_features
    if any(ds.n_features != d for ds in datasets):
        raise DatasetError("datasets must share a feature width")
    with_zc = all(ds.latent_causal is not None for ds in datasets)
    with_ze = all(ds.latent_spurious is not None for ds in datasets)
    dc = datasets[0].latent_causal.shape[1] if with_zc else 0
    de = datasets[0].latent_spurious.shape[1] if with_ze else 0
    header = ["domain_id", "y"] + [f"x_{i}" for i in range(d)]
    header += [f"zc_{i}" for i in range(dc)] + [f"ze_{i}" for i in range(de)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for ds in datasets:
            for i in range(len(ds)):
                row = [ds.domain_id, _fmt(ds.targets[i])] + [_fmt(v) for v in ds.features[i]]
                if with_zc:
                    row += [_fmt(v) for v in ds.latent_causal[i]]
                if with_ze:
                    row += [_fmt(v) for v in ds.latent_spurious[i]]
                w.writerow(row)


def read_csv(path) -> list[DomainDataset]:
    """Inverse of :func:`write_csv`; one dataset per domain_id in first-seen order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header[:2] != ["domain_id", "y"]:
        raise DatasetError(f"{path}: unexpected header {header[:2]}")
    cols = {prefix: [i for i, h in enumerate(header) if h.startswith(prefix)] for prefix in ("x_", "zc_", "ze_")}
    groups: dict[str, list[list[str]]] = {}
    for row in body:
        groups.setdefault(row[0], []).append(row)
    out = []
    for dom, grp in groups.items():
        arr = np.array([[float(v) for v in row[1:]] for row in grp])

        def block(prefix):
            idx = cols[prefix]
            return arr[:, [i - 1 for i in idx]] if idx else None

        out.append(DomainDataset(block("x_"), arr[:, 0], dom, block("zc_"), block("ze_")))
    return out
