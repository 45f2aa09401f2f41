"""Two-headed architecture: shared featurizer, general head, specific head.

Test-time predictions only pass through the featurizer, the general
representation ``phi`` and the shared predictor ``theta_c``. The specific
representation ``psi`` and the per-domain predictors exist for training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diff_core as dc
from .diff_core import Tensor

TASKS = ("regression", "binary")
FEATURIZERS = ("identity", "linear", "mlp")


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    num_domains: int
    phi_dim: int = 1
    psi_dim: int = 1
    featurizer: str = "identity"
    hidden_dim: int = 64
    task: str = "regression"
    bias: bool = True
    # pins the shared predictor to ones (the dummy-predictor evaluation)
    freeze_theta_c: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.featurizer not in FEATURIZERS:
            raise ValueError(f"featurizer must be one of {FEATURIZERS}")
        dims = [self.input_dim, self.num_domains, self.phi_dim, self.psi_dim]
        if self.featurizer != "identity":
            dims.append(self.hidden_dim)
        if min(dims) < 1:
            raise ValueError("layer widths and domain count must be positive")

    @property
    def feature_dim(self) -> int:
        return self.input_dim if self.featurizer == "identity" else self.hidden_dim

    @property
    def is_linear(self) -> bool:
        return self.featurizer in ("identity", "linear")


class TcriModel:
    """Parameters keyed by dotted name, grouped by prefix.

    Groups: ``F.*`` featurizer, ``phi.*``, ``psi.*``, ``theta_c.*`` and
    ``theta_e.<i>.*`` for each training domain.
    """

    def __init__(self, arch: ArchConfig, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params

    @property
    def num_domains(self) -> int:
        return self.arch.num_domains

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k == prefix or k.startswith(prefix + ".")}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def copy(self) -> "TcriModel":
        return TcriModel(
            self.arch,
            {k: Tensor(v.value.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def set_value(self, name: str, value: np.ndarray) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise dc.ShapeError(f"{name}: expected shape {p.value.shape}, got {value.shape}")
        p.value = value.copy()

    # forward pieces -------------------------------------------------------

    def featurize(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise dc.ShapeError(f"expected input of width {self.arch.input_dim}, got shape {x.shape}")
        kind = self.arch.featurizer
        if kind == "identity":
            return x
        h = self._linear(x, "F.0")
        return dc.relu(h) if kind == "mlp" else h

    def phi(self, h: Tensor) -> Tensor:
        return self._linear(h, "phi")

    def psi(self, h: Tensor) -> Tensor:
        return self._linear(h, "psi")

    def general_head(self, z: Tensor) -> Tensor:
        return dc.reshape(self._linear(z, "theta_c"), (-1,))

    def domain_head(self, z: Tensor, domain_index: int) -> Tensor:
        return dc.reshape(self._linear(z, f"theta_e.{self._check_domain(domain_index)}"), (-1,))

    def _check_domain(self, i: int) -> int:
        if not (isinstance(i, (int, np.integer)) and 0 <= i < self.num_domains):
            raise IndexError(f"domain index {i} out of range for {self.num_domains} training domains")
        return int(i)

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        out = dc.matmul(x, self.params[prefix + ".w"])
        b = self.params.get(prefix + ".b")
        return out if b is None else dc.add(out, b)


def forward_general(model: TcriModel, x) -> Tensor:
    """Shared predictor on the general representation; raw scores for binary tasks."""
    return model.general_head(model.phi(model.featurize(x)))


def forward_domain(model: TcriModel, x, domain_index: int) -> Tensor:
    model._check_domain(domain_index)
    h = model.featurize(x)
    return model.domain_head(dc.concat([model.phi(h), model.psi(h)], axis=1), domain_index)


def init_model(arch: ArchConfig, seed: int) -> TcriModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def layer(prefix, fan_in, fan_out, bias=arch.bias, trainable=True):
        lim = 1.0 / np.sqrt(fan_in)
        params[prefix + ".w"] = Tensor(rng.uniform(-lim, lim, (fan_in, fan_out)), trainable, prefix + ".w")
        if bias:
            params[prefix + ".b"] = Tensor(rng.uniform(-lim, lim, fan_out), trainable, prefix + ".b")

    if arch.featurizer != "identity":
        layer("F.0", arch.input_dim, arch.hidden_dim)
    h = arch.feature_dim
    layer("phi", h, arch.phi_dim)
    layer("psi", h, arch.psi_dim)
    if arch.freeze_theta_c:
        params["theta_c.w"] = Tensor(np.ones((arch.phi_dim, 1)), False, "theta_c.w")
    else:
        layer("theta_c", arch.phi_dim, 1)
    for i in range(arch.num_domains):
        layer(f"theta_e.{i}", arch.phi_dim + arch.psi_dim, 1)
    return TcriModel(arch, params)


# checkpoints ---------------------------------------------------------------

_MAGIC = "# tcri-checkpoint v1"


def save_checkpoint(model: TcriModel, path) -> None:
    """Text file: arch line, then one ``param <name> <trainable> <shape...>`` header per tensor
    followed by a line of values at 17 significant digits."""
    lines = [_MAGIC, "arch " + " ".join(f"{k}={v}" for k, v in asdict(model.arch).items())]
    for name, t in model.params.items():
        shape = " ".join(str(s) for s in t.value.shape)
        lines.append(f"param {name} {int(t.requires_grad)} {t.value.ndim} {shape}".rstrip())
        lines.append(" ".join(f"{v:.17g}" for v in t.value.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_field(raw: str):
    if raw in ("True", "False"):
        return raw == "True"
    try:
        return int(raw)
    except ValueError:
        return raw


def load_checkpoint(path) -> TcriModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a tcri checkpoint")
    fields = dict(item.split("=", 1) for item in lines[1].split()[1:])
    arch = ArchConfig(**{k: _parse_field(v) for k, v in fields.items()})
    params: dict[str, Tensor] = {}
    for header, values in zip(lines[2::2], lines[3::2]):
        parts = header.split()
        name, trainable, ndim = parts[1], parts[2] == "1", int(parts[3])
        shape = tuple(int(s) for s in parts[4 : 4 + ndim])
        flat = np.array([float(v) for v in values.split()], dtype=np.float64)
        params[name] = Tensor(flat.reshape(shape), trainable, name)
    return TcriModel(arch, params)
