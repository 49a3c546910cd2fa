"""
Run configuration models.

A run is described by one JSON document validated into RunConfig before any
computation; flag overrides of the form section.field=value are applied to
the raw document first.
"""

import json
import os
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import RUN_CONFIG_FILE, SEQTM_OUTPUT_DIR, SEQTM_WORKERS
from app.errors import ConfigError
from app.models import (
    MAX_TILT_DEG,
    Em31Config,
    Em31Model,
    ExternalModel,
    ForwardModel,
    GaussianLinearModel,
    InterfaceGeometry,
    ModalEm31Model,
)
from app.sbi import AssimilationConfig, MapProposal, default_surrogate_atm
from app.storage import load_map
from app.training import AtmConfig
from app.transport import ComposedMap, GaussianDensity

MODEL_KINDS = ("em31", "em31-modal", "gaussian-linear", "external")


class GaussianConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: List[float] = Field(default_factory=lambda: [2.0])
    cov: List[List[float]] = Field(default_factory=lambda: [[0.25]])

    @model_validator(mode="after")
    def check_covariance(self):
        cov = np.asarray(self.cov, dtype=float)
        d = len(self.mean)
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be positive definite")
        return self

    def density(self) -> GaussianDensity:
        return GaussianDensity(self.mean, self.cov)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["em31", "em31-modal", "gaussian-linear", "external"]
    em31: Em31Config = Field(default_factory=Em31Config)
    # em31-modal
    n_modes: int = Field(0, ge=0)
    domain: Tuple[float, float] = (0.0, 100.0)
    positions: List[float] = Field(default_factory=lambda: [50.0])
    tilt: bool = False
    max_tilt_deg: float = Field(MAX_TILT_DEG, gt=0, lt=90)
    freeze_nuisance: bool = False
    # gaussian-linear
    matrix: Optional[List[List[float]]] = None
    noise_std: float = Field(1.0, gt=0)
    # external
    command: Optional[str] = None
    n_theta: int = Field(1, ge=1)
    n_y: int = Field(1, ge=1)
    n_nuisance: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == "external" and not self.command:
            raise ValueError("external models need a command")
        if self.kind == "em31-modal":
            InterfaceGeometry(self.n_modes, self.domain).modes(np.asarray(self.positions))
        return self

    def build(self, freeze_nuisance: Optional[bool] = None) -> ForwardModel:
        if self.kind == "em31":
            return Em31Model(self.em31)
        if self.kind == "em31-modal":
            freeze = self.freeze_nuisance if freeze_nuisance is None else freeze_nuisance
            return ModalEm31Model(InterfaceGeometry(self.n_modes, self.domain), self.positions,
                                  self.em31, tilt=self.tilt, freeze_nuisance=freeze,
                                  max_tilt_deg=self.max_tilt_deg)
        if self.kind == "gaussian-linear":
            return GaussianLinearModel(self.matrix, self.noise_std)
        return ExternalModel(self.command, self.n_theta, self.n_y, n_nuisance=self.n_nuisance)

    @property
    def theta_dim(self) -> int:
        if self.kind in ("em31",):
            return 1
        if self.kind == "em31-modal":
            return self.n_modes + 1
        if self.kind == "gaussian-linear":
            return 1 if self.matrix is None else len(self.matrix[0])
        return self.n_theta


class SimulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta_ref: List[float] = Field(default_factory=lambda: [2.0])
    n_steps: int = Field(40, ge=0)


class SurrogateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(20000, ge=10)
    atm: AtmConfig = Field(default_factory=default_surrogate_atm)
    proposal: Optional[GaussianConfig] = None
    proposal_maps: List[str] = Field(default_factory=list, description="posterior map files, composition order")
    save_samples: bool = True

    @model_validator(mode="after")
    def check_proposal(self):
        if self.proposal is not None and self.proposal_maps:
            raise ValueError("give either a Gaussian proposal or proposal maps, not both")
        return self


class McmcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(100000, ge=2)
    burn_in: float = Field(0.1, ge=0, lt=1)
    step: Optional[int] = Field(None, ge=1, description="assimilation step to compare, default last")
    tm_run: Optional[str] = Field(None, description="directory of an assimilate run")


class DiagnoseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int = Field(1, ge=1)
    theta_min: float = 1.0
    theta_max: float = 3.0
    n_theta: int = Field(21, ge=2)
    n_y: int = Field(21, ge=2)
    y_halfwidth: float = Field(2.0, gt=0, description="in units of sigma_eps")

    @model_validator(mode="after")
    def check_range(self):
        if not self.theta_max > self.theta_min >= 0:
            raise ValueError("need 0 <= theta_min < theta_max")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig
    prior: GaussianConfig = Field(default_factory=GaussianConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    surrogates: SurrogateConfig = Field(default_factory=SurrogateConfig)
    assimilation: AssimilationConfig = Field(default_factory=AssimilationConfig)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    diagnose: DiagnoseConfig = Field(default_factory=DiagnoseConfig)
    n_posterior_samples: int = Field(5000, ge=1, description="final posterior sample count")
    output_dir: str = SEQTM_OUTPUT_DIR
    workers: int = Field(SEQTM_WORKERS, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_dimensions(self):
        d = self.model.theta_dim
        if len(self.prior.mean) != d:
            raise ValueError(f"prior has dimension {len(self.prior.mean)}, model expects {d}")
        if self.simulation.n_steps and len(self.simulation.theta_ref) != d:
            raise ValueError(f"theta_ref has dimension {len(self.simulation.theta_ref)}, model expects {d}")
        if self.surrogates.proposal is not None and len(self.surrogates.proposal.mean) != d:
            raise ValueError("proposal dimension does not match the model")
        return self

    def proposal(self) -> Union[GaussianDensity, MapProposal]:
        """Phase I proposal: stored posterior maps, a Gaussian, or the prior."""
        if self.surrogates.proposal_maps:
            try:
                composition = ComposedMap(tuple(load_map(p) for p in self.surrogates.proposal_maps))
            except ValueError as e:
                raise ConfigError(f"invalid proposal maps: {e}") from e
            if composition.dim != self.model.theta_dim:
                raise ConfigError(f"proposal maps have dimension {composition.dim}, "
                                  f"model expects {self.model.theta_dim}")
            return MapProposal(composition)
        return (self.surrogates.proposal or self.prior).density()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply "a.b.c=value" overrides (value parsed as JSON when possible)."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.field=value, got {item!r}")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override inside non-object field {part!r}")
            node = child
        node[parts[-1]] = _parse_value(value.strip())
    return data


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read, override and validate a run configuration."""
    data = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return RunConfig.model_validate(apply_overrides(data, overrides))


def dump_run_config(cfg: RunConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RUN_CONFIG_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.model_dump_json(indent=2))
    return path
