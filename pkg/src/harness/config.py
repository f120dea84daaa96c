import hashlib
import json
from enum import StrEnum
from pathlib import Path

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.geoblend.errors import ConfigError
from src.geoblend.forward import assemble_observation_operator, ricker_wavelet
from src.geoblend.models import (
    AvaConfig,
    BoundaryCondition,
    Grid2D,
    HyperParams,
    Interface,
    ModelKind,
    ObservationKind,
    ObservationOperator,
)

logger = structlog.get_logger(__name__)


class ExperimentKind(StrEnum):
    RECONSTRUCTION = "reconstruction"
    IDENTIFIABILITY = "identifiability"
    BLEND_RANGE = "blend_range"


class WaveletConfig(BaseModel):
    peak_freq: float = Field(0.15, gt=0)
    halfwidth: int = Field(12, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")


class ObservationConfig(BaseModel):
    """
    Observation scheme. Identity observations with sigma2 = 0 are direct observations of the
    fields; otherwise d = G m + eps with eps ~ N(0, sigma2 I).
    """

    kind: ObservationKind = ObservationKind.IDENTITY
    sigma2: float = Field(1.0, ge=0)
    angles_deg: list[float] = Field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0], min_length=1)
    gamma2: float = Field(0.25, ge=0)
    wavelet: WaveletConfig = Field(default_factory=WaveletConfig)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def direct(self) -> bool:
        return self.kind == ObservationKind.IDENTITY and self.sigma2 == 0

    def operator(self, grid: Grid2D, n_fields: int) -> ObservationOperator:
        if self.kind == ObservationKind.IDENTITY:
            return assemble_observation_operator(grid, None, sigma2=self.sigma2, n_fields=n_fields)
        return assemble_observation_operator(
            grid,
            AvaConfig.from_degrees(tuple(self.angles_deg), self.gamma2),
            ricker_wavelet(self.wavelet.peak_freq, self.wavelet.halfwidth),
            sigma2=self.sigma2,
        )


class FitConfig(BaseModel):
    """estimate=False skips the likelihood fits and predicts with the generating parameters."""

    estimate: bool = True
    maxiter: int = Field(200, ge=1)
    gtol: float = Field(1e-5, gt=0)

    model_config = ConfigDict(frozen=True, extra="forbid")


class BlendSearchConfig(BaseModel):
    guess: Interface
    lo: float = Field(0.0, ge=0)
    hi: float = Field(64.0, gt=0)
    n_grid: int = Field(9, ge=3)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def validate_interval(self) -> "BlendSearchConfig":
        if self.hi <= self.lo:
            raise ValueError("hi must be greater than lo")
        return self


class ExperimentConfig(BaseModel):
    """
    Complete description of an experiment; together with the seed it determines every
    output of a run.

    Attributes:
        model: Model generating the truth.
        fit_models: Models fitted and compared (reconstruction runs).
        truth: Generating hyperparameters; tau2 may be given as lambda2 = tau2 * sigma2.
    """

    name: str
    kind: ExperimentKind
    model: ModelKind = ModelKind.MODEL2
    fit_models: list[ModelKind] = Field(
        default_factory=lambda: [ModelKind.MODEL2, ModelKind.MODEL1], min_length=1
    )
    grid: Grid2D = Field(default_factory=lambda: Grid2D(nx=64, ny=64))
    bc: BoundaryCondition = BoundaryCondition.NEUMANN
    truth: HyperParams
    observation: ObservationConfig = Field(default_factory=ObservationConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    blend_search: BlendSearchConfig | None = None
    replicates: int = Field(20, ge=1)
    seed: int = Field(0, ge=0)
    save_fields: int = Field(1, ge=0)
    png: bool = False
    output_dir: str | None = None
    threads: int | None = Field(None, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def validate_experiment(self) -> "ExperimentConfig":
        if self.truth.tau2 is None:
            if self.truth.lambda2 is None:
                raise ValueError("truth needs tau2 or lambda2")
            if self.observation.sigma2 == 0:
                raise ValueError("truth needs tau2 when the observations are noise free")
        if self.kind != ExperimentKind.IDENTIFIABILITY and self.observation.sigma2 == 0:
            raise ValueError(f"{self.kind} experiments need noisy observations (sigma2 > 0)")
        if self.kind == ExperimentKind.BLEND_RANGE and self.blend_search is None:
            raise ValueError("blend_range experiments need a blend_search section")
        if self.observation.kind == ObservationKind.AVA and self.truth.n_fields != 3:
            raise ValueError("AVA observations need exactly 3 fields")
        return self

    @property
    def noise_sigma2(self) -> float:
        return self.observation.sigma2

    def truth_hyper(self) -> HyperParams:
        """Generating hyperparameters with tau2 resolved from lambda2 and the noise variance."""
        if self.truth.tau2 is not None:
            return self.truth.model_copy(update={"sigma2": self.noise_sigma2 or None})
        return self.truth.model_copy(
            update={
                "tau2": self.truth.lambda2 / self.noise_sigma2,
                "sigma2": self.noise_sigma2,
            }
        )

    def initial_hyper(self, kind: ModelKind) -> HyperParams:
        """
        Starting point of a fit: zero correlations, the generating kappa2 and scale, and the
        generating geometry. Noisy data are fitted in the lambda2 parametrization.
        """
        truth = self.truth_hyper()
        n_rho = truth.n_fields * (truth.n_fields - 1) // 2
        zeros = tuple(0.0 for _ in range(n_rho))
        update: dict[str, object] = {"rho_above": zeros, "sigma2": None}
        if kind == ModelKind.MODEL1:
            update["rho_below"] = None
        else:
            update["rho_below"] = zeros
        if self.observation.direct:
            update |= {"tau2": truth.tau2, "lambda2": None}
        else:
            update |= {"tau2": None, "lambda2": truth.tau2 * self.noise_sigma2}
        return HyperParams.model_validate(truth.model_dump() | update)

    def guess_hyper(self) -> HyperParams:
        """Generating hyperparameters with the guessed interface (blend-range runs)."""
        if self.blend_search is None:
            raise ConfigError("This experiment has no blend_search section")
        return self.truth_hyper().model_copy(update={"interface": self.blend_search.guess})


def format_validation_error(exc: ValidationError) -> str:
    """One line per problem, each prefixed with its dotted path in the document."""
    return "; ".join(
        f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
        for error in exc.errors()
    )


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {format_validation_error(exc)}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """
    Load and validate a JSON experiment config.

    :raises ConfigError: On malformed JSON or schema violations (message names the path).
    :raises OSError: When the file cannot be read.
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    config = parse_config(data)
    logger.info("Loaded experiment config", path=str(path), name=config.name)
    return config


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, compact separators)."""
    canonical = json.dumps(
        config.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode()).hexdigest()


def field_of(values: np.ndarray, grid: Grid2D, field: int) -> np.ndarray:
    """Component field `field` of a field-major joint vector as an (ny, nx) image."""
    return np.asarray(values)[field * grid.n : (field + 1) * grid.n].reshape(grid.ny, grid.nx)
