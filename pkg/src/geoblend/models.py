from enum import StrEnum
from typing import Annotated, Literal, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class BoundaryCondition(StrEnum):
    """Boundary treatment of the finite-difference operator."""

    NEUMANN = "neumann"  # reflecting ghost nodes, default
    DIRICHLET = "dirichlet"  # zero ghost values
    PERIODIC = "periodic"  # torus, used for Matern validation


class ModelKind(StrEnum):
    """The three prior models compared in the reconstruction studies."""

    MODEL1 = "model1"  # stationary, single cross-field correlation
    MODEL2 = "model2"  # stationary operator, correlation changes at the interface
    MODEL3 = "model3"  # curve-following anisotropy plus blended correlations


class ObservationKind(StrEnum):
    IDENTITY = "identity"
    AVA = "ava"


class AnisotropyRegion(StrEnum):
    ABOVE = "above"
    BELOW = "below"
    EVERYWHERE = "everywhere"


class Grid2D(BaseModel):
    """
    Regular 2-D grid with equal spacing in both directions.

    Nodes are ordered row-major with x fastest, so node (i, j) has index i + nx * j.
    The y axis is depth and increases downward.
    """

    nx: int = Field(..., ge=3)
    ny: int = Field(..., ge=3)
    h: float = Field(1.0, gt=0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def index(self, i: int, j: int) -> int:
        return i + self.nx * j

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Per-node coordinates in grid ordering.

        :return: Tuple (x, y) of flat arrays of length nx * ny.
        """
        i = np.tile(np.arange(self.nx), self.ny)
        j = np.repeat(np.arange(self.ny), self.nx)
        return i * self.h, j * self.h


class CoefficientFields(BaseModel):
    """Per-node anisotropy tensor entries (a21 = a12) and the kappa^2 field."""

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    kappa2: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @classmethod
    def constant(
        cls,
        grid: Grid2D,
        a11: float = 1.0,
        a12: float = 0.0,
        a22: float = 1.0,
        kappa2: float = 0.1,
    ) -> "CoefficientFields":
        ones = np.ones(grid.n)
        return cls(a11=a11 * ones, a12=a12 * ones, a22=a22 * ones, kappa2=kappa2 * ones)

    @classmethod
    def isotropic(cls, grid: Grid2D, kappa2: float) -> "CoefficientFields":
        return cls.constant(grid, kappa2=kappa2)


class FlatInterface(BaseModel):
    kind: Literal["flat"] = "flat"
    depth: float

    model_config = ConfigDict(frozen=True, extra="forbid")

    def curve(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=float), self.depth)

    def slope(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=float))


class SineInterface(BaseModel):
    """Interface at depth baseline + amplitude * sin(2 pi x / period + phase)."""

    kind: Literal["sine"] = "sine"
    baseline: float
    amplitude: float
    period: float = Field(..., gt=0)
    phase: float = 0.0

    model_config = ConfigDict(frozen=True, extra="forbid")

    def curve(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.baseline + self.amplitude * np.sin(
            2 * np.pi * x / self.period + self.phase
        )

    def slope(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        omega = 2 * np.pi / self.period
        return self.amplitude * omega * np.cos(omega * x + self.phase)


class PolylineInterface(BaseModel):
    """Piecewise linear interface, held constant beyond the end vertices."""

    kind: Literal["polyline"] = "polyline"
    vertices: list[tuple[float, float]] = Field(..., min_length=2)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @field_validator("vertices")
    @classmethod
    def validate_increasing(
        cls, v: list[tuple[float, float]]
    ) -> list[tuple[float, float]]:
        xs = [x for x, _ in v]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("Polyline vertices must be strictly increasing in x.")
        return v

    def curve(self, x: np.ndarray) -> np.ndarray:
        xs, ys = zip(*self.vertices)
        return np.interp(np.asarray(x, dtype=float), xs, ys)

    def slope(self, x: np.ndarray) -> np.ndarray:
        xs = np.array([p[0] for p in self.vertices])
        ys = np.array([p[1] for p in self.vertices])
        slopes = np.diff(ys) / np.diff(xs)
        segment = np.clip(np.searchsorted(xs, np.asarray(x, dtype=float)) - 1, 0, len(slopes) - 1)
        return slopes[segment]


Interface = Annotated[
    Union[FlatInterface, SineInterface, PolylineInterface], Field(discriminator="kind")
]


class AnisotropySpec(BaseModel):
    """Squared principal lengths along (major) and across (minor) the interface tangent."""

    ratio_major: float = Field(..., gt=0)
    ratio_minor: float = Field(..., gt=0)
    region: AnisotropyRegion = AnisotropyRegion.BELOW

    model_config = ConfigDict(frozen=True, extra="forbid")


class BlendSpec(BaseModel):
    """Two layer correlation matrices and the blend range around the interface."""

    sigma_above: np.ndarray
    sigma_below: np.ndarray
    range: float = Field(..., ge=0)
    interface: Interface

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class BlendField(BaseModel):
    """
    Per-node local correlation Sigma0(s), blending coefficients Q0(s) = Sigma0(s)^-1 and the
    upper-triangular factor u(s) with Q0(s) = u(s)^T u(s).

    Arrays are stacked per node: shape (n, d, d); t holds the geodesic parameter per node.
    """

    sigma: np.ndarray
    q: np.ndarray
    u: np.ndarray
    t: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def n_fields(self) -> int:
        return int(self.sigma.shape[1])


class CorrelationReport(BaseModel):
    is_correlation: bool
    max_diag_deviation: float
    renormalized: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class MaternReference(BaseModel):
    """Matern covariance at a distance and the marginal variance it decays from."""

    rho: float
    variance: float


class HyperParams(BaseModel):
    """
    Full hyperparameter record of a prior model.

    Correlation triples list the strictly upper off-diagonal entries row by row,
    i.e. (rho_12, rho_13, rho_23) for three fields. rho_below defaults to rho_above.
    Exactly one of tau2 or lambda2 (= tau2 * sigma2) is usually set; the likelihood
    decides which parametrization it uses from what is present.
    """

    kappa2: float = Field(..., gt=0)
    tau2: float | None = Field(None, gt=0)
    lambda2: float | None = Field(None, gt=0)
    sigma2: float | None = Field(None, ge=0)
    rho_above: tuple[float, ...]
    rho_below: tuple[float, ...] | None = None
    blend_range: float = Field(0.0, ge=0)
    interface: Interface | None = None
    anisotropy: AnisotropySpec | None = None
    n_fields: int = Field(3, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def validate_triples(self) -> "HyperParams":
        expected = self.n_fields * (self.n_fields - 1) // 2
        for name in ("rho_above", "rho_below"):
            value = getattr(self, name)
            if value is not None and len(value) != expected:
                raise ValueError(
                    f"{name} must hold {expected} off-diagonal entries for {self.n_fields} fields, got {len(value)}"
                )
        return self

    @property
    def below(self) -> tuple[float, ...]:
        return self.rho_below if self.rho_below is not None else self.rho_above


class JointModel(BaseModel):
    """Joint precision over all component fields, stacked field-major [m1; m2; m3]."""

    Q: sp.csr_matrix
    grid: Grid2D
    hyper: HyperParams
    kind: ModelKind
    bc: BoundaryCondition = BoundaryCondition.NEUMANN

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def n_fields(self) -> int:
        return self.hyper.n_fields


class AvaConfig(BaseModel):
    """Reflection angles in radians and the background (vS/vP)^2 ratio."""

    angles: list[float] = Field(..., min_length=1)
    gamma2: float = Field(0.25, ge=0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @field_validator("angles")
    @classmethod
    def validate_angles(cls, v: list[float]) -> list[float]:
        if any(not 0 <= theta < np.pi / 2 for theta in v):
            raise ValueError("Reflection angles must lie in [0, pi/2).")
        return v

    @classmethod
    def from_degrees(
        cls,
        angles_deg: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0),
        gamma2: float = 0.25,
    ) -> "AvaConfig":
        return cls(angles=[float(np.deg2rad(a)) for a in angles_deg], gamma2=gamma2)


class Wavelet(BaseModel):
    samples: np.ndarray
    dt: float = 1.0
    peak_index: int

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def halfwidth(self) -> int:
        return self.peak_index


class ObservationOperator(BaseModel):
    """Observation matrix G (rows: observations, columns: n_fields * n) and noise variance."""

    G: sp.csr_matrix
    kind: ObservationKind
    sigma2: float = Field(..., ge=0)

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def n_obs(self) -> int:
        return int(self.G.shape[0])

    @property
    def is_direct(self) -> bool:
        return self.kind == ObservationKind.IDENTITY and self.sigma2 == 0


class ObservationSet(BaseModel):
    d: np.ndarray
    operator: ObservationOperator
    seed: int
    truth_ref: str | None = None

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_length(self) -> "ObservationSet":
        if len(self.d) != self.operator.n_obs:
            raise ValueError(
                f"Observation vector has length {len(self.d)} but G has {self.operator.n_obs} rows."
            )
        return self


class LikelihoodEval(BaseModel):
    loglik: float
    profiled_sigma2: float | None = None


class FitResult(BaseModel):
    estimate: HyperParams
    loglik: float
    iterations: int
    converged: bool
    history: list[float] = Field(default_factory=list)
    per_replicate: list["FitResult"] = Field(default_factory=list)


class PosteriorResult(BaseModel):
    mean: np.ndarray
    Q_post: sp.csr_matrix
    relative_error: float | None = None

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class BlendRangeEstimate(BaseModel):
    """Maximizing blend range with the sampled profile log-likelihood curve."""

    range: float
    loglik: float
    grid: list[float]
    profile: list[float]
