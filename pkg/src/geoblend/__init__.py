from .errors import (
    ArgumentError,
    ConfigError,
    DomainError,
    GeoblendError,
    NotPositiveDefiniteError,
)
from .forward import assemble_observation_operator, observe, ricker_wavelet
from .inference import (
    estimate_blend_range,
    fit_ml,
    log_likelihood,
    posterior_mean,
    relative_error,
    sample_gmrf,
)
from .models import (
    AvaConfig,
    BoundaryCondition,
    Grid2D,
    HyperParams,
    JointModel,
    ModelKind,
    ObservationKind,
)
from .prior import build_model

__all__ = [
    "GeoblendError",
    "ArgumentError",
    "DomainError",
    "NotPositiveDefiniteError",
    "ConfigError",
    "AvaConfig",
    "BoundaryCondition",
    "Grid2D",
    "HyperParams",
    "JointModel",
    "ModelKind",
    "ObservationKind",
    "build_model",
    "assemble_observation_operator",
    "observe",
    "ricker_wavelet",
    "sample_gmrf",
    "posterior_mean",
    "log_likelihood",
    "fit_ml",
    "estimate_blend_range",
    "relative_error",
]
