"""
Built-in experiment presets: reconstruction studies with identity and AVA data, blend-range
estimation with a sine interface, and the identifiability studies.
"""

from collections.abc import Callable

from src.geoblend.errors import ConfigError
from src.geoblend.models import (
    AnisotropyRegion,
    AnisotropySpec,
    FlatInterface,
    Grid2D,
    HyperParams,
    ModelKind,
    ObservationKind,
    SineInterface,
)
from src.harness.config import (
    BlendSearchConfig,
    ExperimentConfig,
    ExperimentKind,
    ObservationConfig,
    parse_config,
)

GRID = Grid2D(nx=64, ny=64, h=1.0)
KAPPA2 = 0.1
MID_DEPTH = GRID.ny * GRID.h / 2
SINE_AMPLITUDE = 23.0

# Correlation triples (rho_12, rho_13, rho_23) above and below the interface.
RECONSTRUCTION_ABOVE = (0.99, 0.99, 0.99)
RECONSTRUCTION_BELOW = (-0.99, -0.99, 0.99)
DIRECT_ABOVE = (0.7, 0.2, 0.4)
DIRECT_BELOW = (0.7, -0.9, -0.85)
INDIRECT_ABOVE = (0.7, 0.6, 0.95)
INDIRECT_BELOW = (0.75, -0.9, -0.85)


def _flat() -> FlatInterface:
    return FlatInterface(depth=MID_DEPTH)


def _reconstruction(
    name: str,
    lambda2: float,
    observation: ObservationKind = ObservationKind.IDENTITY,
) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        kind=ExperimentKind.RECONSTRUCTION,
        model=ModelKind.MODEL2,
        fit_models=[ModelKind.MODEL2, ModelKind.MODEL1],
        grid=GRID,
        truth=HyperParams(
            kappa2=KAPPA2,
            lambda2=lambda2,
            rho_above=RECONSTRUCTION_ABOVE,
            rho_below=RECONSTRUCTION_BELOW,
            interface=_flat(),
        ),
        observation=ObservationConfig(kind=observation, sigma2=1.0),
        replicates=20,
    )


def _nonstationary(name: str, lambda2: float) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        kind=ExperimentKind.RECONSTRUCTION,
        model=ModelKind.MODEL3,
        fit_models=[ModelKind.MODEL3, ModelKind.MODEL1],
        grid=GRID,
        truth=HyperParams(
            kappa2=KAPPA2,
            lambda2=lambda2,
            rho_above=RECONSTRUCTION_ABOVE,
            rho_below=RECONSTRUCTION_BELOW,
            blend_range=8.0,
            interface=SineInterface(
                baseline=MID_DEPTH, amplitude=10.0, period=GRID.nx * GRID.h
            ),
            anisotropy=AnisotropySpec(
                ratio_major=16.0, ratio_minor=1.0, region=AnisotropyRegion.BELOW
            ),
        ),
        observation=ObservationConfig(kind=ObservationKind.IDENTITY, sigma2=1.0),
        replicates=20,
    )


def _blend_range(name: str, periods: float) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        kind=ExperimentKind.BLEND_RANGE,
        model=ModelKind.MODEL2,
        fit_models=[ModelKind.MODEL2],
        grid=GRID,
        truth=HyperParams(
            kappa2=KAPPA2,
            lambda2=0.5,
            rho_above=RECONSTRUCTION_ABOVE,
            rho_below=RECONSTRUCTION_BELOW,
            interface=SineInterface(
                baseline=MID_DEPTH,
                amplitude=SINE_AMPLITUDE,
                period=GRID.nx * GRID.h / periods,
            ),
        ),
        observation=ObservationConfig(kind=ObservationKind.IDENTITY, sigma2=1.0),
        blend_search=BlendSearchConfig(guess=_flat(), lo=0.0, hi=64.0, n_grid=9),
        replicates=30,
    )


def _identifiability(name: str, direct: bool) -> ExperimentConfig:
    above, below = (DIRECT_ABOVE, DIRECT_BELOW) if direct else (INDIRECT_ABOVE, INDIRECT_BELOW)
    return ExperimentConfig(
        name=name,
        kind=ExperimentKind.IDENTIFIABILITY,
        model=ModelKind.MODEL2,
        fit_models=[ModelKind.MODEL2],
        grid=GRID,
        truth=HyperParams(
            kappa2=KAPPA2,
            tau2=50.0,
            rho_above=above,
            rho_below=below,
            interface=_flat(),
        ),
        observation=ObservationConfig(
            kind=ObservationKind.IDENTITY, sigma2=0.0 if direct else 1.0
        ),
        replicates=50,
    )


PRESETS: dict[str, Callable[[], ExperimentConfig]] = {
    "identity-lambda50": lambda: _reconstruction("identity-lambda50", 50.0),
    "identity-lambda0.5": lambda: _reconstruction("identity-lambda0.5", 0.5),
    "ava-lambda0.5": lambda: _reconstruction("ava-lambda0.5", 0.5, ObservationKind.AVA),
    "ava-lambda20": lambda: _reconstruction("ava-lambda20", 20.0, ObservationKind.AVA),
    "nonstat-identity-lambda0.2": lambda: _nonstationary("nonstat-identity-lambda0.2", 0.2),
    "blend-range-sine-full": lambda: _blend_range("blend-range-sine-full", 1.0),
    "blend-range-sine-half": lambda: _blend_range("blend-range-sine-half", 0.5),
    "identifiability-direct": lambda: _identifiability("identifiability-direct", True),
    "identifiability-indirect": lambda: _identifiability("identifiability-indirect", False),
}


def list_presets() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str, **overrides: object) -> ExperimentConfig:
    """
    Build a preset config, optionally overriding top-level fields (replicates, seed, ...).

    Overrides are validated against the schema like a loaded config.

    :raises ConfigError: For an unknown preset or an invalid override.
    """
    if name not in PRESETS:
        raise ConfigError(
            f"Unknown preset '{name}'. Available presets: {', '.join(list_presets())}"
        )
    config = PRESETS[name]()
    updates = {key: value for key, value in overrides.items() if value is not None}
    if not updates:
        return config
    return parse_config(config.model_dump(mode="json") | updates)
