"""
Linearized seismic AVA forward model: reflectivity per angle, Ricker wavelet, the
observation operator G and noisy synthetic observations d = G m + eps.
"""

import numpy as np
import scipy.sparse as sp
import structlog

from src.geoblend.errors import ArgumentError
from src.geoblend.models import (
    AvaConfig,
    Grid2D,
    ObservationKind,
    ObservationOperator,
    ObservationSet,
    Wavelet,
)

logger = structlog.get_logger(__name__)

DEFAULT_PEAK_FREQ = 0.15
DEFAULT_HALFWIDTH = 12


def reflectivity_coefficients(theta: float, gamma2: float) -> tuple[float, float, float]:
    """
    Weights of the linearized PP reflection coefficient r = c1 m1 + c2 m2 + c3 m3.

    :param theta: Reflection angle in radians, in [0, pi/2).
    :param gamma2: Background (vS/vP)^2 ratio.
    :return: (c1, c2, c3) for the P-velocity, S-velocity and density contrasts.
    """
    if not 0 <= theta < np.pi / 2:
        raise ArgumentError(f"Reflection angle must lie in [0, pi/2), got {theta}")
    if gamma2 < 0:
        raise ArgumentError(f"gamma2 must be non-negative, got {gamma2}")

    sin2 = np.sin(theta) ** 2
    c1 = 0.5 * (1.0 + np.tan(theta) ** 2)
    c2 = -4.0 * gamma2 * sin2
    c3 = 0.5 * (1.0 - 4.0 * gamma2 * sin2)
    return float(c1), float(c2), float(c3)


def ricker_wavelet(
    peak_freq: float = DEFAULT_PEAK_FREQ,
    halfwidth: int = DEFAULT_HALFWIDTH,
    dt: float = 1.0,
) -> Wavelet:
    """
    Ricker wavelet (1 - 2 pi^2 f^2 t^2) exp(-pi^2 f^2 t^2) sampled on t = -halfwidth .. halfwidth.

    :param peak_freq: Peak frequency in cycles per grid cell.
    :param halfwidth: Number of samples on each side of the peak.
    :param dt: Sample spacing in grid cells.
    """
    if peak_freq <= 0:
        raise ArgumentError(f"Peak frequency must be positive, got {peak_freq}")
    if halfwidth < 1:
        raise ArgumentError(f"Wavelet halfwidth must be at least 1, got {halfwidth}")

    t = np.arange(-halfwidth, halfwidth + 1) * dt
    arg = (np.pi * peak_freq * t) ** 2
    samples = (1.0 - 2.0 * arg) * np.exp(-arg)
    return Wavelet(samples=samples, dt=dt, peak_index=halfwidth)


def impulse_wavelet() -> Wavelet:
    """Unit impulse; convolution with it leaves the reflectivity unchanged."""
    return Wavelet(samples=np.array([0.0, 1.0, 0.0]), dt=1.0, peak_index=1)


def convolution_matrix(grid: Grid2D, wavelet: Wavelet) -> sp.csr_matrix:
    """
    Convolution with the wavelet along depth in every vertical trace, zero-padded at both
    trace ends.

    Output depth j receives sum_j' w[j - j' + peak] r[j'], so a spike at depth j0 is
    replaced by the wavelet centred on j0.
    """
    offsets, values = [], []
    for k, w in enumerate(wavelet.samples):
        lag = k - wavelet.peak_index
        if w != 0 and abs(lag) < grid.ny:
            offsets.append(-lag)
            values.append(float(w))
    trace = sp.diags(values, offsets, shape=(grid.ny, grid.ny), format="csr")
    return sp.kron(trace, sp.identity(grid.nx, format="csr"), format="csr")


def assemble_observation_operator(
    grid: Grid2D,
    config: AvaConfig | None = None,
    wavelet: Wavelet | None = None,
    sigma2: float = 0.0,
    n_fields: int = 3,
) -> ObservationOperator:
    """
    Observation operator for identity observations (config is None) or AVA data.

    The AVA operator stacks one block row [c1 C, c2 C, c3 C] per angle, C being the trace
    convolution, for n * len(angles) rows in total.

    :param grid: Grid.
    :param config: Angles and gamma2; None for identity observations.
    :param wavelet: Source wavelet, required for AVA data.
    :param sigma2: Noise variance.
    :param n_fields: Number of component fields for identity observations.
    """
    if sigma2 < 0:
        raise ArgumentError(f"Noise variance must be non-negative, got {sigma2}")

    if config is None:
        G = sp.identity(n_fields * grid.n, format="csr")
        logger.debug("Assembled identity observation operator", n_obs=G.shape[0])
        return ObservationOperator(G=G, kind=ObservationKind.IDENTITY, sigma2=sigma2)

    if wavelet is None:
        raise ArgumentError("AVA observations require a wavelet")

    conv = convolution_matrix(grid, wavelet)
    rows = [
        [c * conv for c in reflectivity_coefficients(theta, config.gamma2)]
        for theta in config.angles
    ]
    G = sp.bmat(rows, format="csr")
    G.eliminate_zeros()
    logger.info(
        "Assembled AVA observation operator",
        angles=len(config.angles),
        n_obs=G.shape[0],
        nnz=G.nnz,
        sigma2=sigma2,
    )
    return ObservationOperator(G=G, kind=ObservationKind.AVA, sigma2=sigma2)


def observe(
    op: ObservationOperator,
    m: np.ndarray,
    seed: int | np.random.SeedSequence,
    truth_ref: str | None = None,
) -> ObservationSet:
    """
    Synthetic observations d = G m + eps with eps ~ N(0, sigma2 I) drawn from the seed.

    :param op: Observation operator.
    :param m: Joint field vector, field-major.
    :param seed: Integer seed or SeedSequence; equal seeds give identical d.
    :param truth_ref: Optional label or path of the generating field.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (op.G.shape[1],):
        raise ArgumentError(
            f"Field vector has shape {m.shape}, operator expects ({op.G.shape[1]},)"
        )

    d = op.G @ m
    if op.sigma2 > 0:
        rng = np.random.default_rng(seed)
        d = d + np.sqrt(op.sigma2) * rng.standard_normal(op.n_obs)

    seed_value = (
        int(seed.generate_state(1)[0]) if isinstance(seed, np.random.SeedSequence) else int(seed)
    )
    return ObservationSet(d=d, operator=op, seed=seed_value, truth_ref=truth_ref)
