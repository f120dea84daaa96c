"""
Geometry of the manifold of symmetric positive-definite matrices under the affine-invariant
metric: matrix powers, geodesics, distances, curve lengths and correlation diagnostics.

All matrix functions go through a symmetric eigendecomposition; the matrices involved are
the small local cross-field correlation/precision matrices (d <= 8).
"""

from collections.abc import Sequence

import numpy as np
import scipy.linalg
import structlog

from src.geoblend.errors import ArgumentError, DomainError
from src.geoblend.models import CorrelationReport

logger = structlog.get_logger(__name__)

EIGENVALUE_FLOOR = 1e-12
SYMMETRY_RTOL = 1e-12


def validate_spd(a: np.ndarray, name: str = "A") -> np.ndarray:
    """
    Check that a matrix is square and symmetric and return its symmetrized float copy.

    Positive definiteness is checked by the eigendecomposition of each operation.

    :param a: Candidate matrix.
    :param name: Name used in error messages.
    :return: Symmetrized float64 array.
    """
    arr = np.array(a, dtype=float, ndmin=2)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ArgumentError(f"{name} must be a square matrix, got shape {arr.shape}")
    scale = max(float(np.abs(arr).max()), np.finfo(float).tiny)
    if np.abs(arr - arr.T).max() > SYMMETRY_RTOL * scale:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (arr + arr.T)


def _spd_eigh(a: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    eigvals, eigvecs = np.linalg.eigh(validate_spd(a, name))
    if eigvals[0] <= 0:
        raise DomainError(
            f"{name} is not positive definite (eigenvalues {eigvals[0]:.3e} .. {eigvals[-1]:.3e})"
        )
    if eigvals[0] <= EIGENVALUE_FLOOR * eigvals[-1]:
        raise DomainError(
            f"{name} is ill-conditioned (condition number {eigvals[-1] / eigvals[0]:.3e} "
            f"exceeds {1 / EIGENVALUE_FLOOR:.0e})"
        )
    return eigvals, eigvecs


def _from_eig(eigvals: np.ndarray, eigvecs: np.ndarray) -> np.ndarray:
    out = (eigvecs * eigvals) @ eigvecs.T
    return 0.5 * (out + out.T)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ArgumentError(
            f"Matrices must share a dimension, got {np.shape(a)} and {np.shape(b)}"
        )


def spd_power(a: np.ndarray, t: float) -> np.ndarray:
    """
    Real matrix power U diag(lambda^t) U^T of an SPD matrix.

    :param a: SPD matrix.
    :param t: Any real exponent.
    :return: SPD matrix a^t.
    """
    eigvals, eigvecs = _spd_eigh(a, "A")
    return _from_eig(eigvals**t, eigvecs)


def spd_log(a: np.ndarray) -> np.ndarray:
    """Matrix logarithm of an SPD matrix; the result is symmetric."""
    eigvals, eigvecs = _spd_eigh(a, "A")
    return _from_eig(np.log(eigvals), eigvecs)


def spd_exp(s: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix; the result is SPD."""
    eigvals, eigvecs = np.linalg.eigh(validate_spd(s, "S"))
    return _from_eig(np.exp(eigvals), eigvecs)


def geodesic_point(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """
    Point A #_t B = A^1/2 (A^-1/2 B A^-1/2)^t A^1/2 on the geodesic from A (t=0) to B (t=1).

    The endpoints are returned exactly.

    :param a: SPD start point.
    :param b: SPD end point.
    :param t: Geodesic parameter in [0, 1].
    :return: SPD matrix on the geodesic.
    """
    _check_pair(a, b)
    if not 0.0 <= t <= 1.0:
        raise ArgumentError(f"Geodesic parameter must lie in [0, 1], got {t}")

    eigvals, eigvecs = _spd_eigh(a, "A")
    b_sym = validate_spd(b, "B")
    _spd_eigh(b_sym, "B")
    if t == 0.0:
        return validate_spd(a, "A")
    if t == 1.0:
        return b_sym

    a_half = _from_eig(np.sqrt(eigvals), eigvecs)
    a_inv_half = _from_eig(1.0 / np.sqrt(eigvals), eigvecs)
    inner = a_inv_half @ b_sym @ a_inv_half
    out = a_half @ spd_power(0.5 * (inner + inner.T), t) @ a_half
    return 0.5 * (out + out.T)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Affine-invariant distance ||log(A^-1/2 B A^-1/2)||_F.

    Computed from the generalized eigenvalues of (B, A), which are the eigenvalues of
    A^-1/2 B A^-1/2.
    """
    _check_pair(a, b)
    a_sym = validate_spd(a, "A")
    b_sym = validate_spd(b, "B")
    _spd_eigh(a_sym, "A")
    _spd_eigh(b_sym, "B")
    if np.array_equal(a_sym, b_sym):
        return 0.0
    gen_eigvals = scipy.linalg.eigh(b_sym, a_sym, eigvals_only=True)
    return float(np.sqrt(np.sum(np.log(gen_eigvals) ** 2)))


def curve_length(samples: Sequence[np.ndarray]) -> float:
    """
    Length of a sampled curve on the SPD manifold.

    Sums the exact geodesic chord between consecutive samples; converges to the
    integrated line element as the sampling is refined.

    :param samples: Ordered SPD matrices along the curve.
    :return: Non-negative curve length.
    """
    if len(samples) < 2:
        raise ArgumentError(f"A curve needs at least 2 samples, got {len(samples)}")
    return float(
        sum(geodesic_distance(p, q) for p, q in zip(samples[:-1], samples[1:]))
    )


def boltzmann_entropy(q: np.ndarray) -> float:
    """Boltzmann entropy 1/2 log det Q^-1 of a Gaussian with precision Q (constant C = 0)."""
    eigvals, _ = _spd_eigh(q, "Q")
    return float(-0.5 * np.sum(np.log(eigvals)))


def correlation_check(a: np.ndarray, tol: float = 1e-8) -> CorrelationReport:
    """
    Check how far an SPD matrix is from being a correlation matrix.

    :param a: SPD matrix.
    :param tol: Allowed deviation of each diagonal entry from 1.
    :return: Report with the flag, the largest diagonal deviation and D^-1/2 A D^-1/2.
    """
    a_sym = validate_spd(a, "A")
    _spd_eigh(a_sym, "A")
    diag = np.diag(a_sym)
    deviation = float(np.abs(diag - 1.0).max())
    scale = 1.0 / np.sqrt(diag)
    renormalized = a_sym * np.outer(scale, scale)
    np.fill_diagonal(renormalized, 1.0)
    if deviation > tol:
        logger.debug("Matrix is not a correlation matrix", max_diag_deviation=deviation, tol=tol)
    return CorrelationReport(
        is_correlation=deviation <= tol,
        max_diag_deviation=deviation,
        renormalized=renormalized,
    )


def correlation_from_offdiag(rho: Sequence[float], n_fields: int) -> np.ndarray:
    """
    Unit-diagonal symmetric matrix from its strictly upper entries listed row by row.

    For three fields the order is (rho_12, rho_13, rho_23).
    """
    expected = n_fields * (n_fields - 1) // 2
    if len(rho) != expected:
        raise ArgumentError(
            f"Expected {expected} off-diagonal entries for {n_fields} fields, got {len(rho)}"
        )
    out = np.eye(n_fields)
    rows, cols = np.triu_indices(n_fields, k=1)
    out[rows, cols] = rho
    out[cols, rows] = rho
    return out


def offdiag_from_correlation(r: np.ndarray) -> tuple[float, ...]:
    """Inverse of correlation_from_offdiag."""
    rows, cols = np.triu_indices(r.shape[0], k=1)
    return tuple(float(v) for v in r[rows, cols])
