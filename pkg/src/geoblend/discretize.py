"""
Finite-difference discretization of kappa^2(s) - div A(s) grad on a regular 2-D grid,
precision assembly and Matern reference formulas.

The operator follows the variable-coefficient difference scheme
(Lambda_xx + Lambda_xy^+ + Lambda_yx^+ + Lambda_yy) with the averaged diagonal coefficients
alpha11(i, j) = (a11(i, j) + a11(i-1, j)) / 2 and alpha22(i, j) = (a22(i, j) + a22(i, j-1)) / 2.
Fields are stored flat in grid order and reshaped to (ny, nx) internally.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.special
import structlog

from src.geoblend.errors import ArgumentError, DomainError
from src.geoblend.models import (
    BoundaryCondition,
    CoefficientFields,
    Grid2D,
    MaternReference,
)

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class _DifferenceTerm:
    """scale * coef(node) * (u(node + plus) - u(node + minus)) as part of the Lambda sum."""

    coef: np.ndarray
    scale: float
    plus: tuple[int, int]
    minus: tuple[int, int]


def _shift(field: np.ndarray, di: int, dj: int, bc: BoundaryCondition) -> np.ndarray:
    """
    Evaluate a (ny, nx) coefficient field at (i + di, j + dj) for every node.

    Lookups outside the grid wrap for periodic boundaries and clamp otherwise.
    """
    ny, nx = field.shape
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    if bc == BoundaryCondition.PERIODIC:
        return field[(j + dj) % ny, (i + di) % nx]
    return field[np.clip(j + dj, 0, ny - 1), np.clip(i + di, 0, nx - 1)]


def _neighbour(
    grid: Grid2D, offset: tuple[int, int], bc: BoundaryCondition
) -> tuple[np.ndarray, np.ndarray]:
    """
    Column index of the neighbour at offset (di, dj) for every node.

    :return: (columns, valid) where valid is False where a Dirichlet ghost node is hit.
    """
    di, dj = offset
    j, i = np.meshgrid(np.arange(grid.ny), np.arange(grid.nx), indexing="ij")
    ii, jj = i + di, j + dj
    if bc == BoundaryCondition.PERIODIC:
        ii, jj = ii % grid.nx, jj % grid.ny
        valid = np.ones_like(ii, dtype=bool)
    elif bc == BoundaryCondition.NEUMANN:
        ii, jj = np.clip(ii, 0, grid.nx - 1), np.clip(jj, 0, grid.ny - 1)
        valid = np.ones_like(ii, dtype=bool)
    else:
        valid = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
        ii, jj = np.clip(ii, 0, grid.nx - 1), np.clip(jj, 0, grid.ny - 1)
    return (ii + grid.nx * jj).ravel(), valid.ravel()


def _validate_coefficients(grid: Grid2D, coeff: CoefficientFields) -> None:
    for name in ("a11", "a12", "a22", "kappa2"):
        size = np.size(getattr(coeff, name))
        if size != grid.n:
            raise ArgumentError(
                f"Coefficient field {name} has {size} entries, grid has {grid.n} nodes"
            )

    det = coeff.a11 * coeff.a22 - coeff.a12**2
    bad = np.flatnonzero((coeff.a11 <= 0) | (det <= 0))
    if bad.size:
        raise DomainError(
            f"Anisotropy tensor is not positive definite at node {bad[0]}", index=int(bad[0])
        )

    negative = np.flatnonzero(coeff.kappa2 < 0)
    if negative.size:
        raise DomainError(
            f"kappa2 is negative at node {negative[0]}", index=int(negative[0])
        )


def _difference_terms(
    grid: Grid2D, coeff: CoefficientFields, bc: BoundaryCondition
) -> list[_DifferenceTerm]:
    a11 = np.asarray(coeff.a11, dtype=float).reshape(grid.ny, grid.nx)
    a12 = np.asarray(coeff.a12, dtype=float).reshape(grid.ny, grid.nx)
    a22 = np.asarray(coeff.a22, dtype=float).reshape(grid.ny, grid.nx)

    def at(field: np.ndarray, di: int, dj: int) -> np.ndarray:
        return _shift(field, di, dj, bc).ravel()

    inv_h2 = 1.0 / grid.h**2
    half_inv_h2 = 0.5 * inv_h2

    alpha11_here = 0.5 * (at(a11, 0, 0) + at(a11, -1, 0))
    alpha11_next = 0.5 * (at(a11, 1, 0) + at(a11, 0, 0))
    alpha22_here = 0.5 * (at(a22, 0, 0) + at(a22, 0, -1))
    alpha22_next = 0.5 * (at(a22, 0, 1) + at(a22, 0, 0))

    return [
        # Lambda_xx
        _DifferenceTerm(alpha11_next, inv_h2, (1, 0), (0, 0)),
        _DifferenceTerm(alpha11_here, -inv_h2, (0, 0), (-1, 0)),
        # Lambda_yy
        _DifferenceTerm(alpha22_next, inv_h2, (0, 1), (0, 0)),
        _DifferenceTerm(alpha22_here, -inv_h2, (0, 0), (0, -1)),
        # Lambda_xy^+
        _DifferenceTerm(at(a12, 1, 0), half_inv_h2, (1, 1), (1, 0)),
        _DifferenceTerm(at(a12, 0, 0), -half_inv_h2, (0, 1), (0, 0)),
        _DifferenceTerm(at(a12, 0, 0), half_inv_h2, (0, 0), (0, -1)),
        _DifferenceTerm(at(a12, -1, 0), -half_inv_h2, (-1, 0), (-1, -1)),
        # Lambda_yx^+
        _DifferenceTerm(at(a12, 0, 1), half_inv_h2, (1, 1), (0, 1)),
        _DifferenceTerm(at(a12, 0, 0), -half_inv_h2, (1, 0), (0, 0)),
        _DifferenceTerm(at(a12, 0, 0), half_inv_h2, (0, 0), (-1, 0)),
        _DifferenceTerm(at(a12, 0, -1), -half_inv_h2, (0, -1), (-1, -1)),
    ]


def assemble_operator(
    grid: Grid2D,
    coeff: CoefficientFields,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
) -> sp.csr_matrix:
    """
    Assemble L = diag(kappa^2) - (Lambda_xx + Lambda_xy^+ + Lambda_yx^+ + Lambda_yy).

    L discretizes kappa^2 - div A grad (positive-definite sign convention) and has at most
    nine nonzeros per row.

    :param grid: Grid the coefficients live on.
    :param coeff: Per-node a11, a12, a22 and kappa^2.
    :param bc: Boundary treatment of out-of-grid neighbours.
    :return: Sparse (n, n) operator in grid ordering.
    """
    _validate_coefficients(grid, coeff)

    n = grid.n
    nodes = np.arange(n)
    rows: list[np.ndarray] = [nodes]
    cols: list[np.ndarray] = [nodes]
    vals: list[np.ndarray] = [np.asarray(coeff.kappa2, dtype=float).ravel()]

    for term in _difference_terms(grid, coeff, bc):
        weight = term.scale * term.coef
        for offset, sign in ((term.plus, -1.0), (term.minus, 1.0)):
            col, valid = _neighbour(grid, offset, bc)
            rows.append(nodes[valid])
            cols.append(col[valid])
            vals.append(sign * weight[valid])

    operator = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    operator.sum_duplicates()
    operator.eliminate_zeros()

    logger.debug(
        "Assembled operator", nx=grid.nx, ny=grid.ny, bc=str(bc), nnz=operator.nnz
    )
    return operator


def constant_stencil(a11: float, a12: float, a22: float, h: float) -> np.ndarray:
    """
    Stencil of the constant-coefficient scheme,

        S = -(1/h^2) [[a12, -a22-a12, 0], [-a11-a12, 2(a11+a22+a12), -a11-a12], [0, -a22-a12, a12]].

    The display is written with the second grid axis mirrored relative to the operator
    (mirroring flips the sign of a12): the interior row of assemble_operator at offset
    (di, dj) equals -constant_stencil(a11, -a12, a22, h)[1 + dj][1 + di] plus kappa^2 at the centre.
    """
    if h <= 0:
        raise ArgumentError(f"Grid spacing must be positive, got {h}")
    weights = np.array(
        [
            [a12, -a22 - a12, 0.0],
            [-a11 - a12, 2 * (a11 + a22 + a12), -a11 - a12],
            [0.0, -a22 - a12, a12],
        ],
        dtype=float,
    )
    return -weights / h**2


def matern_variance(kappa: float, alpha: float = 2.0, d: int = 2) -> float:
    """Marginal variance Gamma(nu) / (Gamma(alpha) (4 pi)^(d/2) kappa^(2 nu)), nu = alpha - d/2."""
    nu = alpha - d / 2
    if nu <= 0:
        raise DomainError(f"alpha - d/2 must be positive, got {nu}")
    return float(
        scipy.special.gamma(nu)
        / (scipy.special.gamma(alpha) * (4 * np.pi) ** (d / 2) * kappa ** (2 * nu))
    )


def matern_correlation(
    r: np.ndarray | float, kappa: float, alpha: float = 2.0, d: int = 2
) -> np.ndarray:
    """Matern correlation rho(r) / varrho^2 = (kappa r)^nu K_nu(kappa r) / (Gamma(nu) 2^(nu-1))."""
    nu = alpha - d / 2
    if nu <= 0:
        raise DomainError(f"alpha - d/2 must be positive, got {nu}")
    scaled = kappa * np.atleast_1d(np.asarray(r, dtype=float))
    out = np.ones_like(scaled)
    positive = scaled > 0
    out[positive] = (
        scaled[positive] ** nu
        * scipy.special.kv(nu, scaled[positive])
        / (scipy.special.gamma(nu) * 2 ** (nu - 1))
    )
    return out


def matern_reference(
    r: float, kappa: float, alpha: float = 2.0, d: int = 2
) -> MaternReference:
    """
    Matern covariance rho(r) and marginal variance of (kappa^2 - Laplacian)^(alpha/2) x = W.

    :param r: Distance, r >= 0.
    :param kappa: Inverse range parameter.
    :param alpha: Operator power; alpha - d/2 must be positive.
    :param d: Spatial dimension.
    """
    if r < 0:
        raise ArgumentError(f"Distance must be non-negative, got {r}")
    variance = matern_variance(kappa, alpha, d)
    rho = variance * float(matern_correlation(r, kappa, alpha, d)[0])
    return MaternReference(rho=rho, variance=variance)


def variance_scale(coeff: CoefficientFields) -> float:
    """
    Stationary marginal variance of kappa^2 - div A grad (alpha = 2, d = 2) at the domain
    medians: varrho^2(median kappa^2) / median sqrt(det A).
    """
    kappa2 = float(np.median(coeff.kappa2))
    if kappa2 <= 0:
        raise DomainError("Variance normalization needs a positive median kappa2")
    sqrt_det = float(np.median(np.sqrt(coeff.a11 * coeff.a22 - coeff.a12**2)))
    return matern_variance(np.sqrt(kappa2)) / sqrt_det


def precision_from_operator(
    operator: sp.spmatrix,
    tau2: float,
    grid: Grid2D,
    normalize_variance: bool = False,
    coeff: CoefficientFields | None = None,
) -> sp.csr_matrix:
    """
    Precision Q = tau2 * c * h^2 * L^T L of the field driven by discretized white noise.

    :param operator: Square operator L.
    :param tau2: Precision scale.
    :param grid: Grid, for the white-noise scaling h^2.
    :param normalize_variance: Scale so that the marginal variance is close to one.
    :param coeff: Coefficient fields; required when normalize_variance is set.
    :return: Exactly symmetric sparse precision.
    """
    if operator.shape[0] != operator.shape[1]:
        raise ArgumentError(f"Operator must be square, got shape {operator.shape}")
    if tau2 <= 0:
        raise DomainError(f"tau2 must be positive, got {tau2}")

    scale = tau2 * grid.h**2
    if normalize_variance:
        if coeff is None:
            raise ArgumentError("coeff is required when normalize_variance is set")
        scale *= variance_scale(coeff)

    operator = sp.csr_matrix(operator)
    gram = (operator.T @ operator).tocsr()
    # Symmetrize so Q == Q^T bit for bit.
    return sp.csr_matrix(scale * 0.5 * (gram + gram.T))


def empirical_correlation(samples: np.ndarray, grid: Grid2D, max_lag: int) -> np.ndarray:
    """
    Sample correlation function of periodic fields at lags 0..max_lag along both axes.

    :param samples: Array (m, n) of m zero-mean fields in grid ordering.
    :return: Correlations for lags 0..max_lag (lag 0 is exactly 1).
    """
    fields = np.asarray(samples, dtype=float).reshape(-1, grid.ny, grid.nx)
    variance = np.mean(fields**2)
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        along_x = np.mean(fields * np.roll(fields, -lag, axis=2))
        along_y = np.mean(fields * np.roll(fields, -lag, axis=1))
        out[lag] = 0.5 * (along_x + along_y) / variance
    return out
