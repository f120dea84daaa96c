"""
Multivariate prior: interface geometry, geodesic blend fields for the local cross-field
correlation, curve-following anisotropy, and the joint sparse precision of Models 1, 2 and 3.
"""

import numpy as np
import scipy.ndimage
import scipy.sparse as sp
import structlog

from src.geoblend.discretize import assemble_operator, variance_scale
from src.geoblend.errors import ArgumentError, DomainError
from src.geoblend.geometry import (
    correlation_check,
    correlation_from_offdiag,
    geodesic_point,
    offdiag_from_correlation,
)
from src.geoblend.models import (
    AnisotropyRegion,
    AnisotropySpec,
    BlendField,
    BlendSpec,
    BoundaryCondition,
    CoefficientFields,
    FlatInterface,
    Grid2D,
    HyperParams,
    Interface,
    JointModel,
    ModelKind,
)

logger = structlog.get_logger(__name__)

CORRELATION_TOL = 1e-8


def signed_distance(point: tuple[float, float], interface: Interface) -> float:
    """
    Vertical signed distance y - curve(x): positive below the interface, negative above.

    :param point: (x, y) with y the depth.
    :param interface: Interface geometry.
    """
    x, y = point
    return float(y - interface.curve(np.array([x]))[0])


def signed_distances(grid: Grid2D, interface: Interface) -> np.ndarray:
    """Vectorized signed_distance for every grid node, in grid ordering."""
    x, y = grid.coordinates()
    return y - interface.curve(x)


def blend_parameter(dist: float | np.ndarray, blend_range: float) -> float | np.ndarray:
    """
    Geodesic parameter t = clamp(1/2 + dist / range, 0, 1).

    A zero range gives a step: 0 above, 1 below and 1/2 on the interface.
    """
    if blend_range < 0:
        raise ArgumentError(f"Blend range must be non-negative, got {blend_range}")
    dist_arr = np.asarray(dist, dtype=float)
    if blend_range == 0:
        t = np.where(dist_arr < 0, 0.0, np.where(dist_arr > 0, 1.0, 0.5))
    else:
        t = np.clip(0.5 + dist_arr / blend_range, 0.0, 1.0)
    return float(t) if np.ndim(dist) == 0 else t


def blend_band(grid: Grid2D, interface: Interface, blend_range: float) -> np.ndarray:
    """Mask of nodes strictly inside the transition zone |dist| < range / 2."""
    return np.abs(signed_distances(grid, interface)) < blend_range / 2


def build_blend_field(grid: Grid2D, spec: BlendSpec) -> BlendField:
    """
    Geodesically blend the layer correlation matrices across the interface.

    At every node Sigma0(s) = Sigma_above #_t(s) Sigma_below, Q0(s) = Sigma0(s)^-1 and u(s) is
    the transpose of the lower Cholesky factor of Q0(s).

    :param grid: Grid.
    :param spec: Layer correlations, blend range and interface.
    :return: Per-node stacks of Sigma0, Q0 and u.
    """
    for name in ("sigma_above", "sigma_below"):
        report = correlation_check(getattr(spec, name), CORRELATION_TOL)
        if not report.is_correlation:
            raise DomainError(
                f"{name} is not a correlation matrix (diagonal deviation {report.max_diag_deviation:.2e})"
            )

    t = blend_parameter(signed_distances(grid, spec.interface), spec.range)
    levels, inverse = np.unique(t, return_inverse=True)

    d = np.shape(spec.sigma_above)[0]
    sigma_levels = np.empty((len(levels), d, d))
    q_levels = np.empty_like(sigma_levels)
    u_levels = np.empty_like(sigma_levels)
    for k, level in enumerate(levels):
        sigma = geodesic_point(spec.sigma_above, spec.sigma_below, float(level))
        q = np.linalg.inv(sigma)
        q = 0.5 * (q + q.T)
        try:
            lower = np.linalg.cholesky(q)
        except np.linalg.LinAlgError as exc:
            node = int(np.flatnonzero(inverse == k)[0])
            raise DomainError(
                f"Local precision is not positive definite at node {node}", index=node
            ) from exc
        sigma_levels[k], q_levels[k], u_levels[k] = sigma, q, lower.T

    logger.debug(
        "Built blend field",
        levels=len(levels),
        blend_range=spec.range,
        interface=spec.interface.kind,
        max_diag_deviation=float(np.abs(np.diagonal(sigma_levels, axis1=1, axis2=2) - 1.0).max()),
    )
    return BlendField(
        sigma=sigma_levels[inverse],
        q=q_levels[inverse],
        u=u_levels[inverse],
        t=np.asarray(t, dtype=float),
    )


def anisotropy_from_interface(
    grid: Grid2D,
    interface: Interface,
    spec: AnisotropySpec,
    kappa2: float | np.ndarray,
) -> CoefficientFields:
    """
    Anisotropy tensor aligned with the interface tangent.

    Inside the active region A(s) = R(phi) diag(major, minor) R(phi)^T, with phi the tangent
    angle at the node's x-coordinate smoothed by a 3-node moving average along x; outside
    the region A = I.

    :param grid: Grid.
    :param interface: Interface whose tangent directs the anisotropy.
    :param spec: Principal ratios and active region.
    :param kappa2: kappa^2 carried into the returned coefficient fields.
    """
    x_columns = np.arange(grid.nx) * grid.h
    phi_columns = np.arctan(interface.slope(x_columns))
    phi_columns = scipy.ndimage.uniform_filter1d(phi_columns, size=3, mode="nearest")
    phi = np.tile(phi_columns, grid.ny)

    c, s = np.cos(phi), np.sin(phi)
    major, minor = spec.ratio_major, spec.ratio_minor
    a11 = major * c**2 + minor * s**2
    a22 = major * s**2 + minor * c**2
    a12 = (major - minor) * s * c

    dist = signed_distances(grid, interface)
    if spec.region == AnisotropyRegion.ABOVE:
        active = dist < 0
    elif spec.region == AnisotropyRegion.BELOW:
        active = dist >= 0
    else:
        active = np.ones(grid.n, dtype=bool)

    kappa2_field = np.broadcast_to(np.asarray(kappa2, dtype=float), (grid.n,)).copy()
    return CoefficientFields(
        a11=np.where(active, a11, 1.0),
        a12=np.where(active, a12, 0.0),
        a22=np.where(active, a22, 1.0),
        kappa2=kappa2_field,
    )


def assemble_joint_precision(
    grid: Grid2D,
    blend: BlendField,
    coeff: CoefficientFields,
    tau2: float,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
    normalize_variance: bool = False,
    hyper: HyperParams | None = None,
    kind: ModelKind = ModelKind.MODEL2,
) -> JointModel:
    """
    Joint precision Q = tau2 * h^2 * K^T K of the triangular SPDE system.

    Block (i, j) of K is diag(u_ij(s)) L for i <= j, where L is the scalar operator; the
    pointwise scaling acts after the differential operator. For constant blending
    coefficients Q equals tau2 * (Q0 kron h^2 L^T L) in field-major ordering.

    :param hyper: Hyperparameter record stored on the result; derived from the inputs when omitted.
    """
    if blend.u.shape[0] != grid.n:
        raise ArgumentError(
            f"Blend field has {blend.u.shape[0]} nodes, grid has {grid.n}"
        )
    if tau2 <= 0:
        raise DomainError(f"tau2 must be positive, got {tau2}")

    d = blend.n_fields
    diag_u = np.stack([blend.u[:, k, k] for k in range(d)])
    bad_field, bad_node = np.nonzero(diag_u <= 0)
    if bad_node.size:
        raise DomainError(
            f"Blend factor has a non-positive diagonal at node {bad_node[0]}",
            index=int(bad_node[0]),
        )

    operator = assemble_operator(grid, coeff, bc)
    blocks: list[list[sp.spmatrix | None]] = [
        [
            sp.diags(blend.u[:, i, j]) @ operator if j >= i else None
            for j in range(d)
        ]
        for i in range(d)
    ]
    system = sp.bmat(blocks, format="csr")

    scale = tau2 * grid.h**2
    if normalize_variance:
        scale *= variance_scale(coeff)
    gram = (system.T @ system).tocsr()
    precision = sp.csr_matrix(scale * 0.5 * (gram + gram.T))

    if hyper is None:
        hyper = HyperParams(
            kappa2=float(np.median(coeff.kappa2)),
            tau2=tau2,
            rho_above=offdiag_from_correlation(blend.sigma[int(np.argmin(blend.t))]),
            rho_below=offdiag_from_correlation(blend.sigma[int(np.argmax(blend.t))]),
            n_fields=d,
        )

    logger.info(
        "Assembled joint precision",
        kind=str(kind),
        n_fields=d,
        n=grid.n,
        nnz=precision.nnz,
        tau2=tau2,
    )
    return JointModel(Q=precision, grid=grid, hyper=hyper, kind=kind, bc=bc)


def _required(params: HyperParams, field: str, kind: ModelKind):
    value = getattr(params, field)
    if value is None:
        raise ArgumentError(f"{kind} requires the hyperparameter '{field}'")
    return value


def resolve_tau2(params: HyperParams) -> float:
    """tau2 from the record, or lambda2 / sigma2 when only the product is given."""
    if params.tau2 is not None:
        return params.tau2
    if params.lambda2 is not None and params.sigma2:
        return params.lambda2 / params.sigma2
    raise ArgumentError("The hyperparameter 'tau2' (or lambda2 with sigma2) is required")


def build_model(
    kind: ModelKind,
    params: HyperParams,
    grid: Grid2D,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
    normalize_variance: bool = True,
) -> JointModel:
    """
    Build Model 1, 2 or 3.

    Model1: isotropic constant coefficients and one correlation matrix (Kronecker model).
    Model2: isotropic constant coefficients, correlations blended across the interface
    (range may be 0 for a discontinuous change).
    Model3: Model2 plus curve-following anisotropy and a positive blend range.
    """
    tau2 = resolve_tau2(params)
    sigma_above = correlation_from_offdiag(params.rho_above, params.n_fields)

    if kind == ModelKind.MODEL1:
        interface = params.interface or FlatInterface(depth=grid.ny * grid.h / 2)
        spec = BlendSpec(
            sigma_above=sigma_above,
            sigma_below=sigma_above,
            range=0.0,
            interface=interface,
        )
        coeff = CoefficientFields.isotropic(grid, params.kappa2)
    else:
        interface = _required(params, "interface", kind)
        rho_below = _required(params, "rho_below", kind)
        spec = BlendSpec(
            sigma_above=sigma_above,
            sigma_below=correlation_from_offdiag(rho_below, params.n_fields),
            range=params.blend_range,
            interface=interface,
        )
        if kind == ModelKind.MODEL2:
            coeff = CoefficientFields.isotropic(grid, params.kappa2)
        else:
            anisotropy = _required(params, "anisotropy", kind)
            if params.blend_range <= 0:
                raise ArgumentError(f"{kind} requires a positive 'blend_range'")
            coeff = anisotropy_from_interface(grid, interface, anisotropy, params.kappa2)

    blend = build_blend_field(grid, spec)
    return assemble_joint_precision(
        grid,
        blend,
        coeff,
        tau2,
        bc=bc,
        normalize_variance=normalize_variance,
        hyper=params,
        kind=kind,
    )


def local_correlation(samples: np.ndarray, node: int, n_fields: int) -> np.ndarray:
    """
    Empirical cross-field correlation at one node.

    :param samples: Array (m, n_fields * n) of joint samples in field-major ordering.
    :param node: Node index within a single field.
    :return: (n_fields, n_fields) correlation matrix.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[1] // n_fields
    columns = [field * n + node for field in range(n_fields)]
    return np.corrcoef(samples[:, columns], rowvar=False)
