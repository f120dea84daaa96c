"""
Inference on the joint GMRF: sampling, kriging, marginal likelihoods with profiled noise,
maximum-likelihood hyperparameter fits and blend-range estimation.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.signal
import scipy.special
import scipy.sparse as sp
import scipy.stats
import structlog
from joblib import Parallel, delayed

from src.geoblend.factorization import Factorization, factorize
from src.geoblend.errors import ArgumentError, DomainError
from src.geoblend.geometry import correlation_from_offdiag, offdiag_from_correlation
from src.geoblend.models import (
    BlendRangeEstimate,
    BoundaryCondition,
    FitResult,
    Grid2D,
    HyperParams,
    LikelihoodEval,
    ModelKind,
    ObservationSet,
    PosteriorResult,
)
from src.geoblend.prior import build_model

logger = structlog.get_logger(__name__)

__all__ = [
    "Factorization",
    "factorize",
    "sample_gmrf",
    "posterior_mean",
    "log_likelihood",
    "constrain_correlations",
    "unconstrain_correlations",
    "numerical_gradient",
    "fit_ml",
    "estimate_blend_range",
    "relative_error",
    "density_estimate",
    "count_modes",
]

LOG_2PI = float(np.log(2 * np.pi))
FD_REL_STEP = 1e-4
GTOL = 1e-5
MAX_ITER = 200
ANGLE_CLIP = 1e-12


def sample_gmrf(
    f: Factorization,
    seed: int | np.random.SeedSequence,
    n_samples: int | None = None,
) -> np.ndarray:
    """
    Draw from N(0, Q^-1) through the factorization of Q.

    :param f: Factorization of the precision.
    :param seed: Integer seed or SeedSequence.
    :param n_samples: Number of draws; None returns a single vector.
    :return: Array (n,) or (n_samples, n).
    """
    rng = np.random.default_rng(seed)
    if n_samples is None:
        return f.sqrt_solve(rng.standard_normal(f.size))
    z = rng.standard_normal((f.size, n_samples))
    return np.asarray(f.sqrt_solve(z)).T


def posterior_mean(
    Q_prior: sp.spmatrix,
    obs: ObservationSet,
    truth: np.ndarray | None = None,
) -> PosteriorResult:
    """
    Kriging predictor E(x | d) for d = G x + eps.

    Q_post = Q_prior + G^T G / sigma2 and mean = Q_post^-1 G^T d / sigma2.

    :param Q_prior: Prior precision.
    :param obs: Observations with their operator and noise variance.
    :param truth: Optional generating field; fills in the relative error.
    """
    G = obs.operator.G
    sigma2 = obs.operator.sigma2
    if Q_prior.shape[0] != G.shape[1]:
        raise ArgumentError(
            f"Prior has size {Q_prior.shape[0]} but G has {G.shape[1]} columns"
        )
    if sigma2 <= 0:
        raise DomainError("Posterior mean requires a positive noise variance sigma2")

    Q_post = sp.csr_matrix(Q_prior + (G.T @ G) / sigma2)
    mean = factorize(Q_post).solve(G.T @ obs.d / sigma2)
    error = relative_error(mean, truth) if truth is not None else None
    return PosteriorResult(mean=mean, Q_post=Q_post, relative_error=error)


def _direct_loglik(Q: sp.spmatrix, x: np.ndarray) -> float:
    f = factorize(Q)
    return float(0.5 * f.logdet() - 0.5 * len(x) * LOG_2PI - 0.5 * x @ (Q @ x))


def _noisy_loglik(Q: sp.spmatrix, f_prior: Factorization, obs: ObservationSet, sigma2: float) -> float:
    G, y = obs.operator.G, obs.d
    Q_post = sp.csr_matrix(Q + (G.T @ G) / sigma2)
    f_post = factorize(Q_post)
    b = G.T @ y / sigma2
    quad = y @ y / sigma2 - b @ f_post.solve(b)
    m = len(y)
    return float(
        0.5 * f_prior.logdet()
        - 0.5 * f_post.logdet()
        - 0.5 * m * (LOG_2PI + np.log(sigma2))
        - 0.5 * quad
    )


def _lambda_loglik(Q_lambda: sp.spmatrix, obs: ObservationSet) -> tuple[float, float]:
    G, y = obs.operator.G, obs.d
    m = len(y)
    f_prior = factorize(Q_lambda)
    f_post = factorize(sp.csr_matrix(Q_lambda + G.T @ G))
    b = G.T @ y
    residual = float(y @ y - b @ f_post.solve(b))
    if residual <= 0:
        raise DomainError("Profiled noise variance is not positive")
    sigma2 = residual / m
    loglik = (
        -0.5 * m * (LOG_2PI + np.log(sigma2))
        - 0.5 * (f_post.logdet() - f_prior.logdet())
        - 0.5 * m
    )
    return float(loglik), sigma2


def _profile_sigma2(Q: sp.spmatrix, obs: ObservationSet) -> tuple[float, float]:
    f_prior = factorize(Q)
    scale = max(float(np.var(obs.d)), np.finfo(float).tiny)

    def objective(log_sigma2: float) -> float:
        return -_noisy_loglik(Q, f_prior, obs, float(np.exp(log_sigma2)))

    result = scipy.optimize.minimize_scalar(
        objective,
        bracket=(np.log(scale) - 2.0, np.log(scale)),
        method="golden",
    )
    sigma2 = float(np.exp(result.x))
    logger.debug("Profiled noise variance", sigma2=sigma2, evaluations=result.nfev)
    return -float(result.fun), sigma2


def log_likelihood(
    hyper: HyperParams,
    obs: ObservationSet,
    kind: ModelKind,
    grid: Grid2D,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
    profile: bool = True,
) -> LikelihoodEval:
    """
    Gaussian marginal log-likelihood of the observations under a prior model.

    Direct observations (identity operator, sigma2 = 0) give the log-density of the field
    itself. For noisy data the parametrization follows the hyperparameters: with lambda2
    the prior is lambda2 * Q / sigma2 and sigma2 is profiled in closed form; with tau2 the
    noise variance is either taken from hyper.sigma2 (profile=False) or profiled by a
    golden-section search in log sigma2.

    :raises DomainError: When the hyperparameters imply a non positive-definite model.
    """
    if obs.operator.is_direct:
        model = build_model(kind, hyper, grid, bc)
        return LikelihoodEval(loglik=_direct_loglik(model.Q, obs.d))

    if hyper.lambda2 is not None and hyper.tau2 is None:
        model = build_model(kind, hyper.model_copy(update={"tau2": hyper.lambda2}), grid, bc)
        loglik, sigma2 = _lambda_loglik(model.Q, obs)
        return LikelihoodEval(loglik=loglik, profiled_sigma2=sigma2)

    model = build_model(kind, hyper, grid, bc)
    if not profile:
        sigma2 = hyper.sigma2 or obs.operator.sigma2
        if not sigma2:
            raise ArgumentError("A positive sigma2 is required when it is not profiled")
        return LikelihoodEval(
            loglik=_noisy_loglik(model.Q, factorize(model.Q), obs, sigma2),
            profiled_sigma2=None,
        )
    loglik, sigma2 = _profile_sigma2(model.Q, obs)
    return LikelihoodEval(loglik=loglik, profiled_sigma2=sigma2)


def constrain_correlations(z: Sequence[float], n_fields: int = 3) -> tuple[float, ...]:
    """
    Map unconstrained reals to the off-diagonals of a positive-definite correlation matrix.

    The angles theta = pi * sigmoid(z) are hyperspherical coordinates of the rows of the
    lower Cholesky factor, listed row by row. z = 0 gives zero correlations.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (n_fields * (n_fields - 1) // 2,):
        raise ArgumentError(f"Expected {n_fields * (n_fields - 1) // 2} angles, got {z.shape}")
    theta = np.pi * np.clip(scipy.special.expit(z), ANGLE_CLIP, 1 - ANGLE_CLIP)

    lower = np.zeros((n_fields, n_fields))
    lower[0, 0] = 1.0
    k = 0
    for i in range(1, n_fields):
        remaining = 1.0
        for j in range(i):
            lower[i, j] = remaining * np.cos(theta[k])
            remaining *= np.sin(theta[k])
            k += 1
        lower[i, i] = remaining
    return offdiag_from_correlation(lower @ lower.T)


def unconstrain_correlations(rho: Sequence[float], n_fields: int = 3) -> np.ndarray:
    """Inverse of constrain_correlations for a positive-definite correlation matrix."""
    corr = correlation_from_offdiag(rho, n_fields)
    try:
        lower = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"Correlations {tuple(rho)} are not positive definite") from exc

    theta = []
    for i in range(1, n_fields):
        remaining = 1.0
        for j in range(i):
            c = np.clip(lower[i, j] / remaining, -1.0, 1.0)
            angle = float(np.arccos(c))
            theta.append(angle)
            remaining *= np.sin(angle)
    return scipy.special.logit(np.asarray(theta) / np.pi)


def numerical_gradient(
    fun: Callable[[np.ndarray], float],
    x: np.ndarray,
    rel_step: float = FD_REL_STEP,
) -> np.ndarray:
    """Central-difference gradient with step rel_step * max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(len(x)):
        step = rel_step * max(1.0, abs(x[i]))
        forward, backward = x.copy(), x.copy()
        forward[i] += step
        backward[i] -= step
        grad[i] = (fun(forward) - fun(backward)) / (2 * step)
    return grad


@dataclass(frozen=True)
class ParameterMap:
    """
    Unconstrained parameter vector of a fit: [log kappa2, log scale, z_above, z_below].

    The scale is tau2 for direct observations or when tau2 is given, otherwise lambda2.
    z_below is present for Model2 and Model3 only.
    """

    template: HyperParams
    kind: ModelKind
    scale_name: str

    @classmethod
    def for_fit(cls, init: HyperParams, kind: ModelKind, direct: bool) -> "ParameterMap":
        if direct or init.tau2 is not None:
            if init.tau2 is None:
                raise ArgumentError("Direct observations require an initial tau2")
            return cls(template=init, kind=kind, scale_name="tau2")
        if init.lambda2 is None:
            raise ArgumentError("The initial hyperparameters need tau2 or lambda2")
        return cls(template=init, kind=kind, scale_name="lambda2")

    @property
    def blended(self) -> bool:
        return self.kind != ModelKind.MODEL1

    def to_vector(self, hyper: HyperParams) -> np.ndarray:
        parts = [
            [np.log(hyper.kappa2), np.log(getattr(hyper, self.scale_name))],
            unconstrain_correlations(hyper.rho_above, hyper.n_fields),
        ]
        if self.blended:
            parts.append(unconstrain_correlations(hyper.below, hyper.n_fields))
        return np.concatenate(parts)

    def to_hyper(self, x: np.ndarray) -> HyperParams:
        d = self.template.n_fields
        n_rho = d * (d - 1) // 2
        update = {
            "kappa2": float(np.exp(x[0])),
            self.scale_name: float(np.exp(x[1])),
            "rho_above": constrain_correlations(x[2 : 2 + n_rho], d),
        }
        if self.blended:
            update["rho_below"] = constrain_correlations(x[2 + n_rho : 2 + 2 * n_rho], d)
        return HyperParams.model_validate(self.template.model_dump() | update)


def _total_loglik(
    hyper: HyperParams,
    obs_batch: Sequence[ObservationSet],
    kind: ModelKind,
    grid: Grid2D,
    bc: BoundaryCondition,
) -> tuple[float, list[float]]:
    total, sigma2s = 0.0, []
    for obs in obs_batch:
        evaluation = log_likelihood(hyper, obs, kind, grid, bc)
        total += evaluation.loglik
        if evaluation.profiled_sigma2 is not None:
            sigma2s.append(evaluation.profiled_sigma2)
    return total, sigma2s


def _fit_batch(
    obs_batch: Sequence[ObservationSet],
    kind: ModelKind,
    grid: Grid2D,
    init: HyperParams,
    bc: BoundaryCondition,
    maxiter: int,
    gtol: float,
) -> FitResult:
    direct = all(obs.operator.is_direct for obs in obs_batch)
    params = ParameterMap.for_fit(init, kind, direct)
    n_obs = sum(len(obs.d) for obs in obs_batch)
    cache: dict[bytes, tuple[float, list[float]]] = {}

    def evaluate(x: np.ndarray) -> tuple[float, list[float]]:
        key = np.asarray(x, dtype=float).tobytes()
        if key not in cache:
            cache[key] = _total_loglik(params.to_hyper(x), obs_batch, kind, grid, bc)
        return cache[key]

    def objective(x: np.ndarray) -> float:
        return -evaluate(x)[0] / n_obs

    history: list[float] = []

    def record(xk: np.ndarray) -> None:
        loglik = evaluate(xk)[0]
        history.append(loglik)
        logger.debug("Fit iteration", iteration=len(history), loglik=loglik)

    x0 = params.to_vector(init)
    record(x0)
    result = scipy.optimize.minimize(
        objective,
        x0,
        jac=lambda x: numerical_gradient(objective, x),
        method="BFGS",
        callback=record,
        options={"gtol": gtol, "maxiter": maxiter},
    )

    loglik, sigma2s = evaluate(result.x)
    estimate = params.to_hyper(result.x)
    if sigma2s:
        estimate = estimate.model_copy(update={"sigma2": float(np.mean(sigma2s))})
    if not result.success:
        logger.warning(
            "Fit did not converge", kind=str(kind), iterations=result.nit, message=result.message
        )
    return FitResult(
        estimate=estimate,
        loglik=loglik,
        iterations=int(result.nit),
        converged=bool(result.success),
        history=history,
    )


def fit_ml(
    obs_batch: Sequence[ObservationSet],
    kind: ModelKind,
    grid: Grid2D,
    init: HyperParams,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
    per_replicate: bool = False,
    n_jobs: int = 1,
    maxiter: int = MAX_ITER,
    gtol: float = GTOL,
) -> FitResult:
    """
    Maximum-likelihood hyperparameters by BFGS on the unconstrained parametrization.

    Free parameters are kappa2, the scale (tau2 or lambda2) and the correlation triples;
    blend range, interface and anisotropy stay at their initial values. The batch is
    fitted jointly by summing replicate log-likelihoods.

    :param obs_batch: One or more observation sets.
    :param kind: Model to fit.
    :param grid: Grid of the fields.
    :param init: Starting point and fixed parameters.
    :param per_replicate: Also fit every replicate on its own (returned in per_replicate).
    :param n_jobs: joblib workers for the per-replicate fits.
    :return: Joint estimate; converged is False when the iteration limit is hit.
    """
    if not obs_batch:
        raise ArgumentError("fit_ml needs at least one observation set")

    logger.info("Starting fit", kind=str(kind), replicates=len(obs_batch))
    joint = _fit_batch(obs_batch, kind, grid, init, bc, maxiter, gtol)

    if per_replicate and len(obs_batch) > 1:
        singles = Parallel(n_jobs=n_jobs)(
            delayed(_fit_batch)([obs], kind, grid, init, bc, maxiter, gtol)
            for obs in obs_batch
        )
        joint = joint.model_copy(update={"per_replicate": list(singles)})

    logger.info(
        "Finished fit",
        kind=str(kind),
        loglik=joint.loglik,
        iterations=joint.iterations,
        converged=joint.converged,
    )
    return joint


def estimate_blend_range(
    obs: ObservationSet,
    fixed: HyperParams,
    kind: ModelKind,
    grid: Grid2D,
    search: tuple[float, float],
    n_grid: int = 9,
    bc: BoundaryCondition = BoundaryCondition.NEUMANN,
    profile: bool = True,
) -> BlendRangeEstimate:
    """
    Profile maximization of the log-likelihood over the blend range.

    A coarse scan over n_grid equally spaced ranges is refined by golden-section search
    in the bracket around the best scan point; a best point on the edge of the search
    interval is returned as is. With profile=False the noise variance stays at fixed.sigma2.
    """
    lo, hi = search
    if not 0 <= lo < hi:
        raise ArgumentError(f"Search interval must satisfy 0 <= lo < hi, got {search}")
    if n_grid < 3:
        raise ArgumentError(f"The range scan needs at least 3 points, got {n_grid}")

    def loglik(blend_range: float) -> float:
        hyper = fixed.model_copy(update={"blend_range": float(blend_range)})
        return log_likelihood(hyper, obs, kind, grid, bc, profile=profile).loglik

    ranges = np.linspace(lo, hi, n_grid)
    scan = np.array([loglik(r) for r in ranges])
    logger.debug("Scanned blend range", ranges=ranges.tolist(), profile=scan.tolist())
    best = int(np.argmax(scan))

    estimate, best_loglik = float(ranges[best]), float(scan[best])
    if 0 < best < n_grid - 1:
        try:
            refined = scipy.optimize.golden(
                lambda r: -loglik(r),
                brack=(ranges[best - 1], ranges[best], ranges[best + 1]),
            )
            refined_loglik = loglik(refined)
            if refined_loglik >= best_loglik:
                estimate, best_loglik = float(refined), refined_loglik
        except ValueError as exc:
            logger.debug(
                "Golden-section refinement failed; keeping the scan maximum",
                blend_range=estimate,
                error=str(exc),
            )

    logger.info("Estimated blend range", blend_range=estimate, loglik=best_loglik)
    return BlendRangeEstimate(
        range=estimate,
        loglik=best_loglik,
        grid=ranges.tolist(),
        profile=scan.tolist(),
    )


def relative_error(
    estimate: np.ndarray,
    truth: np.ndarray,
    n_fields: int | None = None,
) -> float | np.ndarray:
    """
    ||estimate - truth||_2 / ||truth||_2, jointly or per component field.

    :param n_fields: When given, split both vectors field-major and return one error per field.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ArgumentError(f"Shapes differ: {estimate.shape} and {truth.shape}")

    if n_fields is None:
        norm = np.linalg.norm(truth)
        if norm == 0:
            raise DomainError("Relative error is undefined for a zero truth")
        return float(np.linalg.norm(estimate - truth) / norm)

    diff = (estimate - truth).reshape(n_fields, -1)
    norms = np.linalg.norm(truth.reshape(n_fields, -1), axis=1)
    if np.any(norms == 0):
        zero = int(np.flatnonzero(norms == 0)[0])
        raise DomainError(f"Relative error is undefined: field {zero} of the truth is zero", index=zero)
    return np.linalg.norm(diff, axis=1) / norms


def density_estimate(
    values: Sequence[float],
    lo: float = -1.0,
    hi: float = 1.0,
    n_points: int = 201,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gaussian kernel density with Silverman bandwidth, evaluated on [lo, hi] only.

    :return: (points, density).
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ArgumentError("A density estimate needs at least two values")
    try:
        kde = scipy.stats.gaussian_kde(values, bw_method="silverman")
    except np.linalg.LinAlgError as exc:
        raise DomainError("Density estimate of identical values is degenerate") from exc
    points = np.linspace(lo, hi, n_points)
    return points, kde(points)


def count_modes(density: np.ndarray) -> int:
    """Number of local maxima of a sampled density, counting maxima at either edge."""
    density = np.asarray(density, dtype=float)
    floor = density.min() - 1.0
    padded = np.concatenate([[floor], density, [floor]])
    peaks, _ = scipy.signal.find_peaks(padded)
    return len(peaks)
