from fractions import Fraction

import numpy as np
import pytest
import scipy.special

from src.geoblend.factorization import factorize
from src.geoblend.discretize import (
    assemble_operator,
    constant_stencil,
    empirical_correlation,
    matern_correlation,
    matern_reference,
    matern_variance,
    precision_from_operator,
    variance_scale,
)
from src.geoblend.errors import ArgumentError, DomainError
from src.geoblend.inference import sample_gmrf
from src.geoblend.models import BoundaryCondition, CoefficientFields, Grid2D


def dyadic_triples(seed: int, count: int = 10) -> list[tuple[Fraction, Fraction, Fraction]]:
    """SPD (a11, a12, a22) triples on a 1/8 lattice, exactly representable as floats."""
    rng = np.random.default_rng(seed)
    triples = []
    while len(triples) < count:
        a11, a22 = (Fraction(int(k), 8) for k in rng.integers(1, 33, size=2))
        a12 = Fraction(int(rng.integers(-16, 17)), 8)
        if a11 * a22 - a12**2 > 0:
            triples.append((a11, a12, a22))
    return triples


def dense_lambda_oracle(grid: Grid2D, coeff: CoefficientFields) -> np.ndarray:
    """
    kappa^2 - (Lambda_xx + Lambda_xy^+ + Lambda_yx^+ + Lambda_yy) written out term by term
    for periodic boundaries.
    """
    nx, ny, h2 = grid.nx, grid.ny, grid.h**2
    a11 = coeff.a11.reshape(ny, nx)
    a12 = coeff.a12.reshape(ny, nx)
    a22 = coeff.a22.reshape(ny, nx)

    def a(field, i, j):
        return field[j % ny, i % nx]

    def col(i, j):
        return (i % nx) + nx * (j % ny)

    out = np.zeros((grid.n, grid.n))
    for j in range(ny):
        for i in range(nx):
            row = np.zeros(grid.n)

            def u(di, dj, weight):
                row[col(i + di, j + dj)] += weight

            alpha11_i = 0.5 * (a(a11, i, j) + a(a11, i - 1, j))
            alpha11_ip = 0.5 * (a(a11, i + 1, j) + a(a11, i, j))
            alpha22_j = 0.5 * (a(a22, i, j) + a(a22, i, j - 1))
            alpha22_jp = 0.5 * (a(a22, i, j + 1) + a(a22, i, j))

            # Lambda_xx
            u(1, 0, alpha11_ip / h2)
            u(0, 0, -alpha11_ip / h2)
            u(0, 0, -alpha11_i / h2)
            u(-1, 0, alpha11_i / h2)
            # Lambda_yy
            u(0, 1, alpha22_jp / h2)
            u(0, 0, -alpha22_jp / h2)
            u(0, 0, -alpha22_j / h2)
            u(0, -1, alpha22_j / h2)
            # Lambda_xy^+
            c = 1 / (2 * h2)
            u(1, 1, c * a(a12, i + 1, j))
            u(1, 0, -c * a(a12, i + 1, j))
            u(0, 1, -c * a(a12, i, j))
            u(0, 0, c * a(a12, i, j))
            u(0, 0, c * a(a12, i, j))
            u(0, -1, -c * a(a12, i, j))
            u(-1, 0, -c * a(a12, i - 1, j))
            u(-1, -1, c * a(a12, i - 1, j))
            # Lambda_yx^+
            u(1, 1, c * a(a12, i, j + 1))
            u(0, 1, -c * a(a12, i, j + 1))
            u(1, 0, -c * a(a12, i, j))
            u(0, 0, c * a(a12, i, j))
            u(0, 0, c * a(a12, i, j))
            u(-1, 0, -c * a(a12, i, j))
            u(0, -1, -c * a(a12, i, j - 1))
            u(-1, -1, c * a(a12, i, j - 1))

            node = col(i, j)
            out[node] = -row
            out[node, node] += coeff.kappa2[node]
    return out


def smooth_coefficients(grid: Grid2D, seed: int) -> CoefficientFields:
    rng = np.random.default_rng(seed)
    x, y = grid.coordinates()
    phase = rng.uniform(0, 2 * np.pi, size=4)
    wave_x = 2 * np.pi * x / (grid.nx * grid.h)
    wave_y = 2 * np.pi * y / (grid.ny * grid.h)
    a11 = 1.5 + 0.5 * np.sin(wave_x + phase[0])
    a22 = 1.2 + 0.4 * np.cos(wave_y + phase[1])
    a12 = 0.3 * np.sin(wave_x + wave_y + phase[2])
    kappa2 = 0.1 + 0.05 * np.cos(wave_x - wave_y + phase[3]) ** 2
    return CoefficientFields(a11=a11, a12=a12, a22=a22, kappa2=kappa2)


class TestConstantStencil:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_display_exactly(self, seed):
        """Rational comparison against the closed-form stencil at h = 1"""
        for a11, a12, a22 in dyadic_triples(seed):
            stencil = constant_stencil(float(a11), float(a12), float(a22), 1.0)
            expected = [
                [-a12, a22 + a12, Fraction(0)],
                [a11 + a12, -2 * (a11 + a22 + a12), a11 + a12],
                [Fraction(0), a22 + a12, -a12],
            ]
            for r in range(3):
                for c in range(3):
                    assert Fraction(float(stencil[r, c])) == expected[r][c]

    def test_interior_rows_match_stencil(self):
        """Interior operator rows equal the mirrored stencil plus kappa^2 at the centre"""
        grid = Grid2D(nx=7, ny=6, h=0.5)
        kappa2 = 0.25
        for a11, a12, a22 in dyadic_triples(3):
            a11, a12, a22 = float(a11), float(a12), float(a22)
            coeff = CoefficientFields.constant(grid, a11, a12, a22, kappa2)
            operator = assemble_operator(grid, coeff).toarray()
            stencil = -constant_stencil(a11, -a12, a22, grid.h)
            stencil[1, 1] += kappa2
            for i, j in [(2, 2), (3, 3), (4, 2)]:
                row = operator[grid.index(i, j)]
                for dj in (-1, 0, 1):
                    for di in (-1, 0, 1):
                        assert row[grid.index(i + di, j + dj)] == pytest.approx(
                            stencil[1 + dj, 1 + di], abs=1e-14
                        )
                assert np.count_nonzero(row) <= 9

    def test_non_positive_spacing(self):
        with pytest.raises(ArgumentError):
            constant_stencil(1.0, 0.0, 1.0, 0.0)


class TestAssembleOperator:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_dense_oracle(self, seed):
        """Sparse assembly equals the term-by-term transcription on a periodic 16x16 grid"""
        grid = Grid2D(nx=16, ny=16, h=1.0)
        coeff = smooth_coefficients(grid, seed)
        operator = assemble_operator(grid, coeff, BoundaryCondition.PERIODIC).toarray()
        np.testing.assert_allclose(operator, dense_lambda_oracle(grid, coeff), rtol=0, atol=1e-12)

    def test_oracle_with_spacing(self):
        grid = Grid2D(nx=16, ny=16, h=0.25)
        coeff = smooth_coefficients(grid, 4)
        operator = assemble_operator(grid, coeff, BoundaryCondition.PERIODIC).toarray()
        np.testing.assert_allclose(operator, dense_lambda_oracle(grid, coeff), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("bc", [BoundaryCondition.NEUMANN, BoundaryCondition.PERIODIC])
    def test_constants_map_to_kappa2(self, bc):
        """Every difference vanishes on a constant field"""
        grid = Grid2D(nx=9, ny=8)
        coeff = smooth_coefficients(grid, 5)
        operator = assemble_operator(grid, coeff, bc)
        np.testing.assert_allclose(operator @ np.ones(grid.n), coeff.kappa2, atol=1e-12)

    def test_dirichlet_drops_ghost_neighbours(self):
        """At a Dirichlet corner the two missing neighbours leave their weight on the diagonal"""
        grid = Grid2D(nx=5, ny=5)
        coeff = CoefficientFields.isotropic(grid, 0.1)
        operator = assemble_operator(grid, coeff, BoundaryCondition.DIRICHLET)
        row_sums = operator @ np.ones(grid.n)
        assert row_sums[grid.index(0, 0)] == pytest.approx(2.1)
        assert row_sums[grid.index(2, 0)] == pytest.approx(1.1)
        assert row_sums[grid.index(2, 2)] == pytest.approx(0.1)

    def test_isotropic_is_five_point(self):
        grid = Grid2D(nx=6, ny=6)
        operator = assemble_operator(grid, CoefficientFields.isotropic(grid, 0.1)).toarray()
        row = operator[grid.index(3, 3)]
        assert np.count_nonzero(row) == 5
        assert row[grid.index(3, 3)] == pytest.approx(4.1)
        assert row[grid.index(4, 3)] == pytest.approx(-1.0)

    def test_size_mismatch(self):
        grid = Grid2D(nx=4, ny=4)
        coeff = CoefficientFields.isotropic(Grid2D(nx=5, ny=4), 0.1)
        with pytest.raises(ArgumentError):
            assemble_operator(grid, coeff)

    def test_indefinite_tensor_reports_node(self):
        grid = Grid2D(nx=4, ny=4)
        a12 = np.zeros(grid.n)
        a12[6] = 2.0
        ones = np.ones(grid.n)
        coeff = CoefficientFields(a11=ones, a12=a12, a22=ones, kappa2=0.1 * ones)
        with pytest.raises(DomainError) as exc:
            assemble_operator(grid, coeff)
        assert exc.value.index == 6

    def test_negative_kappa2(self):
        grid = Grid2D(nx=4, ny=4)
        coeff = CoefficientFields.constant(grid, kappa2=-0.1)
        with pytest.raises(DomainError):
            assemble_operator(grid, coeff)

    @pytest.mark.parametrize("bc", list(BoundaryCondition))
    def test_kappa2_only_moves_the_diagonal(self, bc):
        """Raising kappa^2 by delta adds delta I and leaves every off-diagonal entry untouched"""
        grid = Grid2D(nx=9, ny=7)
        coeff = smooth_coefficients(grid, 9)
        delta = 0.375
        raised = coeff.model_copy(update={"kappa2": coeff.kappa2 + delta})
        diff = (assemble_operator(grid, raised, bc) - assemble_operator(grid, coeff, bc)).toarray()
        np.testing.assert_allclose(np.diag(diff), delta, rtol=0, atol=1e-14)
        np.fill_diagonal(diff, 0.0)
        assert not diff.any()

    @pytest.mark.parametrize("bc", list(BoundaryCondition))
    def test_sparsity_bounds(self, bc):
        """At most 9 entries per operator row and 25 per precision row"""
        grid = Grid2D(nx=10, ny=9)
        coeff = smooth_coefficients(grid, 10)
        operator = assemble_operator(grid, coeff, bc)
        q = precision_from_operator(operator, 1.0, grid)
        assert operator.nnz <= 9 * grid.n
        assert q.nnz <= 25 * grid.n
        assert np.diff(operator.tocsr().indptr).max() <= 9
        assert np.diff(q.tocsr().indptr).max() <= 25


class TestMatern:
    def test_variance_at_reference_kappa(self):
        """1 / (4 pi kappa^2) for alpha = 2, d = 2"""
        assert matern_variance(np.sqrt(0.1)) == pytest.approx(0.7957747, rel=1e-6)

    def test_correlation_at_zero(self):
        assert matern_correlation(0.0, 0.5)[0] == 1.0

    def test_correlation_nu_one(self):
        r = np.array([0.5, 2.0, 7.0])
        kappa = np.sqrt(0.1)
        expected = kappa * r * scipy.special.kv(1, kappa * r)
        np.testing.assert_allclose(matern_correlation(r, kappa), expected, rtol=1e-12)

    def test_reference_record(self):
        ref = matern_reference(0.0, np.sqrt(0.1))
        assert ref.rho == pytest.approx(ref.variance)

    def test_negative_distance(self):
        with pytest.raises(ArgumentError):
            matern_reference(-1.0, 1.0)

    def test_invalid_smoothness(self):
        with pytest.raises(DomainError):
            matern_variance(1.0, alpha=1.0, d=2)


class TestPrecision:
    @pytest.fixture
    def grid(self):
        return Grid2D(nx=6, ny=5, h=0.5)

    def test_exactly_symmetric(self, grid):
        coeff = smooth_coefficients(grid, 7)
        q = precision_from_operator(assemble_operator(grid, coeff), 2.0, grid)
        assert (q - q.T).nnz == 0

    def test_scaled_gram(self, grid):
        coeff = smooth_coefficients(grid, 8)
        operator = assemble_operator(grid, coeff).toarray()
        q = precision_from_operator(operator, 3.0, grid).toarray()
        np.testing.assert_allclose(q, 3.0 * grid.h**2 * operator.T @ operator, atol=1e-12)

    def test_normalization_scale(self, grid):
        coeff = CoefficientFields.isotropic(grid, 0.1)
        operator = assemble_operator(grid, coeff)
        plain = precision_from_operator(operator, 1.0, grid).toarray()
        normalized = precision_from_operator(operator, 1.0, grid, True, coeff).toarray()
        np.testing.assert_allclose(normalized, plain * matern_variance(np.sqrt(0.1)), rtol=1e-12)

    def test_variance_scale_uses_sqrt_det(self, grid):
        coeff = CoefficientFields.constant(grid, a11=4.0, a12=0.0, a22=1.0, kappa2=0.1)
        assert variance_scale(coeff) == pytest.approx(matern_variance(np.sqrt(0.1)) / 2.0)

    def test_normalization_requires_coefficients(self, grid):
        operator = assemble_operator(grid, CoefficientFields.isotropic(grid, 0.1))
        with pytest.raises(ArgumentError):
            precision_from_operator(operator, 1.0, grid, normalize_variance=True)

    def test_non_positive_tau2(self, grid):
        operator = assemble_operator(grid, CoefficientFields.isotropic(grid, 0.1))
        with pytest.raises(DomainError):
            precision_from_operator(operator, 0.0, grid)

    def test_non_square(self, grid):
        with pytest.raises(ArgumentError):
            precision_from_operator(np.ones((3, 4)), 1.0, grid)


class TestMaternValidation:
    @staticmethod
    def stationary_samples(size: int, n_samples: int, seed: int):
        grid = Grid2D(nx=size, ny=size)
        coeff = CoefficientFields.isotropic(grid, 0.1)
        operator = assemble_operator(grid, coeff, BoundaryCondition.PERIODIC)
        f = factorize(precision_from_operator(operator, 1.0, grid))
        return grid, sample_gmrf(f, seed, n_samples)

    def test_empirical_correlation_lag_zero(self):
        grid, samples = self.stationary_samples(16, 20, 0)
        assert empirical_correlation(samples, grid, 3)[0] == pytest.approx(1.0)

    def test_small_grid_variance(self):
        """Marginal variance on a small periodic grid is close to 1 / (4 pi kappa^2)"""
        _, samples = self.stationary_samples(48, 100, 1)
        assert np.var(samples) == pytest.approx(matern_variance(np.sqrt(0.1)), rel=0.25)

    @pytest.mark.slow
    def test_matern_correlation_and_variance(self):
        kappa = np.sqrt(0.1)
        grid, samples = self.stationary_samples(128, 2000, 2)
        lags = np.arange(int(4 / kappa) + 1)
        empirical = empirical_correlation(samples, grid, int(lags[-1]))
        np.testing.assert_allclose(empirical, matern_correlation(lags, kappa), atol=0.05)
        assert np.var(samples) == pytest.approx(matern_variance(kappa), rel=0.10)
