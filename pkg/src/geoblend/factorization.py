import os
from abc import ABC, abstractmethod

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import structlog
from dotenv import load_dotenv

from src.geoblend.errors import ArgumentError, NotPositiveDefiniteError

load_dotenv()
logger = structlog.get_logger(__name__)


class Factorization(ABC):
    """
    Abstract base class for sparse symmetric factorizations of SPD precision matrices.

    Implementations factor P Q P^T = L D L^T with a fill-reducing permutation P and expose
    solves, the log-determinant and the transform used to draw N(0, Q^-1) samples.
    """

    @property
    @abstractmethod
    def size(self) -> int:
        raise NotImplementedError

    @abstractmethod
    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b."""
        raise NotImplementedError

    @abstractmethod
    def logdet(self) -> float:
        """log det Q."""
        raise NotImplementedError

    @abstractmethod
    def sqrt_solve(self, z: np.ndarray) -> np.ndarray:
        """Return x = R^-T z where Q = R R^T, so that z ~ N(0, I) gives x ~ N(0, Q^-1)."""
        raise NotImplementedError


class CholmodFactorization(Factorization):
    """
    Factorization backed by SuiteSparse CHOLMOD through scikit-sparse.

    Attributes:
        factor: The CHOLMOD factor object.
    """

    def __init__(self, matrix: sp.spmatrix):
        """
        Factor the matrix, raising NotPositiveDefiniteError on a non-positive pivot.
        """
        from sksparse.cholmod import CholmodNotPositiveDefiniteError, cholesky

        self._size = matrix.shape[0]
        try:
            self.factor = cholesky(sp.csc_matrix(matrix), mode="supernodal")
        except CholmodNotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"Matrix is not positive definite: {exc}") from exc

    @property
    def size(self) -> int:
        return self._size

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.factor(b)

    def logdet(self) -> float:
        return float(self.factor.logdet())

    def sqrt_solve(self, z: np.ndarray) -> np.ndarray:
        sqrt_d_inv = 1.0 / np.sqrt(self.factor.D())
        scaled = sqrt_d_inv[:, None] * z if z.ndim == 2 else sqrt_d_inv * z
        return self.factor.apply_Pt(self.factor.solve_Lt(scaled))


class SuperLUFactorization(Factorization):
    """
    Factorization backed by SciPy's SuperLU in symmetric mode.

    With diagonal pivoting and a symmetric ordering SuperLU computes P Q P^T = L U with
    U = D L^T, which gives the LDL^T factorization used for log-determinants and sampling.

    Attributes:
        lu: The SuperLU object.
    """

    def __init__(self, matrix: sp.spmatrix):
        """
        Factor the matrix, raising NotPositiveDefiniteError on a non-positive pivot.
        """
        self._size = matrix.shape[0]
        try:
            self.lu = spla.splu(
                sp.csc_matrix(matrix),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(f"Factorization failed: {exc}") from exc

        if not np.array_equal(self.lu.perm_r, self.lu.perm_c):
            raise NotPositiveDefiniteError(
                "SuperLU left the diagonal while pivoting; the matrix is not positive definite"
            )

        self._pivots = self.lu.U.diagonal()
        bad = np.flatnonzero(~(self._pivots > 0))
        if bad.size:
            original = int(np.argsort(self.lu.perm_r)[bad[0]])
            raise NotPositiveDefiniteError(
                f"Non-positive pivot {self._pivots[bad[0]]:.3e} at index {original}",
                index=original,
            )
        self._lt = sp.csr_matrix(self.lu.L.T)

    @property
    def size(self) -> int:
        return self._size

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(b, dtype=float))

    def logdet(self) -> float:
        return float(np.sum(np.log(self._pivots)))

    def sqrt_solve(self, z: np.ndarray) -> np.ndarray:
        sqrt_d_inv = 1.0 / np.sqrt(self._pivots)
        scaled = sqrt_d_inv[:, None] * z if z.ndim == 2 else sqrt_d_inv * z
        permuted = spla.spsolve_triangular(
            self._lt, scaled, lower=False, unit_diagonal=True
        )
        return permuted[self.lu.perm_r]


def _cholmod_available() -> bool:
    try:
        import sksparse.cholmod  # noqa: F401
    except ImportError:
        return False
    return True


def factorize(matrix: sp.spmatrix, backend: str | None = None) -> Factorization:
    """
    Factor a sparse symmetric positive-definite matrix.

    :param matrix: Square sparse matrix.
    :param backend: "cholmod", "superlu" or "auto"; defaults to GEOBLEND_FACTORIZATION or "auto".
    :return: Factorization handle.
    """
    if matrix.shape[0] != matrix.shape[1]:
        raise ArgumentError(f"Matrix must be square, got shape {matrix.shape}")

    backend = (backend or os.getenv("GEOBLEND_FACTORIZATION") or "auto").lower()
    if backend not in {"auto", "cholmod", "superlu"}:
        raise ArgumentError(f"Unknown factorization backend: {backend}")

    if backend == "auto":
        backend = "cholmod" if _cholmod_available() else "superlu"
    elif backend == "cholmod" and not _cholmod_available():
        logger.warning("CHOLMOD (scikit-sparse) not available; falling back to SuperLU")
        backend = "superlu"

    if backend == "cholmod":
        return CholmodFactorization(matrix)
    return SuperLUFactorization(matrix)
