"""Shared numerical kernels: sparse SPD solves, sparse triangular mass
factorization, and dense symmetric eigendecomposition.

Every solve reports its achieved residual so that callers can verify the
post-condition independently of the solver internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """A factorization or solve failed; carries the achieved residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    relative_residual: float
    method: str  # "direct" or "cg"


class SpdFactor:
    """Cached sparse LU factorization of an SPD matrix.

    Immutable after construction; ``solve`` is safe to call concurrently.
    For the structured meshes used here a direct factorization amortizes
    over the thousands of repeated solves each MCMC chain performs.
    """

    def __init__(self, a: sp.spmatrix):
        self.a = sp.csc_matrix(a)
        try:
            self._lu = spla.splu(self.a)
        except RuntimeError as exc:  # singular input
            raise SolverError(f"sparse LU factorization failed: {exc}") from exc

    @property
    def shape(self):
        return self.a.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve A x = b (b may be a matrix of stacked right-hand sides)."""
        return self._lu.solve(np.asarray(b, dtype=float))


def spd_solve(
    a: sp.spmatrix,
    b: np.ndarray,
    tol: float = 1e-10,
    method: str = "direct",
) -> tuple[np.ndarray, SolveReport]:
    """Solve the SPD system A x = b to relative residual ``tol``.

    "direct" factorizes with sparse LU; "cg" runs Jacobi-preconditioned
    conjugate gradients.  Raises :class:`SolverError` carrying the achieved
    residual if the tolerance cannot be met.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    b = np.asarray(b, dtype=float)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, method)

    if method == "direct":
        x = SpdFactor(a).solve(b)
        iterations = 1
    elif method == "cg":
        diag = a.diagonal()
        if np.any(diag <= 0):
            raise SolverError("matrix has non-positive diagonal; not SPD")
        precond = sp.diags(1.0 / diag)
        counter = _IterationCounter()
        x, info = spla.cg(
            a, b, rtol=tol * 0.1, atol=0.0, maxiter=10 * a.shape[0],
            M=precond, callback=counter,
        )
        iterations = counter.count
        if info > 0:
            resid = float(np.linalg.norm(a @ x - b) / norm_b)
            raise SolverError(
                f"CG did not converge in {iterations} iterations "
                f"(relative residual {resid:.3e} > {tol:.1e})",
                residual=resid,
            )
    else:
        raise ValueError(f"unknown method {method!r}")

    resid = float(np.linalg.norm(a @ x - b) / norm_b)
    if resid > tol:
        raise SolverError(
            f"{method} solve residual {resid:.3e} exceeds tol {tol:.1e}",
            residual=resid,
        )
    return x, SolveReport(iterations, resid, method)


class _IterationCounter:
    def __init__(self):
        self.count = 0

    def __call__(self, _xk):
        self.count += 1


def sparse_cholesky(m: sp.spmatrix) -> sp.csc_matrix:
    """Sparse lower-triangular F with F F^T = M for SPD M.

    SuperLU in symmetric mode with natural ordering and diagonal pivoting
    reduces to an LDL^T factorization without row exchanges for SPD input,
    so F = L sqrt(D).  The natural ordering keeps F banded for the
    lexicographically ordered structured meshes used here.
    """
    m = sp.csc_matrix(m)
    n = m.shape[0]
    lu = spla.splu(
        m,
        permc_spec="NATURAL",
        diag_pivot_thresh=0.0,
        options=dict(SymmetricMode=True),
    )
    if np.any(lu.perm_r != np.arange(n)) or np.any(lu.perm_c != np.arange(n)):
        raise SolverError("factorization pivoted; input is not SPD")
    d = lu.U.diagonal()
    if np.any(d <= 0.0):
        raise SolverError("non-positive pivot encountered; input is not SPD")
    return (lu.L @ sp.diags(np.sqrt(d))).tocsc()


def sym_eig(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a dense symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues in non-increasing
    order and orthonormal eigenvector columns.  Asymmetric input is
    rejected.  Intended for the coarsest level only; do not call this on
    fine-level operators.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {h.shape}")
    scale = max(float(np.max(np.abs(h))), 1.0)
    if float(np.max(np.abs(h - h.T))) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(h)
    return np.ascontiguousarray(w[::-1]), np.ascontiguousarray(v[:, ::-1])
