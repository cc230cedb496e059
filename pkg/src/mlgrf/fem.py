"""Bilinear-quad finite element operators for Matern-type field sampling.

Per mesh level this module assembles the consistent mass matrix M, the
pure-Neumann stiffness matrix S, the shifted SPD operator A = S + kappa^2 M,
the sparse triangular factor F with F F^T = M used to realize discrete white
noise, and the normalization constant that gives the sampled field unit
marginal variance.

The mass matrix is deliberately consistent (not lumped): the exact transfer
identities of the multilevel decompositions require M_coarse = P^T M_fine P,
which fails for lumped mass.  All element integrals use 2x2 Gauss quadrature,
which is exact for these bilinear integrands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gamma, pi, sqrt

import numpy as np
import scipy.sparse as sp

from .linalg import SolverError, SpdFactor, sparse_cholesky
from .mesh import MeshLevel

# reference square [-1, 1]^2, counter-clockwise corners
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])
_GAUSS = (-1.0 / sqrt(3.0), 1.0 / sqrt(3.0))


def _element_matrices(h: float) -> tuple[np.ndarray, np.ndarray]:
    """Element mass and stiffness for a square of side h (2x2 Gauss)."""
    me = np.zeros((4, 4))
    se = np.zeros((4, 4))
    for xi in _GAUSS:
        for eta in _GAUSS:
            shape = 0.25 * (1.0 + _CORNERS[:, 0] * xi) * (1.0 + _CORNERS[:, 1] * eta)
            d_xi = 0.25 * _CORNERS[:, 0] * (1.0 + _CORNERS[:, 1] * eta)
            d_eta = 0.25 * _CORNERS[:, 1] * (1.0 + _CORNERS[:, 0] * xi)
            me += (h * h / 4.0) * np.outer(shape, shape)
            # physical gradient scaling (2/h)^2 cancels the Jacobian (h/2)^2
            se += np.outer(d_xi, d_xi) + np.outer(d_eta, d_eta)
    return me, se


def _assemble(mesh: MeshLevel, elem: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    rows = np.repeat(el, 4, axis=1).ravel()
    cols = np.tile(el, (1, 4)).ravel()
    data = np.tile(elem.ravel(), el.shape[0])
    a = sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return a.tocsr()


def assemble_mass(mesh: MeshLevel) -> sp.csr_matrix:
    """Consistent mass matrix; its entries sum to the domain area 1."""
    me, _ = _element_matrices(mesh.h)
    return _assemble(mesh, me)


def assemble_stiffness(mesh: MeshLevel) -> sp.csr_matrix:
    """Stiffness matrix with natural (zero-flux Neumann) boundary; S 1 = 0."""
    _, se = _element_matrices(mesh.h)
    return _assemble(mesh, se)


def matern_normalization(kappa: float, nu: float = 1.0, d: int = 2) -> float:
    """Scaling that imposes unit marginal variance on the sampled field:

        (4 pi)^(d/4) * kappa^nu * sqrt(Gamma(nu + d/2) / Gamma(nu))
    """
    return (4.0 * pi) ** (d / 4.0) * kappa**nu * sqrt(gamma(nu + d / 2.0) / gamma(nu))


def mass_factor(m: sp.spmatrix) -> sp.csc_matrix:
    """Sparse lower-triangular F with F F^T = M, verified to 1e-12 * max|M|.

    Any factor with F F^T = M realizes the same Gaussian law for F xi with
    xi ~ N(0, I), so a triangular factor is as good as a matrix square root.
    """
    f = sparse_cholesky(m)
    resid = float(np.abs((f @ f.T - m)).max())
    scale = float(np.abs(m).max())
    if resid > 1e-12 * scale:
        raise SolverError(
            f"mass factorization residual {resid:.3e} exceeds 1e-12 * max|M|",
            residual=resid,
        )
    return f


@dataclass(eq=False)
class SpdeOperators:
    """Per-level operators for the shifted-elliptic field sampler.

    Immutable after construction (the lazy factorization caches are
    idempotent), so instances are safe to share read-only across chains.
    """

    level: int
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    spde_matrix: sp.csr_matrix   # A = S + kappa^2 M, SPD
    mass_chol: sp.csc_matrix     # F with F F^T = mass
    kappa: float
    nu: float
    matern_scale: float          # unit-variance normalization
    sigma: float                 # target marginal standard deviation
    _spde_factor: SpdFactor | None = field(default=None, repr=False)
    _mass_factor: SpdFactor | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.mass.shape[0]

    def spde_solve(self, b: np.ndarray) -> np.ndarray:
        """A^{-1} b with a cached factorization."""
        if self._spde_factor is None:
            self._spde_factor = SpdFactor(self.spde_matrix)
        return self._spde_factor.solve(b)

    def mass_solve(self, b: np.ndarray) -> np.ndarray:
        """M^{-1} b with a cached factorization."""
        if self._mass_factor is None:
            self._mass_factor = SpdFactor(self.mass)
        return self._mass_factor.solve(b)


def assemble_spde_operator(
    mesh: MeshLevel,
    kappa: float,
    nu: float = 1.0,
    sigma: float = 1.0,
) -> SpdeOperators:
    """Assemble all per-level operators for the field sampler.

    Only nu = 1 in two dimensions is supported: that makes the operator
    order integral, so one elliptic solve produces a sample.  Fractional
    orders would need a rational approximation and are out of scope.
    """
    if kappa <= 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if nu != 1.0:
        raise ValueError(
            f"only nu = 1 is supported in 2-D (integer operator order); got nu={nu}"
        )
    m = assemble_mass(mesh)
    s = assemble_stiffness(mesh)
    a = (s + kappa**2 * m).tocsr()
    return SpdeOperators(
        level=mesh.level_index,
        mass=m,
        stiffness=s,
        spde_matrix=a,
        mass_chol=mass_factor(m),
        kappa=kappa,
        nu=nu,
        matern_scale=matern_normalization(kappa, nu=nu, d=2),
        sigma=sigma,
    )


def write_matrix_coo(m: sp.spmatrix, path) -> None:
    """Debug dump in coordinate text format: one "i j value" line per entry."""
    coo = sp.coo_matrix(m)
    with open(path, "w") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
