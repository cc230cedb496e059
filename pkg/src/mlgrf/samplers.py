"""Gaussian random field samplers and hierarchical noise decompositions.

Two single-level samplers produce fields with the same Gaussian law:

* SPDE path: theta = sigma * g * A^{-1} F xi with xi ~ N(0, I), where
  F F^T = M realizes the discrete white-noise forcing zeta = F xi ~ N(0, M).
* KL path (coarsest level only): theta = sigma * sum_i sqrt(lambda_i)
  xihat_i phi_i, built from the eigenpairs of the discrete covariance
  C = g^2 A^{-1} M A^{-1} that the SPDE sampler targets.

The two hierarchical decompositions condition a fine-level forcing on a
coarse realization while keeping the fine covariance exact:

* multigrid:   zeta_f = R^T zeta_c + (I - R^T P^T) F_f xi_f
* KL-coupled:  zeta_f = M_f P Psi xihat + (I - M_f P Psi Psi^T P^T) F_f xi_f

with R = M_c^{-1} P^T M_f the mass-weighted restriction.  Both identities
Cov(M_f^{-1} zeta_f) = M_f^{-1} hold at the matrix level (not just in
expectation estimates) because M_c = P^T M_f P on nested spaces and the
modes Psi are chosen mass-orthonormal, Psi^T M_c Psi = I.  The KL variant
additionally leaves the sampler free to move in the complement of the
truncated mode span, which is what keeps multilevel MCMC ergodic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fem import SpdeOperators
from .linalg import sym_eig
from .mesh import Hierarchy, MeshLevel, TransferOperator


@dataclass(frozen=True)
class WhiteNoise:
    """An iid standard-normal vector tied to one level of the hierarchy."""

    level: int
    xi: np.ndarray


@dataclass(frozen=True)
class FieldRealization:
    """Nodal log-permeability field on one mesh level."""

    level: int
    theta: np.ndarray


@dataclass(frozen=True)
class KlBasis:
    """Truncated eigenbasis of the coarsest-level discrete covariance.

    lambdas are the leading m eigenvalues (non-increasing, >= 0) of
    C = g^2 A^{-1} M A^{-1}.  phi columns are field modes, psi columns
    white-noise modes; both families are mass-orthonormal, and they are
    linked by g A^{-1} M psi_i = sqrt(lambda_i) phi_i.
    """

    m: int
    lambdas: np.ndarray   # (m,)
    phi: np.ndarray       # (n0, m)
    psi: np.ndarray       # (n0, m)
    sigma: float
    level: int = 0


def sample_white_noise(level: int, rng: np.random.Generator, size: int) -> WhiteNoise:
    """Draw iid N(0,1) noise; deterministic given the stream identity."""
    return WhiteNoise(level=level, xi=rng.standard_normal(size))


def spde_sample(ops: SpdeOperators, noise: WhiteNoise) -> FieldRealization:
    """One elliptic solve turns white noise into a field realization."""
    if noise.xi.shape[0] != ops.n_nodes:
        raise ValueError(
            f"noise length {noise.xi.shape[0]} does not match level "
            f"{ops.level} node count {ops.n_nodes}"
        )
    zeta = ops.mass_chol @ noise.xi
    return field_from_forcing(ops, zeta)


def field_from_forcing(ops: SpdeOperators, zeta: np.ndarray) -> FieldRealization:
    """theta = sigma * g * A^{-1} zeta for a forcing zeta ~ N(0, M)."""
    theta = ops.sigma * ops.matern_scale * ops.spde_solve(zeta)
    return FieldRealization(level=ops.level, theta=theta)


def compute_kl_basis(ops: SpdeOperators, m: int) -> KlBasis:
    """Eigenpairs of the coarse discrete covariance, in factored form.

    The generalized problem C M phi = lambda phi is symmetrized with the
    mass factor: H = F^T C F is symmetric with the same spectrum, and
    phi = F^{-T} y maps its orthonormal eigenvectors y to mass-orthonormal
    field modes.  The white-noise modes psi_i = (sqrt(lambda_i)/g)
    M^{-1} A phi_i are then mass-orthonormal as well.  Dense algebra is
    fine here: the basis is only ever built on the coarsest level.
    """
    n = ops.n_nodes
    if not 1 <= m <= n:
        raise ValueError(f"truncation m={m} must lie in [1, {n}]")
    a = ops.spde_matrix.toarray()
    mm = ops.mass.toarray()
    f = ops.mass_chol.toarray()
    g = ops.matern_scale

    ainv_m = np.linalg.solve(a, mm)
    cov = g * g * np.linalg.solve(a, ainv_m.T)   # g^2 A^{-1} M A^{-1}
    h = f.T @ cov @ f
    h = 0.5 * (h + h.T)

    w, y = sym_eig(h)
    lambdas = np.clip(w[:m], 0.0, None)
    phi = scipy.linalg.solve_triangular(f.T, y[:, :m], lower=False)
    psi = np.linalg.solve(mm, a @ phi) * (np.sqrt(lambdas) / g)
    return KlBasis(
        m=m, lambdas=lambdas, phi=phi, psi=psi, sigma=ops.sigma, level=ops.level
    )


def kl_sample(basis: KlBasis, xi_hat: np.ndarray) -> FieldRealization:
    """theta = sigma * sum_i sqrt(lambda_i) xihat_i phi_i; no solve needed."""
    xi_hat = np.asarray(xi_hat, dtype=float)
    if xi_hat.shape[0] != basis.m:
        raise ValueError(
            f"coefficient length {xi_hat.shape[0]} does not match truncation {basis.m}"
        )
    theta = basis.sigma * (basis.phi @ (np.sqrt(basis.lambdas) * xi_hat))
    return FieldRealization(level=basis.level, theta=theta)


def kl_forcing(basis: KlBasis, ops: SpdeOperators, xi_hat: np.ndarray) -> np.ndarray:
    """Forcing zeta = M Psi xihat equivalent to the KL sample on the SPDE path."""
    return ops.mass @ (basis.psi @ np.asarray(xi_hat, dtype=float))


def mg_decompose(
    zeta_coarse: np.ndarray,
    noise_fine: WhiteNoise,
    ops_coarse: SpdeOperators,
    ops_fine: SpdeOperators,
    p,
) -> np.ndarray:
    """Fine forcing conditioned on a coarse forcing (multigrid coupling).

    zeta_f = R^T zeta_c + (I - R^T P^T) F_f xi_f, computed with a single
    coarse mass solve.  If zeta_c ~ N(0, M_c) and xi_f ~ N(0, I) are
    independent, the result is exactly N(0, M_f).
    """
    if noise_fine.level != ops_fine.level:
        raise ValueError(
            f"fine noise level {noise_fine.level} does not match operators "
            f"level {ops_fine.level}"
        )
    if zeta_coarse.shape[0] != ops_coarse.n_nodes:
        raise ValueError("coarse forcing length does not match coarse level")
    zeta_fine = ops_fine.mass_chol @ noise_fine.xi
    resid = zeta_coarse - p.T @ zeta_fine
    return zeta_fine + ops_fine.mass @ (p @ ops_coarse.mass_solve(resid))


def kl_spde_decompose(
    xi_hat: np.ndarray,
    noise_fine: WhiteNoise,
    basis: KlBasis,
    ops_fine: SpdeOperators,
    p,
) -> np.ndarray:
    """Fine forcing conditioned on truncated KL coefficients.

    zeta_f = M_f P Psi xihat + (I - M_f P Psi Psi^T P^T) F_f xi_f.  The
    complement term removes only the Psi-span content of the fine noise, so
    the chain still explores the directions a truncated basis cannot
    represent; mass-orthonormality of Psi makes the covariance exact for
    every truncation m.
    """
    xi_hat = np.asarray(xi_hat, dtype=float)
    if xi_hat.shape[0] != basis.m:
        raise ValueError(
            f"coefficient length {xi_hat.shape[0]} does not match truncation {basis.m}"
        )
    if noise_fine.level != ops_fine.level:
        raise ValueError(
            f"fine noise level {noise_fine.level} does not match operators "
            f"level {ops_fine.level}"
        )
    zeta_fine = ops_fine.mass_chol @ noise_fine.xi
    coeff = xi_hat - basis.psi.T @ (p.T @ zeta_fine)
    return zeta_fine + ops_fine.mass @ (p @ (basis.psi @ coeff))


def compose_forcings(
    noises: list[np.ndarray],
    ops: list[SpdeOperators],
    transfers: list[TransferOperator],
    basis: KlBasis | None = None,
) -> list[np.ndarray]:
    """Compose per-level forcings from the hierarchical noise state.

    noises[0] is the coarsest noise (full nodal vector for an SPDE coarsest
    level, KL coefficients when ``basis`` is given); noises[k] for k >= 1
    are the fine-level complement noises.  Returns the composed forcing for
    every level up to len(noises) - 1.
    """
    if basis is None:
        zeta = ops[0].mass_chol @ np.asarray(noises[0], dtype=float)
    else:
        zeta = kl_forcing(basis, ops[0], noises[0])
    out = [zeta]
    for k in range(1, len(noises)):
        noise = WhiteNoise(level=k, xi=np.asarray(noises[k], dtype=float))
        if k == 1 and basis is not None:
            zeta = kl_spde_decompose(noises[0], noise, basis, ops[1], transfers[0].p)
        else:
            zeta = mg_decompose(out[-1], noise, ops[k - 1], ops[k], transfers[k - 1].p)
        out.append(zeta)
    return out


def multilevel_field(
    noises: list[np.ndarray],
    ops: list[SpdeOperators],
    transfers: list[TransferOperator],
    basis: KlBasis | None = None,
) -> FieldRealization:
    """Field on level len(noises)-1 composed from the hierarchical state."""
    zetas = compose_forcings(noises, ops, transfers, basis=basis)
    return field_from_forcing(ops[len(zetas) - 1], zetas[-1])


def write_field_csv(
    path,
    mesh: MeshLevel,
    theta: np.ndarray,
    seed=None,
    config_hash: str | None = None,
) -> None:
    """Field interchange format: provenance comment, then x,y,theta rows."""
    with open(path, "w") as fh:
        fh.write(
            f"# seed={seed} config={config_hash} "
            f"level={mesh.level_index} h={mesh.h:.17g}\n"
        )
        fh.write("x,y,theta\n")
        for (x, y), t in zip(mesh.nodes, theta):
            fh.write(f"{x:.17g},{y:.17g},{t:.17g}\n")
