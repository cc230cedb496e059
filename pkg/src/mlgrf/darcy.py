"""Mixed RT0/P0 solver for incompressible Darcy flow on structured quads.

Flux unknowns live on edges (one constant normal component per edge, using
the global orientation of the mesh: vertical edges have normal +x,
horizontal edges +y); pressures are piecewise constant per element.
Dirichlet pressure data is natural in the mixed form and enters the
momentum right-hand side as boundary terms; the zero-normal-flux condition
on top and bottom is essential and is imposed by eliminating those edge
unknowns.

The benchmark drives flow with p = -1 on the left boundary and p = 0 on
the right, so the left boundary is the outflow through which the flux
quantity of interest is measured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linalg import SolverError
from .mesh import MeshLevel


@dataclass(frozen=True)
class BoundaryConditions:
    p_left: float = -1.0
    p_right: float = 0.0


@dataclass(frozen=True)
class DarcySolution:
    u: np.ndarray              # normal flux per edge (constrained edges are 0)
    p: np.ndarray              # pressure per element
    divergence_residual: float


@dataclass(frozen=True)
class ObservationSet:
    points: np.ndarray         # (n_obs, 2), strictly inside the domain
    values: np.ndarray         # observed pressures
    sigma_eta: float           # observation noise standard deviation
    reference_level_h: float   # mesh size used to generate the data
    seed: int | None = None

    def __post_init__(self):
        if self.sigma_eta <= 0:
            raise ValueError("sigma_eta must be positive")
        pts = np.asarray(self.points, dtype=float)
        if np.any(pts <= 0.0) or np.any(pts >= 1.0):
            raise ValueError("observation points must lie strictly inside the domain")


def project_permeability(theta: np.ndarray, mesh: MeshLevel) -> np.ndarray:
    """Per-element permeability k_e = exp(theta at the element centroid).

    The centroid value of a bilinear nodal field is the mean of its four
    corner values, so no quadrature is needed.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != mesh.n_nodes:
        raise ValueError("field length does not match mesh node count")
    return np.exp(theta[mesh.elements].mean(axis=1))


class DarcySystem:
    """Per-mesh static structure for the saddle-point system.

    The sparsity pattern, divergence block, Dirichlet load, and free-edge
    numbering depend only on the mesh, so they are precomputed once; only
    the velocity mass block changes with the permeability.  Factorizations
    are per-solve because the matrix changes with every sample.
    """

    def __init__(self, mesh: MeshLevel, bc: BoundaryConditions = BoundaryConditions()):
        self.mesh = mesh
        self.bc = bc
        n = mesh.n
        h = mesh.h
        elem_edges = mesh.element_edges()      # [left, right, bottom, top]
        n_edges = mesh.n_edges
        n_el = mesh.n_elements

        # essential BC: zero normal flux on top/bottom horizontal edges
        constrained = np.flatnonzero(
            (mesh.edge_tags == "top") | (mesh.edge_tags == "bottom")
        )
        free_mask = np.ones(n_edges, dtype=bool)
        free_mask[constrained] = False
        self.free_edges = np.flatnonzero(free_mask)
        self.n_free = self.free_edges.size
        edge_to_free = -np.ones(n_edges, dtype=int)
        edge_to_free[self.free_edges] = np.arange(self.n_free)

        # velocity mass pattern: one [[2,1],[1,2]] block per (left,right)
        # and (bottom,top) edge pair of every element
        pair_rows, pair_cols, pair_elems = [], [], []
        for a, b in ((0, 1), (2, 3)):
            ea = elem_edges[:, a]
            eb = elem_edges[:, b]
            for r, c, w in ((ea, ea, 2.0), (ea, eb, 1.0), (eb, ea, 1.0), (eb, eb, 2.0)):
                keep = free_mask[r] & free_mask[c]
                pair_rows.append(edge_to_free[r[keep]])
                pair_cols.append(edge_to_free[c[keep]])
                pair_elems.append((np.flatnonzero(keep), w))
        self._mass_rows = np.concatenate(pair_rows)
        self._mass_cols = np.concatenate(pair_cols)
        self._mass_elem = np.concatenate([e for e, _ in pair_elems])
        self._mass_weight = np.concatenate(
            [np.full(e.size, w) for e, w in pair_elems]
        )
        self._mass_scale = h * h / 6.0

        # divergence block B (momentum gets +B^T): the sign convention
        # B[e_K, left/bottom] = +h, B[e_K, right/top] = -h keeps the full
        # system symmetric and B u = 0 equivalent to per-element
        # conservation of the edge fluxes
        brows = np.repeat(np.arange(n_el), 4)
        bcols = elem_edges.ravel()
        bdata = np.tile(np.array([h, -h, h, -h]), n_el)
        keep = free_mask[bcols]
        self.b_free = sp.csr_matrix(
            (bdata[keep], (brows[keep], edge_to_free[bcols[keep]])),
            shape=(n_el, self.n_free),
        )
        self.b_full = sp.csr_matrix(
            (bdata, (brows, bcols)), shape=(n_el, n_edges)
        )

        # Dirichlet data: rhs_e = -p_s * (v_e . n_out) * h on left/right edges
        rhs = np.zeros(n_edges)
        rhs[mesh.edge_tags == "left"] = bc.p_left * h       # n_out = -x
        rhs[mesh.edge_tags == "right"] = -bc.p_right * h    # n_out = +x
        self.rhs = np.concatenate([rhs[self.free_edges], np.zeros(n_el)])

        self.left_edges = np.flatnonzero(mesh.edge_tags == "left")

    def solve(self, k: np.ndarray) -> DarcySolution:
        """Solve the saddle system for per-element permeability k > 0."""
        k = np.asarray(k, dtype=float)
        if k.shape[0] != self.mesh.n_elements:
            raise ValueError("permeability length does not match element count")
        if np.any(k <= 0.0) or not np.all(np.isfinite(k)):
            raise SolverError("permeability must be positive and finite")

        data = self._mass_scale * self._mass_weight / k[self._mass_elem]
        mk = sp.coo_matrix(
            (data, (self._mass_rows, self._mass_cols)),
            shape=(self.n_free, self.n_free),
        )
        system = sp.bmat([[mk, self.b_free.T], [self.b_free, None]], format="csc")
        try:
            sol = spla.splu(system).solve(self.rhs)
        except RuntimeError as exc:
            raise SolverError(f"saddle-point factorization failed: {exc}") from exc
        if not np.all(np.isfinite(sol)):
            raise SolverError("saddle-point solve produced non-finite values")

        u = np.zeros(self.mesh.n_edges)
        u[self.free_edges] = sol[: self.n_free]
        p = sol[self.n_free:]
        div = float(np.abs(self.b_full @ u).max())
        return DarcySolution(u=u, p=p, divergence_residual=div)


def solve_darcy(
    mesh: MeshLevel,
    k: np.ndarray,
    bc: BoundaryConditions = BoundaryConditions(),
) -> DarcySolution:
    """One-shot convenience wrapper around :class:`DarcySystem`."""
    return DarcySystem(mesh, bc).solve(k)


def compute_qoi(sol: DarcySolution, mesh: MeshLevel) -> float:
    """Length-averaged outward flux through the left (outflow) boundary.

    Left-boundary vertical edges have global normal +x while the outward
    normal is -x, hence the sign flip.
    """
    left = np.flatnonzero(mesh.edge_tags == "left")
    return float(np.sum(-sol.u[left] * mesh.h))


def locate_elements(mesh: MeshLevel, points: np.ndarray) -> np.ndarray:
    """Element containing each point; grid-line ties go to the lower-left.

    Points must lie strictly inside the unit square.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(points <= 0.0) or np.any(points >= 1.0):
        raise ValueError("point outside the open unit square")
    n = mesh.n
    ids = np.empty(points.shape[0], dtype=int)
    for row, (x, y) in enumerate(points):
        ij = []
        for c in (x, y):
            t = c / mesh.h
            i = int(np.floor(t))
            if i == t:          # exactly on a grid line: take the lower side
                i -= 1
            ij.append(min(max(i, 0), n - 1))
        ids[row] = ij[1] * n + ij[0]
    return ids


def observe(sol: DarcySolution, mesh: MeshLevel, points: np.ndarray) -> np.ndarray:
    """Piecewise-constant pressure evaluated at interior points."""
    return sol.p[locate_elements(mesh, points)]


def log_likelihood(y_model: np.ndarray, obs: ObservationSet) -> float:
    """Gaussian log-likelihood up to its additive constant.

    The constant cancels in every acceptance ratio, so it is dropped.
    """
    y_model = np.asarray(y_model, dtype=float)
    values = np.asarray(obs.values, dtype=float)
    if y_model.shape != values.shape:
        raise ValueError(
            f"model output shape {y_model.shape} does not match "
            f"observations {values.shape}"
        )
    r = y_model - values
    return float(-0.5 * np.dot(r, r) / obs.sigma_eta**2)


def observation_lattice(per_side: int = 10) -> np.ndarray:
    """The fixed interior lattice ((i+0.5)/n, (j+0.5)/n) of observation points."""
    s = (np.arange(per_side) + 0.5) / per_side
    xx, yy = np.meshgrid(s, s, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def write_observations(path, obs: ObservationSet, config_hash: str | None = None) -> None:
    payload = {
        "points": np.asarray(obs.points).tolist(),
        "values": np.asarray(obs.values).tolist(),
        "sigma_eta": obs.sigma_eta,
        "reference_h": obs.reference_level_h,
        "seed": obs.seed,
        "config": config_hash,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def read_observations(path) -> ObservationSet:
    with open(path) as fh:
        payload = json.load(fh)
    return ObservationSet(
        points=np.asarray(payload["points"], dtype=float),
        values=np.asarray(payload["values"], dtype=float),
        sigma_eta=float(payload["sigma_eta"]),
        reference_level_h=float(payload["reference_h"]),
        seed=payload.get("seed"),
    )


def write_pressure_csv(
    path,
    mesh: MeshLevel,
    p: np.ndarray,
    seed=None,
    config_hash: str | None = None,
) -> None:
    """Pressure interchange format: provenance comment, then centroid rows."""
    centroids = mesh.element_centroids()
    with open(path, "w") as fh:
        fh.write(
            f"# seed={seed} config={config_hash} "
            f"level={mesh.level_index} h={mesh.h:.17g}\n"
        )
        fh.write("x_centroid,y_centroid,p\n")
        for (x, y), v in zip(centroids, p):
            fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
