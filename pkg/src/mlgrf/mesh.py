"""Nested structured-quadrilateral meshes on the unit square and the
bilinear prolongation / mass-weighted restriction operators between
consecutive refinement levels.

Node ordering is row-major lexicographic by (y, x) so that operator
construction and reference outputs are deterministic.  Only factor-2
uniform refinement is supported: nestedness of the bilinear FE spaces is
what makes the transfer identities below hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import spd_solve

BOUNDARY_TAGS = ("left", "right", "bottom", "top", "interior")


def _divisions(h: float) -> int:
    """Number of subdivisions per side; rejects h that does not divide 1."""
    n = int(round(1.0 / h))
    if n < 1 or abs(n * h - 1.0) > 1e-9:
        raise ValueError(
            f"mesh size h={h} does not divide the unit interval exactly; "
            "use h = 1/n for a positive integer n"
        )
    return n


@dataclass(frozen=True)
class MeshLevel:
    """One structured quad mesh of the unit square.

    Edge ids list vertical edges (normal +x) first, then horizontal edges
    (normal +y); both blocks are ordered row-major like the nodes.
    """

    level_index: int
    h: float
    nodes: np.ndarray       # (n_nodes, 2) coordinates
    elements: np.ndarray    # (n_elements, 4) connectivity, counter-clockwise
    edges: np.ndarray       # (n_edges, 2) node pairs, consistently oriented
    node_tags: np.ndarray   # (n_nodes,) strings from BOUNDARY_TAGS
    edge_tags: np.ndarray   # (n_edges,)

    @property
    def n(self) -> int:
        """Subdivisions per side (1/h)."""
        return int(round(1.0 / self.h))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def n_vertical_edges(self) -> int:
        return self.n * (self.n + 1)

    def node_id(self, i: int, j: int) -> int:
        return j * (self.n + 1) + i

    def vertical_edge_id(self, i: int, j: int) -> int:
        """Edge from node (i, j) to (i, j+1); normal points in +x."""
        return j * (self.n + 1) + i

    def horizontal_edge_id(self, i: int, j: int) -> int:
        """Edge from node (i, j) to (i+1, j); normal points in +y."""
        return self.n_vertical_edges + j * self.n + i

    def element_edges(self) -> np.ndarray:
        """Per element: [left, right, bottom, top] edge ids."""
        n = self.n
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        i = i.ravel()
        j = j.ravel()
        left = j * (n + 1) + i
        right = j * (n + 1) + i + 1
        bottom = self.n_vertical_edges + j * n + i
        top = self.n_vertical_edges + (j + 1) * n + i
        return np.column_stack([left, right, bottom, top])

    def element_centroids(self) -> np.ndarray:
        corners = self.nodes[self.elements]  # (n_elements, 4, 2)
        return corners.mean(axis=1)


@dataclass(frozen=True)
class TransferOperator:
    """Bilinear interpolation from a coarse level to the next finer one."""

    p: sp.csr_matrix  # (fine_nodes, coarse_nodes)
    coarse_level: int
    fine_level: int


@dataclass(frozen=True)
class Hierarchy:
    levels: list[MeshLevel]       # index 0 = coarsest
    transfers: list[TransferOperator]

    @property
    def finest(self) -> int:
        return len(self.levels) - 1


def build_mesh(h: float, level_index: int = 0) -> MeshLevel:
    n = _divisions(h)
    h = 1.0 / n

    axis = np.arange(n + 1) * h
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    sw = j * (n + 1) + i
    elements = np.column_stack([sw, sw + 1, sw + n + 2, sw + n + 1])

    # vertical edges (bottom node -> top node), then horizontal (left -> right)
    iv, jv = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="xy")
    v_lo = jv.ravel() * (n + 1) + iv.ravel()
    vertical = np.column_stack([v_lo, v_lo + n + 1])
    ih, jh = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="xy")
    h_lo = jh.ravel() * (n + 1) + ih.ravel()
    horizontal = np.column_stack([h_lo, h_lo + 1])
    edges = np.vstack([vertical, horizontal])

    node_tags = np.full(nodes.shape[0], "interior", dtype="<U8")
    x = nodes[:, 0]
    y = nodes[:, 1]
    # priority left > right > bottom > top partitions the corner nodes
    node_tags[y == 1.0] = "top"
    node_tags[y == 0.0] = "bottom"
    node_tags[x == 1.0] = "right"
    node_tags[x == 0.0] = "left"

    edge_tags = np.full(edges.shape[0], "interior", dtype="<U8")
    mid = 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])
    is_vertical = np.arange(edges.shape[0]) < vertical.shape[0]
    edge_tags[is_vertical & (mid[:, 0] == 0.0)] = "left"
    edge_tags[is_vertical & (mid[:, 0] == 1.0)] = "right"
    edge_tags[~is_vertical & (mid[:, 1] == 0.0)] = "bottom"
    edge_tags[~is_vertical & (mid[:, 1] == 1.0)] = "top"

    return MeshLevel(
        level_index=level_index,
        h=h,
        nodes=nodes,
        elements=elements,
        edges=edges,
        node_tags=node_tags,
        edge_tags=edge_tags,
    )


def prolongation_matrix(coarse: MeshLevel, fine: MeshLevel) -> sp.csr_matrix:
    """Canonical bilinear interpolation matrix from coarse to fine nodes.

    Rows for fine nodes coincident with coarse nodes carry a single 1;
    coarse-edge midpoints carry two 1/2 weights; coarse-cell centers four
    1/4 weights (partition of unity in every row).
    """
    nc = coarse.n
    if fine.n != 2 * nc:
        raise ValueError("prolongation requires factor-2 nested refinement")

    rows, cols, vals = [], [], []
    for jf in range(2 * nc + 1):
        jc, j_odd = divmod(jf, 2)
        for i_f in range(2 * nc + 1):
            ic, i_odd = divmod(i_f, 2)
            r = jf * (2 * nc + 1) + i_f
            if not i_odd and not j_odd:
                stencil = [(ic, jc, 1.0)]
            elif i_odd and not j_odd:
                stencil = [(ic, jc, 0.5), (ic + 1, jc, 0.5)]
            elif not i_odd and j_odd:
                stencil = [(ic, jc, 0.5), (ic, jc + 1, 0.5)]
            else:
                stencil = [
                    (ic, jc, 0.25), (ic + 1, jc, 0.25),
                    (ic, jc + 1, 0.25), (ic + 1, jc + 1, 0.25),
                ]
            for ci, cj, w in stencil:
                rows.append(r)
                cols.append(cj * (nc + 1) + ci)
                vals.append(w)

    return sp.csr_matrix(
        (vals, (rows, cols)), shape=(fine.n_nodes, coarse.n_nodes)
    )


def build_hierarchy(h0: float, n_levels: int) -> Hierarchy:
    """Build nested meshes with h = h0 / 2^level for level = 0 .. n_levels."""
    n0 = _divisions(h0)
    if n_levels < 0:
        raise ValueError("finest level index must be >= 0")
    levels = [build_mesh(1.0 / (n0 * 2**k), level_index=k) for k in range(n_levels + 1)]
    transfers = [
        TransferOperator(
            p=prolongation_matrix(levels[k], levels[k + 1]),
            coarse_level=k,
            fine_level=k + 1,
        )
        for k in range(n_levels)
    ]
    return Hierarchy(levels=levels, transfers=transfers)


def prolongation(hier: Hierarchy, level: int) -> TransferOperator:
    """Transfer operator from ``level`` to ``level + 1``."""
    if not 0 <= level < hier.finest:
        raise ValueError(
            f"no transfer from level {level}: hierarchy has finest level {hier.finest}"
        )
    return hier.transfers[level]


def restriction_apply(
    p: sp.spmatrix,
    m_coarse: sp.spmatrix,
    m_fine: sp.spmatrix,
    v_fine: np.ndarray,
    tol: float = 1e-12,
) -> np.ndarray:
    """Mass-weighted restriction of a fine nodal vector to the coarse level.

    Computes M_c^{-1} P^T M_f v via one sparse SPD solve; the restriction is
    never materialized as a dense matrix.  Together with the Galerkin mass
    identity P^T M_f P = M_c this satisfies restriction(P x) = x exactly.
    """
    v_fine = np.asarray(v_fine, dtype=float)
    if v_fine.shape[0] != p.shape[0]:
        raise ValueError(
            f"fine vector length {v_fine.shape[0]} does not match P rows {p.shape[0]}"
        )
    rhs = p.T @ (m_fine @ v_fine)
    x, _report = spd_solve(m_coarse, rhs, tol=tol)
    return x


def write_mesh_csv(mesh: MeshLevel, path) -> None:
    """Debug export: one row per node with its boundary tag."""
    with open(path, "w") as fh:
        fh.write("node_id,x,y,boundary_tag\n")
        for k, ((x, y), tag) in enumerate(zip(mesh.nodes, mesh.node_tags)):
            fh.write(f"{k},{x:.17g},{y:.17g},{tag}\n")
