import numpy as np
import pytest
import scipy.sparse as sp

from mlgrf import (
    assemble_mass,
    assemble_spde_operator,
    assemble_stiffness,
    build_mesh,
    mass_factor,
    matern_normalization,
)
from mlgrf.fem import write_matrix_coo
from mlgrf.linalg import SolverError

# analytic single-element matrices for bilinear shape functions on a square
ELEMENT_MASS = np.array(
    [[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]], dtype=float
) / 36.0
ELEMENT_STIFFNESS = np.array(
    [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]], dtype=float
) / 6.0


class TestMass:
    def test_single_element_matches_analytic(self):
        mesh = build_mesh(1.0)  # one unit square element
        local = mesh.elements[0]  # global matrix in node order; compare CCW-local
        m = assemble_mass(mesh).toarray()[np.ix_(local, local)]
        assert np.abs(m - ELEMENT_MASS).max() <= 1e-15

    @pytest.mark.parametrize("h", [0.5, 0.1])
    def test_entries_sum_to_domain_area(self, h):
        m = assemble_mass(build_mesh(h))
        ones = np.ones(m.shape[0])
        assert abs(ones @ m @ ones - 1.0) <= 1e-12

    def test_exactly_symmetric(self):
        m = assemble_mass(build_mesh(0.2))
        assert np.abs((m - m.T)).max() == 0.0

    def test_positive_definite(self):
        m = assemble_mass(build_mesh(0.25)).toarray()
        assert np.linalg.eigvalsh(m).min() > 0


class TestStiffness:
    def test_single_element_matches_analytic(self):
        # entries are h-independent in 2-D: diagonal 2/3, opposite corner -1/3
        mesh = build_mesh(1.0)
        local = mesh.elements[0]
        s = assemble_stiffness(mesh).toarray()[np.ix_(local, local)]
        assert np.abs(s - ELEMENT_STIFFNESS).max() <= 1e-15
        assert abs(s[0, 0] - 2.0 / 3.0) <= 1e-15
        assert abs(s[0, 2] + 1.0 / 3.0) <= 1e-15  # opposite corner

    def test_constants_in_nullspace(self):
        s = assemble_stiffness(build_mesh(0.1))
        assert np.abs(s @ np.ones(s.shape[0])).max() <= 1e-12

    def test_positive_semidefinite(self):
        s = assemble_stiffness(build_mesh(0.25))
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = rng.standard_normal(s.shape[0])
            assert x @ (s @ x) >= -1e-12


class TestSpdeOperator:
    def test_normalization_closed_form(self):
        # d=2, nu=1: Gamma(2) = Gamma(1) = 1, so the scale is sqrt(4 pi) kappa
        kappa = 10.0 / 3.0
        g = matern_normalization(kappa)
        assert abs(g - np.sqrt(4.0 * np.pi) * kappa) <= 1e-12 * g
        assert abs(g - 11.816359006036773) <= 1e-9

    def test_operator_is_spd_on_tiny_mesh(self):
        ops = assemble_spde_operator(build_mesh(0.5), kappa=10.0 / 3.0)
        a = ops.spde_matrix.toarray()
        assert np.abs(a - a.T).max() == 0.0
        assert np.linalg.eigvalsh(a).min() > 0

    def test_matrix_composition(self):
        kappa = 2.0
        ops = assemble_spde_operator(build_mesh(0.25), kappa=kappa)
        expected = ops.stiffness + kappa**2 * ops.mass
        assert np.abs((ops.spde_matrix - expected)).max() == 0.0

    def test_invalid_parameters_rejected(self):
        mesh = build_mesh(0.5)
        with pytest.raises(ValueError):
            assemble_spde_operator(mesh, kappa=0.0)
        with pytest.raises(ValueError):
            assemble_spde_operator(mesh, kappa=-1.0)
        with pytest.raises(ValueError):
            assemble_spde_operator(mesh, kappa=1.0, nu=0.5)  # fractional order

    def test_solver_caches(self):
        ops = assemble_spde_operator(build_mesh(0.5), kappa=3.0)
        rng = np.random.default_rng(0)
        b = rng.standard_normal(ops.n_nodes)
        x = ops.spde_solve(b)
        assert np.abs(ops.spde_matrix @ x - b).max() <= 1e-10
        y = ops.mass_solve(b)
        assert np.abs(ops.mass @ y - b).max() <= 1e-10


class TestMassFactor:
    def test_scalar(self):
        f = mass_factor(sp.csc_matrix([[9.0]]))
        assert np.allclose(f.toarray(), [[3.0]])

    def test_residual_bound_benchmark_mesh(self):
        m = assemble_mass(build_mesh(0.1))
        f = mass_factor(m)
        assert np.abs((f @ f.T - m)).max() <= 1e-12 * np.abs(m).max()

    def test_non_spd_rejected(self):
        with pytest.raises(SolverError):
            mass_factor(sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))

    def test_monte_carlo_covariance(self):
        # Cov(F xi) must reproduce M entrywise within 5 standard errors
        m = assemble_mass(build_mesh(0.5))
        f = mass_factor(m)
        rng = np.random.default_rng(314)
        n_draws = 20_000
        samples = f @ rng.standard_normal((m.shape[0], n_draws))
        emp = samples @ samples.T / n_draws
        md = m.toarray()
        se = np.sqrt((np.outer(np.diag(md), np.diag(md)) + md**2) / n_draws)
        assert np.all(np.abs(emp - md) <= 5.0 * se)


def test_matrix_coo_dump(tmp_path):
    m = assemble_mass(build_mesh(0.5))
    path = tmp_path / "mass.txt"
    write_matrix_coo(m, path)
    i, j, v = np.loadtxt(path).T
    rebuilt = sp.coo_matrix((v, (i.astype(int), j.astype(int))), shape=m.shape)
    assert np.abs((rebuilt - m)).max() <= 1e-15
