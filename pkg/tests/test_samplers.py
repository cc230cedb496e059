import numpy as np
import pytest

from mlgrf import (
    build_hierarchy,
    assemble_spde_operator,
    compose_forcings,
    compute_kl_basis,
    kl_sample,
    kl_spde_decompose,
    mg_decompose,
    multilevel_field,
    sample_white_noise,
    spde_sample,
)
from mlgrf.samplers import WhiteNoise, kl_forcing, write_field_csv
from mlgrf.streams import PURPOSE_CHAIN, rng_stream

from conftest import BENCH_KAPPA, BENCH_SIGMA


def dense_restriction(tiny_ops, p):
    mc = tiny_ops[0].mass.toarray()
    mf = tiny_ops[1].mass.toarray()
    return np.linalg.solve(mc, p.toarray().T @ mf)


class TestWhiteNoise:
    def test_stream_identity_is_deterministic(self):
        a = sample_white_noise(1, rng_stream(9, PURPOSE_CHAIN, 2, 1, 5), 64)
        b = sample_white_noise(1, rng_stream(9, PURPOSE_CHAIN, 2, 1, 5), 64)
        assert np.array_equal(a.xi, b.xi)
        c = sample_white_noise(1, rng_stream(9, PURPOSE_CHAIN, 2, 1, 6), 64)
        assert not np.array_equal(a.xi, c.xi)

    def test_moments(self):
        n = 100_000
        xi = sample_white_noise(0, rng_stream(1, PURPOSE_CHAIN), n).xi
        assert abs(xi.mean()) <= 3.0 / np.sqrt(n)
        assert abs(xi.var() - 1.0) <= 3.0 * np.sqrt(2.0 / n)


class TestSpdeSample:
    def test_zero_noise_gives_zero_field(self, coarse_bench_ops):
        noise = WhiteNoise(0, np.zeros(coarse_bench_ops.n_nodes))
        assert np.array_equal(spde_sample(coarse_bench_ops, noise).theta, 0.0 * noise.xi)

    def test_linearity(self, coarse_bench_ops):
        rng = np.random.default_rng(3)
        xi = rng.standard_normal(coarse_bench_ops.n_nodes)
        one = spde_sample(coarse_bench_ops, WhiteNoise(0, xi)).theta
        two = spde_sample(coarse_bench_ops, WhiteNoise(0, 2.0 * xi)).theta
        assert np.abs(two - 2.0 * one).max() <= 1e-12 * np.abs(one).max()

    def test_length_mismatch_rejected(self, coarse_bench_ops):
        with pytest.raises(ValueError):
            spde_sample(coarse_bench_ops, WhiteNoise(0, np.zeros(7)))

    def test_center_node_variance(self, coarse_bench_ops):
        # MC variance vs both the nominal value and the exact discrete variance
        ops = coarse_bench_ops
        center = (ops.n_nodes - 1) // 2  # node (0.5, 0.5) by row-major ordering
        n_draws = 20_000
        rng = np.random.default_rng(42)
        zeta = ops.mass_chol @ rng.standard_normal((ops.n_nodes, n_draws))
        theta = ops.sigma * ops.matern_scale * ops.spde_solve(zeta)
        mc_var = theta[center].var()

        e = np.zeros(ops.n_nodes)
        e[center] = 1.0
        col = ops.spde_solve(e)
        exact = ops.sigma**2 * ops.matern_scale**2 * (col @ (ops.mass @ col))
        se = exact * np.sqrt(2.0 / n_draws)
        assert abs(mc_var - exact) <= 5.0 * se
        assert abs(mc_var - 0.1) <= 0.15 * 0.1


class TestKlBasis:
    def test_mass_orthonormality(self, coarse_bench_ops):
        basis = compute_kl_basis(coarse_bench_ops, 50)
        m = coarse_bench_ops.mass.toarray()
        assert np.abs(basis.phi.T @ m @ basis.phi - np.eye(50)).max() <= 1e-10
        assert np.abs(basis.psi.T @ m @ basis.psi - np.eye(50)).max() <= 1e-10

    def test_eigen_residual(self, coarse_bench_ops):
        ops = coarse_bench_ops
        basis = compute_kl_basis(ops, 30)
        a = ops.spde_matrix.toarray()
        mm = ops.mass.toarray()
        cov = ops.matern_scale**2 * np.linalg.solve(a, np.linalg.solve(a, mm).T)
        resid = cov @ (mm @ basis.phi) - basis.phi * basis.lambdas
        norms = np.linalg.norm(basis.phi, axis=0) * basis.lambdas[0]
        assert (np.linalg.norm(resid, axis=0) / norms).max() <= 1e-8

    def test_eigenvalues_sorted_nonnegative(self, coarse_bench_ops):
        basis = compute_kl_basis(coarse_bench_ops, 40)
        assert np.all(np.diff(basis.lambdas) <= 0)
        assert np.all(basis.lambdas >= 0)

    def test_complete_basis_reconstructs_covariance(self, coarse_bench_ops):
        ops = coarse_bench_ops
        basis = compute_kl_basis(ops, ops.n_nodes)
        a = ops.spde_matrix.toarray()
        mm = ops.mass.toarray()
        cov = ops.matern_scale**2 * np.linalg.solve(a, np.linalg.solve(a, mm).T)
        rebuilt = (basis.phi * basis.lambdas) @ basis.phi.T
        assert np.abs(rebuilt - cov).max() <= 1e-8

    def test_truncation_bounds_rejected(self, coarse_bench_ops):
        with pytest.raises(ValueError):
            compute_kl_basis(coarse_bench_ops, 0)
        with pytest.raises(ValueError):
            compute_kl_basis(coarse_bench_ops, coarse_bench_ops.n_nodes + 1)


class TestKlSample:
    def test_single_mode(self, coarse_bench_ops):
        basis = compute_kl_basis(coarse_bench_ops, 5)
        e1 = np.zeros(5)
        e1[0] = 1.0
        field = kl_sample(basis, e1)
        expected = basis.sigma * np.sqrt(basis.lambdas[0]) * basis.phi[:, 0]
        assert np.abs(field.theta - expected).max() <= 1e-14

    def test_zero_coefficients(self, coarse_bench_ops):
        basis = compute_kl_basis(coarse_bench_ops, 5)
        assert np.abs(kl_sample(basis, np.zeros(5)).theta).max() == 0.0

    def test_matches_spde_path(self, coarse_bench_ops):
        # the two samplers agree sample-by-sample through zeta = M Psi xihat
        ops = coarse_bench_ops
        basis = compute_kl_basis(ops, 20)
        rng = np.random.default_rng(8)
        xi_hat = rng.standard_normal(20)
        direct = kl_sample(basis, xi_hat).theta
        zeta = kl_forcing(basis, ops, xi_hat)
        via_spde = ops.sigma * ops.matern_scale * ops.spde_solve(zeta)
        assert np.abs(direct - via_spde).max() <= 1e-10

    def test_length_mismatch_rejected(self, coarse_bench_ops):
        basis = compute_kl_basis(coarse_bench_ops, 5)
        with pytest.raises(ValueError):
            kl_sample(basis, np.zeros(6))


class TestMgDecompose:
    def test_zero_fine_noise_keeps_coarse_lift(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        rng = np.random.default_rng(4)
        zeta_c = ops_c.mass_chol @ rng.standard_normal(ops_c.n_nodes)
        zeta = mg_decompose(zeta_c, WhiteNoise(1, np.zeros(ops_f.n_nodes)), ops_c, ops_f, p)
        expected = ops_f.mass @ (p @ ops_c.mass_solve(zeta_c))
        assert np.abs(zeta - expected).max() <= 1e-13

    def test_coarse_recovery(self, tiny_ops, tiny_hier):
        # restricting the composed fine noise returns the coarse noise exactly
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        rng = np.random.default_rng(5)
        zeta_c = ops_c.mass_chol @ rng.standard_normal(ops_c.n_nodes)
        noise = WhiteNoise(1, rng.standard_normal(ops_f.n_nodes))
        zeta = mg_decompose(zeta_c, noise, ops_c, ops_f, p)
        restrict = dense_restriction(tiny_ops, p)
        recovered = restrict @ ops_f.mass_solve(zeta)
        assert np.abs(recovered - ops_c.mass_solve(zeta_c)).max() <= 1e-10

    def test_covariance_exact_at_matrix_level(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        pd = p.toarray()
        restrict = dense_restriction(tiny_ops, p)
        fc = ops_c.mass_chol.toarray()
        ff = ops_f.mass_chol.toarray()
        mf = ops_f.mass.toarray()
        n_f = ops_f.n_nodes
        t = np.hstack([restrict.T @ fc, (np.eye(n_f) - restrict.T @ pd.T) @ ff])
        m_inv = np.linalg.inv(mf)
        assert np.abs(m_inv @ t @ t.T @ m_inv - m_inv).max() <= 1e-10

    def test_level_mismatch_rejected(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        with pytest.raises(ValueError):
            mg_decompose(np.zeros(ops_c.n_nodes), WhiteNoise(0, np.zeros(ops_f.n_nodes)),
                         ops_c, ops_f, tiny_hier.transfers[0].p)


class TestKlSpdeDecompose:
    def test_coefficient_recovery(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        basis = compute_kl_basis(ops_c, 3)
        rng = np.random.default_rng(6)
        xi_hat = rng.standard_normal(3)
        noise = WhiteNoise(1, rng.standard_normal(ops_f.n_nodes))
        zeta = kl_spde_decompose(xi_hat, noise, basis, ops_f, p)
        restrict = dense_restriction(tiny_ops, p)
        coeff = basis.psi.T @ (ops_c.mass.toarray() @ (restrict @ ops_f.mass_solve(zeta)))
        assert np.abs(coeff - xi_hat).max() <= 1e-10

    @pytest.mark.parametrize("m", [1, 3, 9])
    def test_covariance_exact_for_any_truncation(self, tiny_ops, tiny_hier, m):
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p.toarray()
        basis = compute_kl_basis(ops_c, m)
        ff = ops_f.mass_chol.toarray()
        mf = ops_f.mass.toarray()
        n_f = ops_f.n_nodes
        coarse_map = mf @ p @ basis.psi
        compl = (np.eye(n_f) - mf @ p @ basis.psi @ basis.psi.T @ p.T) @ ff
        t = np.hstack([coarse_map, compl])
        m_inv = np.linalg.inv(mf)
        assert np.abs(m_inv @ t @ t.T @ m_inv - m_inv).max() <= 1e-10

    def test_complete_basis_matches_multigrid_law(self, tiny_ops, tiny_hier):
        # same covariance map as the multigrid decomposition, not same samples
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        pd = p.toarray()
        basis = compute_kl_basis(ops_c, ops_c.n_nodes)
        ff = ops_f.mass_chol.toarray()
        fc = ops_c.mass_chol.toarray()
        mf = ops_f.mass.toarray()
        n_f = ops_f.n_nodes
        restrict = dense_restriction(tiny_ops, p)
        t_kl = np.hstack([
            mf @ pd @ basis.psi,
            (np.eye(n_f) - mf @ pd @ basis.psi @ basis.psi.T @ pd.T) @ ff,
        ])
        t_mg = np.hstack([restrict.T @ fc, (np.eye(n_f) - restrict.T @ pd.T) @ ff])
        assert np.abs(t_kl @ t_kl.T - t_mg @ t_mg.T).max() <= 1e-10

    def test_dimension_mismatch_rejected(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        basis = compute_kl_basis(ops_c, 3)
        with pytest.raises(ValueError):
            kl_spde_decompose(np.zeros(4), WhiteNoise(1, np.zeros(ops_f.n_nodes)),
                              basis, ops_f, tiny_hier.transfers[0].p)


class TestProjectorIdempotency:
    def test_multigrid_projector(self, tiny_ops, tiny_hier):
        p = tiny_hier.transfers[0].p.toarray()
        restrict = dense_restriction(tiny_ops, tiny_hier.transfers[0].p)
        proj = p @ restrict
        assert np.abs(proj @ proj - proj).max() <= 1e-10

    @pytest.mark.parametrize("m", [1, 3, 9])
    def test_mode_projector(self, tiny_ops, tiny_hier, m):
        ops_c, _ = tiny_ops
        p = tiny_hier.transfers[0].p.toarray()
        restrict = dense_restriction(tiny_ops, tiny_hier.transfers[0].p)
        basis = compute_kl_basis(ops_c, m)
        q_hat = basis.psi @ basis.psi.T @ ops_c.mass.toarray()
        proj = p @ q_hat @ restrict
        assert np.abs(proj @ proj - proj).max() <= 1e-10

    def test_spectral_equivalence_is_exact_equality(self, tiny_ops, tiny_hier):
        # nested consistent mass: coarse and lifted norms agree exactly
        ops_c, ops_f = tiny_ops
        p = tiny_hier.transfers[0].p
        rng = np.random.default_rng(12)
        for _ in range(5):
            eta = rng.standard_normal(ops_c.n_nodes)
            coarse_norm = eta @ (ops_c.mass @ eta)
            lifted = p @ eta
            fine_norm = lifted @ (ops_f.mass @ lifted)
            assert abs(coarse_norm - fine_norm) <= 1e-10


class TestMultilevelField:
    def test_single_level_equals_spde_sample(self, tiny_ops, tiny_hier):
        rng = np.random.default_rng(10)
        xi = rng.standard_normal(tiny_ops[0].n_nodes)
        a = multilevel_field([xi], tiny_ops[:1], [], basis=None).theta
        b = spde_sample(tiny_ops[0], WhiteNoise(0, xi)).theta
        assert np.array_equal(a, b)

    def test_single_level_kl_path(self, tiny_ops):
        basis = compute_kl_basis(tiny_ops[0], 4)
        rng = np.random.default_rng(11)
        xi_hat = rng.standard_normal(4)
        a = multilevel_field([xi_hat], tiny_ops[:1], [], basis=basis).theta
        b = kl_sample(basis, xi_hat).theta
        assert np.abs(a - b).max() <= 1e-12

    def test_zero_complement_is_pure_coarse_lift(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        rng = np.random.default_rng(13)
        xi0 = rng.standard_normal(ops_c.n_nodes)
        field = multilevel_field(
            [xi0, np.zeros(ops_f.n_nodes)], tiny_ops, tiny_hier.transfers
        ).theta
        zeta_c = ops_c.mass_chol @ xi0
        lift = ops_f.mass @ (tiny_hier.transfers[0].p @ ops_c.mass_solve(zeta_c))
        expected = ops_f.sigma * ops_f.matern_scale * ops_f.spde_solve(lift)
        assert np.abs(field - expected).max() <= 1e-12

    def test_coarse_plus_complement_is_exact_sum(self, tiny_ops, tiny_hier):
        ops_c, ops_f = tiny_ops
        rng = np.random.default_rng(14)
        xi0 = rng.standard_normal(ops_c.n_nodes)
        xi1 = rng.standard_normal(ops_f.n_nodes)
        full = multilevel_field([xi0, xi1], tiny_ops, tiny_hier.transfers).theta
        coarse_only = multilevel_field(
            [xi0, np.zeros_like(xi1)], tiny_ops, tiny_hier.transfers
        ).theta
        compl_only = multilevel_field(
            [np.zeros_like(xi0), xi1], tiny_ops, tiny_hier.transfers
        ).theta
        assert np.abs(full - coarse_only - compl_only).max() <= 1e-12

    def test_three_level_composition_chains_decompositions(self):
        hier = build_hierarchy(0.5, 2)
        ops = [assemble_spde_operator(l, kappa=BENCH_KAPPA, sigma=BENCH_SIGMA)
               for l in hier.levels]
        rng = np.random.default_rng(15)
        noises = [rng.standard_normal(o.n_nodes) for o in ops]
        zetas = compose_forcings(noises, ops, hier.transfers)
        assert len(zetas) == 3
        step = mg_decompose(zetas[1], WhiteNoise(2, noises[2]), ops[1], ops[2],
                            hier.transfers[1].p)
        assert np.array_equal(zetas[2], step)

    def test_monte_carlo_covariance_matches_single_level(self):
        # 5 interior node pairs: multilevel law vs direct fine-level sampling
        hier = build_hierarchy(0.5, 1)
        ops = [assemble_spde_operator(l, kappa=BENCH_KAPPA, sigma=BENCH_SIGMA)
               for l in hier.levels]
        fine = ops[1]
        n_draws = 20_000
        rng = np.random.default_rng(1234)

        zeta_c = ops[0].mass_chol @ rng.standard_normal((ops[0].n_nodes, n_draws))
        noise_f = WhiteNoise(1, rng.standard_normal((fine.n_nodes, n_draws)))
        zeta_ml = mg_decompose(zeta_c, noise_f, ops[0], fine, hier.transfers[0].p)
        theta_ml = fine.sigma * fine.matern_scale * fine.spde_solve(zeta_ml)

        zeta_sl = fine.mass_chol @ rng.standard_normal((fine.n_nodes, n_draws))
        theta_sl = fine.sigma * fine.matern_scale * fine.spde_solve(zeta_sl)

        interior = np.flatnonzero(hier.levels[1].node_tags == "interior")
        pairs = [(interior[0], interior[1]), (interior[2], interior[5]),
                 (interior[4], interior[4]), (interior[0], interior[8]),
                 (interior[3], interior[7])]
        for i, j in pairs:
            cov_ml = np.mean(theta_ml[i] * theta_ml[j]) - theta_ml[i].mean() * theta_ml[j].mean()
            cov_sl = np.mean(theta_sl[i] * theta_sl[j]) - theta_sl[i].mean() * theta_sl[j].mean()
            var_i = theta_sl[i].var()
            var_j = theta_sl[j].var()
            se = np.sqrt((var_i * var_j + cov_sl**2) / n_draws)
            assert abs(cov_ml - cov_sl) <= 5.0 * np.sqrt(2.0) * se


def test_field_csv_format(tmp_path, tiny_hier):
    mesh = tiny_hier.levels[0]
    theta = np.arange(mesh.n_nodes, dtype=float)
    path = tmp_path / "field.csv"
    write_field_csv(path, mesh, theta, seed=7, config_hash="abc")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# seed=7 config=abc level=0 h=0.5")
    assert lines[1] == "x,y,theta"
    assert len(lines) == mesh.n_nodes + 2
