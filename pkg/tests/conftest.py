import numpy as np
import pytest

from mlgrf import build_hierarchy, assemble_spde_operator
from mlgrf.config import RunConfig
from mlgrf import runner

BENCH_KAPPA = 1.0 / 0.3
BENCH_SIGMA = np.sqrt(0.1)


@pytest.fixture(scope="session")
def tiny_hier():
    """Two-level hierarchy on h0=0.5: small enough for dense identity checks."""
    return build_hierarchy(0.5, 1)


@pytest.fixture(scope="session")
def tiny_ops(tiny_hier):
    return [
        assemble_spde_operator(level, kappa=BENCH_KAPPA, sigma=BENCH_SIGMA)
        for level in tiny_hier.levels
    ]


@pytest.fixture(scope="session")
def coarse_bench_ops():
    """Benchmark coarsest level: h=0.1, correlation length 0.3, variance 0.1."""
    hier = build_hierarchy(0.1, 0)
    return assemble_spde_operator(hier.levels[0], kappa=BENCH_KAPPA, sigma=BENCH_SIGMA)


@pytest.fixture(scope="session")
def small_problem(tmp_path_factory):
    """Cheap two-level inference problem (h0=0.5) with synthetic observations."""
    out = tmp_path_factory.mktemp("small_problem")
    config = RunConfig(
        h0=0.5, levels=1, coarsest_sampler="spde", n_chains=1, n_samples=0,
        seed=101, output_dir=str(out),
    )
    obs = runner.generate_observations(config)
    return config, runner.build_problem(config, obs)
