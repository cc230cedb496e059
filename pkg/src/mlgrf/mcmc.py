"""Single-level Metropolis-Hastings and recursive multilevel
delayed-acceptance sampling over the hierarchical noise state.

The chain state is the stack of per-level noise vectors: the full coarsest
noise (or KL coefficients) at level 0 and one complement-noise vector per
finer level.  Proposals are preconditioned Crank-Nicolson moves, which
preserve the standard-normal prior so every acceptance ratio reduces to a
likelihood ratio.  A step at level k first advances the coarser levels
(the delayed-acceptance screen), composes the fine forcing from the
tentative coarse state, and accepts or rejects all levels together: on
rejection the tentative coarse moves are rolled back, which keeps each
committed fine state paired with exactly the coarse state that generated
it.  That pairing is what makes the coupled differences Y_k = Q_k - Q_{k-1}
small and their variance decay with refinement.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .darcy import (
    DarcySystem,
    ObservationSet,
    compute_qoi,
    locate_elements,
    log_likelihood,
    project_permeability,
)
from .fem import SpdeOperators
from .linalg import SolverError
from .mesh import MeshLevel, TransferOperator
from .samplers import (
    KlBasis,
    WhiteNoise,
    field_from_forcing,
    kl_forcing,
    kl_spde_decompose,
    mg_decompose,
)
from .streams import PURPOSE_CHAIN, PURPOSE_INIT, rng_stream


class ForwardModelError(RuntimeError):
    """The forward solve failed for a proposed state; treated as rejection."""


@dataclass(frozen=True)
class LevelState:
    """Committed state of one level: noise plus caches of everything derived
    from the current noise composition (recomputed on every accepted update)."""

    xi: np.ndarray
    log_likelihood: float
    q: float
    zeta: np.ndarray | None = None       # composed forcing on this level
    theta: np.ndarray | None = None      # composed field
    pressure: np.ndarray | None = None   # element pressures of the forward solve


class LevelModel:
    """Forward evaluation at one level: forcing -> field -> pressure -> likelihood."""

    def __init__(self, mesh: MeshLevel, ops: SpdeOperators, obs: ObservationSet):
        self.mesh = mesh
        self.ops = ops
        self.obs = obs
        self.system = DarcySystem(mesh)
        self.obs_elements = locate_elements(mesh, obs.points)

    def evaluate(self, xi: np.ndarray, zeta: np.ndarray) -> LevelState:
        theta = field_from_forcing(self.ops, zeta).theta
        k = project_permeability(theta, self.mesh)
        try:
            sol = self.system.solve(k)
        except SolverError as exc:
            raise ForwardModelError(str(exc)) from exc
        loglik = log_likelihood(sol.p[self.obs_elements], self.obs)
        return LevelState(
            xi=xi,
            log_likelihood=loglik,
            q=compute_qoi(sol, self.mesh),
            zeta=zeta,
            theta=theta,
            pressure=sol.p,
        )


@dataclass
class MldaProblem:
    """Immutable per-run bundle shared read-only by all chains."""

    models: list[LevelModel]
    transfers: list[TransferOperator]
    basis: KlBasis | None           # None: SPDE sampler on the coarsest level
    betas: list[float]              # pCN step size per level
    subchain: list[int]             # coarse steps at level k per step at k+1

    @property
    def n_levels(self) -> int:
        return len(self.models)

    def coarsest_dim(self) -> int:
        if self.basis is not None:
            return self.basis.m
        return self.models[0].ops.n_nodes

    def coarsest_forcing(self, xi0: np.ndarray) -> np.ndarray:
        if self.basis is not None:
            return kl_forcing(self.basis, self.models[0].ops, xi0)
        return self.models[0].ops.mass_chol @ xi0

    def rows_per_level(self, n_samples: int) -> list[int]:
        """Number of steps each level takes during n_samples fine steps."""
        top = self.n_levels - 1
        rows = [0] * self.n_levels
        rows[top] = n_samples
        for k in range(top - 1, -1, -1):
            rows[k] = rows[k + 1] * self.subchain[k]
        return rows


def pcn_propose(xi: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Preconditioned Crank-Nicolson move: sqrt(1-beta^2) xi + beta * fresh noise.

    Marginally N(0, I) whenever the input is, for any beta in (0, 1].
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"pCN step size beta must lie in (0, 1], got {beta}")
    return math.sqrt(1.0 - beta * beta) * xi + beta * rng.standard_normal(xi.shape[0])


def mh_step_level0(
    state: LevelState,
    evaluate,
    beta: float,
    rng: np.random.Generator,
) -> tuple[LevelState, bool, bool]:
    """One Metropolis-Hastings step on the coarsest level.

    ``evaluate(xi) -> LevelState`` runs the forward model; the prior and
    proposal terms cancel for pCN, leaving the likelihood ratio.  Returns
    (new state, accepted, forward_failed); a failed forward solve counts
    as a rejection.
    """
    proposal_xi = pcn_propose(state.xi, beta, rng)
    u = rng.uniform()
    try:
        proposal = evaluate(proposal_xi)
    except ForwardModelError:
        return state, False, True
    log_alpha = min(0.0, proposal.log_likelihood - state.log_likelihood)
    if u < math.exp(log_alpha):
        return proposal, True, False
    return state, False, False


class ChainRecord:
    """Per-level step records of one chain.

    Column ``y`` holds the coupled difference Q_k - Q_{k-1} evaluated at the
    committed pair of states; on the coarsest level y = q (telescoping base
    term).  Rows for coarse levels are written as their subchains run, so
    their acceptance flags reflect the per-level sampler even when a fine
    rejection later rolls the state back.
    """

    COLUMNS = ("q", "y", "accepted", "loglik", "coarse_loglik", "wall_time_s")

    def __init__(self, chain_id: int, n_levels: int):
        self.chain_id = chain_id
        self.n_levels = n_levels
        self._rows = {k: {c: [] for c in self.COLUMNS} for k in range(n_levels)}
        self.forward_failures = 0

    def append(self, level, q, y, accepted, loglik, coarse_loglik, wall_time_s):
        row = self._rows[level]
        row["q"].append(q)
        row["y"].append(y)
        row["accepted"].append(bool(accepted))
        row["loglik"].append(loglik)
        row["coarse_loglik"].append(coarse_loglik)
        row["wall_time_s"].append(wall_time_s)

    def n_rows(self, level: int) -> int:
        return len(self._rows[level]["q"])

    def column(self, level: int, name: str) -> np.ndarray:
        return np.asarray(self._rows[level][name], dtype=float)

    def burnin_count(self, level: int, burnin_fraction: float) -> int:
        return math.ceil(burnin_fraction * self.n_rows(level))

    def post_burnin(self, level: int, name: str, burnin_fraction: float) -> np.ndarray:
        return self.column(level, name)[self.burnin_count(level, burnin_fraction):]

    def write_csv(self, path, level, burnin_fraction, seed=None, config_hash=None):
        burn = self.burnin_count(level, burnin_fraction)
        rows = self._rows[level]
        with open(path, "w") as fh:
            fh.write(
                f"# seed={seed} config={config_hash} chain={self.chain_id} "
                f"level={level} burnin_rows={burn}\n"
            )
            fh.write("iter,level,Q,Y,accepted,loglik,coarse_loglik,wall_time_s,burnin_flag\n")
            for i in range(self.n_rows(level)):
                fh.write(
                    f"{i},{level},{rows['q'][i]:.17g},{rows['y'][i]:.17g},"
                    f"{int(rows['accepted'][i])},{rows['loglik'][i]:.17g},"
                    f"{rows['coarse_loglik'][i]:.17g},{rows['wall_time_s'][i]:.6e},"
                    f"{int(i < burn)}\n"
                )


class MldaChain:
    """One multilevel delayed-acceptance chain.

    Chains are independent: everything shared (models, transfers, basis) is
    immutable, and all draws come from streams keyed by this chain's id.
    """

    def __init__(
        self,
        problem: MldaProblem,
        chain_id: int,
        seed: int,
        n_samples: int = 0,
        burnin_fraction: float = 0.0,
    ):
        self.problem = problem
        self.chain_id = chain_id
        self.seed = seed
        self.record = ChainRecord(chain_id, problem.n_levels)
        self.counters = [0] * problem.n_levels
        self.states: list[LevelState] = []
        self.burnin_fraction = burnin_fraction
        rows = problem.rows_per_level(n_samples)
        self._mean_after = [math.ceil(burnin_fraction * r) for r in rows]
        self.theta_sum = [np.zeros(m.ops.n_nodes) for m in problem.models]
        self.pressure_sum = [np.zeros(m.mesh.n_elements) for m in problem.models]
        self.mean_count = [0] * problem.n_levels
        self._init_states()

    # -- state initialization ------------------------------------------------

    def _init_states(self):
        problem = self.problem
        noises = []
        for level in range(problem.n_levels):
            rng = rng_stream(self.seed, PURPOSE_INIT, self.chain_id, level)
            size = problem.coarsest_dim() if level == 0 else problem.models[level].ops.n_nodes
            noises.append(rng.standard_normal(size))
        zeta = problem.coarsest_forcing(noises[0])
        self.states.append(problem.models[0].evaluate(noises[0], zeta))
        for level in range(1, problem.n_levels):
            zeta = self._compose(level, noises[level], self.states[level - 1])
            self.states.append(problem.models[level].evaluate(noises[level], zeta))

    def _compose(self, level: int, xi: np.ndarray, coarse: LevelState) -> np.ndarray:
        problem = self.problem
        noise = WhiteNoise(level=problem.models[level].ops.level, xi=xi)
        p = problem.transfers[level - 1].p
        try:
            if level == 1 and problem.basis is not None:
                return kl_spde_decompose(
                    coarse.xi, noise, problem.basis, problem.models[1].ops, p
                )
            return mg_decompose(
                coarse.zeta, noise,
                problem.models[level - 1].ops, problem.models[level].ops, p,
            )
        except SolverError as exc:
            raise ForwardModelError(str(exc)) from exc

    # -- stepping ------------------------------------------------------------

    def mlda_step(self) -> None:
        """Advance the chain by one step on the finest level."""
        self._step(self.problem.n_levels - 1)

    def _step(self, level: int) -> float:
        """One accept/reject step at ``level``; returns inclusive wall time.

        Recorded wall time excludes the coarse subchain so the per-level
        cost model can compose costs across levels.
        """
        t_start = time.perf_counter()
        problem = self.problem
        rng = rng_stream(
            self.seed, PURPOSE_CHAIN, self.chain_id, level, self.counters[level]
        )
        self.counters[level] += 1
        child_time = 0.0

        if level == 0:
            def evaluate(xi):
                return problem.models[0].evaluate(xi, problem.coarsest_forcing(xi))

            state, accepted, failed = mh_step_level0(
                self.states[0], evaluate, problem.betas[0], rng
            )
            if failed:
                self.record.forward_failures += 1
            self.states[0] = state
            coarse_loglik = math.nan
            y = state.q  # telescoping base: Y_0 := Q_0
        else:
            saved = self.states[:level]
            coarse_loglik_current = self.states[level - 1].log_likelihood
            for _ in range(problem.subchain[level - 1]):
                child_time += self._step(level - 1)
            coarse_star = self.states[level - 1]

            proposal_xi = pcn_propose(self.states[level].xi, problem.betas[level], rng)
            u = rng.uniform()
            accepted = False
            try:
                zeta = self._compose(level, proposal_xi, coarse_star)
                proposal = problem.models[level].evaluate(proposal_xi, zeta)
                log_alpha = min(
                    0.0,
                    (proposal.log_likelihood + coarse_loglik_current)
                    - (self.states[level].log_likelihood + coarse_star.log_likelihood),
                )
                accepted = u < math.exp(log_alpha)
            except ForwardModelError:
                self.record.forward_failures += 1
            if accepted:
                # commit the multilevel state up to this level: the tentative
                # coarse states stay, the fine proposal replaces the fine state
                self.states[level] = proposal
            else:
                self.states[:level] = saved
            state = self.states[level]
            coarse_loglik = self.states[level - 1].log_likelihood
            y = state.q - self.states[level - 1].q

        inclusive = time.perf_counter() - t_start
        self.record.append(
            level,
            q=state.q,
            y=y,
            accepted=accepted,
            loglik=state.log_likelihood,
            coarse_loglik=coarse_loglik,
            wall_time_s=inclusive - child_time,
        )
        if self.record.n_rows(level) > self._mean_after[level]:
            self.theta_sum[level] += state.theta
            self.pressure_sum[level] += state.pressure
            self.mean_count[level] += 1
        return inclusive

    def mean_fields(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Post-burn-in mean field and mean pressure per level."""
        thetas, pressures = [], []
        for level in range(self.problem.n_levels):
            c = max(self.mean_count[level], 1)
            thetas.append(self.theta_sum[level] / c)
            pressures.append(self.pressure_sum[level] / c)
        return thetas, pressures


def run_chain(
    problem: MldaProblem,
    chain_id: int,
    n_samples: int,
    seed: int,
    burnin_fraction: float = 0.1,
) -> MldaChain:
    """Run one chain for n_samples finest-level steps.

    Deterministic given (seed, chain_id): the record is identical across
    reruns except for wall-clock columns.
    """
    chain = MldaChain(
        problem, chain_id, seed,
        n_samples=n_samples, burnin_fraction=burnin_fraction,
    )
    for _ in range(n_samples):
        chain.mlda_step()
    return chain
