"""Chain post-processing: autocorrelation, integrated autocorrelation time,
telescoping posterior-mean estimates, the per-level cost model, and the
optimal sample allocation for a target tolerance.

The ACF estimator divides the lagged sum by (N - lag) and normalizes with
the biased sample variance of the whole series.  This is the convention the
rest of the module is calibrated against; it differs slightly from some
library estimators (which divide by N), so cross-library comparisons should
expect small discrepancies at large lags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def acf(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation rho(0..max_lag); rho(0) = 1."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag={max_lag} must satisfy 0 <= max_lag < {n}")
    d = x - x.mean()
    ss = float(d @ d)  # n * biased variance
    if ss == 0.0:
        raise ValueError("zero-variance series: autocorrelation undefined")
    rho = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        rho[lag] = (d[: n - lag] @ d[lag:]) * n / ((n - lag) * ss)
    return rho


def iact(series: np.ndarray, window_factor: float = 5.0) -> float:
    """Integrated autocorrelation time tau = 1 + 2 sum rho(lag).

    The summation window is the smallest M with M >= window_factor * tau(M)
    (self-consistent truncation), capped at N/10; tau is clamped below at 1.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 100:
        raise ValueError(f"series too short for IACT estimation (n={n} < 100)")
    d = x - x.mean()
    ss = float(d @ d)
    if ss == 0.0:
        raise ValueError("zero-variance series: IACT undefined")
    cap = max(1, n // 10)
    tau = 1.0
    for lag in range(1, cap + 1):
        rho = (d[: n - lag] @ d[lag:]) * n / ((n - lag) * ss)
        tau += 2.0 * rho
        if lag >= window_factor * tau:
            break
    return max(tau, 1.0)


def _iact_or_one(series: np.ndarray) -> float:
    """IACT with a defined fallback for short or degenerate series."""
    try:
        return iact(series)
    except ValueError:
        return 1.0


def telescoping_estimate(
    level_series: list[np.ndarray],
) -> tuple[float, np.ndarray]:
    """Multilevel posterior-mean estimate with per-term standard errors.

    level_series[0] holds coarsest-level QoI samples; level_series[k] for
    k >= 1 holds the coupled difference samples.  The estimate is the sum
    of the per-level sample means; standard errors inflate the sample
    variance by the estimated IACT of each series.
    """
    if not level_series:
        raise ValueError("no level series provided")
    means = np.empty(len(level_series))
    errors = np.empty(len(level_series))
    for k, series in enumerate(level_series):
        x = np.asarray(series, dtype=float)
        if x.size == 0:
            raise ValueError(f"empty series for level {k}")
        means[k] = x.mean()
        tau = _iact_or_one(x)
        errors[k] = math.sqrt(x.var() * tau / x.size)
    return float(means.sum()), errors


def effective_cost(
    tau: float,
    cost: float,
    tau_coarse: float | None = None,
    cost_coarse: float | None = None,
) -> float:
    """Cost of one effectively independent coupled sample on a level.

    ceil(tau) * (C + ceil(tau_coarse) * C_coarse); on the coarsest level
    (no coarse partner) it reduces to ceil(tau) * C.
    """
    if cost <= 0 or tau < 1.0 - 1e-12:
        raise ValueError("costs must be positive and tau >= 1")
    if tau_coarse is None:
        return math.ceil(tau) * cost
    if cost_coarse is None or cost_coarse <= 0:
        raise ValueError("coarse cost must be positive when tau_coarse is given")
    return math.ceil(tau) * (cost + math.ceil(tau_coarse) * cost_coarse)


def optimal_samples(
    epsilon: float,
    variances: np.ndarray,
    eff_costs: np.ndarray,
) -> np.ndarray:
    """Per-level sample counts minimizing total cost at sampling error eps^2/2.

    N_k = (2/eps^2) * (sum_j sqrt(V_j C_j)) * sqrt(V_k / C_k), rounded up
    with a tiny relative guard against floating-point noise, floored at 1.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    v = np.asarray(variances, dtype=float)
    c = np.asarray(eff_costs, dtype=float)
    if v.shape != c.shape:
        raise ValueError("variances and costs must have matching shapes")
    if np.any(v < 0) or np.any(c <= 0):
        raise ValueError("variances must be >= 0 and costs > 0")
    if not np.any(v > 0):
        raise ValueError("all variances are zero: allocation undefined")
    total = float(np.sum(np.sqrt(v * c)))
    n = (2.0 / epsilon**2) * total * np.sqrt(v / c)
    n = np.ceil(n * (1.0 - 1e-12))
    return np.maximum(n, 1).astype(int)


@dataclass
class LevelStats:
    """Post-burn-in statistics of one chain at one level."""

    level: int
    n_samples: int
    mean_q: float
    var_q: float
    mean_abs_y: float
    var_y: float
    acceptance: float
    iact_q: float
    iact_y: float
    ess: float
    cost_per_sample: float


def chain_level_stats(
    level: int,
    q: np.ndarray,
    y: np.ndarray,
    accepted: np.ndarray,
    wall_time: np.ndarray,
) -> LevelStats:
    """Summarize one level of one chain (burn-in already removed)."""
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    tau_q = _iact_or_one(q)
    return LevelStats(
        level=level,
        n_samples=q.size,
        mean_q=float(q.mean()),
        var_q=float(q.var()),
        mean_abs_y=float(np.abs(y).mean()),
        var_y=float(y.var()),
        acceptance=float(np.asarray(accepted, dtype=float).mean()),
        iact_q=tau_q,
        iact_y=_iact_or_one(y),
        ess=float(q.size / tau_q),
        cost_per_sample=float(np.median(np.asarray(wall_time, dtype=float))),
    )


@dataclass
class RunSummary:
    """Cross-chain aggregate; per-chain statistics are averaged (not pooled)
    and the across-chain standard deviation is reported alongside."""

    levels: list[int]
    mean_q: list[float]
    mean_q_std: list[float]
    var_q0: float
    var_q0_std: float
    mean_abs_y: list[float]
    var_y: list[float]
    acceptance: list[float]
    iact: list[float]
    iact_y: list[float]
    ess: list[float]
    cost_per_sample: list[float]
    ml_estimate: float
    ml_estimate_std: float
    epsilon: float
    planned_n: list[int]
    predicted_total_cost: float
    chains: int
    seed: int | None
    n_samples: list[int]
    config: str | None = None
    sampler: str | None = None
    kl_modes: int | None = None
    forward_failures: int = 0
    failed_chains: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "mean_Q": self.mean_q,
            "mean_Q_std": self.mean_q_std,
            "var_Q0": self.var_q0,
            "var_Q0_std": self.var_q0_std,
            "mean_absY": self.mean_abs_y,
            "var_Y": self.var_y,
            "acceptance": self.acceptance,
            "iact": self.iact,
            "iact_Y": self.iact_y,
            "ess": self.ess,
            "cost_per_sample": self.cost_per_sample,
            "ml_estimate": self.ml_estimate,
            "ml_estimate_std": self.ml_estimate_std,
            "epsilon": self.epsilon,
            "planned_N": self.planned_n,
            "predicted_total_cost": self.predicted_total_cost,
            "chains": self.chains,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "config": self.config,
            "sampler": self.sampler,
            "kl_modes": self.kl_modes,
            "forward_failures": self.forward_failures,
            "failed_chains": self.failed_chains,
        }


def summarize(
    per_chain: list[list[LevelStats]],
    ml_estimates: list[float],
    epsilon: float,
    seed: int | None = None,
    config: str | None = None,
    sampler: str | None = None,
    kl_modes: int | None = None,
    forward_failures: int = 0,
    failed_chains: list[int] | None = None,
) -> RunSummary:
    """Aggregate per-chain level statistics into a run summary.

    The level-k variance used for the sample-allocation plan is var(Q0) on
    the coarsest level and var(Y_k) above it, matching the telescoping
    estimator whose error the plan controls.
    """
    if not per_chain:
        raise ValueError("at least one completed chain is required")
    n_levels = len(per_chain[0])
    levels = list(range(n_levels))

    def across(attr, lvl):
        return np.array([getattr(chain[lvl], attr) for chain in per_chain])

    mean_q = [float(across("mean_q", k).mean()) for k in levels]
    mean_q_std = [float(across("mean_q", k).std()) for k in levels]
    var_q0 = float(across("var_q", 0).mean())
    var_q0_std = float(across("var_q", 0).std())
    mean_abs_y = [float(across("mean_abs_y", k).mean()) for k in levels]
    var_y = [float(across("var_y", k).mean()) for k in levels]
    acceptance = [float(across("acceptance", k).mean()) for k in levels]
    iact_q = [float(across("iact_q", k).mean()) for k in levels]
    iact_yv = [float(across("iact_y", k).mean()) for k in levels]
    ess = [float(across("ess", k).mean()) for k in levels]
    cost = [float(across("cost_per_sample", k).mean()) for k in levels]
    n_samples = [int(across("n_samples", k).mean()) for k in levels]

    variances = np.array([var_q0] + var_y[1:])
    eff = np.array(
        [effective_cost(iact_q[0], cost[0])]
        + [
            effective_cost(iact_q[k], cost[k], iact_q[k - 1], cost[k - 1])
            for k in range(1, n_levels)
        ]
    )
    if np.any(variances > 0):
        planned = optimal_samples(epsilon, variances, eff)
    else:
        planned = np.ones(n_levels, dtype=int)
    predicted = float(np.dot(planned, eff))

    est = np.asarray(ml_estimates, dtype=float)
    return RunSummary(
        levels=levels,
        mean_q=mean_q,
        mean_q_std=mean_q_std,
        var_q0=var_q0,
        var_q0_std=var_q0_std,
        mean_abs_y=mean_abs_y,
        var_y=var_y,
        acceptance=acceptance,
        iact=iact_q,
        iact_y=iact_yv,
        ess=ess,
        cost_per_sample=cost,
        ml_estimate=float(est.mean()),
        ml_estimate_std=float(est.std()),
        epsilon=epsilon,
        planned_n=[int(x) for x in planned],
        predicted_total_cost=predicted,
        chains=len(per_chain),
        seed=seed,
        n_samples=n_samples,
        config=config,
        sampler=sampler,
        kl_modes=kl_modes,
        forward_failures=forward_failures,
        failed_chains=failed_chains or [],
    )
