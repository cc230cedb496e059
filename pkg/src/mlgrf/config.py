"""Run configuration with benchmark defaults, flat key = value files, and
the provenance hash stamped into every output.

The defaults reproduce the benchmark setup exactly: unit square, three
levels with h = 0.1, 0.05, 0.025, Matern correlation length 0.3 with
marginal variance 0.1, observation noise variance 0.01, 50 coarse modes,
five chains of 10000 finest-level samples, and target tolerance 0.1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields

SAMPLERS = ("kl", "spde")


@dataclass
class RunConfig:
    h0: float = 0.1
    levels: int = 2                    # finest level index
    nu: float = 1.0
    correlation_length: float = 0.3
    sigma2: float = 0.1
    sigma_eta2: float = 0.01
    coarsest_sampler: str = "kl"
    kl_modes: int = 50
    beta: tuple = (0.2,)               # pCN step size, broadcast per level
    subchain: tuple = (1,)             # coarse steps per fine proposal, per level
    n_chains: int = 5
    n_samples: int = 10000
    burnin_fraction: float = 0.1
    epsilon: float = 0.1
    seed: int = 2024
    output_dir: str = "runs/benchmark"
    observations_file: str = ""        # empty: <output_dir>/observations.json
    n_workers: int = 0                 # 0: min(n_chains, cpu count)

    def __post_init__(self):
        if isinstance(self.beta, (int, float)):
            self.beta = (float(self.beta),)
        else:
            self.beta = tuple(float(b) for b in self.beta)
        if isinstance(self.subchain, int):
            self.subchain = (self.subchain,)
        else:
            self.subchain = tuple(int(s) for s in self.subchain)

    # -- derived quantities ----------------------------------------------

    @property
    def kappa(self) -> float:
        return 1.0 / self.correlation_length

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def sigma_eta(self) -> float:
        return math.sqrt(self.sigma_eta2)

    def betas(self) -> list[float]:
        """Per-level pCN step sizes (scalar configs broadcast)."""
        return _broadcast(self.beta, self.levels + 1, "beta")

    def subchains(self) -> list[int]:
        """Coarse steps at level k per proposal at k+1, for k = 0..levels-1."""
        return _broadcast(self.subchain, max(self.levels, 1), "subchain")

    def observations_path(self) -> str:
        return self.observations_file or f"{self.output_dir}/observations.json"

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        n0 = round(1.0 / self.h0)
        if n0 < 1 or abs(n0 * self.h0 - 1.0) > 1e-9:
            raise ValueError(f"h0={self.h0} does not divide the unit interval")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.nu != 1.0:
            raise ValueError("only nu = 1 is supported (integer operator order in 2-D)")
        if self.correlation_length <= 0 or self.sigma2 <= 0 or self.sigma_eta2 <= 0:
            raise ValueError("correlation_length, sigma2, sigma_eta2 must be positive")
        if self.coarsest_sampler not in SAMPLERS:
            raise ValueError(f"coarsest_sampler must be one of {SAMPLERS}")
        n_coarse_nodes = (n0 + 1) ** 2
        if self.coarsest_sampler == "kl" and not 1 <= self.kl_modes <= n_coarse_nodes:
            raise ValueError(
                f"kl_modes={self.kl_modes} must lie in [1, {n_coarse_nodes}]"
            )
        for b in self.beta:
            if not 0.0 < b <= 1.0:
                raise ValueError(f"beta entries must lie in (0, 1], got {b}")
        for s in self.subchain:
            if s < 1:
                raise ValueError("subchain lengths must be >= 1")
        if self.n_chains < 1 or self.n_samples < 0:
            raise ValueError("n_chains must be >= 1 and n_samples >= 0")
        if not 0.0 <= self.burnin_fraction < 1.0:
            raise ValueError("burnin_fraction must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
            kwargs[key] = _parse_value(key, value, known[key].type)
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _broadcast(values: tuple, n: int, name: str) -> list:
    if len(values) == 1:
        return [values[0]] * n
    if len(values) != n:
        raise ValueError(f"{name} needs 1 or {n} entries, got {len(values)}")
    return list(values)


def _parse_value(key: str, value: str, ftype: str):
    if key in ("beta", "subchain"):
        parts = [p for p in value.split(",") if p.strip()]
        conv = float if key == "beta" else int
        return tuple(conv(p) for p in parts)
    if "int" in str(ftype):
        return int(value)
    if "float" in str(ftype):
        return float(value)
    return value
