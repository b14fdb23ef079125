"""Run configuration: a flat JSON object whose keys are checked against a fixed set.

Example::

    {
      "counts": "data/counts.csv",
      "coords": "data/coords.csv",
      "out": "fit",
      "d": 1.0,
      "iterations": 10000,
      "burn_in": 5000,
      "seed": 7
    }

Every key is optional except ``counts`` and ``coords`` (for commands that fit).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .mfm import MfmConfig
from .sampler import Hyperparams, McmcConfig
from .simulation import PATTERNS, SimScenario


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # inputs and outputs
    counts: str | None = None
    counts_format: str | None = None     # "dense-csv" or "sparse-mtx"; inferred from the suffix if omitted
    spots: str | None = None             # sidecar id files for sparse-mtx input
    genes: str | None = None
    coords: str | None = None
    out: str = "bnpspace_out"
    # preprocessing
    qc: bool = False
    min_spot_total: int = 100
    max_gene_zero_prop: float = 0.9
    min_gene_max: int = 10
    gene_rule: str = "and"
    neighbor_threshold: float | None = None   # None -> 1.2 x median nearest-neighbor distance
    # model
    alpha_mu: float = 1.0
    beta_mu: float = 1.0
    alpha_pi: float = 1.0
    beta_pi: float = 1.0
    alpha_omega: float = 0.1
    beta_omega: float = 1.9
    rho: float = 0.5
    alpha0: float = 1.0
    lam: float = 1.0
    d: float = 1.0
    # sampler
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    record_r: bool = True
    gamma_steps: int | None = None
    warmup: int = 0
    init_gamma: str = "all"
    init_z: str = "kmeans"
    k_init: int = 5
    block: int = 250
    threads: int = 1
    # summaries
    selection: str = "median"
    bfdr_level: float = 0.05
    grid: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    linkage: str = "average"
    k_target: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "k_target", tuple(int(k) for k in self.k_target))
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.selection not in ("median", "bfdr"):
            raise ConfigError("selection must be 'median' or 'bfdr'")
        # surface sub-config validation errors early
        self.hyperparams(), self.mfm(), self.mcmc()

    def hyperparams(self) -> Hyperparams:
        return _build(Hyperparams, self)

    def mfm(self) -> MfmConfig:
        return _build(MfmConfig, self)

    def mcmc(self) -> McmcConfig:
        return _build(McmcConfig, self)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"], out["k_target"] = list(self.grid), list(self.k_target)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**_checked(cls, data))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(_read_json(path))


@dataclass(frozen=True)
class SimConfig:
    pattern: str = "I"                   # I, II, III (lattice) or IV (external layout)
    height: int = 40
    width: int = 40
    K: int | None = None                 # defaults to the pattern's domain count
    potts_beta: float = 1.0
    sweeps: int = 500
    p: int = 1000
    p_gamma: int = 20
    pi: float = 0.1
    seed: int = 0
    replicates: int = 1
    layout: str | None = None            # spot_id,x,y,label file for pattern IV
    out: str = "bnpspace_sim"
    threads: int = 1

    def __post_init__(self):
        if self.pattern not in (*PATTERNS, "IV"):
            raise ConfigError(f"pattern must be one of {sorted(PATTERNS) + ['IV']}")
        if self.pattern == "IV" and not self.layout:
            raise ConfigError("pattern IV needs a layout file (spot_id,x,y,label)")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.pattern != "IV":
            self.scenario(self.seed)

    @property
    def n_domains(self) -> int | None:
        if self.K is not None:
            return self.K
        return PATTERNS.get(self.pattern)

    def scenario(self, seed: int) -> SimScenario:
        return SimScenario(height=self.height, width=self.width, K=self.n_domains,
                           potts_beta=self.potts_beta, sweeps=self.sweeps, p=self.p,
                           p_gamma=self.p_gamma, pi=self.pi, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        return cls(**_checked(cls, data))

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        return cls.from_dict(_read_json(path))


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _checked(cls, data: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return dict(data)


def _build(target, cfg):
    try:
        return target(**{f.name: getattr(cfg, f.name) for f in fields(target)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
