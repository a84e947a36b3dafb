"""JSON run configuration: parsing, validation and construction of model objects."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .emissions import Gaussian, Poisson
from .inference import EmConfig
from .model import HmmSpec, ModelError, TransitionMatrix


class ConfigError(ValueError):
    pass


def _take(block: dict, cls, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(block) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**block)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ModelBlock:
    family: str
    transition: list
    means: list | None = None
    cov: list | None = None
    covs: list | None = None
    rates: list | None = None

    def build(self) -> HmmSpec:
        try:
            P = TransitionMatrix(np.asarray(self.transition, dtype=float))
            d = P.d
            if self.family == "gaussian":
                if self.means is None or (self.cov is None) == (self.covs is None):
                    raise ConfigError("gaussian model needs 'means' and exactly one of 'cov' or 'covs'")
                means = np.asarray(self.means, dtype=float).reshape(d, -1)
                covs = [self.cov] * d if self.cov is not None else self.covs
                if len(covs) != d:
                    raise ConfigError(f"need {d} covariance matrices")
                ems = [Gaussian(means[j], covs[j]) for j in range(d)]
            elif self.family == "poisson":
                if self.rates is None or len(self.rates) != d:
                    raise ConfigError(f"poisson model needs {d} 'rates'")
                ems = [Poisson(r) for r in self.rates]
            else:
                raise ConfigError(f"unknown family {self.family!r} (gaussian or poisson)")
            return HmmSpec(P, tuple(ems))
        except (ModelError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"model: {exc}") from exc


@dataclass
class ExperimentBlock:
    shape: str = "square"
    nominal: float = 0.95
    m: int = 100
    n: int = 100
    methods: list = field(default_factory=lambda: [{"kind": "ordinary", "B": 1000}, {"kind": "tilted", "B": 200},
                                                   {"kind": "tilted", "B": 100}, {"kind": "tilted", "B": 52}])
    repetitions: int = 5000
    statistic: str = "mean"
    kinds: list = field(default_factory=lambda: ["non-studentized", "studentized"])
    target: list | None = None
    pilot_B0: int = 100
    studentizer: str = "pilot"
    tilt_target: str = "tangent"
    vstar_steps: int = 1
    theta_true: list | None = None


@dataclass
class EmBlock:
    max_iter: int = 500
    tol: float = 1e-8
    restarts: int = 5

    def build(self) -> EmConfig:
        if self.max_iter < 1 or self.tol <= 0 or self.restarts < 1:
            raise ConfigError("em: max_iter, restarts must be >= 1 and tol > 0")
        return EmConfig(max_iter=self.max_iter, tol=self.tol, restarts=self.restarts)


@dataclass
class VerifyBlock:
    empirical_n: int = 100_000
    empirical_reps: int = 200
    lan_n: int = 5000
    lan_reps: int = 2000
    lan_eta: list | None = None
    corrupt_delta: list | None = None  # [state, coordinate, amount] added to Δ before the residual check
    shape: str = "square"
    nominal: float = 0.95


@dataclass
class OutputBlock:
    dir: str = "out"
    plot_data: bool = True


@dataclass
class RunConfig:
    model: ModelBlock
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    em: EmBlock = field(default_factory=EmBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    seed: int = 0
    threads: int | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def spec(self) -> HmmSpec:
        return self.model.build()


_BLOCKS = {"model": ModelBlock, "experiment": ExperimentBlock, "em": EmBlock, "verify": VerifyBlock,
           "output": OutputBlock}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    allowed = set(_BLOCKS) | {"seed", "threads"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "model" not in doc:
        raise ConfigError("configuration needs a 'model' block")
    kw = {name: _take(doc[name], cls, name) for name, cls in _BLOCKS.items() if name in doc}
    seed = doc.get("seed", 0)
    threads = doc.get("threads")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        raise ConfigError("threads must be a positive integer")
    cfg = RunConfig(seed=seed, threads=threads, raw=doc, **kw)
    cfg.spec  # validate the model eagerly
    _check_experiment(cfg.experiment)
    return cfg


def _check_experiment(e: ExperimentBlock):
    if e.shape not in ("square", "circle"):
        raise ConfigError("experiment.shape must be 'square' or 'circle'")
    if not 0 < e.nominal < 1:
        raise ConfigError("experiment.nominal must lie in (0, 1)")
    if min(e.m, e.n, e.repetitions) < 1:
        raise ConfigError("experiment m, n and repetitions must be >= 1")
    if e.statistic not in ("mean", "em"):
        raise ConfigError("experiment.statistic must be 'mean' or 'em'")
    if e.statistic == "em" and not e.target:
        raise ConfigError("experiment.target is required for statistic 'em'")
    for k in e.kinds:
        if k not in ("non-studentized", "studentized"):
            raise ConfigError(f"unknown statistic kind {k!r}")
    for m in e.methods:
        if not isinstance(m, dict) or set(m) != {"kind", "B"} or m["kind"] not in ("ordinary", "tilted") \
                or not isinstance(m["B"], int) or m["B"] < 1:
            raise ConfigError(f"bad method entry {m!r}; expected {{'kind': 'ordinary'|'tilted', 'B': int}}")
    if e.studentizer not in ("pilot", "linear"):
        raise ConfigError("experiment.studentizer must be 'pilot' or 'linear'")
    if e.tilt_target not in ("tangent", "cone"):
        raise ConfigError("experiment.tilt_target must be 'tangent' or 'cone'")


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(doc)
