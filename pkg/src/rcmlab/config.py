"""Experiment configuration: strict YAML schema with line-numbered diagnostics.

A config file has the sections ``experiment``, ``environment``, ``solver``,
``ensemble``, ``output`` and ``params``; ``params`` is validated against the
model of the chosen experiment.  Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .env import EnvironmentSpec, distribution_from_dict
from .errors import ConfigurationError

__all__ = [
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "EXPERIMENT_KINDS",
    "PARAMS_MODELS",
]

EXPERIMENT_KINDS = ("correctors", "scales", "sensitivity", "clt-scan", "growth", "green", "meyers", "spectral-gap")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DistributionConfig(_Strict):
    """Conductance law; only the parameters of the chosen ``kind`` may be given."""

    kind: Literal["constant", "uniform", "bernoulli", "pareto", "lognormal"]
    value: Optional[float] = None
    lower: Optional[float] = None
    p: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    gamma_star: Optional[float] = None
    sigma: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class EnvironmentConfig(_Strict):
    dimension: int = Field(2, ge=1, le=3, description="lattice dimension d")
    side: int = Field(64, ge=2, description="box side L")
    distribution: DistributionConfig = Field(default_factory=lambda: DistributionConfig(kind="uniform", lower=0.5))
    seed: int = Field(0, ge=0)
    truncation: Optional[float] = Field(None, gt=0, description="cap M applied as min(max(a, 1/M), M)")

    def to_spec(self) -> EnvironmentSpec:
        return EnvironmentSpec(d=self.dimension, L=self.side, distribution=distribution_from_dict(self.distribution.as_dict()),
                               seed=self.seed, truncation=self.truncation)


class SolverConfig(_Strict):
    tol: float = Field(1e-8, gt=0, lt=1, description="relative residual target of the CG solves")


class EnsembleConfig(_Strict):
    n_samples: int = Field(20, ge=1)
    threads: Optional[int] = Field(None, ge=1, description="worker processes; default from RCMLAB_THREADS, else 1")

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        try:
            return max(1, int(os.environ.get("RCMLAB_THREADS", "1")))
        except ValueError:
            return 1


class OutputConfig(_Strict):
    directory: str = Field("results", description="output directory, relative to the config file")


class CorrectorsParams(_Strict):
    directions: Optional[list[int]] = Field(None, description="0-based directions; default all")
    with_sigma: bool = True
    save_fields: bool = False


class ScalesParams(_Strict):
    C_diamond: float = Field(0.5, gt=0, lt=1)
    spade: bool = False
    C_spade: Optional[float] = Field(None, gt=0)


class SensitivityParams(_Strict):
    n_trials: int = Field(10, ge=1)
    observables: list[Literal["F1", "F2"]] = Field(default_factory=lambda: ["F1", "F2"])
    support_radius: int = Field(2, ge=0, description="g = e_i on the vertex ball of this radius at the centre")


class CltParams(_Strict):
    R_list: list[float] = Field(default_factory=lambda: [2.0, 4.0, 8.0])
    p_list: list[float] = Field(default_factory=lambda: [1.0, 2.0])
    direction: int = Field(0, ge=0)
    with_sigma: bool = True
    guard: float = Field(0.125, gt=0, le=0.5, description="largest R allowed, as a fraction of L")
    centers: Literal["all", "origin"] = "all"


class GrowthParams(_Strict):
    x_list: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    p: float = Field(2.0, gt=0)
    direction: int = Field(0, ge=0)
    guard: float = Field(0.125, gt=0, le=0.5)


class GreenParams(_Strict):
    radii: list[int] = Field(default_factory=lambda: [2, 4, 8, 16])


class MeyersParams(_Strict):
    source_radius: int = Field(8, ge=1, description="f = e_0 on the vertex ball of this radius")
    q_max: Optional[float] = Field(None, gt=1)
    hole_filling_R: list[float] = Field(default_factory=lambda: [8.0, 16.0])


class SpectralGapParams(_Strict):
    mode: Literal["exhaustive", "monte-carlo"] = "exhaustive"
    observable: Literal["edge", "F1", "F2"] = "F1"
    edge: list[int] = Field(default_factory=lambda: [0, 1], description="(direction, x...) of the test edge")
    n_inner: int = Field(2, ge=1)
    p_list: list[int] = Field(default_factory=lambda: [1, 2, 3])


PARAMS_MODELS = {
    "correctors": CorrectorsParams,
    "scales": ScalesParams,
    "sensitivity": SensitivityParams,
    "clt-scan": CltParams,
    "growth": GrowthParams,
    "green": GreenParams,
    "meyers": MeyersParams,
    "spectral-gap": SpectralGapParams,
}


class ExperimentConfig(_Strict):
    experiment: Literal["correctors", "scales", "sensitivity", "clt-scan", "growth", "green", "meyers", "spectral-gap"]
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    params: dict = Field(default_factory=dict, description="experiment-specific parameters")

    @field_validator("params", mode="before")
    @classmethod
    def _params_mapping(cls, v):
        return {} if v is None else v

    @property
    def typed_params(self):
        """``params`` validated against the model of the experiment."""
        return PARAMS_MODELS[self.experiment].model_validate(self.params)

    def spec(self) -> EnvironmentSpec:
        return self.environment.to_spec()


# --------------------------------------------------------------------------
# Parsing with line diagnostics
# --------------------------------------------------------------------------

def _line_map(text: str) -> dict:
    """Map key paths (tuples) to 1-based line numbers of the YAML source."""
    out = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for n, v in enumerate(node.value):
                p = path + (n,)
                out[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, ())
    return out


def _line_for(loc: tuple, lines: dict) -> int | None:
    loc = tuple(loc)
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return None


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate YAML text; raise ConfigurationError with ``source:line: key: message`` lines."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigurationError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    lines = _line_map(text)
    try:
        cfg = ExperimentConfig.model_validate(data)
        errors = []
    except ValidationError as exc:
        cfg, errors = None, [(tuple(e["loc"]), e["msg"]) for e in exc.errors()]
    if cfg is not None:
        try:
            cfg.typed_params
        except ValidationError as exc:
            errors = [(("params",) + tuple(e["loc"]), e["msg"]) for e in exc.errors()]
    if errors:
        msgs = []
        for loc, msg in errors:
            key = ".".join(str(p) for p in loc) or "<root>"
            line = _line_for(loc, lines)
            where = f"{source}:{line}" if line else source
            msgs.append(f"{where}: {key}: {msg}")
        raise ConfigurationError("\n".join(msgs))
    try:
        cfg.spec()
    except ConfigurationError as exc:
        line = _line_for(("environment", "distribution"), lines)
        raise ConfigurationError(f"{source}:{line or '?'}: environment: {exc}") from None
    return cfg


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Read and validate a config file; return the config and the SHA-256 of its text."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path)), config_hash(text)
