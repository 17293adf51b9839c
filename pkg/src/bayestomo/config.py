"""Run configuration: a versioned JSON document parsed into frozen dataclasses.

Every section is optional and falls back to the desk-scale defaults.
Unknown keys anywhere in the document are errors, as are values that
violate the constraints of the types they feed.

A minimal file::

    {"schema_version": 1, "experiment": "demo", "seed": 7,
     "prior": {"structure": 2}, "chain": {"iterations": 2000}}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class GridConfig:
    shape: tuple[int, int, int] = (12, 12, 6)
    cell_size: tuple[float, float, float] = (100.0, 100.0, 100.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ConfigError("grid.shape needs three counts >= 1")
        if len(self.cell_size) != 3 or any(not float(h) > 0 for h in self.cell_size):
            raise ConfigError("grid.cell_size needs three positive lengths")
        if len(self.origin) != 3:
            raise ConfigError("grid.origin needs three coordinates")


@dataclass(frozen=True)
class GeometryConfig:
    """Random layout (counts) or CSV files; files win when all three are given."""

    n_events: int = 40
    n_stations: int = 60
    n_paths: int | None = 2000
    events: str | None = None
    stations: str | None = None
    paths: str | None = None

    @property
    def from_files(self) -> bool:
        return self.events is not None

    def validate(self):
        given = [p is not None for p in (self.events, self.stations, self.paths)]
        if any(given) and not all(given):
            raise ConfigError("geometry files need events, stations and paths together")
        if all(given):
            for p in (self.events, self.stations, self.paths):
                if not os.path.exists(p):
                    raise ConfigError(f"geometry file not found: {p}")
        elif self.n_events < 1 or self.n_stations < 1 or (self.n_paths is not None and self.n_paths < 1):
            raise ConfigError("geometry counts must be positive")


@dataclass(frozen=True)
class PriorConfig:
    structure: int = 1
    spherical_radius: float = 150.0
    ellipsoid_axes: tuple[float, float, float] = (300.0, 300.0, 150.0)
    angles_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        if self.structure not in range(5):
            raise ConfigError("prior.structure must be 0-4")
        if not self.spherical_radius > 0 or len(self.ellipsoid_axes) != 3 or min(self.ellipsoid_axes) <= 0:
            raise ConfigError("neighbourhood radii must be positive")
        if len(self.angles_deg) != 3:
            raise ConfigError("prior.angles_deg needs three Euler angles")

    def neighborhood_kwargs(self) -> dict:
        return {"spherical_radius": self.spherical_radius, "ellipsoid_axes": tuple(self.ellipsoid_axes),
                "angles_deg": tuple(self.angles_deg)}


BETA0_MODES = ("zero", "lsqr", "lsqr_perturbed", "truth_center")


@dataclass(frozen=True)
class HyperConfig:
    """Gamma priors as (shape, rate); beta0 names how the prior mean is built."""

    eta_usa: tuple[float, float] = (10.0, 2.0)
    eta_hyp: tuple[float, float] = (1.0, 5.0)
    eta_time: tuple[float, float] = (10.0, 2.0)
    phi: tuple[float, float] = (1.0, 0.1)
    psi_mean: float = 10.0
    psi_sd: float = 0.2
    beta0: str = "zero"
    beta0_sd: float = 0.32

    def validate(self):
        for name in ("eta_usa", "eta_hyp", "eta_time", "phi"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ConfigError(f"hyperpriors.{name} needs positive shape and rate")
        if not self.psi_sd > 0:
            raise ConfigError("hyperpriors.psi_sd must be positive")
        if self.beta0 not in BETA0_MODES:
            raise ConfigError(f"hyperpriors.beta0 must be one of {', '.join(BETA0_MODES)}")
        if self.beta0_sd < 0:
            raise ConfigError("hyperpriors.beta0_sd must be non-negative")


@dataclass(frozen=True)
class TruthConfig:
    """How beta_true is made.

    ``setup1``: beta_true is the damped-LSQR solution for data from a smooth
    reference field. ``setup2``: beta_true is a GMRF draw with precision
    ``eta * Q(psi)`` under prior structure ``structure``, centred on
    ``center`` (the LSQR solution or zero).
    """

    kind: str = "setup2"
    eta: float = 0.18
    psi: float = 10.0
    structure: int = 1
    center: str = "lsqr"
    lsqr_damp: float = 20.0
    hyp_precision: float = 0.2
    time_precision: float = 5.0

    def validate(self):
        if self.kind not in ("setup1", "setup2"):
            raise ConfigError("truth.kind must be setup1 or setup2")
        if not (self.eta > 0 and self.psi >= 0):
            raise ConfigError("truth.eta must be positive and truth.psi non-negative")
        if self.structure not in range(5):
            raise ConfigError("truth.structure must be 0-4")
        if self.center not in ("lsqr", "zero"):
            raise ConfigError("truth.center must be lsqr or zero")
        if self.lsqr_damp < 0 or not (self.hyp_precision > 0 and self.time_precision > 0):
            raise ConfigError("truth damping must be >= 0 and block precisions > 0")


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "gaussian"
    precision: float = 0.4
    dof: float = 3.0

    def validate(self):
        if self.kind not in ("gaussian", "student_t", "none"):
            raise ConfigError("noise.kind must be gaussian, student_t or none")
        if self.kind == "gaussian" and not self.precision > 0:
            raise ConfigError("noise.precision must be positive")
        if self.kind == "student_t" and not self.dof > 2:
            raise ConfigError("noise.dof must exceed 2")


@dataclass(frozen=True)
class ChainSection:
    iterations: int = 3000
    burn_in: int = 1500
    thinning: int = 15
    initial_proposal_sd: float = 0.2
    target_acceptance: float = 0.35
    adapt: bool = True
    trace_stride: int = 1  # keep every k-th velocity node in the trace

    def validate(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ConfigError("chain needs 0 <= burn_in < iterations")
        if self.thinning < 1 or self.trace_stride < 1:
            raise ConfigError("chain.thinning and chain.trace_stride must be >= 1")
        if not self.initial_proposal_sd > 0 or not 0 < self.target_acceptance < 1:
            raise ConfigError("chain proposal settings out of range")


_SECTIONS = {
    "grid": GridConfig,
    "geometry": GeometryConfig,
    "prior": PriorConfig,
    "hyperpriors": HyperConfig,
    "truth": TruthConfig,
    "noise": NoiseConfig,
    "chain": ChainSection,
}


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    experiment: str = "run"
    seed: int = 0
    model: str = "model1"
    reference_velocity: float = 10.0
    output: str = "out"
    problem_dir: str | None = None  # where sample/diagnose look for generated files
    grid: GridConfig = field(default_factory=GridConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    hyperpriors: HyperConfig = field(default_factory=HyperConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    chain: ChainSection = field(default_factory=ChainSection)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.model not in ("model1", "model2"):
            raise ConfigError("model must be model1 or model2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.reference_velocity > 0:
            raise ConfigError("reference_velocity must be positive")
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    @property
    def problem_path(self) -> Path:
        return Path(self.problem_dir if self.problem_dir is not None else self.output)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def with_section(self, name: str, **changes) -> "RunConfig":
        return self.replace(**{name: dataclasses.replace(getattr(self, name), **changes)})

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # Hashes identify artifacts. The problem hash covers everything that
    # shapes the generated data; the config hash adds the inference settings.
    def problem_hash(self) -> str:
        d = self.to_dict()
        keys = ("schema_version", "seed", "model", "reference_velocity", "grid", "geometry", "truth", "noise")
        return _digest({k: d[k] for k in keys})

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in ("experiment", "output", "problem_dir"):
            d.pop(k)
        return _digest(d)

    def derived_seed(self, stream: str) -> int:
        """Independent 63-bit seed for one named random stream of this run."""
        tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
        return int(np.random.SeedSequence([self.seed, tag]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if cls is RunConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, f"{where}.{name}")
            continue
        if value is None and "None" in str(known[name].type):
            kwargs[name] = None
            continue
        default = getattr(cls(), name)
        kwargs[name] = _coerce(value, default, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value, default, where: str):
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)} numbers")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default))
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if default is None or isinstance(default, str):  # optional paths default to None
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)
