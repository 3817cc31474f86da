"""Run configuration: a flat ``key = value`` text file with ``#`` comments.

Values round-trip exactly (floats are written with ``repr``).  Any key can
be overridden by the environment variable ``BACKACTION_<KEY>`` (upper case),
and command-line flags override both.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import math
import os
from typing import Mapping, Optional

from .protocols import ControlParams, NoiseParams, ProtocolKind

ENV_PREFIX = "BACKACTION_"


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


@dataclass(frozen=True)
class RunConfig:
    """All knobs of the command-line experiments.

    Times are in units of 1/kappa and rates in units of kappa.  A negative
    ``alpha_max`` or ``k_max`` means the default bound ``kappa * pi**2``.
    """

    protocol: str = "diffusion-gradient"
    kappa: float = 1.0
    mu: float = 1.0
    alpha_max: float = -1.0
    k_max: float = -1.0
    beta_x: float = 0.0
    beta_y: float = 0.0
    beta_z: float = 0.0
    gamma: float = 0.0
    dt: float = 1e-3
    horizon: float = 12.0
    ensemble: int = 10_000
    seed: int = 0
    threads: int = 1
    boundary: str = "circle"
    out: str = "out"
    record_every: int = 10
    # fig2
    fit_start: float = 1.0
    tail_fraction: float = 0.3
    fp_size: int = 2400
    fp_depth: float = 60.0
    resample_exponent: float = 0.5
    passage_min: float = 1e-8
    passage_points: int = 29
    passage_fit_max: float = 0.01
    # fig3
    gamma_min: float = 0.005
    gamma_max: float = 0.5
    gamma_points: int = 8
    steady_ensemble: int = 256
    sweep_ensemble: int = 64
    k_points: int = 16
    burn_in: float = 10.0
    window: float = 10.0
    steady_initial_delta: float = 1.5707963267948966
    # nlevel
    nlevel_dim: int = 3
    nlevel_ensemble: int = 1000
    nlevel_horizon: float = 10.0
    nlevel_geometry: str = "planar"
    nlevel_initial: str = "random"
    # verification
    fault: str = ""

    def validate(self) -> "RunConfig":
        try:
            ProtocolKind(self.protocol)
        except ValueError:
            raise ConfigError(f"unknown protocol {self.protocol!r}") from None
        for name in ("mu", "beta_x", "beta_y", "beta_z", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be > 0, got {self.kappa}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if self.horizon < self.dt:
            raise ConfigError(f"horizon ({self.horizon}) must be >= dt ({self.dt})")
        for name in ("ensemble", "steady_ensemble", "sweep_ensemble", "nlevel_ensemble",
                     "threads", "record_every", "k_points", "gamma_points", "passage_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.boundary not in ("circle", "interval"):
            raise ConfigError(f"boundary must be 'circle' or 'interval', got {self.boundary!r}")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ConfigError("need 0 < gamma_min <= gamma_max")
        if not 0 < self.tail_fraction < 1:
            raise ConfigError("tail_fraction must lie in (0, 1)")
        if not 0 <= self.fit_start < self.horizon:
            raise ConfigError(f"fit_start ({self.fit_start}) must lie in [0, horizon)")
        if not 0 < self.passage_min < 1:
            raise ConfigError("passage_min must lie in (0, 1)")
        if self.burn_in < 10.0 / self.kappa:
            raise ConfigError(f"burn_in ({self.burn_in}) must be >= 10/kappa")
        if self.window <= 0:
            raise ConfigError("window must be > 0")
        if not 2 <= self.nlevel_dim <= 8:
            raise ConfigError(f"nlevel_dim must lie in [2, 8], got {self.nlevel_dim}")
        if self.nlevel_geometry not in ("planar", "rotating"):
            raise ConfigError("nlevel_geometry must be 'planar' or 'rotating'")
        if self.nlevel_initial not in ("random", "antipode"):
            raise ConfigError("nlevel_initial must be 'random' or 'antipode'")
        if not self.passage_min < self.passage_fit_max < 1:
            raise ConfigError("need passage_min < passage_fit_max < 1")
        if self.fp_size < 64:
            raise ConfigError("fp_size must be >= 64")
        return self

    @property
    def kind(self) -> ProtocolKind:
        return ProtocolKind(self.protocol)

    @property
    def control(self) -> ControlParams:
        return ControlParams(self.kappa, self.mu,
                             None if self.alpha_max < 0 else self.alpha_max,
                             None if self.k_max < 0 else self.k_max)

    @property
    def noise(self) -> NoiseParams:
        return NoiseParams(self.beta_x, self.beta_y, self.beta_z, self.gamma)

    def to_text(self) -> str:
        lines = ["# backaction run configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(value) if isinstance(value, float) else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["RunConfig"] = None):
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        parsed = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                parsed[key] = _parse(types[key], value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return replace(base, **parsed)

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        found = {}
        for f in fields(self):
            env_key = ENV_PREFIX + f.name.upper()
            if env_key in environ:
                found[f.name] = environ[env_key]
        return RunConfig.from_mapping(found, self) if found else self

    def as_dict(self) -> dict:
        return asdict(self)


def _parse(kind: type, value: str):
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    if kind is int:
        return int(value)
    if kind is float:
        out = float(value)
        if math.isnan(out):
            raise ValueError("NaN is not allowed")
        return out
    return value


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """File (if any), then environment, then explicit overrides; validated."""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = RunConfig.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    else:
        cfg = RunConfig()
    cfg = cfg.with_env(environ)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
