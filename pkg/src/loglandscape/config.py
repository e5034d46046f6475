"""Experiment configuration schema.

Configs are JSON documents validated strictly: unknown keys, wrong types and
out-of-range values are rejected before any computation, and the error names
the offending field (``optimizer.batch_size`` style).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

EXPERIMENTS = ("gen-data", "decoupling", "noise-scaling", "stationary-fit", "fpt",
               "kramers-1d", "langer-nd", "sde-consistency")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSpec(_Strict):
    """Model and data.

    ``linreg``: Gaussian inputs and labels.  ``mlp``: ReLU/tanh/identity
    network on teacher sign labels, hidden widths in ``hidden``.
    ``double-well`` / ``nd-double-well`` / ``quadratic-offset``: analytic
    landscapes.
    """

    kind: Literal["linreg", "mlp", "double-well", "nd-double-well", "quadratic-offset"]
    d: int = Field(1, ge=1)
    n: int = Field(1000, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [100, 100])
    activation: Literal["relu", "tanh", "identity"] = "relu"
    a: float = Field(1.0, gt=0)
    w: float = Field(1.0, gt=0)
    offset: float = Field(0.1, gt=0)
    curvature: float = Field(1.0, gt=0)
    transverse: list[float] = Field(default_factory=lambda: [4.0])
    axis: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _shapes(self):
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if any(t <= 0 for t in self.transverse):
            raise ValueError("transverse curvatures must be positive")
        if self.kind == "nd-double-well" and self.axis > len(self.transverse):
            raise ValueError("axis out of range")
        return self


class OptimizerSpec(_Strict):
    eta: float = Field(gt=0)
    batch_size: int = Field(ge=1)
    steps: int = Field(ge=1)
    record_every: int = Field(1, ge=1)


class SdeSpec(_Strict):
    process: Literal["gld", "sgd_sde", "log_landscape"] = "log_landscape"
    dt: float = Field(gt=0)
    steps: int = Field(ge=1)
    eta: float = Field(0.1, gt=0)
    batch_size: float = Field(1.0, gt=0)
    diffusion: float = Field(0.0, ge=0)
    record_every: int = Field(10, ge=1)


class AnalysisSpec(_Strict):
    bins: int = Field(64, ge=2)
    quantile: float = Field(0.99, gt=0, le=1)
    min_count: int = Field(5, ge=1)
    thresholds: list[float] = Field(default_factory=lambda: [1.5, 2.0, 3.0, 4.0])
    runs: int = Field(100, ge=1)
    eps_rel: float = Field(1e-2, ge=0)
    eps_abs: float = Field(1e-8, ge=0)
    burn_in: float = Field(0.2, ge=0, lt=1)
    thin_every: int = Field(10, ge=1)
    checkpoints: list[int] = Field(default_factory=lambda: [0])
    groups: int = Field(10, ge=2)
    final_fraction: float = Field(0.5, gt=0, le=1)
    noise_points: int = Field(200, ge=2)

    @model_validator(mode="after")
    def _values(self):
        if any(c <= 1 for c in self.thresholds):
            raise ValueError("thresholds must exceed 1")
        if any(k < 0 for k in self.checkpoints):
            raise ValueError("checkpoints must be nonnegative")
        return self


_NEEDS = {
    "gen-data": (),
    "decoupling": ("optimizer",),
    "noise-scaling": ("optimizer",),
    "stationary-fit": ("optimizer",),
    "fpt": (),
    "kramers-1d": ("sde",),
    "langer-nd": ("sde",),
    "sde-consistency": ("sde",),
}

_MODEL_KINDS = {
    "gen-data": ("linreg", "mlp"),
    "decoupling": ("mlp", "linreg"),
    "noise-scaling": ("mlp", "linreg"),
    "stationary-fit": ("linreg",),
    "fpt": ("linreg",),
    "kramers-1d": ("double-well",),
    "langer-nd": ("nd-double-well",),
    "sde-consistency": ("quadratic-offset",),
}


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]
    seed: int = Field(ge=0, lt=2**64)
    output_dir: str = "runs"
    model: ModelSpec
    optimizer: OptimizerSpec | None = None
    sde: SdeSpec | None = None
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)

    @model_validator(mode="after")
    def _consistent(self):
        for section in _NEEDS[self.experiment]:
            if getattr(self, section) is None:
                raise _FieldError(section, f"experiment {self.experiment!r} needs a {section!r} section")
        if self.model.kind not in _MODEL_KINDS[self.experiment]:
            raise _FieldError("model.kind", f"experiment {self.experiment!r} supports model kinds "
                                            f"{list(_MODEL_KINDS[self.experiment])}")
        if self.experiment == "fpt" and self.optimizer is None and self.sde is None:
            raise _FieldError("optimizer", "fpt needs an 'optimizer' or an 'sde' section")
        if self.optimizer is not None and self.model.kind in ("linreg", "mlp"):
            if self.optimizer.batch_size > self.model.n:
                raise _FieldError("optimizer.batch_size",
                                  f"batch size {self.optimizer.batch_size} exceeds N={self.model.n}")
        if self.experiment == "stationary-fit" and self.model.d != 1:
            raise _FieldError("model.d", "stationary-fit histograms a one-dimensional parameter (d = 1)")
        if self.experiment == "kramers-1d" and self.sde.process != "log_landscape":
            raise _FieldError("sde.process", "kramers-1d uses the log_landscape process")
        return self


class _FieldError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a decoded JSON document; raises :class:`ConfigError` naming the field."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        ctx = err.get("ctx") or {}
        inner = ctx.get("error")
        if isinstance(inner, _FieldError):
            raise ConfigError(f"{inner.field}: {inner.message}", field=inner.field) from None
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{field}: {err['msg']}", field=field) from None


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Read and validate a config file; returns the config and its verbatim text."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    return parse_config(data), text
