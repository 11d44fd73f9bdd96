"""Run configuration: a TOML document validated into typed sections before any computation."""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_BETA = 0.98 ** 0.25
DEFAULT_THETA = 7.367


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    """Benchmark law: inline parameters, a saved JSON document, or an EM fit to a CSV."""

    type: Literal["lg", "moe", "arg", "file", "fit"]
    mu: Optional[list[float]] = None
    A: Optional[list] = None
    sigma: Optional[list[list[float]]] = None
    weights: Optional[list[float]] = None
    means: Optional[list[list[float]]] = None
    Omega: Optional[list] = None
    c1: Optional[float] = None
    c2: Optional[float] = None
    c3: Optional[float] = None
    path: Optional[str] = None
    data: Optional[str] = None
    K: Optional[int] = Field(default=None, ge=1)
    restarts: int = Field(default=5, ge=1)
    max_iter: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-8, gt=0)

    @model_validator(mode="after")
    def _required(self):
        need = {"lg": ("mu", "A", "sigma"), "moe": ("weights", "means", "A", "Omega"),
                "arg": ("c1", "c2", "c3"), "file": ("path",), "fit": ("data", "K")}[self.type]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"model type {self.type!r} requires {', '.join(missing)}")
        return self


class PreferenceSection(_Section):
    beta: float = Field(default=DEFAULT_BETA, gt=0, lt=1)
    theta: float = Field(default=DEFAULT_THETA, gt=0)
    vartheta: Optional[float] = Field(default=None, gt=0)


class AffineSection(_Section):
    """``a0 + lambda0'x + lambda1'x'``."""

    a0: float = 0.0
    lambda0: Optional[list[float]] = None
    lambda1: Optional[list[float]] = None


class GridSection(_Section):
    nodes: int = Field(default=61, ge=3)
    width: float = Field(default=5.0, gt=0)
    gh_order: int = Field(default=31, ge=1)
    interp: Literal["multilinear", "cubic"] = "multilinear"
    extrap: Literal["clamp", "linear"] = "clamp"
    tol: float = Field(default=1e-9, gt=0)
    max_iters: int = Field(default=10_000, ge=1)


class SolveSection(_Section):
    entropy_method: Literal["neumann", "dense"] = "neumann"


class SeriesSection(_Section):
    data: str
    consumption: Optional[AffineSection] = None


class TermSection(_Section):
    tau_max: int = Field(default=40, ge=0)
    earnings: AffineSection
    consumption: Optional[AffineSection] = None
    states: Optional[list[list[float]]] = None


class PerturbSection(_Section):
    """Intercept shift (any model) or slope shift ``A + s * direction`` (LG only)."""

    kind: Literal["mean", "slope"] = "mean"
    direction: list
    steps: list[float] = [0.2, 0.1, 0.05]
    terms: int = Field(default=200, ge=1)


class AssetSection(_Section):
    """Log gross return ``log R' = a0 + lambda0'x + lambda1'x'``."""

    a0: float = 0.0
    lambda0: Optional[list[float]] = None
    lambda1: Optional[list[float]] = None


class IdentSection(_Section):
    theta_alt: list[float] = []
    assets: list[AssetSection] = []
    consumption: Optional[AffineSection] = None


class LawSection(_Section):
    mu: list[float]
    A: list[list[float]]
    sigma: list[list[float]]


class ActionSection(_Section):
    """One action on a continuous state: affine flow utility and a Gaussian transition law."""

    utility: AffineSection = AffineSection()
    law: LawSection


class DDCSection(_Section):
    """Either a finite chain (``utilities`` and ``transitions``) or continuous ``actions``."""

    beta: float = Field(gt=0, lt=1)
    utilities: Optional[list[list[float]]] = None
    transitions: Optional[list[list[list[float]]]] = None
    actions: Optional[list[ActionSection]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    renewal_action: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one_form(self):
        finite = self.utilities is not None and self.transitions is not None
        if finite == (self.actions is not None):
            raise ValueError("give either utilities and transitions, or actions")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper must be given together")
        return self


class LearnSection(_Section):
    transition: list[list[float]]
    emission_means: list[list[float]]
    emission_covs: list[list[list[float]]]
    utility: AffineSection
    resolution: int = Field(default=50, ge=1)
    gh_order: int = Field(default=31, ge=1)
    tol: float = Field(default=1e-9, gt=0)


class PricingSection(_Section):
    s_grid: int = Field(default=101, ge=3)
    detection_T: list[int] = []
    detection_reps: int = Field(default=10_000, ge=1)


class RunConfig(_Section):
    out: Optional[str] = None
    seed: int = 0
    threads: Optional[int] = Field(default=None, ge=1)
    model: Optional[ModelSection] = None
    preferences: PreferenceSection = PreferenceSection()
    utility: AffineSection = AffineSection()
    grid: GridSection = GridSection()
    solve: SolveSection = SolveSection()
    series: Optional[SeriesSection] = None
    term: Optional[TermSection] = None
    perturb: Optional[PerturbSection] = None
    ident: Optional[IdentSection] = None
    ddc: Optional[DDCSection] = None
    learn: Optional[LearnSection] = None
    pricing: PricingSection = PricingSection()

    @field_validator("seed")
    @classmethod
    def _seed(cls, v):
        if v < 0:
            raise ValueError("seed must be non-negative")
        return v


def load_config(path) -> tuple[RunConfig, dict]:
    """Parse and validate a TOML file.

    Returns the validated config and the raw document (for echoing).
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid configuration\n{exc}") from None
    return cfg, raw


def resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p
