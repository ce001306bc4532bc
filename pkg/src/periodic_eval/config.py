"""Run configuration: a YAML file validated against one pydantic schema.

Example::

    model:
      r: 0.02
      mu: 0.1                # number, or {kind: sigmoid, lo: .., hi: .., scale: ..}
      sigma: 0.2
      b: {kind: affine, a: 0.0, b: -0.5}
      beta: 0.3
      rho: 0.5
      M0: 0.16
    utility:
      kind: power            # or log
      alpha: 0.5
      gamma: 0.5
      delta: 0.1
      tau: 1.0
      h: 0.8                 # number or {y: [...], values: [...]}
    numerics:
      y0: 0.0
      y_grid: {n: 9, width: 5.0}   # or an explicit increasing list
      n_paths: 65536
      n_steps: 64
      seed: 0
    verify:
      n_periods: 6
      policies: [cash, {kind: merton-power, alpha: 0.5, scale: 0.75}]

Validation errors carry the YAML line of the offending field.
"""
from __future__ import annotations

import hashlib
import json
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import UsageError
from .fixedpoint import FixedPointConfig
from .market import CoefficientFunction, MarketModel, default_factor_grid
from .oneperiod import SolverConfig
from .sde import FeedbackPolicy, SimulationConfig
from .utility import GridFunction, UtilitySpec


class ConfigError(UsageError):
    """Malformed configuration; ``diagnostics`` lists ``(line, field, message)``."""

    def __init__(self, diagnostics: List[tuple]):
        self.diagnostics = diagnostics
        lines = [f"line {ln}: {fld}: {msg}" if ln else f"{fld}: {msg}" for ln, fld, msg in diagnostics]
        super().__init__("invalid configuration\n  " + "\n  ".join(lines))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CoefficientBlock(_Strict):
    kind: Literal["constant", "affine", "sigmoid", "table"]
    value: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    center: Optional[float] = None
    scale: Optional[float] = None
    knots: Optional[List[float]] = None
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        need = {"constant": ("value",), "affine": ("a", "b"), "sigmoid": ("lo", "hi"),
                "table": ("knots", "values")}[self.kind]
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            raise ValueError(f"{self.kind} coefficient needs {', '.join(missing)}")
        if self.kind == "table":
            k = np.asarray(self.knots)
            if k.size != len(self.values) or k.size == 0 or np.any(np.diff(k) <= 0):
                raise ValueError("table knots must be strictly increasing and match values in length")
        return self


Coefficient = Union[float, CoefficientBlock]


def _coef(c) -> CoefficientFunction:
    if isinstance(c, CoefficientBlock):
        return CoefficientFunction.from_dict(c.model_dump(exclude_none=True))
    return CoefficientFunction.constant(float(c))


class ModelBlock(_Strict):
    r: float
    mu: Coefficient
    sigma: Coefficient
    b: Coefficient = 0.0
    beta: Coefficient = 0.0
    rho: float = Field(0.0, ge=-1.0, le=1.0)
    M0: Optional[float] = Field(None, gt=0.0)


class TableH(_Strict):
    y: List[float]
    values: List[float]

    @model_validator(mode="after")
    def _shape(self):
        if len(self.y) != len(self.values) or not self.y or np.any(np.diff(self.y) <= 0):
            raise ValueError("h table needs strictly increasing y and matching values")
        return self


class UtilityBlock(_Strict):
    kind: Literal["power", "log"]
    alpha: Optional[float] = None
    gamma: float = Field(gt=0.0, le=1.0)
    delta: float = Field(gt=0.0)
    tau: float = Field(1.0, gt=0.0)
    h: Union[float, TableH] = 1.0
    m: Optional[float] = None

    @model_validator(mode="after")
    def _alpha(self):
        if self.kind == "power" and (self.alpha is None or self.alpha >= 1.0 or self.alpha == 0.0):
            raise ValueError("power utility needs alpha in (-inf, 0) U (0, 1)")
        return self


class GridSpec(_Strict):
    n: int = Field(9, ge=1)
    width: float = Field(5.0, gt=0.0)


class NumericsBlock(_Strict):
    y0: float = 0.0
    y_grid: Union[GridSpec, List[float]] = Field(default_factory=GridSpec)
    n_paths: int = Field(2 ** 16, ge=2)
    n_steps: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    antithetic: bool = False
    tol: float = Field(1e-4, gt=0.0)
    max_iter: int = Field(1000, ge=1)
    inner: Literal["mc", "quadrature"] = "mc"
    refresh_rel: float = Field(1e-2, gt=0.0)
    reseed_each_iteration: bool = False
    method: Literal["lbfgs", "coordinate"] = "lbfgs"
    eta_max: float = Field(5.0, gt=0.0)
    pi_max: float = Field(20.0, gt=0.0)
    eta_time_knots: int = Field(4, ge=1)
    eta_factor_knots: int = Field(9, ge=1)
    pi_time_knots: int = Field(4, ge=1)
    pi_factor_knots: int = Field(9, ge=1)
    gap_rel_tol: float = Field(1e-2, gt=0.0)
    x_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])

    @field_validator("y_grid")
    @classmethod
    def _increasing(cls, v):
        if isinstance(v, list) and (not v or np.any(np.diff(v) <= 0)):
            raise ValueError("y_grid must be nonempty and strictly increasing")
        return v

    @field_validator("x_grid")
    @classmethod
    def _positive_x(cls, v):
        if not v or any(x <= 0 for x in v) or np.any(np.diff(v) <= 0):
            raise ValueError("x_grid must be positive and strictly increasing")
        return v


class PolicyBlock(_Strict):
    kind: Literal["zero", "cash", "merton-log", "merton-power"]
    alpha: Optional[float] = None
    scale: float = 1.0


class VerifyBlock(_Strict):
    n_periods: Optional[int] = Field(None, ge=1)
    x0: float = Field(1.0, gt=0.0)
    n_bins: int = Field(8, ge=1)
    min_count: int = Field(100, ge=1)
    k_se: float = Field(3.0, gt=0.0)
    policies: List[Union[Literal["zero", "cash", "merton-log"], PolicyBlock]] = Field(
        default_factory=lambda: ["cash"])


class OracleBlock(_Strict):
    """Inputs of ``oracle-compare``: constant ``A`` (default: the fixed point) and multipliers."""

    A: Optional[float] = None
    lambdas: Optional[List[float]] = None

    @field_validator("lambdas")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or any(x <= 0 for x in v)):
            raise ValueError("lambdas must be a nonempty list of positive numbers")
        return v


class RunConfig(_Strict):
    model: ModelBlock
    utility: UtilityBlock
    numerics: NumericsBlock = Field(default_factory=NumericsBlock)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    oracle: OracleBlock = Field(default_factory=OracleBlock)

    # -- conversions -------------------------------------------------------
    def market(self) -> MarketModel:
        mb = self.model
        return MarketModel(r=mb.r, mu=_coef(mb.mu), sigma=_coef(mb.sigma), b=_coef(mb.b), beta=_coef(mb.beta),
                           rho=mb.rho, M0=mb.M0)

    def utility_spec(self) -> UtilitySpec:
        u = self.utility
        h = GridFunction(np.asarray(u.h.y), np.asarray(u.h.values)) if isinstance(u.h, TableH) else float(u.h)
        if u.kind == "log":
            return UtilitySpec.log(u.gamma, u.delta, u.tau, h, u.m)
        return UtilitySpec.power(u.alpha, u.gamma, u.delta, u.tau, h, u.m)

    def y_grid(self) -> np.ndarray:
        g = self.numerics.y_grid
        if isinstance(g, list):
            return np.asarray(g, dtype=float)
        m = self.market()
        if m.beta.is_constant and m.beta(0.0) == 0.0:
            return np.array([self.numerics.y0])
        return default_factor_grid(m, self.numerics.y0, g.n, g.width, self.utility.tau)

    def simulation(self) -> SimulationConfig:
        n = self.numerics
        return SimulationConfig(n_paths=n.n_paths, n_steps=n.n_steps, seed=n.seed, tau=self.utility.tau,
                                antithetic=n.antithetic)

    def solver(self) -> SolverConfig:
        n = self.numerics
        return SolverConfig(sim=self.simulation(), eta_time_knots=n.eta_time_knots,
                            eta_factor_knots=n.eta_factor_knots, eta_max=n.eta_max,
                            pi_time_knots=n.pi_time_knots, pi_factor_knots=n.pi_factor_knots, pi_max=n.pi_max,
                            method=n.method, gap_rel_tol=n.gap_rel_tol)

    def fixed_point(self, refine: bool = False) -> FixedPointConfig:
        n = self.numerics
        s = self.solver()
        if refine:
            s = s.refined()
        return FixedPointConfig(y_grid=self.y_grid(), tol=n.tol, max_iter=n.max_iter, solver=s, inner=n.inner,
                                refresh_rel=n.refresh_rel, reseed_each_iteration=n.reseed_each_iteration)

    def policies(self) -> List[FeedbackPolicy]:
        out = []
        for p in self.verify.policies:
            if isinstance(p, str):
                p = PolicyBlock(kind=p)
            pm = self.numerics.pi_max
            if p.kind in ("zero", "cash"):
                out.append(FeedbackPolicy(p.kind, pi_max=pm))
            elif p.kind == "merton-log":
                out.append(FeedbackPolicy.merton_log(p.scale, pm))
            else:
                out.append(FeedbackPolicy.merton_power(p.alpha if p.alpha is not None else self.utility.alpha,
                                                       p.scale, pm))
        return out

    def with_overrides(self, seed: Optional[int] = None, paths: Optional[int] = None) -> "RunConfig":
        upd = {}
        if seed is not None:
            upd["seed"] = seed
        if paths is not None:
            upd["n_paths"] = paths
        if not upd:
            return self
        return self.model_copy(update={"numerics": self.numerics.model_copy(update=upd)})

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# loading with line diagnostics
# ---------------------------------------------------------------------------

def _node_line(node, loc) -> Optional[int]:
    """Line (1-based) of the deepest YAML node reachable along ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = (k, v)
                    break
            if nxt is None:
                return line
            line = nxt[0].start_mark.line + 1
            node = nxt[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([(mark.line + 1 if mark else None, "<yaml>", str(exc).splitlines()[0])]) from None
    if not isinstance(data, dict):
        raise ConfigError([(1, "<root>", "configuration must be a mapping")])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        diags = []
        for err in exc.errors():
            loc = _error_loc(err)
            fld = ".".join(str(p) for p in loc) or "<root>"
            diags.append((_node_line(root, loc), fld, err["msg"]))
        # keep one message per field, in file order
        seen, uniq = set(), []
        # a mapping that fails its block schema also fails the plain-number branch; prefer the block message
        for d in sorted(diags, key=lambda d: (d[0] or 0, d[1], d[2].startswith("Input should be a valid number"))):
            if d[1] not in seen:
                seen.add(d[1])
                uniq.append(d)
        raise ConfigError(uniq) from None


def validate_data(data: dict) -> RunConfig:
    """Validate an already-parsed mapping (no line information)."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError([(None, ".".join(str(p) for p in _error_loc(e)), e["msg"]) for e in exc.errors()]) from None


def _error_loc(err) -> list:
    # union branches add type tags such as "float" or "CoefficientBlock" to the location;
    # an unknown key is the last entry and is kept as written
    loc = list(err["loc"])
    extra = [loc.pop()] if err.get("type") == "extra_forbidden" and loc else []
    return [p for p in loc if isinstance(p, int) or p in _FIELD_NAMES] + extra


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([(None, str(path), exc.strerror or str(exc))]) from None
    return parse_config(text)


def _collect_fields(*models) -> set:
    names = set()
    for m in models:
        names.update(m.model_fields)
    return names


_FIELD_NAMES = _collect_fields(RunConfig, ModelBlock, UtilityBlock, NumericsBlock, VerifyBlock, CoefficientBlock,
                               TableH, GridSpec, PolicyBlock, OracleBlock)
