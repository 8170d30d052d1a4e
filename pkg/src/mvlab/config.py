"""Experiment configuration: strict dataclass schema, builders and hashing.

Configs are YAML (JSON also parses).  Every block maps onto a dataclass;
unknown keys anywhere are rejected with the dotted name of the offending
field.  Operators and coefficients are tagged unions keyed by ``kind``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import monotone as mt
from .coeffs import (AffineDrift, CallbackDiffusion, CallbackDrift, LinearDiffusion, MeanFieldCoefficients, Modulus,
                     PerturbationFamily)
from .sde import SchemeSpec, SdeProblem
from .rng import RngSpec

SCHEMA_VERSION = 1
HASH_EXCLUDE = ("out", "threads")


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


# ------------------------------------------------------------ dataclasses

@dataclass
class ProblemCfg:
    x0: list = field(default_factory=lambda: [0.0])
    T: float = 1.0
    eps: float = 1.0

    def validate(self, where):
        _require(self.T > 0, f"{where}.T", "must be positive")
        _require(0 <= self.eps <= 1, f"{where}.eps", "must lie in [0, 1]")


@dataclass
class SchemeCfg:
    method: str = "projection"
    dt: float = 0.01
    alpha_factor: float = 1.0
    bridge: bool = True

    def validate(self, where):
        _require(self.method in ("projection", "penalized"), f"{where}.method", "must be projection or penalized")
        _require(self.dt > 0, f"{where}.dt", "must be positive")
        _require(self.alpha_factor > 0, f"{where}.alpha_factor", "must be positive")


@dataclass
class RngCfg:
    seed: int = 0
    stream_offset: int = 0

    def validate(self, where):
        _require(0 <= self.seed < 2 ** 64, f"{where}.seed", "must be an unsigned 64-bit integer")
        _require(self.stream_offset >= 0, f"{where}.stream_offset", "must be nonnegative")


@dataclass
class SimulateCfg:
    N: int = 1000
    record: typing.Any = "full"
    formats: list = field(default_factory=lambda: ["csv"])

    def validate(self, where):
        _require(self.N >= 1, f"{where}.N", "must be at least 1")
        ok = self.record in ("full", "terminal") or (isinstance(self.record, int) and self.record >= 1)
        _require(ok, f"{where}.record", "must be full, terminal or a positive stride")
        for f in self.formats:
            _require(f in ("csv", "binary"), f"{where}.formats", f"unknown format {f!r}")


@dataclass
class ControlCfg:
    kind: str = "zero"
    value: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def validate(self, where):
        _require(self.kind in ("zero", "constant", "values"), f"{where}.kind", "must be zero, constant or values")


@dataclass
class SkeletonCfg:
    control: ControlCfg = field(default_factory=ControlCfg)
    mdp: bool = False


@dataclass
class OptimizerCfg:
    rho0: float = 10.0
    rho_factor: float = 10.0
    rounds: int = 5
    restarts: int = 4
    restart_scale: float = 1.0
    feas_tol: float = 1e-3
    maxiter: int = 500
    seed: int = 0

    def validate(self, where):
        _require(self.rounds >= 1, f"{where}.rounds", "must be at least 1")
        _require(self.restarts >= 0, f"{where}.restarts", "must be nonnegative")
        _require(self.rho0 > 0 and self.rho_factor >= 1, f"{where}.rho0", "penalty schedule must be positive")


@dataclass
class TargetCfg:
    kind: str = "endpoint_halfspace"
    normal: list = field(default_factory=lambda: [1.0])
    level: float = 1.0
    point: list = field(default_factory=list)
    radius: float = 0.0
    path: list = field(default_factory=list)
    tol: float = 1e-3

    def validate(self, where):
        kinds = ("endpoint_halfspace", "endpoint_point", "tube_exit", "path_match")
        _require(self.kind in kinds, f"{where}.kind", f"must be one of {kinds}")
        if self.kind == "tube_exit":
            _require(self.radius > 0, f"{where}.radius", "must be positive")
        if self.kind in ("endpoint_point", "path_match"):
            _require(self.tol > 0, f"{where}.tol", "must be positive")


@dataclass
class RateCfg:
    target: TargetCfg = field(default_factory=TargetCfg)
    optimizer: OptimizerCfg = field(default_factory=OptimizerCfg)


@dataclass
class EventCfg:
    kind: str = "halfspace"
    normal: list = field(default_factory=lambda: [1.0])
    level: float = 1.0
    radius: float = 0.0
    complement: bool = False

    def validate(self, where):
        _require(self.kind in ("halfspace", "tube"), f"{where}.kind", "must be halfspace or tube")
        if self.kind == "tube":
            _require(self.radius > 0, f"{where}.radius", "must be positive")


@dataclass
class LdpCfg:
    event: EventCfg = field(default_factory=EventCfg)
    eps_grid: list = field(default_factory=lambda: [0.25, 0.1])
    N: int = 100000
    rate_star: typing.Optional[float] = None

    def validate(self, where):
        _check_grid(self.eps_grid, f"{where}.eps_grid")
        _require(self.N >= 1, f"{where}.N", "must be at least 1")


@dataclass
class MdpCfg:
    eps_grid: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    N: int = 10000
    statistic: str = "variance"
    lambda_power: float = 0.25
    component: int = 0
    quantile: float = 0.9
    oracle_N: int = 200000

    def validate(self, where):
        _check_grid(self.eps_grid, f"{where}.eps_grid")
        _require(self.statistic in ("variance", "mean", "sup_quantile"), f"{where}.statistic",
                 "must be variance, mean or sup_quantile")
        _require(0 < self.lambda_power < 0.5, f"{where}.lambda_power", "must lie in (0, 1/2)")
        _require(self.N >= 2, f"{where}.N", "must be at least 2")


@dataclass
class LilCfg:
    regime: str = "large"
    c: float = math.e
    js: list = field(default_factory=lambda: [4, 8])
    T: float = 1.0
    steps: int = 100
    N: int = 10000
    n_distance: int = 20
    center: typing.Optional[list] = None
    dt_factor: float = 1.0

    def validate(self, where):
        _require(self.regime in ("large", "small"), f"{where}.regime", "must be large or small")
        _require(self.c > 1, f"{where}.c", "must exceed 1")
        _require(len(self.js) >= 1, f"{where}.js", "must be nonempty")
        _require(self.N >= 2, f"{where}.N", "must be at least 2")


@dataclass
class ModulusCfg:
    kind: str = "linear"
    L: float = 1.0
    eta: float = 1e-2


@dataclass
class DiagCfg:
    which: list = field(default_factory=lambda: ["H1", "H2"])
    L: float = 1.0
    modulus: ModulusCfg = field(default_factory=ModulusCfg)
    n_samples: int = 200
    sample_scale: float = 3.0
    eps_grid: list = field(default_factory=list)
    k_monotonicity: bool = True
    N: int = 200
    seed: int = 0

    def validate(self, where):
        for w in self.which:
            _require(w in ("H1", "H2", "B0", "B3"), f"{where}.which", f"unknown hypothesis {w!r}")
        _require(self.n_samples >= 1, f"{where}.n_samples", "must be at least 1")


@dataclass
class ExperimentConfig:
    operator: dict
    coefficients: dict
    schema_version: int = SCHEMA_VERSION
    problem: ProblemCfg = field(default_factory=ProblemCfg)
    scheme: SchemeCfg = field(default_factory=SchemeCfg)
    rng: RngCfg = field(default_factory=RngCfg)
    simulate: SimulateCfg = field(default_factory=SimulateCfg)
    skeleton: SkeletonCfg = field(default_factory=SkeletonCfg)
    rate: RateCfg = field(default_factory=RateCfg)
    ldp_sweep: LdpCfg = field(default_factory=LdpCfg)
    mdp_sweep: MdpCfg = field(default_factory=MdpCfg)
    lil: LilCfg = field(default_factory=LilCfg)
    diag: DiagCfg = field(default_factory=DiagCfg)
    out: typing.Optional[str] = None
    threads: int = 1

    def validate(self, where=""):
        _require(self.schema_version == SCHEMA_VERSION, "schema_version", f"unsupported (expected {SCHEMA_VERSION})")
        _require(self.threads >= 1, "threads", "must be at least 1")
        build_operator(self.operator, "operator")
        build_coefficients(self.coefficients, "coefficients")

    # builders ---------------------------------------------------------
    def build_problem(self, eps: float | None = None) -> SdeProblem:
        A = build_operator(self.operator, "operator")
        coeffs = build_coefficients(self.coefficients, "coefficients")
        p = self.problem
        try:
            return SdeProblem(A, coeffs, np.asarray(p.x0, dtype=float), p.T, p.eps if eps is None else eps)
        except ValueError as e:
            raise ConfigError(f"problem: {e}") from e

    def build_scheme(self) -> SchemeSpec:
        s = self.scheme
        try:
            spec = SchemeSpec(s.method, s.dt, s.alpha_factor, s.bridge)
            spec.steps(self.problem.T)
        except ValueError as e:
            raise ConfigError(f"scheme.dt: {e}") from e
        return spec

    def build_rng(self) -> RngSpec:
        return RngSpec(int(self.rng.seed), int(self.rng.stream_offset))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self)


# ------------------------------------------------------------- validation

def _require(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _check_grid(grid, where):
    _require(len(grid) >= 1, where, "must be nonempty")
    _require(all(0 < e <= 1 for e in grid), where, "values must lie in (0, 1]")
    _require(all(b < a for a, b in zip(grid, grid[1:])), where, "must be strictly decreasing")


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp is list:
        if not isinstance(value, (list, tuple)):
            value = [value]
        return list(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return value
    return value


def from_dict(cls, data: dict, where: str = ""):
    """Strictly build dataclass ``cls`` from ``data``; unknown keys raise."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{_join(where, k)}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], _join(where, f.name))
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{_join(where, f.name)}: required field missing")
    obj = cls(**kwargs)
    for f in dataclasses.fields(cls):
        sub = getattr(obj, f.name)
        if dataclasses.is_dataclass(sub) and hasattr(sub, "validate"):
            sub.validate(_join(where, f.name))
    if hasattr(obj, "validate") and not where:
        obj.validate()
    return obj


def _join(a, b):
    return f"{a}.{b}" if a else b


# ---------------------------------------------------------------- unions

def _keys(d, where, required=(), optional=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    allowed = set(required) | set(optional) | {"kind"}
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{_join(where, k)}: unknown field")
    for k in required:
        if k not in d:
            raise ConfigError(f"{_join(where, k)}: required field missing")


def _arr(v):
    return np.asarray(v, dtype=float)


def build_set(d: dict, where: str) -> mt.ConvexSet:
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "halfspace":
            _keys(d, where, ("normal", "offset"))
            return mt.HalfSpace(_arr(d["normal"]), float(d["offset"]))
        if kind == "box":
            _keys(d, where, ("lower", "upper"))
            return mt.Box(_arr(d["lower"]), _arr(d["upper"]))
        if kind == "ball":
            _keys(d, where, ("center", "radius"))
            return mt.Ball(_arr(d["center"]), float(d["radius"]))
        if kind == "polyhedron":
            _keys(d, where, ("normals", "offsets", "witness"))
            return mt.Polyhedron(_arr(d["normals"]), _arr(d["offsets"]), _arr(d["witness"]))
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from e
    raise ConfigError(f"{where}.kind: unknown set kind {kind!r}")


def build_fn(d: dict, where: str) -> mt.ConvexFn:
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "abs":
            _keys(d, where, (), ("weight", "dim"))
            return mt.AbsNorm(float(d.get("weight", 1.0)), int(d.get("dim", 1)))
        if kind == "quadratic":
            _keys(d, where, ("Q",))
            return mt.Quadratic(_arr(d["Q"]))
        if kind == "indicator":
            _keys(d, where, ("set",))
            return mt.Indicator(build_set(d["set"], _join(where, "set")))
        if kind == "sum":
            _keys(d, where, ("terms",))
            return mt.SumFn(tuple(build_fn(t, f"{where}.terms[{i}]") for i, t in enumerate(d["terms"])))
        if kind == "primitive1d":
            _keys(d, where, ("graph",))
            return mt.Primitive1D(build_operator(d["graph"], _join(where, "graph")))
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from e
    raise ConfigError(f"{where}.kind: unknown function kind {kind!r}")


def build_operator(d: dict, where: str = "operator") -> mt.MonotoneOperator:
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "zero":
            _keys(d, where, (), ("dim",))
            return mt.Zero(int(d.get("dim", 1)))
        if kind == "normal_cone":
            _keys(d, where, ("set",))
            return mt.NormalCone(build_set(d["set"], _join(where, "set")))
        if kind == "subdiff":
            _keys(d, where, ("fn",))
            return mt.SubdiffConvex(build_fn(d["fn"], _join(where, "fn")))
        if kind == "graph1d":
            _keys(d, where, ("vertices",), ("left_slope", "right_slope"))
            return mt.Graph1D(_arr(d["vertices"]), d.get("left_slope", 0.0), d.get("right_slope", 0.0))
        if kind == "scaled":
            _keys(d, where, ("base", "factor"))
            return mt.Scaled(build_operator(d["base"], _join(where, "base")), float(d["factor"]))
        if kind == "translated":
            _keys(d, where, ("base", "shift"))
            return mt.Translated(build_operator(d["base"], _join(where, "base")), _arr(d["shift"]))
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from e
    raise ConfigError(f"{where}.kind: unknown operator kind {kind!r}")


def build_coefficients(d: dict, where: str = "coefficients"):
    _keys(d, where, ("drift", "diffusion"), ("perturbation",))
    dr, df = d["drift"], d["diffusion"]
    w = _join(where, "drift")
    try:
        kind = dr.get("kind") if isinstance(dr, dict) else None
        if kind == "affine":
            _keys(dr, w, (), ("dim", "B0", "B1", "B2"))
            drift = AffineDrift(dr.get("B0", 0.0), dr.get("B1", 0.0), dr.get("B2", 0.0), int(dr.get("dim", 1)))
        elif kind == "callback":
            _keys(dr, w, ("path",), ("dim", "grad_path"))
            drift = CallbackDrift.from_path(dr["path"], int(dr.get("dim", 1)), dr.get("grad_path"))
        else:
            raise ConfigError(f"{w}.kind: unknown drift kind {kind!r}")
        w = _join(where, "diffusion")
        kind = df.get("kind") if isinstance(df, dict) else None
        if kind == "linear":
            _keys(df, w, (), ("dim", "S0", "s1", "s2"))
            diff = LinearDiffusion(df.get("S0", 1.0), float(df.get("s1", 0.0)), float(df.get("s2", 0.0)),
                                   int(df.get("dim", 1)))
        elif kind == "callback":
            _keys(df, w, ("path",), ("dim",))
            diff = CallbackDiffusion.from_path(df["path"], int(df.get("dim", 1)))
        else:
            raise ConfigError(f"{w}.kind: unknown diffusion kind {kind!r}")
        coeffs = MeanFieldCoefficients(drift, diff)
        if "perturbation" in d:
            w = _join(where, "perturbation")
            p = d["perturbation"]
            _keys(p, w, (), ("drift_direction", "cb", "pb", "diffusion_direction", "cs", "ps"))
            return PerturbationFamily(coeffs, p.get("drift_direction"), float(p.get("cb", 0.0)),
                                      float(p.get("pb", 1.0)), p.get("diffusion_direction"),
                                      float(p.get("cs", 0.0)), float(p.get("ps", 1.0)))
        return coeffs
    except ConfigError:
        raise
    except (ValueError, TypeError, ImportError, AttributeError) as e:
        raise ConfigError(f"{w}: {e}") from e


def build_modulus(m: ModulusCfg) -> Modulus:
    try:
        return Modulus(m.kind, m.L, m.eta)
    except ValueError as e:
        raise ConfigError(f"diag.modulus: {e}") from e


# --------------------------------------------------------------- loading

def _yaml_floats(v):
    # YAML/JSON spell infinity differently; accept "inf"/"-inf" strings too
    if isinstance(v, dict):
        return {k: _yaml_floats(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_yaml_floats(x) for x in v]
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "-inf", "infinity", "-infinity"):
        return float(v)
    return v


def parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set {item!r}: expected key=value")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(raw: dict, overrides) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {key}: {p} is not a mapping")
            node = nxt
        node[parts[-1]] = value
    return raw


def load_raw(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config: not valid YAML/JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return data


def load_config(path=None, overrides=(), raw: dict | None = None) -> ExperimentConfig:
    data = load_raw(path) if raw is None else raw
    data = _yaml_floats(apply_overrides(data, overrides))
    return from_dict(ExperimentConfig, data)


def _canonical(v):
    if isinstance(v, dict):
        return {k: _canonical(x) for k, x in sorted(v.items())}
    if isinstance(v, (list, tuple)):
        return [_canonical(x) for x in v]
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if v == int(v) and abs(v) < 2 ** 53:
            return int(v)
        return v
    return v


def canonical_json(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for k in HASH_EXCLUDE:
        d.pop(k, None)
    return json.dumps(_canonical(d), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    """64-bit blake2b over the canonical form (defaults filled, keys sorted,
    numbers normalized; ``out`` and ``threads`` excluded)."""
    return hashlib.blake2b(canonical_json(cfg).encode(), digest_size=8).hexdigest()
