"""Experiment runner: ``pathlab run | diff | list-presets | describe-check``.

An experiment is described by an INI file (or one of the bundled presets):

    [experiment]   seed
    [manifold]     kind = euclidean | sphere | hyperbolic, dim, radius
    [grid]         T, h
    [budgets]      any field of verify.Budgets except workers
    [battery]      functions, checks, kappa = auto | list, n_checks, method
    [function:N]   type, t, eps, sigma, offset, scale, checks  (per-function overrides)
    [identities]   functions, paths, chunk_size          (Ito residual / QV / isometry)
    [convergence]  function, steps, paths, tolerance     (residual^2 against h)
    [ricci]        routes, eps, paths, tolerance, steps_per_eps, chunk_size, fd_step

Command-line flags override the file; environment variables ``PATHLAB_CONFIG``,
``PATHLAB_PRESET``, ``PATHLAB_SEED``, ``PATHLAB_WORKERS``, ``PATHLAB_OUT`` and
``PATHLAB_DUMP_PATHS`` sit between the two.

A run writes ``reports.json`` (deterministic: no timings, no worker count),
``summary.txt``, plot-data CSVs and ``manifest.json`` (timestamps, runtimes,
config hash, code version).  Exit status: 0 all pass, 1 some fail,
2 some inconclusive (and none fail), 3 invalid configuration.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime
import hashlib
import json
import math
import os
import re
import sys
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from importlib import metadata, resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import cylinder as cyl
from . import geometry as geo
from . import martingale as mg
from . import stats
from . import verify as vf
from .pathsim import ConfigurationError, TimeGrid, sample_paths, write_path_dump

ENV_PREFIX = "PATHLAB_"
EXIT_CODES = {stats.PASS: 0, stats.FAIL: 1, stats.INCONCLUSIVE: 2}
EXIT_CONFIG_ERROR = 3

# checks that do not involve kappa are run once per function
KAPPA_FREE = ("PARGRAD", "BOCHNER")

IDENTITY_CHECKS = {
    "ITO_RESIDUAL": "F - F_0 - sum <grad F_tau, dW> has mean zero (and vanishes for linear flows).",
    "QUADRATIC_VARIATION": "Summed squared increments of F_t match the integrated |grad_t F_t|^2.",
    "ITO_ISOMETRY": "E int |grad_t F_t|^2 dt equals E (F - F_0)^2.",
    "RESIDUAL_SLOPE": "log-log slope of E[R^2] against the step size is 1 within tolerance.",
}

FUNCTION_TYPES = ("linear", "quadratic", "exp", "bump", "normal_linear", "combination",
                  "product", "two_point", "one_point_ricci")
EUCLIDEAN_ONLY = ("quadratic", "exp")
FUNCTION_PARAMS = {"type": str, "t": float, "eps": float, "sigma": float, "offset": float,
                   "scale": float, "checks": list}

BUDGET_FIELDS = {f.name: f.type for f in fields(vf.Budgets) if f.name != "workers"}
BUDGET_INT = ("outer_paths", "inner_paths", "chunk_size", "prefixes", "prefix_inner",
              "root_inner", "base_paths")

SECTION_KEYS = {
    "experiment": ("seed", "name"),
    "manifold": ("kind", "dim", "radius"),
    "grid": ("T", "h"),
    "budgets": tuple(BUDGET_FIELDS),
    "battery": ("functions", "checks", "kappa", "n_checks", "method"),
    "identities": ("functions", "paths", "chunk_size"),
    "convergence": ("function", "steps", "paths", "tolerance", "chunk_size"),
    "ricci": ("routes", "eps", "paths", "tolerance", "steps_per_eps", "chunk_size", "fd_step"),
}


class ConfigError(ConfigurationError):
    """Invalid experiment configuration; the message names source, line and field."""

    def __init__(self, message, source="<config>", line=None, where=None):
        loc = f"{source}:{line}" if line else source
        text = f"{loc}: [{where}] {message}" if where else f"{loc}: {message}"
        super().__init__(text)
        self.source, self.line, self.where = source, line, where


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class FunctionSpec:
    name: str
    type: str
    params: tuple = ()              # sorted (key, value) pairs
    checks: Optional[tuple] = None

    def param(self, key, default=None):
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class IdentityConfig:
    functions: tuple
    paths: int = 10000
    chunk_size: int = 1000


@dataclass(frozen=True)
class ConvergenceConfig:
    function: str
    steps: tuple
    paths: int = 10000
    tolerance: float = 0.3
    chunk_size: int = 1000


@dataclass(frozen=True)
class RicciConfig:
    routes: tuple = vf.RICCI_ROUTES
    eps: tuple = (0.2, 0.1, 0.05)
    paths: int = 100000
    tolerance: float = 0.1
    steps_per_eps: int = 50
    chunk_size: int = 10000
    fd_step: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    kind: str = "euclidean"
    dim: int = 2
    radius: float = 1.0
    T: float = 1.0
    h: float = 1e-3
    budgets: vf.Budgets = vf.Budgets()
    functions: tuple = ()
    checks: tuple = ()
    kappa: tuple = ("auto",)
    n_checks: int = 5
    method: str = "auto"
    identities: Optional[IdentityConfig] = None
    convergence: Optional[ConvergenceConfig] = None
    ricci: Optional[RicciConfig] = None
    seed: int = 0
    # execution settings: not part of the config hash
    workers: int = 1
    out: Optional[str] = None
    dump_paths: bool = False
    source: str = "<config>"

    def canonical(self) -> dict:
        """Everything that determines the reports (excludes workers, output and source)."""
        def enc(x):
            if hasattr(x, "__dataclass_fields__"):
                return {f.name: enc(getattr(x, f.name)) for f in fields(x)}
            if isinstance(x, (list, tuple)):
                return [enc(v) for v in x]
            return x
        d = enc(self)
        for k in ("workers", "out", "dump_paths", "source"):
            d.pop(k)
        d["budgets"].pop("workers")
        return d

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def model(self) -> geo.ManifoldModel:
        if self.kind == "euclidean":
            return geo.euclidean(self.dim)
        if self.kind == "sphere":
            return geo.sphere(self.dim, self.radius)
        return geo.hyperbolic(self.dim, self.radius)

    def with_execution(self, workers=None, out=None, dump_paths=None, seed=None):
        b = self.budgets if workers is None else replace(self.budgets, workers=int(workers))
        return replace(self, budgets=b,
                       workers=self.workers if workers is None else int(workers),
                       out=self.out if out is None else str(out),
                       dump_paths=self.dump_paths if dump_paths is None else bool(dump_paths),
                       seed=self.seed if seed is None else int(seed))


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(
                rf"{re.escape(key)}\s*[=:]", line):
            return no
    return None


class _Reader:
    """Typed access to a parsed INI file with error locations."""

    def __init__(self, text: str, source: str, overrides=()):
        self.text, self.source = text, source
        self.cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=source)
        except configparser.DuplicateOptionError as e:
            raise ConfigError(f"duplicate key '{e.option}'", source, e.lineno, e.section) from None
        except configparser.DuplicateSectionError as e:
            raise ConfigError(f"duplicate section '{e.section}'", source, e.lineno) from None
        except configparser.MissingSectionHeaderError as e:
            raise ConfigError("content before the first [section] header", source, e.lineno) from None
        except configparser.ParsingError as e:
            line = e.errors[0][0] if e.errors else None
            raise ConfigError("line is not 'key = value'", source, line) from None
        self.overridden = set()
        for item in overrides:
            sec_key, sep, value = item.partition("=")
            sec, dot, key = sec_key.strip().rpartition(".")
            if not sep or not dot:
                raise ConfigError(f"override '{item}' must look like section.key=value", "--set")
            if not self.cp.has_section(sec):
                self.cp.add_section(sec)
            self.cp.set(sec, key, value.strip())
            self.overridden.add((sec, key))
        for sec in self.cp.sections():
            base = "function" if sec.startswith("function:") else sec
            allowed = FUNCTION_PARAMS if base == "function" else SECTION_KEYS.get(base)
            if allowed is None:
                raise ConfigError(f"unknown section '{sec}'", *self.where(sec))
            for key in self.cp[sec]:
                if key not in allowed:
                    raise ConfigError(f"unknown key '{key}'", *self.where(sec, key))

    def where(self, section, key=None):
        if key is not None and (section, key) in self.overridden:
            return ("--set", None, f"{section}.{key}")
        line = _line_of(self.text, section, key)
        return (self.source, line, f"{section}.{key}" if key else section)

    def has(self, section, key=None):
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None):
        if not self.has(section, key):
            return default
        return self.cp.get(section, key).strip()

    def fail(self, section, key, message):
        raise ConfigError(message, *self.where(section, key))

    def get_int(self, section, key, default, minimum=None):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            value = int(float(raw)) if re.fullmatch(r"[+-]?\d+(\.0*)?([eE]\+?\d+)?", raw) else int(raw)
        except ValueError:
            self.fail(section, key, f"expected an integer, got '{raw}'")
        if minimum is not None and value < minimum:
            self.fail(section, key, f"must be at least {minimum}, got {value}")
        return value

    def get_float(self, section, key, default, lo=None, hi=None, open_lo=False):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            value = float(raw)
        except ValueError:
            self.fail(section, key, f"expected a number, got '{raw}'")
        if not math.isfinite(value):
            self.fail(section, key, "must be finite")
        if lo is not None and (value < lo or (open_lo and value == lo)):
            self.fail(section, key, f"must be {'>' if open_lo else '>='} {lo:g}, got {raw}")
        if hi is not None and value > hi:
            self.fail(section, key, f"must be <= {hi:g}, got {raw}")
        return value

    def get_list(self, section, key, default=()):
        raw = self.raw(section, key)
        if raw is None:
            return tuple(default)
        return tuple(x.strip() for x in raw.split(",") if x.strip())

    def get_floats(self, section, key, default=(), positive=True):
        out = []
        for item in self.get_list(section, key, default):
            try:
                v = float(item)
            except (TypeError, ValueError):
                self.fail(section, key, f"expected numbers, got '{item}'")
            if positive and not v > 0:
                self.fail(section, key, f"values must be positive, got '{item}'")
            out.append(v)
        return tuple(out)


def _partition_times(spec: FunctionSpec, T: float) -> list:
    t = spec.param("t", T)
    if spec.type in ("combination", "product"):
        return [t / 2, t]
    if spec.type == "two_point":
        return [0.0, spec.param("eps", t)]
    if spec.type == "one_point_ricci":
        return [spec.param("eps", t)]
    return [t]


def _is_multiple(t: float, h: float) -> bool:
    k = round(t / h)
    return abs(k * h - t) <= 1e-9 * max(1.0, t)


def _function_spec(rd: _Reader, name: str) -> FunctionSpec:
    sec = f"function:{name}"
    ftype = rd.raw(sec, "type", name)
    if ftype not in FUNCTION_TYPES:
        key = "type" if rd.has(sec, "type") else None
        raise ConfigError(f"unknown function type '{ftype}' (choose from {', '.join(FUNCTION_TYPES)})",
                          *(rd.where(sec, key) if key else rd.where("battery", "functions")))
    params = {}
    for key in ("t", "eps", "sigma", "offset", "scale"):
        if rd.has(sec, key):
            params[key] = rd.get_float(sec, key, None, lo=0.0, open_lo=True)
    checks = rd.get_list(sec, "checks") if rd.has(sec, "checks") else None
    return FunctionSpec(name, ftype, tuple(sorted(params.items())), checks)


def parse_config(text: str, source: str = "<config>", overrides=()) -> ExperimentConfig:
    """Parse and validate an experiment file; raises ConfigError naming line and field."""
    rd = _Reader(text, source, overrides)
    name = rd.raw("experiment", "name", Path(source).stem if source.endswith(".ini") else "experiment")
    seed = rd.get_int("experiment", "seed", 0, minimum=0)

    kind = rd.raw("manifold", "kind", "euclidean")
    if kind not in ("euclidean", "sphere", "hyperbolic"):
        rd.fail("manifold", "kind", f"must be euclidean, sphere or hyperbolic, got '{kind}'")
    dim = rd.get_int("manifold", "dim", 2, minimum=1)
    radius = rd.get_float("manifold", "radius", 1.0, lo=0.0, open_lo=True)
    if kind == "euclidean" and rd.has("manifold", "radius"):
        rd.fail("manifold", "radius", "euclidean space has no radius")

    T = rd.get_float("grid", "T", 1.0, lo=0.0, open_lo=True)
    h = rd.get_float("grid", "h", 1e-3, lo=0.0, hi=T, open_lo=True)

    bvals = {}
    for key, typ in BUDGET_FIELDS.items():
        if key in BUDGET_INT:
            bvals[key] = rd.get_int("budgets", key, getattr(vf.Budgets, key), minimum=1)
        else:
            bvals[key] = rd.get_float("budgets", key, getattr(vf.Budgets, key), lo=0.0, open_lo=True)
    for key in ("inner_paths", "prefix_inner", "root_inner"):
        if bvals[key] < 2:
            rd.fail("budgets", key, f"must be at least 2, got {bvals[key]}")
    if not bvals["fd_step"] < 1:
        rd.fail("budgets", "fd_step", "must lie in (0, 1)")
    if not 0.5 < bvals["level"] < 1:
        rd.fail("budgets", "level", "must lie in (0.5, 1)")
    budgets = vf.Budgets(**bvals).validate()

    specs = []
    for fname in rd.get_list("battery", "functions"):
        specs.append(_function_spec(rd, fname))
    checks = rd.get_list("battery", "checks")
    for tag in checks:
        if tag not in vf.CHECKS or tag.startswith("RICCI"):
            rd.fail("battery", "checks", f"unknown check '{tag}'")
    for spec in specs:
        for tag in spec.checks or ():
            if tag not in vf.CHECKS or tag.startswith("RICCI"):
                rd.fail(f"function:{spec.name}", "checks", f"unknown check '{tag}'")
        if not (spec.checks or checks):
            rd.fail("battery", "checks", f"no checks selected for function '{spec.name}'")
    kappa_raw = rd.get_list("battery", "kappa", ("auto",))
    if kappa_raw == ("auto",):
        kappa = ("auto",)
    else:
        try:
            kappa = tuple(float(k) for k in kappa_raw)
        except ValueError:
            rd.fail("battery", "kappa", f"expected 'auto' or numbers, got '{', '.join(kappa_raw)}'")
        if any(k < 0 or not math.isfinite(k) for k in kappa):
            rd.fail("battery", "kappa", "values must be finite and nonnegative")
    n_checks = rd.get_int("battery", "n_checks", 5, minimum=2)
    method = rd.raw("battery", "method", "auto")
    if method not in ("auto", "nested"):
        rd.fail("battery", "method", f"must be 'auto' or 'nested', got '{method}'")

    identities = None
    if rd.has("identities"):
        id_specs = tuple(_function_spec(rd, n) for n in rd.get_list("identities", "functions"))
        if not id_specs:
            rd.fail("identities", "functions", "at least one function is required")
        identities = IdentityConfig(id_specs, rd.get_int("identities", "paths", 10000, minimum=2),
                                    rd.get_int("identities", "chunk_size", 1000, minimum=1))
        specs_all = list(specs) + list(id_specs)
    else:
        specs_all = list(specs)

    convergence = None
    if rd.has("convergence"):
        fname = rd.raw("convergence", "function")
        if not fname:
            rd.fail("convergence", "function", "a function name is required")
        cspec = _function_spec(rd, fname)
        steps = rd.get_floats("convergence", "steps")
        if len(steps) < 2:
            rd.fail("convergence", "steps", "at least two step sizes are required")
        for s in steps:
            if not all(_is_multiple(t, s) for t in _partition_times(cspec, T)):
                rd.fail("convergence", "steps", f"step {s:g} does not divide the partition times")
        convergence = ConvergenceConfig(cspec, steps,
                                        rd.get_int("convergence", "paths", 10000, minimum=2),
                                        rd.get_float("convergence", "tolerance", 0.3, lo=0.0,
                                                     open_lo=True),
                                        rd.get_int("convergence", "chunk_size", 1000, minimum=1))

    ricci = None
    if rd.has("ricci"):
        routes = rd.get_list("ricci", "routes", vf.RICCI_ROUTES)
        for r in routes:
            if r not in vf.RICCI_ROUTES:
                rd.fail("ricci", "routes", f"unknown route '{r}' (choose from one_point, two_point)")
        eps = rd.get_floats("ricci", "eps", (0.2, 0.1, 0.05))
        if any(b >= a for a, b in zip(eps, eps[1:])):
            rd.fail("ricci", "eps", "values must decrease")
        ricci = RicciConfig(routes, eps, rd.get_int("ricci", "paths", 100000, minimum=2),
                            rd.get_float("ricci", "tolerance", 0.1, lo=0.0, open_lo=True),
                            rd.get_int("ricci", "steps_per_eps", 50, minimum=1),
                            rd.get_int("ricci", "chunk_size", 10000, minimum=1),
                            rd.get_float("ricci", "fd_step", 1e-3, lo=0.0, hi=0.1, open_lo=True))

    for spec in specs_all:
        if spec.type in EUCLIDEAN_ONLY and kind != "euclidean":
            sec = f"function:{spec.name}"
            raise ConfigError(f"function type '{spec.type}' is only available on euclidean space",
                              *rd.where(sec, "type") if rd.has(sec, "type")
                              else rd.where("battery", "functions"))
        for t in _partition_times(spec, T):
            if not _is_multiple(t, h):
                sec = f"function:{spec.name}"
                raise ConfigError(f"partition time {t:g} of '{spec.name}' is not a multiple of "
                                  f"h = {h:g}", *rd.where("grid", "h"))

    if not (specs or identities or convergence or ricci):
        raise ConfigError("nothing to run: add [battery], [identities], [convergence] or [ricci]",
                          source)
    return ExperimentConfig(name=name, kind=kind, dim=dim, radius=radius, T=T, h=h,
                            budgets=budgets, functions=tuple(specs), checks=checks, kappa=kappa,
                            n_checks=n_checks, method=method, identities=identities,
                            convergence=convergence, ricci=ricci, seed=seed, source=source)


def preset_names() -> list:
    files = resources.files("pathlab").joinpath("presets")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(preset_names())})",
                          "--preset")
    return resources.files("pathlab").joinpath("presets", f"{name}.ini").read_text()


def load_preset(name: str, overrides=()) -> ExperimentConfig:
    cfg = parse_config(preset_text(name), f"{name}.ini", overrides)
    return replace(cfg, name=name)


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read configuration: {e.strerror}", str(path)) from None
    return parse_config(text, str(path), overrides)


# ---------------------------------------------------------------------------
# test functions

def build_function(spec: FunctionSpec, m: geo.ManifoldModel, T: float,
                   start: geo.FramePoint) -> cyl.CylinderFunction:
    """Cylinder function of the named type anchored at the start frame."""
    t = spec.param("t", T)
    e1 = start.frame[..., 0]
    e2 = start.frame[..., 1] if m.n > 1 else e1
    center = geo.exp_map(m, start.point, spec.param("offset", 0.3) * e1)
    bump = cyl.GaussianBump(center, spec.param("sigma", 0.7))
    linear = cyl.Linear(e1)
    r_in, r_out = vf.default_cutoff(m)
    name = spec.name
    if spec.type == "linear":
        return cyl.one_point(linear, t, name)
    if spec.type == "quadratic":
        return cyl.one_point(cyl.Quadratic(np.zeros(m.dim)), t, name)
    if spec.type == "exp":
        return cyl.one_point(cyl.ExpLinear(e1, spec.param("scale", 0.5)), t, name)
    if spec.type == "bump":
        return cyl.one_point(bump, t, name)
    if spec.type == "normal_linear":
        return cyl.one_point(cyl.NormalLinear(start.point, e2, r_in, r_out), t, name)
    if spec.type == "combination":
        return cyl.combination([(1.0, bump, t / 2), (1.0, linear, t)], name=name)
    if spec.type == "product":
        return cyl.product(bump, t / 2, linear, t, name=name)
    if spec.type == "two_point":
        F = cyl.two_point_ricci(m, e1, spec.param("eps", t), start.point, r_in, r_out)
        return replace(F, name=name)
    if spec.type == "one_point_ricci":
        F = cyl.one_point_ricci(m, e1, spec.param("eps", t), start.point, r_in, r_out)
        return replace(F, name=name)
    raise ConfigError(f"unknown function type '{spec.type}'")


# ---------------------------------------------------------------------------
# reports and manifest

def _finite(x):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _error_report(tag, m, fname, kappa, exc, params=None) -> vf.EstimateReport:
    nan = float("nan")
    return vf.EstimateReport(tag, m.label, fname, float(kappa), nan, (nan, nan), nan, (nan, nan),
                             nan, (nan, nan), nan, stats.INCONCLUSIVE, 0, 0, dict(params or {}),
                             {}, [f"error: {type(exc).__name__}: {exc}"])


def _martingale_report(tag, m, F, res: mg.MartingaleTestResult, n_paths, h) -> vf.EstimateReport:
    d = res.details
    if tag == "ITO_ISOMETRY":
        lhs, lci, rhs, rci = d["lhs"], tuple(d["lhs_ci"]), d["rhs"], tuple(d["rhs_ci"])
    elif tag == "QUADRATIC_VARIATION":
        lhs, rhs = d["qv_mean"], d["compensator_mean"]
        lci = rci = (float("nan"), float("nan"))
    else:
        lhs, lci, rhs, rci = res.estimate, tuple(res.ci), 0.0, (0.0, 0.0)
    return vf.EstimateReport(tag, m.label, F.name, 0.0, lhs, lci, rhs, rci, res.estimate,
                             tuple(res.ci), res.margin, res.verdict, int(n_paths), 1,
                             {"h": h}, vf._f(d), [])


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    name: str
    started: str
    finished: str = ""
    reports: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    workers: int = 1

    @property
    def worst_verdict(self) -> str:
        return stats.worst(r.verdict for r in self.reports)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.worst_verdict]

    def reports_document(self) -> dict:
        return _finite({"config_hash": self.config_hash,
                        "reports": [r.to_dict() for r in self.reports]})

    def to_dict(self) -> dict:
        return _finite({
            "config_hash": self.config_hash, "code_version": self.code_version,
            "name": self.name, "started": self.started, "finished": self.finished,
            "workers": self.workers, "worst_verdict": self.worst_verdict,
            "exit_code": self.exit_code, "outputs": self.outputs, "config": self.config,
            "reports": [{"key": r.key, "tag": r.tag, "verdict": r.verdict,
                         "runtime": round(float(r.runtime), 3)} for r in self.reports]})


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def summary_table(reports) -> str:
    head = f"{'check':<20} {'function':<18} {'kappa':>6} {'lhs':>11} {'rhs':>11} " \
           f"{'slack':>11} {'slack CI':>25} {'margin':>9}  verdict"
    lines = [head, "-" * len(head)]

    def num(x):
        return "nan" if x is None or not np.isfinite(x) else f"{x:.4g}"

    for r in reports:
        ci = f"[{num(r.slack_ci[0])}, {num(r.slack_ci[1])}]"
        lines.append(f"{r.tag:<20} {r.function[:18]:<18} {r.kappa:>6g} {num(r.lhs):>11} "
                     f"{num(r.rhs):>11} {num(r.slack):>11} {ci:>25} {num(r.margin):>9}  {r.verdict}")
        for flag in r.flags:
            lines.append(f"{'':<20} note: {flag}")
    counts = {v: sum(r.verdict == v for r in reports) for v in (stats.PASS, stats.FAIL,
                                                                  stats.INCONCLUSIVE)}
    lines.append("-" * len(head))
    lines.append(f"{len(reports)} checks: {counts[stats.PASS]} pass, {counts[stats.FAIL]} fail, "
                 f"{counts[stats.INCONCLUSIVE]} inconclusive")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# running

def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    rep = fn(*args, **kw)
    rep.runtime = time.perf_counter() - t0
    return rep


def _kappas(cfg: ExperimentConfig, m) -> list:
    if cfg.kappa == ("auto",):
        return [round(vf.auto_kappa(m), 12)]
    return [float(k) for k in cfg.kappa]


def _run_identities(cfg, m, start, log):
    out = []
    ident = cfg.identities
    for spec in ident.functions:
        F = build_function(spec, m, cfg.T, start)
        grid = TimeGrid.uniform(F.T, cfg.h, include=F.times)
        tag = f"identity/{spec.name}"
        log(f"identities: {spec.name} ({ident.paths} paths)")
        t0 = time.perf_counter()
        try:
            chunks = mg.chunked_ensembles(m, start, grid, cfg.seed, ident.paths, ident.chunk_size,
                                          tag)
            res = mg.identity_suite(F, chunks, level=cfg.budgets.level,
                                    margin_constant=cfg.budgets.margin_constant,
                                    inner_budget=cfg.budgets.inner_paths,
                                    fd_step=cfg.budgets.fd_step, rng=None, method="closed_form")
            pairs = (("ITO_RESIDUAL", "ito_residual"), ("QUADRATIC_VARIATION", "quadratic_variation"),
                     ("ITO_ISOMETRY", "ito_isometry"))
            reps = [_martingale_report(t, m, F, res[k], ident.paths, grid.h) for t, k in pairs]
        except Exception as exc:            # recorded, the run continues
            reps = [_error_report(t, m, spec.name, 0.0, exc) for t in
                    ("ITO_RESIDUAL", "QUADRATIC_VARIATION", "ITO_ISOMETRY")]
        dt = time.perf_counter() - t0
        for r in reps:
            r.runtime = dt / len(reps)
        out.extend(reps)
    return out


def _run_convergence(cfg, m, start, log):
    conv = cfg.convergence
    F = build_function(conv.function, m, cfg.T, start)
    log(f"convergence: {conv.function.name} over h = {', '.join(f'{s:g}' for s in conv.steps)}")
    t0 = time.perf_counter()
    try:
        slope, table = mg.residual_slope(F, m, start, F.T, conv.steps, cfg.seed, conv.paths,
                                         tag=f"convergence/{conv.function.name}",
                                         chunk_size=conv.chunk_size)
    except Exception as exc:
        return _error_report("RESIDUAL_SLOPE", m, F.name, 0.0, exc), []
    dev = abs(slope - 1.0)
    slack = conv.tolerance - dev
    verdict = stats.PASS if dev <= conv.tolerance else stats.FAIL
    rep = vf.EstimateReport("RESIDUAL_SLOPE", m.label, F.name, 0.0, slope, (slope, slope), 1.0,
                            (1.0, 1.0), slack, (slack, slack), conv.tolerance, verdict,
                            conv.paths, 1, {"steps": list(conv.steps)},
                            {"table": [list(r) for r in table]}, [],
                            time.perf_counter() - t0)
    return rep, table


def _run_ricci(cfg, m, log):
    ric = cfg.ricci
    reps, rows = [], []
    for route in ric.routes:
        log(f"ricci: {route} route, eps = {', '.join(f'{e:g}' for e in ric.eps)}, "
            f"{ric.paths} paths per eps")
        t0 = time.perf_counter()
        try:
            est = vf.recover_ricci(m, route, eps_list=ric.eps, n_paths=ric.paths,
                                   steps_per_eps=ric.steps_per_eps, seed=cfg.seed,
                                   chunk_size=ric.chunk_size, workers=cfg.workers,
                                   fd_step=ric.fd_step, tolerance=ric.tolerance)
            rep = est.to_report(ric.tolerance, cfg.budgets.level)
            exact = est.exact if est.exact is not None else float("nan")
            for e, v, s in zip(est.eps, est.estimates, est.stderr):
                rows.append([route, e, v, s, exact, ric.tolerance - abs(v - exact)])
        except Exception as exc:
            tag = "RICCI_ONE_POINT" if route == "one_point" else "RICCI_TWO_POINT"
            rep = _error_report(tag, m, f"ricci-{route}", 0.0, exc)
        rep.runtime = time.perf_counter() - t0
        reps.append(rep)
    return reps, rows


def _run_battery(cfg, m, start, log, dump_dir=None):
    reps = []
    kappas = _kappas(cfg, m)
    for spec in cfg.functions:
        F = build_function(spec, m, cfg.T, start)
        tags = spec.checks or cfg.checks
        study = vf.make_study(m, F, h=cfg.h, n_checks=cfg.n_checks, budgets=cfg.budgets,
                              seed=cfg.seed, start=start, tag=spec.name, method=cfg.method)
        log(f"battery: {spec.name} on {m.label} ({cfg.budgets.outer_paths} outer paths, "
            f"{'closed form' if study.closed_form else 'nested'}; checks {', '.join(tags)})")
        if dump_dir is not None:
            _dump_paths(dump_dir, spec.name, m, start, study.grid, cfg.seed,
                        min(100, cfg.budgets.outer_paths))
        try:
            data = vf.collect(study)
        except Exception as exc:
            for tag in tags:
                for kappa in ([0.0] if tag in KAPPA_FREE else kappas):
                    reps.append(_error_report(tag, m, F.name, kappa, exc))
            continue
        base = {}
        for tag in tags:
            for kappa in ([0.0] if tag in KAPPA_FREE else kappas):
                try:
                    if tag in ("R2", "R3"):
                        if "samples" not in base:
                            base["samples"] = vf.base_point_samples(study)
                        rep = _timed(vf.check_R_base, study, tag, kappa, samples=base["samples"])
                    else:
                        rep = _timed(vf.run_check, tag, data, kappa)
                except Exception as exc:
                    rep = _error_report(tag, m, F.name, kappa, exc)
                reps.append(rep)
    return reps


def _dump_paths(out_dir: Path, name, m, start, grid, seed, count):
    ens = sample_paths(m, start, grid, seed, np.arange(count), tag=name)
    with open(out_dir / f"paths-{name}.bin", "wb") as fh:
        write_path_dump(ens, fh)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def run(config: ExperimentConfig, log=None) -> RunManifest:
    """Execute every configured part; write outputs when ``config.out`` is set."""
    log = log or (lambda msg: None)
    m = config.model()
    start = geo.start_framepoint(m)
    manifest = RunManifest(config.config_hash, code_version(), config.name, _now(),
                           config=_finite(config.canonical()), workers=config.workers)
    out_dir = Path(config.out) if config.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dump_dir = out_dir if (out_dir is not None and config.dump_paths) else None

    ricci_rows, conv_rows = [], []
    if config.identities is not None:
        manifest.reports.extend(_run_identities(config, m, start, log))
    if config.convergence is not None:
        rep, conv_rows = _run_convergence(config, m, start, log)
        manifest.reports.append(rep)
    if config.functions:
        manifest.reports.extend(_run_battery(config, m, start, log, dump_dir))
    if config.ricci is not None:
        reps, ricci_rows = _run_ricci(config, m, log)
        manifest.reports.extend(reps)
    keys = [r.key for r in manifest.reports]
    if len(set(keys)) != len(keys):
        raise RuntimeError("duplicate check keys in one run")
    manifest.finished = _now()

    if out_dir is not None:
        files = {"reports": "reports.json", "summary": "summary.txt", "manifest": "manifest.json"}
        if ricci_rows:
            files["ricci_slack"] = "ricci_slack_vs_eps.csv"
            _write_csv(out_dir / files["ricci_slack"],
                       ["route", "eps", "estimate", "stderr", "exact", "slack"], ricci_rows)
        if conv_rows:
            files["convergence"] = "residual_sq_vs_h.csv"
            _write_csv(out_dir / files["convergence"], ["h", "mean_sq_residual", "stderr"],
                       conv_rows)
        if dump_dir is not None:
            files["path_dumps"] = sorted(p.name for p in out_dir.glob("paths-*.bin"))
        manifest.outputs = files
        write_reports(manifest, out_dir / files["reports"])
        (out_dir / files["summary"]).write_text(summary_table(manifest.reports))
        (out_dir / files["manifest"]).write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def write_reports(manifest: RunManifest, path) -> None:
    text = json.dumps(manifest.reports_document(), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# comparing runs

def _load_reports(x) -> dict:
    if isinstance(x, RunManifest):
        doc = x.reports_document()
    elif isinstance(x, dict):
        doc = x
    else:
        p = Path(x)
        if p.is_dir():
            p = p / "reports.json"
        doc = json.loads(p.read_text())
    return {r["key"]: r for r in doc["reports"]}


def _width(ci):
    if ci is None or ci[0] is None or ci[1] is None:
        return float("nan")
    return float(ci[1]) - float(ci[0])


def report_diff(a, b) -> str:
    """Per-check deltas in slack, CI width and verdict between two runs.

    ``a`` and ``b`` are RunManifests, report documents, reports.json files or run
    directories.  Checks are matched by key; disjoint sets give an empty diff
    and a warning.
    """
    ra, rb = _load_reports(a), _load_reports(b)
    common = [k for k in ra if k in rb]
    if not common:
        warnings.warn("the two runs share no checks; nothing to compare")
        return ""

    def num(x):
        return "nan" if x is None or not np.isfinite(x) else f"{x:.4g}"

    head = f"{'check':<48} {'slack a':>11} {'slack b':>11} {'delta':>11} {'CI ratio':>9}  verdict"
    lines = [head, "-" * len(head)]
    for k in common:
        x, y = ra[k], rb[k]
        sa = x["slack"] if x["slack"] is not None else float("nan")
        sb = y["slack"] if y["slack"] is not None else float("nan")
        wa, wb = _width(x["slack_ci"]), _width(y["slack_ci"])
        ratio = wb / wa if wa and np.isfinite(wa) and wa > 0 else float("nan")
        verdict = x["verdict"] if x["verdict"] == y["verdict"] else f"{x['verdict']} -> {y['verdict']}"
        lines.append(f"{k[:48]:<48} {num(sa):>11} {num(sb):>11} {num(sb - sa):>11} "
                     f"{num(ratio):>9}  {verdict}")
    only_a = [k for k in ra if k not in rb]
    only_b = [k for k in rb if k not in ra]
    if only_a or only_b:
        lines.append(f"({len(only_a)} checks only in a, {len(only_b)} only in b)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# command line

def _env(name, environ):
    v = environ.get(ENV_PREFIX + name)
    return v if v not in (None, "") else None


def _truthy(v) -> bool:
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def resolve_config(args, environ=None) -> ExperimentConfig:
    """Config from flags, then PATHLAB_* environment variables, then the file."""
    environ = os.environ if environ is None else environ
    config_path = args.config or _env("CONFIG", environ)
    preset = args.preset or _env("PRESET", environ)
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both", "command line")
    if args.config or (config_path and not args.preset):
        cfg = load_config(config_path, args.set or ())
    elif preset:
        cfg = load_preset(preset, args.set or ())
    else:
        raise ConfigError("no experiment given: use --config PATH or --preset NAME", "command line")

    def pick(flag, env_name, conv):
        if flag is not None:
            return flag
        raw = _env(env_name, environ)
        if raw is None:
            return None
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"invalid value '{raw}'", f"environment {ENV_PREFIX}{env_name}") from None

    seed = pick(args.seed, "SEED", int)
    workers = pick(args.workers, "WORKERS", int)
    out = pick(args.out, "OUT", str)
    dump = True if args.dump_paths else pick(None, "DUMP_PATHS", _truthy)
    if seed is not None and seed < 0:
        raise ConfigError("seed must be nonnegative", "command line")
    if workers is not None and workers < 1:
        raise ConfigError("workers must be at least 1", "command line")
    cfg = cfg.with_execution(workers=workers, out=out, dump_paths=dump, seed=seed)
    if cfg.out is None:
        cfg = replace(cfg, out=str(Path("runs") / cfg.name))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathlab", description="Monte Carlo checks of path-space "
                                "gradient estimates on model manifolds.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment (preset or config file)")
    r.add_argument("--config", metavar="PATH", help="INI experiment file")
    r.add_argument("--preset", metavar="NAME", help="bundled experiment (see list-presets)")
    r.add_argument("--seed", type=int, metavar="N")
    r.add_argument("--workers", type=int, metavar="N", help="worker processes")
    r.add_argument("--out", metavar="DIR", help="output directory (default runs/<name>)")
    r.add_argument("--dump-paths", action="store_true", help="write binary dumps of sample paths")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a configuration entry (repeatable)")
    r.add_argument("--quiet", action="store_true", help="do not print progress and summary")
    d = sub.add_parser("diff", help="compare two runs")
    d.add_argument("a", help="run directory or reports.json")
    d.add_argument("b", help="run directory or reports.json")
    sub.add_parser("list-presets", help="list bundled experiments")
    c = sub.add_parser("describe-check", help="describe a check tag ('all' lists every tag)")
    c.add_argument("tag")
    return p


def all_checks() -> dict:
    out = dict(vf.CHECKS)
    out.update(IDENTITY_CHECKS)
    return out


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "list-presets":
        for name in preset_names():
            first = preset_text(name).splitlines()[0].lstrip("# ").strip()
            print(f"{name:<20} {first}")
        return 0
    if args.verb == "describe-check":
        checks = all_checks()
        tag = args.tag.upper()
        if tag == "ALL":
            for k, v in checks.items():
                print(f"{k:<20} {v}")
            return 0
        if tag not in checks:
            print(f"unknown check '{args.tag}'; known: {', '.join(checks)}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        print(f"{tag}: {checks[tag]}")
        return 0
    if args.verb == "diff":
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                text = report_diff(args.a, args.b)
        except (OSError, ValueError, KeyError) as e:
            print(f"cannot compare runs: {e}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        sys.stdout.write(text)
        return 0
    try:
        cfg = resolve_config(args, environ)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    manifest = run(cfg, log)
    if not args.quiet:
        sys.stdout.write(summary_table(manifest.reports))
        print(f"config {manifest.config_hash}; outputs in {cfg.out}; worst verdict: "
              f"{manifest.worst_verdict}")
    return manifest.exit_code


if __name__ == "__main__":          # pragma: no cover
    sys.exit(main())
