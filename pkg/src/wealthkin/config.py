"""INI run configuration with a typed schema and line-numbered diagnostics.

Every key has a default, so an empty file is a valid configuration.  See
``configs/`` in the repository for one annotated example per experiment and
``describe_schema()`` for the full key list.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from .core import (FrequencyLaw, InteractionKernel, ModelParams, VelocityField, WealthGrid, XGrid,
                   build_grid, even_polynomial, quadratic_potential, tabulated_even)
from .errors import ConfigError

EXPERIMENTS = ("equilibrium", "kinetic-homogeneous", "kinetic-inhomogeneous", "particles",
               "hydro", "invariants", "epsilon-sweep", "micro-meso-compare")


def _floats(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(v) for v in re.split(r"[,\s]+", text) if v)


def _rows(text: str) -> tuple:
    """Rows separated by ';', entries by commas or spaces."""
    return tuple(_floats(r) for r in text.split(";") if r.strip())


def _choice(*options) -> Callable[[str], str]:
    def conv(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {v!r}")
        return v
    conv.__name__ = "choice"
    return conv


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    try:
        return int(text.strip(), 0)
    except ValueError:
        pass
    # integral floats such as 1e4 (exact only below 2**53)
    v = float(text)
    if not math.isfinite(v) or v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


# section -> key -> (converter, default, help)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, Any, str]]] = {
    "experiment": {
        "kind": (_choice(*EXPERIMENTS), "equilibrium", "which experiment to run"),
    },
    "model": {
        "kappa": (float, 2.0, "trading-frequency constant kappa >= 0"),
        "d": (float, 1.0, "volatility parameter d > 0"),
        "epsilon": (float, 1.0, "scale-separation parameter"),
        "potential": (_choice("quadratic", "even-polynomial", "tabulated-even"), "quadratic",
                      "trading potential kind"),
        "potential_coeffs": (_floats, (), "c_k of s^(2k) for even-polynomial"),
        "potential_s": (_floats, (), "sample points s >= 0 for tabulated-even"),
        "potential_values": (_floats, (), "phi(s) samples for tabulated-even"),
        "kernel": (_choice("global", "gaussian", "top-hat"), "global", "interaction kernel"),
        "kernel_width": (float, 1.0, "kernel width"),
        "frequency": (_choice("constant", "power"), "constant", "trading-frequency law"),
        "xi0": (float, 1.0, "prefactor of the power law"),
        "xi_exponent": (float, 0.0, "exponent of the power law"),
        "velocity": (_choice("constant", "linear", "tabulated"), "constant", "velocity field kind"),
        "velocity_v0": (float, 0.0, "constant velocity"),
        "velocity_a": (_floats, (1.0,), "a(x) values of V = a(x) y"),
        "velocity_breakpoints": (_floats, (), "x breakpoints between the a(x) pieces"),
        "velocity_x": (_floats, (), "x nodes of a tabulated velocity"),
        "velocity_y": (_floats, (), "y nodes of a tabulated velocity"),
        "velocity_table": (_rows, (), "tabulated V, one row per x node, rows separated by ';'"),
    },
    "grid": {
        "y_min": (float, 1e-3, "lower wealth truncation"),
        "y_max": (float, 200.0, "upper wealth truncation"),
        "G": (_int, 1024, "wealth node count"),
        "spacing": (_choice("log", "uniform"), "log", "wealth node spacing"),
        "x_min": (float, 0.0, "left end of configuration space"),
        "x_max": (float, 1.0, "right end of configuration space"),
        "x_cells": (_int, 200, "configuration cells"),
        "x_bc": (_choice("periodic", "outflow"), "periodic", "configuration boundary condition"),
    },
    "numerics": {
        "dt": (float, 0.005, "time step (hydro: upper bound on the CFL step)"),
        "t_end": (float, 50.0, "final time"),
        "tol": (float, 1e-10, "fixed-point L1 tolerance"),
        "max_iter": (_int, 10000, "fixed-point iteration cap"),
        "damping": (float, 0.5, "fixed-point damping theta"),
        "scheme": (_choice("semi-implicit", "explicit-euler"), "semi-implicit", "homogeneous stepper"),
        "face_mean": (_choice("sg", "geometric"), "sg", "collision face average"),
        "cfl": (float, 0.45, "hydro CFL number"),
        "seed": (_int, 20240611, "random seed"),
        "record_every": (_int, 0, "snapshot stride in steps (0: only the final state)"),
    },
    "initial": {
        "y_law": (_choice("lognormal", "inverse-gamma", "constant", "uniform"), "lognormal",
                  "initial wealth law"),
        "y_mean": (float, 1.0, "mean of the initial wealth law"),
        "y_sigma": (float, 0.5, "log-standard deviation (lognormal) or spread (uniform)"),
        "x_law": (_choice("constant", "uniform", "normal"), "uniform", "initial position law"),
        "x_a": (float, 0.0, "first parameter of the position law"),
        "x_b": (float, 1.0, "second parameter of the position law"),
        "N": (_int, 10000, "number of agents"),
        "profile": (_choice("uniform", "sine", "riemann", "bump"), "sine",
                    "initial (rho, Upsilon) profile in x"),
        "rho0": (float, 1.0, "background density"),
        "rho_amp": (float, 0.2, "density perturbation amplitude"),
        "ups0": (float, 1.0, "background mean wealth"),
        "ups_amp": (float, 0.0, "mean-wealth perturbation amplitude"),
        "rho_right": (float, 0.5, "right density of a Riemann profile"),
        "ups_right": (float, 1.0, "right mean wealth of a Riemann profile"),
        "wavenumber": (_int, 1, "periods of the sine profile across the domain"),
    },
    "sweep": {
        "epsilons": (_floats, (0.1, 0.05, 0.025), "epsilon values"),
        "t_end": (float, 0.5, "final time of every sweep run"),
        "dt": (float, 2e-4, "kinetic time step of the sweep runs"),
        "hydro_flux": (_choice("kinetic", "rusanov"), "kinetic",
                       "flux of the hydro reference (kinetic: same discretization as the kinetic transport)"),
    },
    "compare": {
        "kinetic_dt": (float, 0.01, "time step of the matched kinetic run"),
    },
    "invariants": {
        "Y": (float, 1.0, "mean wealth of the collision-invariant problem"),
        "y_min": (float, 1e-2, "lower end of the wealth grid used here (M must not underflow)"),
        "y_max": (float, 1e4, "upper end of the wealth grid used here"),
        "G": (_int, 1024, "wealth node count used here"),
    },
    "output": {
        "dir": (str, "out", "output directory"),
        "stride": (_int, 1000, "trajectory export stride in steps"),
        "agent_stride": (_int, 100, "trajectory export stride in agents"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    params: ModelParams
    values: Dict[str, Dict[str, Any]]
    source: Optional[str] = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def y_grid(self) -> WealthGrid:
        g = self.values["grid"]
        return build_grid(g["y_min"], g["y_max"], g["G"], g["spacing"])

    @property
    def x_grid(self) -> XGrid:
        g = self.values["grid"]
        return XGrid(g["x_min"], g["x_max"], g["x_cells"], g["x_bc"])

    @property
    def numerics(self) -> Dict[str, Any]:
        return self.values["numerics"]

    @property
    def initial(self) -> Dict[str, Any]:
        return self.values["initial"]

    def resolved(self) -> Dict[str, Dict[str, Any]]:
        return {s: dict(v) for s, v in self.values.items()}

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        raw = {s: {k: _unparse(v) for k, v in sec.items()} for s, sec in self.values.items()}
        for item in overrides:
            _apply_override(raw, item)
        return _build({s: {k: (v, None) for k, v in sec.items()} for s, sec in raw.items()}, self.source)


def _unparse(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(", ".join(repr(x) for x in r) for r in v)
        return ", ".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = n
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = n
    return lines


def _apply_override(raw: Dict[str, Dict[str, str]], item: str):
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    lhs, value = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"override {item!r}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"override {item!r}: unknown key {key!r} in [{section}]")
    raw.setdefault(section, {})[key] = value.strip()


def _build(raw: Dict[str, Dict[str, Tuple[str, Optional[int]]]], source: Optional[str]) -> RunConfig:
    values: Dict[str, Dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        given = raw.get(section, {})
        for key, (conv, default, _) in keys.items():
            if key in given:
                text, line = given[key]
                try:
                    values[section][key] = conv(text)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}", line=line) from None
            else:
                values[section][key] = default
    params = _params_from(values, raw)
    return RunConfig(values["experiment"]["kind"], params, values, source)


def _params_from(values, raw) -> ModelParams:
    m = values["model"]

    def line_of(key):
        return raw.get("model", {}).get(key, (None, None))[1]

    try:
        if m["potential"] == "quadratic":
            phi = quadratic_potential()
        elif m["potential"] == "even-polynomial":
            phi = even_polynomial(m["potential_coeffs"])
        else:
            phi = tabulated_even(m["potential_s"], m["potential_values"])
    except ConfigError as exc:
        raise ConfigError(f"[model] potential: {exc}", line=line_of("potential")) from None
    try:
        psi = InteractionKernel(m["kernel"], m["kernel_width"])
        xi = FrequencyLaw(m["frequency"], m["xi0"], m["xi_exponent"])
        if m["velocity"] == "constant":
            vel = VelocityField("constant", v0=m["velocity_v0"])
        elif m["velocity"] == "linear":
            vel = VelocityField("linear", a=m["velocity_a"], breakpoints=m["velocity_breakpoints"])
        else:
            vel = VelocityField("tabulated", x_nodes=m["velocity_x"], y_nodes=m["velocity_y"],
                                table=m["velocity_table"])
    except ConfigError as exc:
        raise ConfigError(f"[model] {exc}") from None
    for key in ("kappa", "d", "epsilon"):
        try:
            ModelParams(**{"kappa": 1.0, "d": 1.0, "epsilon": 1.0, key: m[key]})
        except ConfigError as exc:
            raise ConfigError(f"[model] {key}: {exc}", line=line_of(key)) from None
    try:
        return ModelParams(kappa=m["kappa"], d=m["d"], phi=phi, psi=psi, xi=xi, velocity=vel,
                           epsilon=m["epsilon"])
    except ConfigError as exc:
        raise ConfigError(f"[model] {exc}", line=line_of("d")) from None


def parse_config(text: str, source: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse INI text into a RunConfig; unknown sections and keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"parse error: {msg}", line=line) from None
    lines = _key_lines(text)
    raw: Dict[str, Dict[str, Tuple[str, Optional[int]]]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((section, "")))
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line=lines.get((section, key)))
            raw.setdefault(section, {})[key] = (value, lines.get((section, key)))
    for item in overrides:
        flat = {s: {k: v for k, (v, _) in sec.items()} for s, sec in raw.items()}
        _apply_override(flat, item)
        lhs = item.split("=", 1)[0].strip()
        section, key = lhs.split(".", 1)
        raw.setdefault(section, {})[key] = (flat[section][key], None)
    return _build(raw, source)


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p), overrides)


def default_config(experiment: str = "equilibrium", overrides: Iterable[str] = ()) -> RunConfig:
    return parse_config(f"[experiment]\nkind = {experiment}\n", None, overrides)


def describe_schema() -> str:
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (_, default, help_) in keys.items():
            out.append(f"  {key} = {_unparse(default)}    # {help_}")
    return "\n".join(out)
