"""Nondimensional parameters, physical inputs and run configuration files.

The coupled problem depends on three numbers:

* ``lam``        Reynolds number V L / nu
* ``omega_n_sq`` spring stiffness L^2 l / (M nu)
* ``varpi``      density ratio rho L^3 / M

Configuration files are plain ``key = value`` lines grouped in ``[section]``
blocks.  Every key must be declared in a schema; anything else is rejected.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Callable, Mapping


class ValidationError(ValueError):
    """Bad user input: parameters, configuration or mesh geometry."""


class SolverError(RuntimeError):
    """A numerical solve failed.  ``residual`` holds the last residual if known."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class PhysicalInputs:
    stream_speed: float
    body_diameter: float
    kinematic_viscosity: float
    spring_constant: float
    body_mass: float
    fluid_density: float

    def check(self) -> None:
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and math.isfinite(value)) or value <= 0:
                raise ValidationError(f"{name} must be positive (got {value!r})")


@dataclass(frozen=True)
class Params:
    lam: float
    omega_n_sq: float
    varpi: float
    dim: int = 2

    def replace(self, **changes) -> "Params":
        data = asdict(self)
        data.update(changes)
        return Params(**data)

    @property
    def spring(self) -> float:
        """omega_n^2 / varpi, the stiffness seen by the body row of the coupled system."""
        return self.omega_n_sq / self.varpi


def nondimensionalize(p: PhysicalInputs) -> Params:
    p.check()
    V, L, nu = p.stream_speed, p.body_diameter, p.kinematic_viscosity
    return Params(
        lam=V * L / nu,
        omega_n_sq=L * L * p.spring_constant / (p.body_mass * nu),
        varpi=p.fluid_density * L ** 3 / p.body_mass,
    )


def validate(params: Params, allow_zero_varpi: bool = False) -> None:
    """Raise ValidationError listing every violated invariant."""
    problems = []
    for name in ("lam", "omega_n_sq", "varpi"):
        v = getattr(params, name)
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            problems.append(f"{name} must be a finite number")
    if not problems:
        if params.lam < 0:
            problems.append("lambda must be nonnegative")
        if params.omega_n_sq <= 0:
            problems.append("omega_n_sq must be positive")
        if params.varpi < 0:
            problems.append("varpi must be nonnegative")
        elif params.varpi == 0 and not allow_zero_varpi:
            problems.append("varpi must be positive (zero is only meaningful for the resonance scan)")
    if params.dim not in (2, 3):
        problems.append("dim must be 2 or 3")
    if problems:
        raise ValidationError("; ".join(problems))


# ---------------------------------------------------------------------------
# key = value configuration files

def _as_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _as_floats(text: str) -> tuple:
    parts = [s for s in text.replace(",", " ").split() if s]
    return tuple(float(s) for s in parts)


def _as_ints(text: str) -> tuple:
    parts = [s for s in text.replace(",", " ").split() if s]
    return tuple(int(s) for s in parts)


CONVERTERS: dict[str, Callable[[str], Any]] = {
    "float": float,
    "int": int,
    "str": lambda s: s.strip(),
    "bool": _as_bool,
    "floats": _as_floats,
    "ints": _as_ints,
}


def parse_config_text(text: str, schema: Mapping[str, Mapping[str, tuple]],
                      source: str = "<string>") -> dict:
    """Parse ``[section]`` / ``key = value`` text against a schema.

    ``schema[section][key] = (type_name, default)``.  Missing keys take the
    default; unknown sections or keys raise ValidationError.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: malformed configuration: {exc}") from None
    out: dict = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in schema.items()}
    for sec in cp.sections():
        if sec not in schema:
            raise ValidationError(f"{source}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in schema[sec]:
                raise ValidationError(f"{source}: unknown key '{key}' in [{sec}]")
            kind = schema[sec][key][0]
            try:
                out[sec][key] = CONVERTERS[kind](raw)
            except ValueError as exc:
                raise ValidationError(f"{source}: [{sec}] {key}: {exc}") from None
    return out


def read_config(path: str | Path, schema) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), schema, source=str(p))


def format_config(values: Mapping[str, Mapping[str, Any]]) -> str:
    """Inverse of parse_config_text (up to comments); sections and keys sorted."""
    lines = []
    for sec in sorted(values):
        lines.append(f"[{sec}]")
        for key in sorted(values[sec]):
            v = values[sec][key]
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, (tuple, list)):
                s = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{key} = {s}")
        lines.append("")
    return "\n".join(lines)
