"""INI run configurations with explicit units.

Every physical quantity must carry a unit suffix (``431 um``, ``1 s``,
``15 pW``); bare numbers are accepted only for dimensionless entries. Unknown
sections or keys are errors, so typos never silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# Decimal prefixes are stored as powers of ten so "431 um" parses to the same
# double as the literal 431e-6; other factors are plain multipliers.
UNITS = {
    "length": {"m": 0, "cm": -2, "mm": -3, "um": -6, "µm": -6, "nm": -9, "pm": -12},
    "time": {"s": 0, "ms": -3, "us": -6, "µs": -6, "ns": -9},
    "power": {"W": 0, "mW": -3, "uW": -6, "µW": -6, "nW": -9, "pW": -12, "fW": -15},
    "angle": {"rad": 0, "mrad": -3, "deg": math.pi / 180.0, "pi": math.pi},
    "rate": {"/s": 0, "Hz": 0, "kHz": 3, "MHz": 6},
    "aperture": {"m^-1/2": 0, "mm^-1/2": 1.0 / math.sqrt(1e-3)},
}

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


def parse_quantity(text: str, kind: str, key: str = "value") -> float:
    """Parse ``"<number> <unit>"`` into SI for a dimension in :data:`UNITS`."""
    match = _NUMBER.match(text)
    if not match:
        raise ConfigError(f"{key}: cannot parse {text!r} as a number with unit")
    literal, unit = match.group(1), match.group(2)
    number = float(literal)
    if kind == "dimensionless":
        if unit:
            raise ConfigError(f"{key}: dimensionless value must not carry a unit, got {text!r}")
        return number
    table = UNITS[kind]
    if not unit:
        raise ConfigError(f"{key}: {kind} value {text!r} needs a unit ({', '.join(table)})")
    if unit not in table:
        raise ConfigError(f"{key}: unknown {kind} unit {unit!r} (expected one of {', '.join(table)})")
    factor = table[unit]
    if isinstance(factor, int):
        mantissa, _, exponent = literal.lower().partition("e")
        return float(f"{mantissa}e{int(exponent or 0) + factor}")
    return number * factor


def parse_list(text: str, kind: str, key: str = "value") -> list[float]:
    """Comma-separated quantities; a unit on the last entry applies to unit-less ones."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError(f"{key}: empty list")
    trailing = _NUMBER.match(items[-1])
    unit = trailing.group(2) if trailing else ""
    out = []
    for item in items:
        m = _NUMBER.match(item)
        if m and not m.group(2) and unit:
            item = f"{item} {unit}"
        out.append(parse_quantity(item, kind, key))
    return out


@dataclass(frozen=True)
class Key:
    kind: str
    default: object = None
    choices: tuple[str, ...] = ()


def _k(kind, default=None, choices=()):
    return Key(kind, default, tuple(choices))


SETUP_FIELDS = ("lambda_p", "lambda_s", "lambda_i", "n_s", "n_i", "crystal_length", "pump_waist", "magnification",
                "na_components")

SCHEMA: dict[str, dict[str, Key]] = {
    "setup": {
        "preset": _k("choice", None, ("flagship",)),
        "lambda_p": _k("length"),
        "lambda_s": _k("length"),
        "lambda_i": _k("length"),
        "n_s": _k("dimensionless"),
        "n_i": _k("dimensionless"),
        "crystal_length": _k("length"),
        "pump_waist": _k("length"),
        "magnification": _k("dimensionless"),
        "na_components": _k("dimensionless"),
    },
    "uncertainty": {
        "lambda_p": _k("length"),
        "lambda_i": _k("length"),
        "n_s": _k("dimensionless"),
        "n_i": _k("dimensionless"),
        "crystal_length": _k("length"),
        "pump_waist": _k("length"),
        "magnification": _k("dimensionless"),
    },
    "plan": {
        "phase_steps": _k("angle_list"),
        "phase_step_count": _k("int", 6),
        "frames_per_step": _k("int", 6),
        "exposure": _k("time", 1.0),
        "photon_rate_peak": _k("rate"),
        "idler_power": _k("power"),
        "detected_fraction": _k("dimensionless", 1.0),
        "system_visibility": _k("dimensionless", 0.8),
        "coherence_fwhm_phase": _k("angle"),
        "read_noise_rms": _k("dimensionless"),
        "seed": _k("int", 0),
        "double_pass": _k("bool", True),
        "shot_noise": _k("bool", True),
    },
    "sample": {
        "kind": _k("choice", "empty", ("empty", "uniform", "knife_edge", "bars", "phase_disk", "texture", "file")),
        "width": _k("int", 256),
        "height": _k("int", 256),
        "pixel_pitch": _k("length", 1e-6),
        "edge_position": _k("length"),
        "orientation": _k("choice", "x", ("x", "y")),
        "bar_period": _k("length"),
        "duty": _k("dimensionless", 0.5),
        "radius": _k("length"),
        "phase_shift": _k("angle", math.pi),
        "transmission": _k("dimensionless", 1.0),
        "feature_size": _k("length"),
        "texture_seed": _k("int", 0),
        "amplitude_min": _k("dimensionless", 0.2),
        "path": _k("path"),
        "crop_x": _k("int"),
        "crop_y": _k("int"),
        "crop_width": _k("int"),
        "crop_height": _k("int"),
    },
    "reconstruct": {
        "stack": _k("path"),
        "reference": _k("path"),
        "averaging": _k("bool", True),
        "mean_floor": _k("dimensionless", 5.0),
        "visibility_floor": _k("dimensionless", 0.02),
        "method": _k("choice", "fit", ("fit", "extrema")),
        "phase_offset": _k("choice", "known", ("known", "fit")),
        "export_pgm": _k("bool", False),
    },
    "characterize": {
        "maps": _k("path"),
        "stack": _k("path"),
        "reference": _k("path"),
        "fit": _k("choice", "both", ("both", "edge", "fov", "none")),
        "edge_map": _k("choice", "visibility", ("visibility", "transmission")),
        "edge_average": _k("choice", "complex", ("complex", "magnitude")),
        "edge_axis": _k("choice", "x", ("x", "y")),
        "fov_axis": _k("choice", "x", ("x", "y")),
        "band": _k("int", 10),
    },
    "measured": {
        "fov_fwhm": _k("length"),
        "fov_fwhm_sigma": _k("length"),
        "resolution_fwhm": _k("length"),
        "resolution_fwhm_sigma": _k("length"),
        "modes_per_axis": _k("dimensionless"),
        "modes_per_axis_sigma": _k("dimensionless"),
    },
    "theory": {
        "fov_fwhm": _k("length"),
        "resolution_fwhm": _k("length"),
        "modes_per_axis": _k("dimensionless"),
    },
    "theory_sigma": {
        "fov_fwhm": _k("length"),
        "resolution_fwhm": _k("length"),
        "modes_per_axis": _k("dimensionless"),
    },
    "stitch": {
        "tiles": _k("path"),
        "selection": _k("choice", "transmission", ("transmission", "visibility", "mean", "phase")),
        "weight_floor": _k("dimensionless", 0.05),
        "refine": _k("bool", False),
        "search": _k("int", 5),
        "min_peak": _k("dimensionless", 0.2),
        "export_pgm": _k("bool", False),
    },
    "sweep": {
        "lambda_i_min": _k("length"),
        "lambda_i_max": _k("length"),
        "samples": _k("int", 200),
        "apertures": _k("aperture_list"),
        "lambda_p": _k("length", 660e-9),
        "n": _k("dimensionless", 1.5),
        "n_i": _k("dimensionless"),
        "pump_waist": _k("length", 1e-3),
        "paraxial_threshold": _k("angle", 0.2),
        "squared": _k("bool", False),
        "spacing": _k("choice", "linear", ("linear", "log")),
    },
    "output": {
        "directory": _k("path"),
    },
}


def _convert(raw: str, key: Key, name: str, base: Path):
    raw = raw.strip()
    if key.kind in UNITS or key.kind == "dimensionless":
        return parse_quantity(raw, key.kind, name)
    if key.kind == "angle_list":
        return parse_list(raw, "angle", name)
    if key.kind == "aperture_list":
        return parse_list(raw, "aperture", name)
    if key.kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if key.kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {raw!r}")
    if key.kind == "choice":
        if raw not in key.choices:
            raise ConfigError(f"{name}: {raw!r} is not one of {', '.join(key.choices)}")
        return raw
    if key.kind == "path":
        path = Path(raw).expanduser()
        return path if path.is_absolute() else (base / path).resolve()
    raise AssertionError(key.kind)


@dataclass
class RunConfig:
    """Parsed configuration: explicitly given values in SI units, per section."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: Path | None = None

    def has(self, section: str) -> bool:
        return section in self.values

    def get(self, section: str, key: str, default=None):
        """Value from the file, else the schema default, else ``default``."""
        given = self.values.get(section, {})
        if key in given:
            return given[key]
        schema_default = SCHEMA[section][key].default
        return default if schema_default is None else schema_default

    def given(self, section: str, key: str) -> bool:
        return key in self.values.get(section, {})

    def section(self, name: str) -> dict[str, object]:
        return dict(self.values.get(name, {}))

    def resolved_text(self) -> str:
        """Deterministic dump of every explicit value in SI (paths as given)."""
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, float):
                    text = repr(value)
                elif isinstance(value, list):
                    text = ", ".join(repr(v) for v in value)
                elif isinstance(value, bool):
                    text = "true" if value else "false"
                else:
                    text = str(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, base: Path | None = None, source: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    base = base or Path.cwd()
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] (known: {', '.join(SCHEMA)})")
        schema = SCHEMA[section]
        out = {}
        for key, raw in parser[section].items():
            if key not in schema:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            out[key] = _convert(raw, schema[key], f"[{section}] {key}", base)
        values[section] = out
    return RunConfig(values, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base=path.parent.resolve(), source=path)
