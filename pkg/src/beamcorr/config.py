"""Experiment configuration: a flat, line-based ``key = value`` format.

Keys are dotted and carry their unit as a suffix (``beam.temp_c``,
``det.dead_time_ns``). Values are converted to SI units and angular
frequencies on load. Lines starting with ``#`` are comments; ``#:`` lines are
kept as the run recipe and copied into simulation manifests.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .detection import DetectorParameters, FiberLayout
from .errors import BeamcorrError, ValidationError
from .mcwf import EngineOptions
from .physics import (
    ATOMIC_MASS_UNIT,
    BeamParameters,
    GeometryParameters,
    OpticalParameters,
    SelectionParameters,
    flux_for_mean_atom_number,
)

ZERO_CELSIUS = 273.15
TWO_PI_MHZ = 2 * math.pi * 1e6


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    doc: str
    choices: tuple = ()


# fmt: off
SCHEMA = {
    "beam.temp_c": Key(float, 78.0, "oven temperature, degrees Celsius"),
    "beam.mass_amu": Key(float, 86.909180527, "atomic mass, u"),
    "beam.flux_hz": Key(float, None, "atom flux through the detection region, atoms/s (exclusive with beam.mean_n)"),
    "beam.mean_n": Key(float, None, "mean atom number in the reference region, sets the flux (default 0.138)"),
    "beam.transverse_spread_mps": Key(float, 4.0, "transverse velocity half-width, m/s"),
    "optics.gamma_mhz": Key(float, 6.0666, "natural linewidth Gamma/2pi, MHz"),
    "optics.rabi_mean_gamma": Key(float, 6.0, "mean Rabi frequency, units of Gamma"),
    "optics.rabi_sigma_gamma": Key(float, 1.5, "Rabi frequency spread, units of Gamma"),
    "optics.wavelength_nm": Key(float, 780.241, "probe wavelength, nm"),
    "optics.waist_um": Key(float, 60.0, "probe beam waist radius w, um"),
    "geom.fov_um": Key(float, 25.0, "single-fiber field-of-view length L, um"),
    "geom.fiber_fov_um": Key(float, 25.0, "dual-fiber window diameter d_f, um"),
    "geom.fiber_separation_um": Key(float, 55.0, "dual-fiber window separation d, um"),
    "geom.n_region": Key(str, "d_f", "window defining beam.mean_n in dual mode", ("d_f", "L")),
    "sel.detuning_mhz": Key(float, None, "repump detuning Delta/2pi, MHz (<= 0); enables velocity selection"),
    "sel.angle_deg": Key(float, 47.0, "repump angle to the atomic beam, degrees"),
    "sel.linewidth_mhz": Key(float, 6.0, "selection Lorentzian HWHM /2pi, MHz"),
    "sel.repump": Key(bool, True, "repump on; off leaves only escaped atoms bright"),
    "det.ceff": Key(float, 1.0, "collection efficiency times quantum efficiency"),
    "det.dead_time_ns": Key(float, 45.0, "non-paralyzable dead time, ns"),
    "det.jitter_ps": Key(float, 350.0, "Gaussian timing jitter sigma, ps"),
    "det.dark_hz": Key(float, 0.0, "dark count rate per detector, counts/s"),
    "det.bg_hz": Key(float, 0.0, "background count rate per detector, counts/s"),
    "det.resolution_ps": Key(int, 1, "time-tag resolution, ps"),
    "layout.mode": Key(str, "hbt", "hbt (one window split 50:50) or dual (two windows)", ("hbt", "dual")),
    "layout.fov": Key(str, "hard", "window edge profile", ("hard", "gaussian")),
    "engine.kind": Key(str, "fixed", "trajectory integrator", ("fixed", "waiting")),
    "engine.dt_ps": Key(float, 0.0, "fixed-engine step, ps (0 = automatic)"),
    "engine.mode": Key(str, "B", "A: Gaussian probe profile, B: constant per-atom Rabi frequency", ("A", "B")),
    "engine.f_escape": Key(float, 0.02, "fraction of unselected atoms that stay bright"),
    "engine.lead_in_um": Key(float, None, "flight before the first window, um (default 3 waists)"),
    "run.seed": Key(int, 0, "master seed (0 .. 2^64-1)"),
    "run.duration_s": Key(float, 1.0, "simulated time, s"),
}
# fmt: on

SELECTION_KEYS = tuple(k for k in SCHEMA if k.startswith("sel."))


class _IncompleteSelection(ValidationError):
    pass


def _parse(key, text):
    spec = SCHEMA[key]
    text = text.strip()
    if spec.kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValidationError(f"{key}: expected true/false, got {text!r}")
    if spec.kind is int:
        try:
            return int(text, 0)
        except ValueError:
            raise ValidationError(f"{key}: expected an integer, got {text!r}") from None
    if spec.kind is float:
        try:
            value = float(text)
        except ValueError:
            raise ValidationError(f"{key}: expected a number, got {text!r}") from None
        if not math.isfinite(value):
            raise ValidationError(f"{key}: must be finite")
        return value
    if spec.choices and text not in spec.choices:
        raise ValidationError(f"{key}: expected one of {', '.join(spec.choices)}, got {text!r}")
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def check_key(key):
    """Raise for keys outside the schema, pointing out missing unit suffixes."""
    if key in SCHEMA:
        return
    near = [k for k in SCHEMA if k.startswith(key + "_")]
    if near:
        raise ValidationError(f"missing unit suffix: {key!r} (did you mean {near[0]!r}?)")
    raise ValidationError(f"unknown key {key!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated parameter set for one simulated experiment.

    ``values`` holds the user-facing settings (config units); the typed
    parameter objects are derived from them.
    """

    values: dict
    recipe: tuple = ()
    beam: BeamParameters = field(init=False, compare=False)
    optics: OpticalParameters = field(init=False, compare=False)
    geometry: GeometryParameters = field(init=False, compare=False)
    selection: SelectionParameters | None = field(init=False, compare=False)
    detectors: DetectorParameters = field(init=False, compare=False)
    layout: FiberLayout = field(init=False, compare=False)
    engine: EngineOptions = field(init=False, compare=False)

    def __post_init__(self):
        for key in self.values:
            check_key(key)
        v = {k: s.default for k, s in SCHEMA.items()}
        v.update(self.values)
        if v["beam.flux_hz"] is not None and v["beam.mean_n"] is not None:
            raise ValidationError("set only one of beam.flux_hz and beam.mean_n")
        has_sel = any(k in self.values for k in SELECTION_KEYS)
        if has_sel and v["sel.detuning_mhz"] is None:
            raise _IncompleteSelection("selection block needs sel.detuning_mhz")
        if v["beam.temp_c"] <= -ZERO_CELSIUS:
            raise ValidationError("beam.temp_c must be above absolute zero")
        seed = v["run.seed"]
        if not 0 <= seed < 2**64:
            raise ValidationError("run.seed must fit in 64 unsigned bits")
        if v["run.duration_s"] < 0:
            raise ValidationError("run.duration_s must be >= 0")
        if v["det.resolution_ps"] <= 0:
            raise ValidationError("det.resolution_ps must be positive")

        gamma = v["optics.gamma_mhz"] * TWO_PI_MHZ
        optics = OpticalParameters(
            gamma=gamma,
            rabi_mean=v["optics.rabi_mean_gamma"] * gamma,
            rabi_sigma=v["optics.rabi_sigma_gamma"] * gamma,
            wavelength=v["optics.wavelength_nm"] * 1e-9,
            beam_waist_radius=v["optics.waist_um"] * 1e-6,
        )
        geometry = GeometryParameters(
            fov_length=v["geom.fov_um"] * 1e-6,
            fiber_fov_diameter=v["geom.fiber_fov_um"] * 1e-6,
            fiber_separation=v["geom.fiber_separation_um"] * 1e-6,
        )
        beam = BeamParameters(
            temperature=v["beam.temp_c"] + ZERO_CELSIUS,
            atom_mass=v["beam.mass_amu"] * ATOMIC_MASS_UNIT,
            flux=0.0,
            transverse_spread=v["beam.transverse_spread_mps"],
        )
        if v["beam.flux_hz"] is not None:
            flux = v["beam.flux_hz"]
        else:
            mean_n = 0.138 if v["beam.mean_n"] is None else v["beam.mean_n"]
            flux = flux_for_mean_atom_number(mean_n, beam, geometry, length=self._region(v, geometry))
        beam = BeamParameters(beam.temperature, beam.atom_mass, flux, beam.transverse_spread)

        selection = None
        if v["sel.detuning_mhz"] is not None:
            selection = SelectionParameters(
                detuning=v["sel.detuning_mhz"] * TWO_PI_MHZ,
                angle=math.radians(v["sel.angle_deg"]),
                linewidth=v["sel.linewidth_mhz"] * TWO_PI_MHZ,
            )
            if selection.detuning > 0:
                raise ValidationError("sel.detuning_mhz must be <= 0")
        detectors = DetectorParameters(
            collection_efficiency=v["det.ceff"],
            dead_time=v["det.dead_time_ns"] * 1e-9,
            timing_jitter_sigma=v["det.jitter_ps"] * 1e-12,
            dark_rate=v["det.dark_hz"],
            background_rate=v["det.bg_hz"],
        )
        if v["layout.mode"] == "hbt":
            layout = FiberLayout.hbt(geometry.fov_length, edge=v["layout.fov"])
        else:
            layout = FiberLayout.dual(
                geometry.fiber_separation, geometry.fiber_fov_diameter, edge=v["layout.fov"]
            )
        lead = v["engine.lead_in_um"]
        engine = EngineOptions(
            kind=v["engine.kind"],
            dt=v["engine.dt_ps"] * 1e-12,
            mode=v["engine.mode"],
            f_escape=v["engine.f_escape"],
            lead_in=None if lead is None else lead * 1e-6,
        )
        for name, obj in [
            ("beam", beam),
            ("optics", optics),
            ("geometry", geometry),
            ("selection", selection),
            ("detectors", detectors),
            ("layout", layout),
            ("engine", engine),
        ]:
            object.__setattr__(self, name, obj)
        object.__setattr__(self, "values", dict(self.values))
        object.__setattr__(self, "recipe", tuple(self.recipe))

    @staticmethod
    def _region(v, geometry):
        if v["layout.mode"] == "dual" and v["geom.n_region"] == "d_f":
            return geometry.fiber_fov_diameter
        return geometry.fov_length

    def get(self, key):
        check_key(key)
        return self.values.get(key, SCHEMA[key].default)

    @property
    def seed(self):
        return int(self.get("run.seed"))

    @property
    def duration(self):
        return float(self.get("run.duration_s"))

    @property
    def repump(self):
        return bool(self.get("sel.repump"))

    @property
    def resolution_ps(self):
        return int(self.get("det.resolution_ps"))

    @property
    def n_region_length(self):
        v = {k: self.get(k) for k in ("layout.mode", "geom.n_region")}
        return self._region(v, self.geometry)

    def with_overrides(self, overrides):
        """New config with ``key=value`` strings (or a mapping) applied."""
        if isinstance(overrides, dict):
            items = list(overrides.items())
        else:
            items = []
            for item in overrides:
                if "=" not in item:
                    raise ValidationError(f"override must look like key=value, got {item!r}")
                k, val = item.split("=", 1)
                items.append((k.strip(), val))
        values = dict(self.values)
        for k, val in items:
            check_key(k)
            if k == "beam.flux_hz":
                values.pop("beam.mean_n", None)
            elif k == "beam.mean_n":
                values.pop("beam.flux_hz", None)
            values[k] = _parse(k, val) if isinstance(val, str) else val
        return ExperimentConfig(values, self.recipe)

    def dumps(self):
        lines = [f"#: {r}" for r in self.recipe]
        lines += [f"{k} = {_format(self.values[k])}" for k in SCHEMA if k in self.values]
        return "\n".join(lines) + "\n"

    def digest(self):
        """SHA-256 of the canonical text form."""
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def loads(text, source="<string>"):
    values = {}
    recipe = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("#:"):
            recipe.append(line[2:].strip())
            continue
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, text_value = (s.strip() for s in line.split("=", 1))
        text_value = text_value.split(" #", 1)[0].strip()
        try:
            check_key(key)
            if key in values:
                raise ValidationError(f"duplicate key {key!r}")
            values[key] = _parse(key, text_value)
            # validate incrementally so the first bad line is reported
            ExperimentConfig(values)
        except _IncompleteSelection:
            continue
        except BeamcorrError as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
    try:
        return ExperimentConfig(values, tuple(recipe))
    except ValidationError as exc:
        raise ValidationError(f"{source}: {exc}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except UnicodeDecodeError:
        raise ValidationError(f"{path}: not UTF-8 text") from None
    return loads(text, str(path))


def dump_config(config, path):
    Path(path).write_text(config.dumps(), encoding="utf-8")


def preset_path(name):
    """Path of a shipped preset (``fig3a`` or ``fig3a.cfg``)."""
    stem = name[:-4] if name.endswith(".cfg") else name
    path = Path(__file__).parent / "presets" / f"{stem}.cfg"
    if not path.exists():
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return path


def list_presets():
    return sorted(p.stem for p in (Path(__file__).parent / "presets").glob("*.cfg"))


def load_preset(name):
    return load_config(preset_path(name))


def schema_help():
    """One line per key: name, default and description."""
    width = max(len(k) for k in SCHEMA)
    out = []
    for k, s in SCHEMA.items():
        default = "-" if s.default is None else _format(s.default)
        out.append(f"  {k:<{width}}  {s.doc} [default {default}]")
    return "\n".join(out)
