"""INI run configuration.

Lengths are given in nm, wavenumbers in 1/nm, Fermi levels in mV and potentials in eV;
everything is converted to the internal units once, here.
"""
import configparser
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from moyal.assembly import AUTO, MODES, ObservationPolicy
from moyal.errors import ConfigError, GeometryMismatch, InvalidGrid
from moyal.phasespace import (
    DeviceGeometry,
    MaterialParams,
    PhaseGrid,
    PotentialProfile,
    build_grid,
    flat_potential,
    linear_potential,
    pulse_potential,
    random_potential,
    rtd_markers,
    rtd_potential,
)
from moyal.solve import SOLVERS
from moyal.stencil import DEFAULT_MAX_ORDER

logger = logging.getLogger(__name__)

NM = 1e-9
DEVICE_KINDS = ("rtd", "random", "pulse", "flat", "linear")

# Device keys and their defaults, in config units
DEVICE_DEFAULTS = {
    "rtd": {"barrier_height_eV": 0.3, "barrier_width_nm": 3.0, "well_width_nm": 5.0, "spacer_nm": 30.0},
    "random": {"seed": 0, "amplitude_eV": 0.5},
    "pulse": {"pulse_height_eV": 0.5, "pulse_width_cells": 1},
    "flat": {"level_eV": 0.0},
    "linear": {"drop_eV": 0.1},
}


def load_environment() -> dict:
    """Read .env (without overriding the real environment) and return MOYAL_* settings."""
    load_dotenv(override=False)
    return {key: value for key, value in os.environ.items() if key.startswith("MOYAL_")}


class ExperimentSettings:
    """Typed access to the [experiment] section."""

    def __init__(self, section: dict[str, str]):
        self._section = dict(section)

    def __contains__(self, key: str) -> bool:
        return key in self._section

    def as_dict(self) -> dict[str, str]:
        return dict(self._section)

    def _raw(self, key: str):
        return self._section.get(key)

    def get_float(self, key: str, default: float | None = None) -> float | None:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[experiment] {key} = {raw!r} is not a number") from None

    def get_int(self, key: str, default: int | None = None) -> int | None:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[experiment] {key} = {raw!r} is not an integer") from None

    def get_floats(self, key: str, default: list[float] | None = None) -> list[float]:
        raw = self._raw(key)
        if raw is None:
            return list(default or [])
        try:
            return [float(part) for part in raw.replace(";", ",").split(",") if part.strip()]
        except ValueError:
            raise ConfigError(f"[experiment] {key} = {raw!r} is not a list of numbers") from None

    def get_ints(self, key: str, default: list[int] | None = None) -> list[int]:
        return [int(value) for value in self.get_floats(key, default)]

    def get_words(self, key: str, default: list[str] | None = None) -> list[str]:
        raw = self._raw(key)
        if raw is None:
            return list(default or [])
        return [part.strip().lower() for part in raw.replace(";", ",").split(",") if part.strip()]

    def biases(self) -> list[float]:
        start = self.get_float("bias_start_V", 0.0)
        stop = self.get_float("bias_stop_V", 0.30)
        step = self.get_float("bias_step_V", 0.01)
        if step <= 0 or stop < start:
            raise ConfigError(f"bias range {start}..{stop} step {step} is empty")
        count = int(round((stop - start) / step)) + 1
        return [round(start + n * step, 12) for n in range(count)]

    def pins(self, key: str = "pins") -> list[tuple[float, float, float]]:
        """Pins as (x in m, k in 1/m, value); ``pins`` defaults to one pin at 70 nm, k = 0."""
        raw = self._raw(key)
        if raw is None:
            return [(70.0 * NM, 0.0, 1.0)] if key == "pins" else []
        pins = []
        for entry in raw.split(";"):
            if not entry.strip():
                continue
            try:
                x_nm, k_per_nm, value = (float(part) for part in entry.split(":"))
            except ValueError:
                raise ConfigError(f"pin {entry.strip()!r} is not x_nm:k_per_nm:value") from None
            pins.append((x_nm * NM, k_per_nm / NM, value))
        if not pins:
            raise ConfigError(f"[experiment] {key} is empty")
        return pins


@dataclass
class RunConfig:
    grid: PhaseGrid
    material: MaterialParams
    device_kind: str
    device: dict
    geometry: DeviceGeometry | None
    policy: ObservationPolicy
    solver: str = "direct"
    tol: float = 1e-10
    max_order: int = DEFAULT_MAX_ORDER
    experiment: ExperimentSettings = field(default_factory=lambda: ExperimentSettings({}))
    text: str = ""
    source: str = ""
    environment: dict = field(default_factory=dict)

    def potential(self, bias: float = 0.0, grid: PhaseGrid | None = None) -> PotentialProfile:
        grid = grid or self.grid
        kind = self.device_kind
        if kind == "rtd":
            return rtd_potential(grid, self.geometry, bias)
        if kind == "random":
            return random_potential(int(self.device["seed"]), float(self.device["amplitude_eV"]), grid)
        if kind == "pulse":
            center = self.device.get("pulse_center_nm")
            center = grid.x0 + grid.length / 2 if center is None else float(center) * NM
            return pulse_potential(
                grid, center, int(self.device["pulse_width_cells"]), float(self.device["pulse_height_eV"])
            )
        if kind == "flat":
            return flat_potential(grid, float(self.device["level_eV"]))
        return linear_potential(grid, 0.0, -float(self.device["drop_eV"]) - bias)

    def resolved(self) -> dict:
        """SI view of the configuration for the manifest."""
        return {
            "grid": {
                "dx": self.grid.dx,
                "dk": self.grid.dk,
                "nx": self.grid.nx,
                "nk": self.grid.nk,
                "k_offset": self.grid.k_offset,
                "mesh_product": self.grid.mesh_product,
            },
            "material": {
                "mstar_rel": self.material.mstar_rel,
                "temperature": self.material.temperature,
                "fermi_left": self.material.fermi_left,
                "fermi_right": self.material.fermi_right,
            },
            "device": {"kind": self.device_kind, **self.device},
            "observation": {
                "mode": self.policy.mode,
                "n_obs": self.policy.n_obs_default,
                "overrides": [list(pair) for pair in self.policy.overrides],
                "j_max": self.policy.j_max,
            },
            "solver": {"method": self.solver, "tol": self.tol, "max_order": self.max_order},
            "experiment": self.experiment.as_dict(),
        }


def _get(parser: configparser.ConfigParser, section: str, key: str, kind=float, default=None):
    if not parser.has_option(section, key):
        if default is None:
            raise ConfigError(f"[{section}] {key} is required")
        return default
    raw = parser.get(section, key)
    try:
        if kind is bool:
            return parser.getboolean(section, key)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def _overrides(raw: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for entry in raw.split(","):
        if not entry.strip():
            continue
        try:
            x_index, n_obs = (int(part) for part in entry.split(":"))
        except ValueError:
            raise ConfigError(f"window override {entry.strip()!r} is not x_index:n_obs") from None
        pairs.append((x_index, n_obs))
    return tuple(pairs)


def _device(parser, kind: str, environment: dict) -> dict:
    values = dict(DEVICE_DEFAULTS[kind])
    if parser.has_section("device"):
        for key, raw in parser.items("device"):
            if key == "kind":
                continue
            try:
                values[key] = float(raw) if key not in ("seed", "pulse_width_cells") else int(raw)
            except ValueError:
                raise ConfigError(f"[device] {key} = {raw!r} is not a number") from None
    if kind == "random" and "MOYAL_SEED" in environment:
        try:
            values["seed"] = int(environment["MOYAL_SEED"])
        except ValueError:
            raise ConfigError(f"MOYAL_SEED = {environment['MOYAL_SEED']!r} is not an integer") from None
    return values


def parse_config(text: str, source: str = "<string>", environment: dict | None = None) -> RunConfig:
    environment = load_environment() if environment is None else environment
    # keys keep their case: unit suffixes like _eV and _K are part of the name
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    if not parser.has_section("grid"):
        raise ConfigError(f"{source}: missing [grid] section")

    kind = parser.get("device", "kind", fallback="rtd").strip().lower()
    if kind not in DEVICE_KINDS:
        raise ConfigError(f"[device] kind = {kind!r}; expected one of {DEVICE_KINDS}")
    device = _device(parser, kind, environment)

    dx = _get(parser, "grid", "dx_nm") * NM
    geometry = None
    if kind == "rtd":
        barrier = device["barrier_width_nm"] * NM
        well = device["well_width_nm"] * NM
        spacer = device["spacer_nm"] * NM
        total = device.get("total_length_nm")
        total = 2 * barrier + well + 2 * spacer if total is None else total * NM
        try:
            geometry = DeviceGeometry(
                total_length=total,
                barrier_height=device["barrier_height_eV"],
                barrier_width=barrier,
                well_width=well,
                spacer_width=spacer,
            )
        except GeometryMismatch as e:
            raise ConfigError(f"[device] {e}") from e
        nx_default = int(round(total / dx))
    else:
        nx_default = None

    nx = _get(parser, "grid", "nx", int, nx_default)
    try:
        grid = build_grid(
            dx=dx,
            dk=_get(parser, "grid", "dk_per_nm") / NM,
            nx=nx,
            nk=_get(parser, "grid", "nk", int, 128),
            k_offset=_get(parser, "grid", "k_offset", bool, True),
        )
    except InvalidGrid as e:
        raise ConfigError(f"[grid] {e}") from e
    if geometry is not None:
        try:
            rtd_markers(grid, geometry)
        except GeometryMismatch as e:
            raise ConfigError(f"[device] {e}") from e

    fermi = _get(parser, "material", "fermi_mV", float, 50.0)
    try:
        material = MaterialParams(
            mstar_rel=_get(parser, "material", "mstar_rel", float, 0.07),
            temperature=_get(parser, "material", "temperature_K", float, 77.0),
            fermi_left=_get(parser, "material", "fermi_left_mV", float, fermi) * 1e-3,
            fermi_right=_get(parser, "material", "fermi_right_mV", float, fermi) * 1e-3,
        )
    except ValueError as e:
        raise ConfigError(f"[material] {e}") from e

    mode = parser.get("observation", "mode", fallback="windowed").strip().lower()
    if mode not in MODES:
        raise ConfigError(f"[observation] mode = {mode!r}; expected one of {MODES}")
    n_obs = parser.get("observation", "n_obs", fallback=AUTO).strip().lower()
    j_max = parser.get("observation", "j_max", fallback=None)
    try:
        policy = ObservationPolicy(
            mode=mode,
            n_obs_default=AUTO if n_obs == AUTO else int(n_obs),
            overrides=_overrides(parser.get("observation", "overrides", fallback="")),
            j_max=None if j_max is None else int(j_max),
        )
    except ValueError as e:
        raise ConfigError(f"[observation] {e}") from e

    solver = parser.get("solver", "method", fallback="direct").strip().lower()
    if solver not in SOLVERS:
        raise ConfigError(f"[solver] method = {solver!r}; expected one of {sorted(SOLVERS)}")

    config = RunConfig(
        grid=grid,
        material=material,
        device_kind=kind,
        device=device,
        geometry=geometry,
        policy=policy,
        solver=solver,
        tol=_get(parser, "solver", "tol", float, 1e-10),
        max_order=_get(parser, "solver", "max_order", int, DEFAULT_MAX_ORDER),
        experiment=ExperimentSettings(dict(parser.items("experiment")) if parser.has_section("experiment") else {}),
        text=text,
        source=source,
        environment={k: v for k, v in environment.items() if k.startswith("MOYAL_")},
    )
    logger.debug("loaded %s: %s device, %s", source, kind, policy.describe())
    return config


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, source=str(path))
