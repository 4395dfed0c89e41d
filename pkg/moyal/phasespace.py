"""Phase-space mesh, material constants, device geometries and potential profiles.

Internal units are SI except energies, which stay in eV (potentials, Fermi levels,
barrier heights). Conversion from config units happens in moyal.config.
"""
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import constants

from moyal.errors import GeometryMismatch, InvalidGrid, OrderOverflow, OutOfDomain
from moyal.stencil import get_max_order

logger = logging.getLogger(__name__)

EXTENSIONS = ("clamp", "linear")


@dataclass(frozen=True)
class PhaseGrid:
    dx: float
    dk: float
    nx: int
    nk: int
    k_offset: bool = True
    x0: float = 0.0

    @property
    def mesh_product(self) -> float:
        return self.dx * self.dk

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    @property
    def k(self) -> np.ndarray:
        shift = 0.5 if self.k_offset else 0.0
        return (np.arange(self.nk) - self.nk // 2 + shift) * self.dk

    @property
    def length(self) -> float:
        return (self.nx - 1) * self.dx

    @property
    def dimension(self) -> int:
        return self.nx * self.nk

    def x_index(self, position: float) -> int:
        """Nearest x node to a position in metres."""
        index = int(round((position - self.x0) / self.dx))
        if not 0 <= index < self.nx:
            raise OutOfDomain(
                f"x = {position:.4e} m lies outside [{self.x0:.4e}, {self.x0 + self.length:.4e}]"
            )
        return index

    def k_index(self, wavenumber: float) -> int:
        """Nearest k node; exact ties go to the larger k."""
        distance = np.abs(self.k - wavenumber)
        candidates = np.flatnonzero(np.isclose(distance, distance.min(), rtol=1e-12, atol=0.0))
        return int(candidates[-1])

    def row(self, i: int, j: int) -> int:
        return i * self.nk + j


def build_grid(dx: float, dk: float, nx: int, nk: int, k_offset: bool = True, x0: float = 0.0) -> PhaseGrid:
    """Validate mesh parameters and return the grid."""
    if not (dx > 0 and math.isfinite(dx)):
        raise InvalidGrid(f"dx must be positive and finite, got {dx}")
    if not (dk > 0 and math.isfinite(dk)):
        raise InvalidGrid(f"dk must be positive and finite, got {dk}")
    if nx < 4:
        raise InvalidGrid(f"nx must be at least 4, got {nx}")
    if nk < 4 or nk % 2:
        raise InvalidGrid(f"nk must be an even count of at least 4, got {nk}")

    grid = PhaseGrid(dx=float(dx), dk=float(dk), nx=int(nx), nk=int(nk), k_offset=bool(k_offset), x0=float(x0))
    logger.debug("grid nx=%d nk=%d dx*dk=%.4g", grid.nx, grid.nk, grid.mesh_product)
    return grid


@dataclass(frozen=True)
class MaterialParams:
    mstar_rel: float = 0.07
    temperature: float = 77.0
    fermi_left: float = 0.05
    fermi_right: float = 0.05

    hbar = constants.hbar
    m0 = constants.m_e
    k_B = constants.k
    q = constants.e

    def __post_init__(self):
        for name in ("mstar_rel", "temperature", "fermi_left", "fermi_right"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be strictly positive, got {value}")

    @property
    def mass(self) -> float:
        return self.mstar_rel * self.m0

    @property
    def thermal_energy(self) -> float:
        """k_B T in joules."""
        return self.k_B * self.temperature

    def velocity(self, k: np.ndarray) -> np.ndarray:
        return self.hbar * np.asarray(k) / self.mass

    def kinetic_energy_ev(self, k: np.ndarray) -> np.ndarray:
        return (self.hbar * np.asarray(k)) ** 2 / (2.0 * self.mass) / self.q


@dataclass(frozen=True)
class DeviceGeometry:
    """Double-barrier layout. Lengths in metres, barrier height in eV.

    The active region (barrier, well, barrier) sits in the middle of the device with
    flat contacts on both sides; spacers are the part of those contacts that belongs
    to the nominal device length.
    """

    total_length: float = 71e-9
    barrier_height: float = 0.3
    barrier_width: float = 3e-9
    well_width: float = 5e-9
    spacer_width: float = 30e-9

    def __post_init__(self):
        parts = (self.total_length, self.barrier_height, self.barrier_width, self.well_width, self.spacer_width)
        if any(value < 0 for value in parts):
            raise GeometryMismatch("device dimensions must be nonnegative")
        if self.layout_length > self.total_length * (1 + 1e-9):
            raise GeometryMismatch(
                f"barriers, well and spacers span {self.layout_length:.4e} m, "
                f"more than the device length {self.total_length:.4e} m"
            )

    @property
    def active_length(self) -> float:
        return 2 * self.barrier_width + self.well_width

    @property
    def layout_length(self) -> float:
        return self.active_length + 2 * self.spacer_width


class PotentialProfile:
    """U(x_i) in eV on a grid's x nodes.

    ``values`` is read-only. Stencil differences of U are built lazily on first use,
    reading beyond the ends with the profile's extension rule: ``clamp`` repeats the
    end samples, ``linear`` continues the end slopes.
    """

    def __init__(self, values, dx: float, extension: str = "clamp", label: str = ""):
        if extension not in EXTENSIONS:
            raise ValueError(f"unknown extension {extension!r}; expected one of {EXTENSIONS}")
        array = np.array(values, dtype=float)
        if array.ndim != 1 or array.size < 2:
            raise ValueError("potential values must be a 1-D array of at least two samples")
        array.setflags(write=False)
        self.values = array
        self.dx = float(dx)
        self.extension = extension
        self.label = label
        self._differences: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"PotentialProfile({self.label or 'unnamed'}, n={len(self)}, extension={self.extension})"

    def _extended(self, pad: int) -> np.ndarray:
        if self.extension == "clamp":
            return np.pad(self.values, pad, mode="edge")
        steps = np.arange(pad, 0, -1)
        left = self.values[0] - steps * (self.values[1] - self.values[0])
        right = self.values[-1] + steps[::-1] * (self.values[-1] - self.values[-2])
        return np.concatenate([left, self.values, right])

    def _fill(self, order: int) -> None:
        # Centered first difference, then repeated second differences: the (d, 2) stencil
        # applied as a product of short operators, which keeps uniform data exactly zero.
        pad = (order + 1) // 2
        n = len(self)
        current = self._extended(pad)
        current = 0.5 * (current[2:] - current[:-2])
        differences = {}
        for d in range(1, order + 1, 2):
            if d > 1:
                current = current[2:] - 2.0 * current[1:-1] + current[:-2]
            shrink = (d + 1) // 2
            start = pad - shrink
            result = np.array(current[start:start + n])
            result.setflags(write=False)
            differences[d] = result
        self._differences = differences

    def difference(self, order: int) -> np.ndarray:
        """Undivided (order, 2) stencil of U at every node, in eV."""
        if order < 1 or order % 2 == 0:
            raise ValueError(f"potential differences are defined for odd orders, got {order}")
        if order + 2 > get_max_order():
            raise OrderOverflow(order, 2, get_max_order())
        cached = self._differences.get(order)
        if cached is not None:
            return cached
        with self._lock:
            if order not in self._differences:
                self._fill(max(order, max(self._differences, default=1)))
            return self._differences[order]

    def differences(self, max_order: int) -> np.ndarray:
        """Rows: odd orders 1, 3, ..., max_order; columns: x nodes."""
        self.difference(max_order)
        return np.vstack([self._differences[d] for d in range(1, max_order + 1, 2)])


def potential_difference(profile: PotentialProfile, d: int, at: int) -> float:
    return float(profile.difference(d)[at])


def potential_derivative(profile: PotentialProfile, d: int, at: int) -> float:
    """U_d(x_at) in eV/m**d."""
    raw = np.float64(potential_difference(profile, d, at))
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        return float(raw / np.float64(profile.dx) ** d)


def _cells(length: float, dx: float, name: str) -> int:
    count = length / dx
    nearest = round(count)
    if abs(count - nearest) > 1e-9 * max(count, 1.0):
        raise GeometryMismatch(f"{name} {length:.4e} m is not a multiple of dx = {dx:.4e} m")
    return int(nearest)


def _active_span(grid: PhaseGrid, geometry: DeviceGeometry) -> tuple[int, int, int, int]:
    barrier = _cells(geometry.barrier_width, grid.dx, "barrier width")
    well = _cells(geometry.well_width, grid.dx, "well width")
    _cells(geometry.spacer_width, grid.dx, "spacer width")
    device = _cells(geometry.total_length, grid.dx, "device length")
    if grid.nx < device:
        raise GeometryMismatch(f"grid has {grid.nx} x nodes, device needs {device}")

    active = 2 * barrier + well
    if (grid.nx - active) % 2:
        raise GeometryMismatch(
            f"cannot center {active} active nodes in {grid.nx}; nx and the active node count must share parity"
        )
    start = (grid.nx - active) // 2
    return start, barrier, well, start + active - 1


def rtd_potential(grid: PhaseGrid, geometry: DeviceGeometry, bias: float = 0.0) -> PotentialProfile:
    """Double-barrier band edge with a linear bias drop across the active region."""
    start, barrier, well, end = _active_span(grid, geometry)
    values = np.zeros(grid.nx)
    values[start:start + barrier] = geometry.barrier_height
    values[end - barrier + 1:end + 1] = geometry.barrier_height

    index = np.arange(grid.nx)
    ramp = np.clip((index - start) / (end - start), 0.0, 1.0)
    values = values - bias * ramp
    return PotentialProfile(values, grid.dx, "clamp", label=f"rtd bias={bias:g}V")


def rtd_markers(grid: PhaseGrid, geometry: DeviceGeometry) -> tuple[int, int]:
    """Default decoherence points: just before the left barrier, a few cells past the right one."""
    start, _, _, end = _active_span(grid, geometry)
    return max(start - 1, 0), min(end + 5, grid.nx - 1)


def random_potential(seed: int, amplitude: float, grid: PhaseGrid) -> PotentialProfile:
    if amplitude < 0:
        raise ValueError(f"amplitude must be nonnegative, got {amplitude}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(-amplitude, amplitude, grid.nx)
    return PotentialProfile(values, grid.dx, "clamp", label=f"random seed={seed}")


def pulse_potential(grid: PhaseGrid, center: float, width: int, height: float) -> PotentialProfile:
    """Zero background with a rectangular pulse of ``width`` cells around ``center``."""
    if width < 1:
        raise OutOfDomain(f"pulse width must be at least one cell, got {width}")
    middle = grid.x_index(center)
    first = middle - (width - 1) // 2
    last = first + width - 1
    if first < 0 or last >= grid.nx:
        raise OutOfDomain(f"pulse cells {first}..{last} leave the grid of {grid.nx} nodes")

    values = np.zeros(grid.nx)
    values[first:last + 1] = height
    return PotentialProfile(values, grid.dx, "clamp", label=f"pulse at cell {middle}")


def flat_potential(grid: PhaseGrid, level: float = 0.0) -> PotentialProfile:
    return PotentialProfile(np.full(grid.nx, level), grid.dx, "clamp", label="flat")


def linear_potential(grid: PhaseGrid, start: float, stop: float) -> PotentialProfile:
    """Ramp extended linearly past both ends, so every difference above the first vanishes."""
    values = np.linspace(start, stop, grid.nx)
    return PotentialProfile(values, grid.dx, "linear", label="linear")
