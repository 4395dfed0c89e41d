"""Reductions of Wigner fields: density, current, negativity, I-V records.

Also holds the Wigner-transform oracle used to validate the reductions on states whose
phase-space function is known in closed form. No spin degeneracy factor is applied.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.signal import find_peaks

from moyal.assembly import ObservationPolicy, assemble, injection_values
from moyal.errors import GridMismatch, NearSingular
from moyal.phasespace import DeviceGeometry, MaterialParams, PhaseGrid, rtd_potential
from moyal.solve import NEAR_SINGULAR, SUCCESS, WignerField, solve_system

logger = logging.getLogger(__name__)

NDR_PROMINENCE = 0.05
CONTINUITY_TOLERANCE = 1e-6


@dataclass
class Observables:
    density: np.ndarray
    current: np.ndarray
    min_f: float
    negative_fraction: float

    @property
    def mean_current(self) -> float:
        return float(np.mean(self.current))

    @property
    def current_deviation(self) -> float:
        return float(np.max(np.abs(self.current - self.mean_current)))


@dataclass
class IVRecord:
    bias: float
    current: float
    deviation: float
    status: str
    policy: str
    mesh_product: float
    min_f: float = float("nan")
    peak_flag: bool = False
    message: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class IVSweep:
    """Records ordered by bias, NDR metrics over the successful points, optional fields."""

    records: list[IVRecord]
    metrics: dict | None = None
    fields: list[WignerField | None] | None = None

    @property
    def pvr(self) -> float:
        return self.metrics["pvr"] if self.metrics else 1.0

    @property
    def succeeded(self) -> list[IVRecord]:
        return [r for r in self.records if r.status == SUCCESS]


def _values(field) -> np.ndarray:
    return field.values if isinstance(field, WignerField) else np.asarray(field)


def density(field, grid: PhaseGrid) -> np.ndarray:
    """n(x_i) = (1 / 2 pi) sum_j f(x_i, k_j) dk."""
    return _values(field).sum(axis=-1) * grid.dk / (2.0 * np.pi)


def current(field, grid: PhaseGrid, material: MaterialParams) -> np.ndarray:
    """Upwinded current J at the nx - 1 cell interfaces."""
    f = _values(field)
    velocity = material.velocity(grid.k)
    forward = np.where(grid.k > 0, velocity, 0.0)
    backward = np.where(grid.k < 0, velocity, 0.0)
    flux = f[1:] @ backward + f[:-1] @ forward
    return flux * grid.dk / (2.0 * np.pi)


def negativity(field) -> tuple[float, float]:
    """(min f, fraction of nodes with f < 0)."""
    f = _values(field)
    return float(f.min()), float(np.count_nonzero(f < 0) / f.size)


def observe(field, grid: PhaseGrid, material: MaterialParams) -> Observables:
    min_f, fraction = negativity(field)
    return Observables(
        density=density(field, grid),
        current=current(field, grid, material),
        min_f=min_f,
        negative_fraction=fraction,
    )


def wigner_transform(state, grid: PhaseGrid) -> WignerField:
    """f(x, k) = integral of exp(-i k y) rho(x + y/2, x - y/2) dy by the trapezoid rule.

    ``state`` is either a wavefunction sampled on the x nodes or a density matrix over
    them. The y step is 2 dx and the y range is whatever keeps both arguments on the
    grid, so each row integrates over its own extent.
    """
    state = np.asarray(state, dtype=complex)
    nx = grid.nx
    if state.shape == (nx,):
        rho = np.outer(state, state.conj())
    elif state.shape == (nx, nx):
        rho = state
    else:
        raise GridMismatch(f"state of shape {state.shape} does not match {nx} x nodes")
    if np.max(np.abs(grid.k)) * 2.0 * grid.dx > np.pi:
        raise GridMismatch("k grid extends past the Nyquist limit of the y step 2 dx")

    shifts = np.arange(-(nx - 1), nx)
    rows = np.arange(nx)[:, None]
    plus, minus = rows + shifts[None, :], rows - shifts[None, :]
    reach = np.minimum(rows, nx - 1 - rows)
    inside = np.abs(shifts)[None, :] <= reach
    weight = np.where(inside, 1.0, 0.0)
    weight[(np.abs(shifts)[None, :] == reach) & (reach > 0)] = 0.5

    products = np.where(
        inside, rho[np.clip(plus, 0, nx - 1), np.clip(minus, 0, nx - 1)], 0.0
    ) * weight
    phase = np.exp(-1j * np.outer(2.0 * grid.dx * shifts, grid.k))
    transform = products @ phase * 2.0 * grid.dx

    scale = max(float(np.max(np.abs(transform))), 1e-300)
    residue = float(np.max(np.abs(transform.imag))) / scale
    if residue > 1e-10:
        raise GridMismatch(f"transform is not real (relative imaginary residue {residue:.2e})")
    return WignerField(transform.real, grid, {"source": "wigner_transform"})


def gaussian_state(grid: PhaseGrid, center: float, width: float, wavenumber: float = 0.0) -> np.ndarray:
    """Normalized Gaussian wavepacket with position spread ``width``."""
    x = grid.x
    envelope = (2.0 * np.pi * width**2) ** -0.25 * np.exp(-((x - center) ** 2) / (4.0 * width**2))
    return envelope * np.exp(1j * wavenumber * x)


def gaussian_wigner(grid: PhaseGrid, center: float, width: float, wavenumber: float = 0.0) -> np.ndarray:
    x, k = grid.x[:, None], grid.k[None, :]
    return 2.0 * np.exp(-((x - center) ** 2) / (2.0 * width**2) - 2.0 * width**2 * (k - wavenumber) ** 2)


def cat_state(grid: PhaseGrid, separation: float, width: float, center: float = 0.0) -> np.ndarray:
    """Even superposition of two Gaussians at center +/- separation/2, normalized on the grid."""
    half = separation / 2.0
    psi = gaussian_state(grid, center - half, width) + gaussian_state(grid, center + half, width)
    return psi / np.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)


def ndr_metrics(biases, currents, prominence: float = NDR_PROMINENCE) -> dict | None:
    """Peak, valley and peak-to-valley ratio of an I-V curve, or None without NDR.

    The peak is the first local maximum with prominence above ``prominence`` times the
    largest current; the valley is the next local minimum, or the last sample when the
    curve keeps falling to the end of the sweep.
    """
    biases = np.asarray(biases, dtype=float)
    currents = np.asarray(currents, dtype=float)
    if currents.size < 3 or not np.max(currents) > 0:
        return None
    peaks, _ = find_peaks(currents, prominence=prominence * np.max(currents))
    if peaks.size == 0:
        return None
    peak = int(peaks[0])
    valleys, _ = find_peaks(-currents[peak:])
    valley = peak + int(valleys[0]) if valleys.size else currents.size - 1
    if valley == peak or not currents[valley] < currents[peak]:
        return None
    return {
        "peak_index": peak,
        "peak_bias": float(biases[peak]),
        "peak_current": float(currents[peak]),
        "valley_index": valley,
        "valley_bias": float(biases[valley]),
        "valley_current": float(currents[valley]),
        "pvr": float(currents[peak] / currents[valley]) if currents[valley] > 0 else float("inf"),
    }


def _iv_point(grid, geometry, material, bias, policy, method, tol) -> tuple[IVRecord, WignerField | None]:
    profile = rtd_potential(grid, geometry, bias)
    boundary = injection_values(grid, material)
    system = assemble(grid, profile, policy, boundary)
    try:
        field, report = solve_system(system, method, tol)
        status, message = SUCCESS, report.message
    except NearSingular as e:
        field, status, message = e.field, NEAR_SINGULAR, str(e)

    if field is None:
        record = IVRecord(bias, float("nan"), float("nan"), status, policy.describe(), grid.mesh_product, message=message)
        return record, None

    result = observe(field, grid, material)
    record = IVRecord(
        bias=float(bias),
        current=result.mean_current,
        deviation=result.current_deviation,
        status=status,
        policy=policy.describe(),
        mesh_product=grid.mesh_product,
        min_f=result.min_f,
        message=message,
    )
    if status == SUCCESS and record.deviation > CONTINUITY_TOLERANCE * abs(record.current):
        logger.warning("bias %.3f V: current varies by %.2e across x", bias, record.deviation)
    return record, field


def iv_sweep(
    grid: PhaseGrid,
    geometry: DeviceGeometry,
    material: MaterialParams,
    biases,
    policy: ObservationPolicy,
    method: str = "direct",
    tol: float = 1e-10,
    jobs: int = 1,
    keep_fields: bool = False,
) -> IVSweep:
    """One assemble + solve per bias, ordered by bias.

    Failed points keep their status in the record instead of aborting the sweep; the NDR
    metrics cover the successful points only, and fields are kept on request.
    """
    biases = sorted(float(b) for b in biases)
    logger.info("I-V sweep over %d biases, policy %s", len(biases), policy.describe())
    results = Parallel(n_jobs=jobs)(
        delayed(_iv_point)(grid, geometry, material, bias, policy, method, tol) for bias in biases
    )
    records = [record for record, _ in results]

    succeeded = [r for r in records if r.status == SUCCESS]
    metrics = ndr_metrics([r.bias for r in succeeded], [r.current for r in succeeded])
    if metrics:
        succeeded[metrics["peak_index"]].peak_flag = True
        logger.info("NDR: peak %.3f V, valley %.3f V, PVR %.3f", metrics["peak_bias"], metrics["valley_bias"], metrics["pvr"])

    fields = [f for _, f in results] if keep_fields else None
    return IVSweep(records, metrics, fields)
