"""Sparse assembly of the steady Wigner-Moyal equation.

Unknowns are ordered k-major within x: row = i * nk + j. Each equation row reads

    v(k) * D_x f  -  q / (hbar dx dk) * sum_j (-1)^j C_{2j+1} dU_{2j+1}(x) * sum_l a^l f(x, k + l dk) = 0

with D_x the upwind difference, dU the undivided potential stencil in eV and a^l the
k-stencil of order 2j+1. Injection rows are identities. After assembly every row is
scaled to unit max-abs entry, which leaves the solution unchanged.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from moyal.errors import InvalidGrid, OutOfDomain, Unmeasurable
from moyal.phasespace import MaterialParams, PhaseGrid, PotentialProfile
from moyal.stencil import log_nonlocal_power, make_stencil, periodic_kernel

logger = logging.getLogger(__name__)

CLASSICAL = "classical"
WINDOWED = "windowed"
MEASUREMENT = "measurement"
MODES = (CLASSICAL, WINDOWED, MEASUREMENT)
AUTO = "auto"

TRUNCATION_THRESHOLD = 1e-6
DERIVATIVE_FLOOR = 1e-300
# force over kinetic scale above which transport rows are resolved by round-off
DOMINANCE_WARNING = 1e12


@dataclass(frozen=True)
class ObservationPolicy:
    mode: str = WINDOWED
    n_obs_default: int | str = AUTO
    overrides: tuple[tuple[int, int], ...] = ()
    j_max: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown observation mode {self.mode!r}; expected one of {MODES}")
        if self.n_obs_default != AUTO and (not isinstance(self.n_obs_default, int) or self.n_obs_default < 1):
            raise ValueError(f"n_obs must be 'auto' or a positive integer, got {self.n_obs_default!r}")
        for x_index, n_obs in self.overrides:
            if n_obs < 1:
                raise ValueError(f"override at x={x_index} has n_obs={n_obs}; must be at least 1")
        if self.j_max is not None and self.j_max < 0:
            raise ValueError(f"j_max must be nonnegative, got {self.j_max}")

    def uncertainty_window(self, grid: PhaseGrid) -> int:
        return max(1, int(round(1.0 / grid.mesh_product)))

    def default_window(self, grid: PhaseGrid) -> int:
        if self.n_obs_default == AUTO:
            return self.uncertainty_window(grid)
        return int(self.n_obs_default)

    def windows(self, grid: PhaseGrid) -> np.ndarray:
        """N_Obs at every x node."""
        windows = np.full(grid.nx, self.default_window(grid), dtype=int)
        for x_index, n_obs in self.overrides:
            if not 0 <= x_index < grid.nx:
                raise OutOfDomain(f"window override at x index {x_index} is outside 0..{grid.nx - 1}")
            windows[x_index] = n_obs
        return windows

    def series_cap(self, grid: PhaseGrid) -> int:
        if self.j_max is not None:
            return self.j_max
        return grid.nk // 2 - 1

    def describe(self) -> str:
        if self.mode == CLASSICAL:
            return CLASSICAL
        text = f"{self.mode} n_obs={self.n_obs_default}"
        if self.overrides:
            text += " overrides=" + ",".join(f"{x}:{n}" for x, n in self.overrides)
        return text


@dataclass(frozen=True)
class InjectionBoundary:
    """Contact distributions over the full k axis.

    Only ``left_values`` at k > 0 and ``right_values`` at k < 0 enter the system.
    """

    left_values: np.ndarray
    right_values: np.ndarray
    material: MaterialParams

    @property
    def scale(self) -> float:
        return float(max(np.max(self.left_values), np.max(self.right_values)))


@dataclass
class LinearSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    grid: PhaseGrid
    mode: str
    retained_orders: list[tuple[int, ...]] = field(default_factory=list)
    x_index: int | None = None
    pins: tuple[tuple[int, float], ...] = ()
    unmeasurable_reason: str | None = None
    label: str = ""
    dominance: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def nz(self) -> int:
        return int(self.matrix.nnz)

    def node(self, row: int) -> tuple[int, int]:
        """(x index, k index) of a row; slices report their own x index."""
        if self.x_index is not None:
            return self.x_index, row
        return divmod(row, self.grid.nk)


def injection_values(grid: PhaseGrid, material: MaterialParams) -> InjectionBoundary:
    """Thermally integrated Fermi distribution at each contact."""
    kt = material.thermal_energy
    prefactor = material.mass * kt / (np.pi * material.hbar**2)
    energy = material.kinetic_energy_ev(grid.k) * material.q

    def supply(fermi_ev: float) -> np.ndarray:
        return prefactor * np.logaddexp(0.0, -(energy - fermi_ev * material.q) / kt)

    return InjectionBoundary(
        left_values=supply(material.fermi_left),
        right_values=supply(material.fermi_right),
        material=material,
    )


def truncate_series(magnitudes, threshold: float = TRUNCATION_THRESHOLD) -> tuple[int, ...]:
    """Series orders j whose contribution beats threshold * the j = 0 term.

    When the j = 0 term vanishes the largest term is the reference instead.
    """
    magnitudes = np.asarray(magnitudes, dtype=float)
    if magnitudes.size == 0:
        return ()
    reference = magnitudes[0] if magnitudes[0] > 0 else magnitudes.max()
    if not reference > 0:
        return ()
    return tuple(int(j) for j in np.flatnonzero(magnitudes > threshold * reference))


def series_coefficients(differences: np.ndarray, mesh_product: float) -> np.ndarray:
    """(-1)^j C_{2j+1} dU_{2j+1} for rows j = 0..J of undivided differences."""
    orders = np.arange(differences.shape[0])
    log_power = np.array([log_nonlocal_power(2 * j + 1, mesh_product) for j in orders])
    with np.errstate(divide="ignore", over="ignore"):
        magnitude = np.exp(log_power[:, None] + np.log(np.abs(differences)))
    sign = np.where(orders % 2, -1.0, 1.0)[:, None] * np.sign(differences)
    return sign * magnitude


@lru_cache(maxsize=64)
def window_kernels(n_obs: int, j_max: int, nk: int) -> tuple[np.ndarray, np.ndarray]:
    """Periodic k-stencils of orders 1, 3, ..., 2 j_max + 1 for one observation window.

    Orders below the window share half-width n_obs; the rest use second-order accuracy.
    Returns the (j_max + 1, nk) kernel matrix and each row's max-abs entry.
    """
    kernels = np.zeros((j_max + 1, nk))
    for j in range(j_max + 1):
        accuracy = 2 * n_obs - 2 * j if j < n_obs else 2
        kernels[j] = periodic_kernel(make_stencil(2 * j + 1, accuracy), nk)
    kernels.setflags(write=False)
    peaks = np.abs(kernels).max(axis=1)
    peaks.setflags(write=False)
    return kernels, peaks


def _check_bound(grid: PhaseGrid, potential: PotentialProfile) -> None:
    if len(potential) != grid.nx:
        raise InvalidGrid(f"potential has {len(potential)} samples but the grid has {grid.nx} x nodes")
    if abs(potential.dx - grid.dx) > 1e-12 * grid.dx:
        raise InvalidGrid(f"potential spacing {potential.dx:.4e} differs from grid dx {grid.dx:.4e}")


def _equilibrate(matrix: sparse.csr_matrix, rhs: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    peaks = np.asarray(abs(matrix).max(axis=1).todense()).ravel()
    scale = np.where(peaks > 0, 1.0 / np.where(peaks > 0, peaks, 1.0), 1.0)
    return sparse.diags(scale) @ matrix, rhs * scale


def _assemble(
    grid: PhaseGrid,
    potential: PotentialProfile,
    boundary: InjectionBoundary,
    windows: np.ndarray,
    j_max: int,
    mode: str,
) -> LinearSystem:
    _check_bound(grid, potential)
    nx, nk = grid.nx, grid.nk
    k = grid.k
    velocity = boundary.material.velocity(k)
    kinetic = velocity / grid.dx
    kinetic_peak = float(np.max(np.abs(kinetic)))
    force_scale = boundary.material.q / (boundary.material.hbar * grid.mesh_product)

    coefficients = series_coefficients(potential.differences(2 * j_max + 1), grid.mesh_product)
    k_nodes = np.arange(nk)
    forward = k > 0
    backward = k < 0

    rows, cols, values = [], [], []
    rhs = np.zeros(nx * nk)
    retained = []
    dominance = np.zeros(nx)

    for i in range(nx):
        kernels, peaks = window_kernels(int(windows[i]), j_max, nk)
        keep = truncate_series(np.abs(coefficients[:, i]) * peaks)
        retained.append(keep)

        base = i * nk
        injected = (forward & (i == 0)) | (backward & (i == nx - 1))
        rows.append(base + k_nodes[injected])
        cols.append(base + k_nodes[injected])
        values.append(np.ones(injected.sum()))
        if i == 0:
            rhs[base + k_nodes[injected]] = boundary.left_values[injected]
        elif i == nx - 1:
            rhs[base + k_nodes[injected]] = boundary.right_values[injected]

        equations = k_nodes[~injected]
        if keep:
            order = list(keep)
            kernel = kernels[order].T @ coefficients[order, i]
            dominance[i] = force_scale * np.max(np.abs(kernel)) / kinetic_peak
            shifts = np.flatnonzero(kernel)
            if shifts.size:
                rows.append(np.repeat(base + equations, shifts.size))
                cols.append((base + (equations[:, None] + shifts[None, :]) % nk).ravel())
                values.append(np.tile(-force_scale * kernel[shifts], equations.size))

        upwind = equations[forward[equations]]
        if i > 0 and upwind.size:
            rows += [base + upwind, base + upwind]
            cols += [base + upwind, base - nk + upwind]
            values += [kinetic[upwind], -kinetic[upwind]]
        downwind = equations[backward[equations]]
        if i < nx - 1 and downwind.size:
            rows += [base + downwind, base + downwind]
            cols += [base + downwind, base + nk + downwind]
            values += [-kinetic[downwind], kinetic[downwind]]

    matrix = sparse.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * nk, nx * nk),
    ).tocsr()
    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    matrix, rhs = _equilibrate(matrix, rhs)
    matrix = sparse.csr_matrix(matrix)

    system = LinearSystem(
        matrix=matrix,
        rhs=rhs,
        grid=grid,
        mode=mode,
        retained_orders=retained,
        label=potential.label,
        dominance=dominance,
    )
    worst = int(np.argmax(dominance))
    if dominance[worst] > DOMINANCE_WARNING:
        logger.warning(
            "%s force terms outweigh transport by %.1e at x index %d (retained orders up to %d)",
            mode,
            dominance[worst],
            worst,
            max(retained[worst]),
        )
    logger.debug(
        "assembled %s system: dimension=%d nz=%d max retained order=%s",
        mode,
        system.dimension,
        system.nz,
        max((max(keep) for keep in retained if keep), default=None),
    )
    return system


def assemble_classical(grid: PhaseGrid, potential: PotentialProfile, boundary: InjectionBoundary) -> LinearSystem:
    """Upwind transport against the first-order force term only."""
    windows = np.ones(grid.nx, dtype=int)
    return _assemble(grid, potential, boundary, windows, 0, CLASSICAL)


def assemble_windowed(
    grid: PhaseGrid,
    potential: PotentialProfile,
    policy: ObservationPolicy,
    boundary: InjectionBoundary,
) -> LinearSystem:
    """Full truncated Moyal series with per-node observation windows."""
    if policy.mode != WINDOWED:
        raise ValueError(f"assemble_windowed needs a windowed policy, got {policy.mode!r}")
    return _assemble(grid, potential, boundary, policy.windows(grid), policy.series_cap(grid), WINDOWED)


def assemble(
    grid: PhaseGrid,
    potential: PotentialProfile,
    policy: ObservationPolicy,
    boundary: InjectionBoundary,
) -> LinearSystem:
    if policy.mode == CLASSICAL:
        return assemble_classical(grid, potential, boundary)
    if policy.mode == WINDOWED:
        return assemble_windowed(grid, potential, policy, boundary)
    raise ValueError("measurement policies are assembled per slice with assemble_measurement")


def _slice_system(
    grid: PhaseGrid,
    coefficients: np.ndarray,
    differences: np.ndarray,
    x_index: int,
    pins: tuple[tuple[int, float], ...],
    j_max: int,
) -> LinearSystem:
    nk = grid.nk
    kernels, peaks = window_kernels(0, j_max, nk)
    keep = truncate_series(np.abs(coefficients[:, x_index]) * peaks)

    reason = None
    if not pins:
        reason = "no pinned node on this slice"
    elif np.all(np.abs(differences[:, x_index]) < DERIVATIVE_FLOOR) or not keep:
        reason = "all potential derivatives vanish"

    kernel = kernels[list(keep)].T @ coefficients[list(keep), x_index] if keep else np.zeros(nk)
    # row j couples f(k_j + l dk) with weight kernel[l]
    nodes = np.arange(nk)
    circulant = kernel[(nodes[None, :] - nodes[:, None]) % nk]

    rhs = np.zeros(nk)
    for k_index, value in pins:
        circulant[k_index] = 0.0
        circulant[k_index, k_index] = 1.0
        rhs[k_index] = value

    matrix, rhs = _equilibrate(sparse.csr_matrix(circulant), rhs)
    return LinearSystem(
        matrix=sparse.csr_matrix(matrix),
        rhs=rhs,
        grid=grid,
        mode=MEASUREMENT,
        retained_orders=[keep],
        x_index=x_index,
        pins=pins,
        unmeasurable_reason=reason,
    )


def assemble_measurement(
    grid: PhaseGrid,
    potential: PotentialProfile,
    pins: list[tuple[int, int, float]],
    j_max: int | None = None,
) -> list[LinearSystem]:
    """One nk x nk constraint system per x slice; kinetic terms are dropped.

    Slices are never rejected here: a slice without pins or without any surviving
    force term carries ``unmeasurable_reason`` and is reported by the solver.
    """
    if not pins:
        raise ValueError("measurement mode needs at least one pinned node")
    _check_bound(grid, potential)
    cap = grid.nk // 2 - 1 if j_max is None else j_max

    by_slice: dict[int, list[tuple[int, float]]] = {}
    for x_index, k_index, value in pins:
        if not (0 <= x_index < grid.nx and 0 <= k_index < grid.nk):
            raise OutOfDomain(f"pin ({x_index}, {k_index}) is outside the {grid.nx} x {grid.nk} grid")
        by_slice.setdefault(x_index, []).append((k_index, float(value)))

    differences = potential.differences(2 * cap + 1)
    coefficients = series_coefficients(differences, grid.mesh_product)
    systems = [
        _slice_system(grid, coefficients, differences, i, tuple(sorted(by_slice.get(i, []))), cap)
        for i in range(grid.nx)
    ]
    logger.debug(
        "assembled %d measurement slices, %d pinned, %d unmeasurable",
        len(systems),
        len(by_slice),
        sum(1 for s in systems if s.unmeasurable_reason and s.pins),
    )
    return systems


def assemble_measurement_slice(
    grid: PhaseGrid,
    potential: PotentialProfile,
    x_index: int,
    pins: list[tuple[int, float]],
    j_max: int | None = None,
) -> LinearSystem:
    """The constraint system of a single pinned slice.

    Raises Unmeasurable when nothing nonlocal is left to constrain the slice.
    """
    systems = assemble_measurement(grid, potential, [(x_index, k, v) for k, v in pins], j_max)
    system = systems[x_index]
    if system.unmeasurable_reason:
        raise Unmeasurable(x_index, system.unmeasurable_reason)
    return system


def sparsity(system: LinearSystem) -> dict:
    row_counts = np.diff(system.matrix.indptr)
    retained = [max(keep) for keep in system.retained_orders if keep]
    return {
        "dimension": system.dimension,
        "nz": system.nz,
        "max_row_nz": int(row_counts.max()) if row_counts.size else 0,
        "mean_row_nz": float(row_counts.mean()) if row_counts.size else 0.0,
        "max_retained_order": max(retained, default=-1),
        "mean_retained_count": float(np.mean([len(keep) for keep in system.retained_orders]))
        if system.retained_orders
        else 0.0,
        "max_dominance": float(np.max(system.dominance)) if system.dominance is not None else float("nan"),
    }


def dump_matrix(system: LinearSystem, path) -> Path:
    """Write ``row col value`` triples under a ``%%moyal nx nk mode`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = system.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    table = np.column_stack([coo.row[order], coo.col[order], coo.data[order]])
    np.savetxt(
        path,
        table,
        fmt=["%d", "%d", "%.17g"],
        header=f"%%moyal {system.grid.nx} {system.grid.nk} {system.mode}",
        comments="",
    )
    logger.info("matrix written to %s", path)
    return path
