import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as splinalg

from moyal.assembly import CLASSICAL, LinearSystem
from moyal.errors import DimensionMismatch, NearSingular
from moyal.phasespace import PhaseGrid

logger = logging.getLogger(__name__)

SUCCESS = "Success"
NEAR_SINGULAR = "NearSingular"
UNMEASURABLE = "Unmeasurable"

DEFAULT_TOLERANCE = 1e-10
PIVOT_FLOOR = 1e-12
MEASUREMENT_RIDGE = 1e-4
# the central k-stencil is not monotone, so classical fields dip below zero near barriers
CLASSICAL_UNDERSHOOT = 1e-2


@dataclass
class SolveReport:
    status: str
    residual_norm: float = float("nan")
    condition_estimate: float | None = None
    iterations: int = 0
    method: str = "direct"
    rank: int | None = None
    message: str = ""
    constraint_residual: float | None = None
    ridge: float | None = None

    @property
    def ok(self) -> bool:
        return self.status == SUCCESS

    def as_dict(self) -> dict:
        return {
            "status": self.status,
            "residual_norm": self.residual_norm,
            "condition_estimate": self.condition_estimate,
            "iterations": self.iterations,
            "method": self.method,
            "rank": self.rank,
            "message": self.message,
            "constraint_residual": self.constraint_residual,
            "ridge": self.ridge,
        }


@dataclass
class WignerField:
    """f on the whole grid (nx, nk), or on one x slice (nk,) when ``x_index`` is set."""

    values: np.ndarray
    grid: PhaseGrid
    provenance: dict = field(default_factory=dict)
    x_index: int | None = None

    @property
    def is_slice(self) -> bool:
        return self.x_index is not None

    @property
    def min(self) -> float:
        return float(np.min(self.values))


def _check_shape(system: LinearSystem) -> None:
    rows, cols = system.matrix.shape
    if rows != cols:
        raise DimensionMismatch(f"system matrix is {rows} x {cols}, not square")
    if system.rhs.shape != (rows,):
        raise DimensionMismatch(f"right-hand side has shape {system.rhs.shape}, expected ({rows},)")
    if not np.any(system.rhs):
        raise DimensionMismatch("system has no inhomogeneous row (injection or pin)")


def _relative_residual(system: LinearSystem, solution: np.ndarray) -> float:
    residual = system.rhs - system.matrix @ solution
    return float(np.linalg.norm(residual) / np.linalg.norm(system.rhs))


def _field(system: LinearSystem, solution: np.ndarray) -> WignerField:
    provenance = {"mode": system.mode, "potential": system.label}
    if system.x_index is not None:
        return WignerField(solution, system.grid, provenance, x_index=system.x_index)
    return WignerField(solution.reshape(system.grid.nx, system.grid.nk), system.grid, provenance)


def undershoot(values: np.ndarray) -> float:
    """Depth of the most negative value relative to max|f|; 0 for nonnegative fields."""
    peak = float(np.max(np.abs(values)))
    if not peak > 0:
        return 0.0
    return max(0.0, -float(np.min(values))) / peak


def _finish(system: LinearSystem, solution: np.ndarray, report: SolveReport) -> tuple[WignerField, SolveReport]:
    field_ = _field(system, solution)
    if system.mode == CLASSICAL and np.all(np.isfinite(solution)):
        depth = undershoot(solution)
        if depth > CLASSICAL_UNDERSHOOT:
            logger.warning("classical field undershoots to %.2e of max|f|", -depth)
    if report.status != SUCCESS:
        logger.warning("%s solve of %s: %s", report.method, system.mode, report.message)
        raise NearSingular(report.message, report=report, field=field_)
    logger.debug("%s solve ok, residual %.2e", report.method, report.residual_norm)
    return field_, report


def solve_direct(system: LinearSystem, tol: float = DEFAULT_TOLERANCE) -> tuple[WignerField, SolveReport]:
    """Sparse LU with one step of iterative refinement.

    Raises NearSingular, carrying the report and the best field found, when the
    factorization is singular, a pivot collapses or the residual stays above ``tol``.
    """
    _check_shape(system)
    matrix = system.matrix.tocsc()
    try:
        lu = splinalg.splu(matrix)
    except RuntimeError as e:
        solution = splinalg.lsqr(matrix, system.rhs, atol=tol, btol=tol)[0]
        report = SolveReport(
            status=NEAR_SINGULAR,
            residual_norm=_relative_residual(system, solution),
            message=f"factorization failed: {e}",
        )
        return _finish(system, solution, report)

    solution = lu.solve(system.rhs)
    solution = solution + lu.solve(system.rhs - matrix @ solution)
    residual = _relative_residual(system, solution)

    pivots = np.abs(lu.U.diagonal())
    smallest, largest = float(pivots.min()), float(pivots.max())
    condition = largest / smallest if smallest > 0 else float("inf")

    problems = []
    if not np.all(np.isfinite(solution)):
        problems.append("non-finite values in the solution")
    if not residual <= tol:
        problems.append(f"relative residual {residual:.3e} exceeds {tol:.1e}")
    if smallest < PIVOT_FLOOR * largest:
        problems.append(f"pivot ratio {smallest / largest:.3e} below {PIVOT_FLOOR:.0e}")

    report = SolveReport(
        status=NEAR_SINGULAR if problems else SUCCESS,
        residual_norm=residual,
        condition_estimate=condition,
        message="; ".join(problems),
    )
    return _finish(system, solution, report)


def solve_iterative(
    system: LinearSystem,
    tol: float = DEFAULT_TOLERANCE,
    restart: int = 60,
    maxiter: int = 400,
) -> tuple[WignerField, SolveReport]:
    """Restarted GMRES with an incomplete-LU preconditioner."""
    _check_shape(system)
    matrix = system.matrix.tocsc()
    try:
        ilu = splinalg.spilu(matrix, drop_tol=1e-8, fill_factor=30)
    except RuntimeError as e:
        raise NearSingular(
            f"incomplete factorization failed: {e}",
            report=SolveReport(status=NEAR_SINGULAR, method="iterative", message=str(e)),
        ) from e

    preconditioner = splinalg.LinearOperator(matrix.shape, ilu.solve)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    solution, info = splinalg.gmres(
        matrix,
        system.rhs,
        M=preconditioner,
        rtol=tol * 1e-2,
        atol=0.0,
        restart=restart,
        maxiter=maxiter,
        callback=count,
        callback_type="pr_norm",
    )
    residual = _relative_residual(system, solution)

    problems = []
    if info > 0:
        problems.append(f"GMRES stopped without converging after {iterations} iterations")
    if info < 0:
        problems.append("GMRES breakdown")
    if not residual <= tol:
        problems.append(f"relative residual {residual:.3e} exceeds {tol:.1e}")

    report = SolveReport(
        status=NEAR_SINGULAR if problems else SUCCESS,
        residual_norm=residual,
        iterations=iterations,
        method="iterative",
        message="; ".join(problems),
    )
    return _finish(system, solution, report)


SOLVERS = {
    "direct": solve_direct,
    "iterative": solve_iterative,
}


def solve_system(system: LinearSystem, method: str = "direct", tol: float = DEFAULT_TOLERANCE):
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}; expected one of {sorted(SOLVERS)}") from None
    return solver(system, tol=tol)


def _pinned_ridge(system: LinearSystem, ridge: float) -> tuple[np.ndarray, int, float]:
    """Pins held exactly; free nodes minimise ``|M f|^2 + ridge * sigma_max^2 * |f_free|^2``.

    Returns the slice, the numerical rank of the free-node constraint block and the
    constraint residual relative to the pinned forcing.
    """
    dense = system.matrix.toarray()
    nk = dense.shape[0]
    pinned = np.array([k_index for k_index, _ in system.pins])
    free = np.setdiff1d(np.arange(nk), pinned)
    if free.size == 0:
        return system.rhs.copy(), 0, 0.0

    block = dense[np.ix_(free, free)]
    forcing = -dense[np.ix_(free, pinned)] @ system.rhs[pinned]
    singular = linalg.svdvals(block)
    sigma_max = float(singular[0]) if singular.size else 0.0
    rank = int(np.sum(singular > max(block.shape) * np.finfo(float).eps * sigma_max))

    stacked = np.vstack([block, np.sqrt(ridge) * sigma_max * np.eye(free.size)])
    target = np.concatenate([forcing, np.zeros(free.size)])
    free_values = linalg.lstsq(stacked, target)[0]

    solution = np.empty(nk)
    solution[pinned] = system.rhs[pinned]
    solution[free] = free_values
    scale = np.linalg.norm(forcing)
    constraint = float(np.linalg.norm(block @ free_values - forcing) / scale) if scale > 0 else 0.0
    return solution, rank, constraint


def solve_slice(
    systems: list[LinearSystem],
    tol: float = DEFAULT_TOLERANCE,
    ridge: float = MEASUREMENT_RIDGE,
) -> list[tuple[WignerField | None, SolveReport]]:
    """Solve every measurement slice independently.

    The constraint block of a slice is a skew circulant: after pinning, a constant and an
    alternating mode still pass through it untouched by the potential. Pinned values are
    held exactly and the free nodes are closed with a ridge relative to the block's largest
    singular value, which gives one answer per slice and keeps it local to the pins. The
    report carries the raw rank of the block and the constraint residual the ridge leaves.
    Slices without pins or force terms come back as Unmeasurable with no field.
    """
    if not ridge > 0:
        raise ValueError(f"ridge must be positive, got {ridge}")
    results = []
    for system in systems:
        if system.unmeasurable_reason:
            report = SolveReport(status=UNMEASURABLE, method="ridge", message=system.unmeasurable_reason)
            if system.pins:
                logger.warning("slice x=%d unmeasurable: %s", system.x_index, system.unmeasurable_reason)
            results.append((None, report))
            continue

        _check_shape(system)
        solution, rank, constraint = _pinned_ridge(system, ridge)
        free = system.dimension - len(system.pins)
        pinned_error = max((abs(solution[k] - system.rhs[k]) for k, _ in system.pins), default=0.0)

        problems = []
        if not np.all(np.isfinite(solution)):
            problems.append("non-finite values in the slice")
        if pinned_error > tol * max(1.0, float(np.max(np.abs(system.rhs)))):
            problems.append(f"pinned values drift by {pinned_error:.3e}")
        message = "; ".join(problems)
        if not problems and rank < free:
            message = f"constraint rank {rank} of {free}, ridge {ridge:.0e} closure"

        report = SolveReport(
            status=NEAR_SINGULAR if problems else SUCCESS,
            residual_norm=_relative_residual(system, solution),
            method="ridge",
            rank=rank,
            message=message,
            constraint_residual=constraint,
            ridge=ridge,
        )
        if problems:
            logger.warning("slice x=%d: %s", system.x_index, message)
        else:
            logger.debug("slice x=%d: rank %d of %d, constraint residual %.3e", system.x_index, rank, free, constraint)
        results.append((_field(system, solution), report))
    return results
