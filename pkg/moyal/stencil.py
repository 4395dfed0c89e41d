"""Central finite-difference stencils of arbitrary derivative and accuracy order.

Coefficients are generated exactly. The moment system

    sum_l a^l * l**s = d!  if s == d else 0,    s = 0 .. 2p

is the Vandermonde system of the node offsets -p..p. Folding it with the stencil's
(anti)symmetry leaves a Vandermonde system in the squared offsets l**2, whose inverse is
given row by row by Lagrange basis polynomials with integer coefficients. That is
exact in integer arithmetic and stays cheap for windows of several hundred nodes,
where a floating-point Vandermonde solve is useless.
"""
import logging
import math
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sympy import Poly, Rational, Symbol

from moyal.errors import OrderOverflow

logger = logging.getLogger(__name__)

DEFAULT_MAX_ORDER = 512

_x = Symbol("x")
_tables: dict[tuple[int, int], "StencilTable"] = {}
_tables_lock = threading.Lock()
_max_order = DEFAULT_MAX_ORDER


@dataclass(frozen=True)
class StencilTable:
    """Coefficients a^l for l = -p..p of one (derivative, accuracy) pair.

    ``coefficients`` are dimensionless; divide by spacing**d to get a derivative.
    """

    derivative_order: int
    accuracy_order: int
    half_width: int
    exact: tuple
    coefficients: np.ndarray
    weight_sum: float

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_width, self.half_width + 1)

    @property
    def max_weight(self) -> float:
        return float(np.max(np.abs(self.coefficients)))

    def as_rationals(self) -> list[str]:
        return [str(a) for a in self.exact]


def set_max_order(maximum: int) -> None:
    """Change the combined (d + m) limit; already cached tables stay valid."""
    global _max_order
    if maximum < 3:
        raise ValueError("maximum combined order must be at least 3")
    _max_order = maximum


def get_max_order() -> int:
    return _max_order


def half_width(d: int, m: int) -> int:
    return (d + m - 1) // 2


@lru_cache(maxsize=None)
def _lagrange_basis(p: int, with_origin: bool) -> tuple[tuple[tuple[int, ...], int], ...]:
    """Integer Lagrange basis over the nodes l**2 (l = 1..p, plus 0 if requested).

    Each entry holds the ascending coefficients of prod_{m != l}(x - m**2) and its value
    at the entry's own node.
    """
    nodes = ([0] if with_origin else []) + [l * l for l in range(1, p + 1)]
    full = Poly(1, _x, domain="ZZ")
    for node in nodes:
        full = full * Poly(_x - node, _x, domain="ZZ")

    basis = []
    for node in nodes:
        quotient = full.quo(Poly(_x - node, _x, domain="ZZ"))
        coeffs = tuple(int(c) for c in reversed(quotient.all_coeffs()))
        basis.append((coeffs, int(quotient.eval(node))))
    return tuple(basis)


def _exact_weights(d: int, p: int) -> list:
    power = d // 2
    scale = math.factorial(d)
    weights = [Rational(0)] * (2 * p + 1)

    if d % 2:
        for l, (coeffs, denominator) in enumerate(_lagrange_basis(p, False), start=1):
            a = Rational(scale * coeffs[power], denominator) / (2 * l)
            weights[p + l] = a
            weights[p - l] = -a
    else:
        basis = _lagrange_basis(p, True)
        coeffs, denominator = basis[0]
        weights[p] = Rational(scale * coeffs[power], denominator)
        for l, (coeffs, denominator) in enumerate(basis[1:], start=1):
            a = Rational(scale * coeffs[power], denominator) / 2
            weights[p + l] = a
            weights[p - l] = a
    return weights


def make_stencil(d: int, m: int) -> StencilTable:
    """Central stencil of the d-th derivative with accuracy order m (cached)."""
    if d < 0:
        raise ValueError(f"derivative order must be non-negative, got {d}")
    if m < 2 or m % 2:
        raise ValueError(f"accuracy order must be an even integer >= 2, got {m}")
    if d + m > _max_order:
        raise OrderOverflow(d, m, _max_order)

    key = (d, m)
    table = _tables.get(key)
    if table is not None:
        return table

    p = half_width(d, m)
    exact = _exact_weights(d, p)
    coefficients = np.array([float(a) for a in exact])
    coefficients.setflags(write=False)
    table = StencilTable(
        derivative_order=d,
        accuracy_order=m,
        half_width=p,
        exact=tuple(exact),
        coefficients=coefficients,
        weight_sum=float(sum(abs(a) for a in exact)),
    )
    with _tables_lock:
        table = _tables.setdefault(key, table)
    logger.debug("stencil d=%d m=%d p=%d A=%.6g", d, m, p, table.weight_sum)
    return table


def weight_sum(d: int, m: int) -> float:
    """A = sum of |a^l| of the (d, m) stencil."""
    return make_stencil(d, m).weight_sum


def weight_sum_table(orders: list[int], accuracies: list[int]) -> np.ndarray:
    """A(d, m) for every pair; NaN where the pair exceeds the order limit."""
    table = np.full((len(orders), len(accuracies)), np.nan)
    for i, d in enumerate(orders):
        for j, m in enumerate(accuracies):
            if d + m <= _max_order:
                table[i, j] = weight_sum(d, m)
    return table


def log_nonlocal_power(j: int, mesh_product: float) -> float:
    if mesh_product <= 0:
        raise ValueError(f"mesh product must be positive, got {mesh_product}")
    return -math.lgamma(j + 1) - (j - 1) * math.log(2.0 * mesh_product)


def nonlocal_power(j: int, mesh_product: float) -> float:
    """C_j = 1 / (j! * (2 dx dk)**(j - 1))."""
    exponent = log_nonlocal_power(j, mesh_product)
    if exponent > 709.0:
        return math.inf
    return math.exp(exponent)


def max_nonlocal_power(mesh_product: float, cap: int) -> tuple[int, float]:
    """Largest C_j over odd j <= cap, as (j, C_j)."""
    odd = range(1, cap + 1, 2)
    best = max(odd, key=lambda j: log_nonlocal_power(j, mesh_product))
    return best, nonlocal_power(best, mesh_product)


def nonlocal_power_table(mesh_products: list[float], j_max: int) -> np.ndarray:
    """Rows: mesh products; columns: j = 0..j_max."""
    return np.array(
        [[nonlocal_power(j, mp) for j in range(j_max + 1)] for mp in mesh_products]
    )


def periodic_kernel(table: StencilTable, n: int) -> np.ndarray:
    """Fold the stencil onto a periodic axis of n nodes (entry l lands at l mod n)."""
    kernel = np.zeros(n)
    np.add.at(kernel, table.offsets % n, table.coefficients)
    return kernel


def moment_residuals(table: StencilTable) -> np.ndarray:
    """Floating-point moment residuals, each normalized by sum |a^l l^s|.

    Powers are formed in double precision, so this is only meaningful while
    p**(d + m) stays finite; use exact_moment_residuals beyond that.
    """
    d = table.derivative_order
    offsets = table.offsets.astype(float)
    orders = np.arange(d + table.accuracy_order)
    powers = offsets[None, :] ** orders[:, None]
    terms = powers * table.coefficients[None, :]
    target = np.where(orders == d, float(math.factorial(d)), 0.0)
    scale = np.maximum(np.abs(terms).sum(axis=1), 1.0)
    return np.abs(terms.sum(axis=1) - target) / scale


def exact_moment_residuals(table: StencilTable) -> list:
    """Moment residuals in exact arithmetic; all zero for a correct table."""
    d = table.derivative_order
    residuals = []
    for s in range(d + table.accuracy_order):
        total = sum(
            (a * Rational(l) ** s for a, l in zip(table.exact, table.offsets.tolist())),
            Rational(0),
        )
        residuals.append(total - (math.factorial(d) if s == d else 0))
    return residuals


def moment_failures(tables: list[StencilTable], tolerance: float = 1e-10) -> list[str]:
    """Names of the (d, m) pairs whose float coefficients break a moment condition."""
    failures = []
    for table in tables:
        worst = float(np.max(moment_residuals(table)))
        if not worst <= tolerance:
            failures.append(
                f"moment condition broken for d={table.derivative_order}, "
                f"m={table.accuracy_order} (residual {worst:.3e})"
            )
    return failures
