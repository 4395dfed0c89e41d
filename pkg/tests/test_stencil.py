import math
from dataclasses import replace

import numpy as np
import pytest

from moyal.errors import OrderOverflow
from moyal.harness import check_stencils
from moyal.stencil import (
    exact_moment_residuals,
    half_width,
    make_stencil,
    max_nonlocal_power,
    moment_failures,
    nonlocal_power,
    nonlocal_power_table,
    periodic_kernel,
    set_max_order,
    weight_sum,
    weight_sum_table,
)


def test_first_derivative_second_order():
    table = make_stencil(1, 2)
    assert table.half_width == 1
    assert table.coefficients.tolist() == [-0.5, 0.0, 0.5]
    assert table.weight_sum == 1.0


def test_second_derivative_second_order():
    assert make_stencil(2, 2).coefficients.tolist() == [1.0, -2.0, 1.0]


def test_third_derivative_is_exact():
    table = make_stencil(3, 2)
    assert table.as_rationals() == ["-1/2", "1", "0", "-1", "1/2"]
    assert table.offsets.tolist() == [-2, -1, 0, 1, 2]


def test_fourth_order_first_derivative():
    table = make_stencil(1, 4)
    assert table.as_rationals() == ["1/12", "-2/3", "0", "2/3", "-1/12"]
    assert weight_sum(1, 4) == 1.5


@pytest.mark.parametrize("d, m, p", [(1, 2, 1), (3, 2, 2), (2, 4, 2), (7, 10, 8)])
def test_half_width(d, m, p):
    assert half_width(d, m) == p
    assert make_stencil(d, m).half_width == p


def test_tables_are_memoized_and_read_only():
    table = make_stencil(5, 6)
    assert make_stencil(5, 6) is table
    with pytest.raises(ValueError):
        table.coefficients[0] = 1.0


@pytest.mark.parametrize("d, m", [(1, 3), (1, 0), (-1, 2)])
def test_invalid_orders(d, m):
    with pytest.raises(ValueError):
        make_stencil(d, m)


def test_order_limit(restore_max_order):
    set_max_order(20)
    with pytest.raises(OrderOverflow) as excinfo:
        make_stencil(11, 10)
    assert excinfo.value.maximum == 20
    assert make_stencil(9, 10).derivative_order == 9


def test_moment_conditions_hold():
    tables = [make_stencil(d, m) for d in (1, 2, 3, 5, 7) for m in (2, 4, 8)]
    assert moment_failures(tables) == []
    for table in tables[:6]:
        assert all(r == 0 for r in exact_moment_residuals(table))


def test_wide_stencil_moments():
    # well past where a float Vandermonde solve falls apart
    assert moment_failures([make_stencil(1, 60), make_stencil(31, 40)]) == []


def test_corrupted_table_is_named():
    table = make_stencil(3, 4)
    bad = np.array(table.coefficients)
    bad[0] += 1e-3
    failures = check_stencils(tables=[replace(table, coefficients=bad)])
    assert len(failures) == 1
    assert "d=3, m=4" in failures[0]


def test_odd_stencils_are_antisymmetric():
    for d in (1, 3, 9):
        coefficients = make_stencil(d, 6).coefficients
        np.testing.assert_allclose(coefficients, -coefficients[::-1])


def test_periodic_kernel_wraps():
    kernel = periodic_kernel(make_stencil(1, 2), 8)
    assert kernel[1] == 0.5
    assert kernel[7] == -0.5
    assert np.count_nonzero(kernel) == 2


def test_nonlocal_power_values():
    assert nonlocal_power(1, 0.02) == pytest.approx(1.0)
    assert nonlocal_power(3, 0.5) == pytest.approx(1 / 6)
    assert nonlocal_power(3, 1.0) == pytest.approx(1 / 24)
    assert nonlocal_power(3, 0.02) == pytest.approx(104.1666667, rel=1e-9)


def test_nonlocal_power_overflow_is_infinite():
    assert math.isinf(nonlocal_power(1001, 1e-6))


def test_nonlocal_power_shape():
    assert max_nonlocal_power(1.0, 21) == (1, pytest.approx(1.0))
    j, value = max_nonlocal_power(0.02, 99)
    assert 1 < j < 99
    assert value > 1.0
    table = nonlocal_power_table([0.5, 2.0], 10)
    assert table.shape == (2, 11)
    assert np.all(np.diff(table[1, 1:]) < 0)


def test_weight_sum_table_marks_overflow():
    table = weight_sum_table([1], [2, 600])
    assert table[0, 0] == 1.0
    assert np.isnan(table[0, 1])
