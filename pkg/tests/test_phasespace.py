import numpy as np
import pytest

from moyal.errors import GeometryMismatch, InvalidGrid, OrderOverflow, OutOfDomain
from moyal.phasespace import (
    DeviceGeometry,
    MaterialParams,
    PotentialProfile,
    build_grid,
    flat_potential,
    linear_potential,
    potential_derivative,
    potential_difference,
    pulse_potential,
    random_potential,
    rtd_markers,
    rtd_potential,
)
from moyal.stencil import set_max_order

RTD = DeviceGeometry(total_length=71.2e-9, barrier_width=3.2e-9, well_width=4.8e-9, spacer_width=30e-9)


@pytest.fixture
def rtd_grid():
    return build_grid(0.4e-9, 0.05e9, 178, 8)


def test_mesh_products():
    assert build_grid(0.4e-9, 0.05e9, 178, 128).mesh_product == pytest.approx(0.02, rel=1e-12)
    assert build_grid(0.4e-9, 0.07e9, 178, 128).mesh_product == pytest.approx(0.028, rel=1e-12)


def test_offset_k_grid_avoids_zero():
    grid = build_grid(1.0, 1.0, 4, 4)
    assert grid.k.tolist() == [-1.5, -0.5, 0.5, 1.5]
    assert build_grid(1.0, 1.0, 4, 4, k_offset=False).k.tolist() == [-2.0, -1.0, 0.0, 1.0]


def test_k_index_ties_go_up():
    grid = build_grid(1.0, 1.0, 4, 4)
    assert grid.k_index(0.0) == 2
    assert grid.k_index(-1.4) == 0


def test_x_index(small_grid):
    assert small_grid.x_index(2e-9) == 2
    with pytest.raises(OutOfDomain):
        small_grid.x_index(7e-9)
    assert small_grid.row(2, 3) == 2 * small_grid.nk + 3


@pytest.mark.parametrize(
    "args",
    [(0.0, 1.0, 8, 8), (1.0, -1.0, 8, 8), (1.0, 1.0, 3, 8), (1.0, 1.0, 8, 7), (1.0, 1.0, 8, 2)],
)
def test_invalid_grids(args):
    with pytest.raises(InvalidGrid):
        build_grid(*args)


def test_material_validation():
    with pytest.raises(ValueError):
        MaterialParams(temperature=-1.0)
    material = MaterialParams()
    assert material.velocity(np.array([1e9]))[0] > 0


def test_first_difference_of_quadratic():
    dx = 0.5
    profile = PotentialProfile((dx * np.arange(12)) ** 2, dx)
    assert potential_derivative(profile, 1, 5) == pytest.approx(5.0)


def test_third_difference_of_cubic():
    profile = PotentialProfile(np.arange(12.0) ** 3, 1.0)
    assert potential_difference(profile, 3, 5) == pytest.approx(6.0)
    assert potential_derivative(profile, 3, 6) == pytest.approx(6.0)


def test_uniform_potential_has_no_differences(small_grid):
    differences = flat_potential(small_grid, 0.3).differences(9)
    assert differences.shape == (5, small_grid.nx)
    assert not np.any(differences)


def test_even_order_rejected(small_grid):
    with pytest.raises(ValueError):
        flat_potential(small_grid).difference(2)


def test_order_limit_applies_to_potential(small_grid, restore_max_order):
    set_max_order(10)
    with pytest.raises(OrderOverflow):
        flat_potential(small_grid).difference(9)


def test_linear_extension_keeps_slope():
    grid = build_grid(1e-9, 1e9, 11, 4)
    profile = linear_potential(grid, 0.0, -0.1)
    np.testing.assert_allclose(profile.difference(1), -0.01, atol=1e-15)
    np.testing.assert_allclose(profile.difference(3), 0.0, atol=1e-15)


def test_clamped_ramp_has_end_curvature():
    grid = build_grid(1e-9, 1e9, 11, 4)
    ramp = linear_potential(grid, 0.0, -0.1)
    clamped = PotentialProfile(ramp.values, grid.dx, "clamp")
    third = clamped.difference(3)
    assert np.max(np.abs(third[:2])) > 1e-3
    assert np.max(np.abs(third[-2:])) > 1e-3
    np.testing.assert_allclose(third[3:-3], 0.0, atol=1e-15)


def test_pulse_differences():
    grid = build_grid(1e-9, 1e9, 21, 4)
    profile = pulse_potential(grid, grid.x[10], 1, 0.5)
    first = profile.difference(1)
    assert first[9] == 0.25
    assert first[10] == 0.0
    assert first[11] == -0.25
    with pytest.raises(OutOfDomain):
        pulse_potential(grid, grid.x[0], 3, 0.5)


def test_values_are_read_only(small_grid):
    with pytest.raises(ValueError):
        flat_potential(small_grid).values[0] = 1.0


def test_rtd_is_symmetric_at_zero_bias(rtd_grid):
    values = rtd_potential(rtd_grid, RTD).values
    assert np.array_equal(values, values[::-1])
    assert np.count_nonzero(values == 0.3) == 16


def test_rtd_bias_drops_across_active_region(rtd_grid):
    values = rtd_potential(rtd_grid, RTD, 0.2).values
    assert values[0] == 0.0
    assert values[-1] == pytest.approx(-0.2)
    assert np.all(np.diff(values[:75]) == 0)


def test_rtd_markers(rtd_grid):
    assert rtd_markers(rtd_grid, RTD) == (74, 107)


def test_rtd_layers_must_fit_cells():
    geometry = DeviceGeometry(total_length=71.2e-9, barrier_width=3e-9, well_width=5e-9, spacer_width=30e-9)
    with pytest.raises(GeometryMismatch):
        rtd_potential(build_grid(0.4e-9, 0.05e9, 178, 8), geometry)


def test_rtd_needs_matching_parity():
    with pytest.raises(GeometryMismatch):
        rtd_potential(build_grid(0.4e-9, 0.05e9, 179, 8), RTD)


def test_layout_longer_than_device():
    with pytest.raises(GeometryMismatch):
        DeviceGeometry(total_length=10e-9, barrier_width=3e-9, well_width=5e-9, spacer_width=30e-9)


def test_random_potential_is_seeded(small_grid):
    a = random_potential(3, 0.5, small_grid).values
    assert np.array_equal(a, random_potential(3, 0.5, small_grid).values)
    assert not np.array_equal(a, random_potential(4, 0.5, small_grid).values)
    assert np.all(np.abs(a) <= 0.5)


def test_quadratic_has_no_third_difference():
    profile = PotentialProfile(0.3 * np.arange(12.0) ** 2, 1.0)
    assert potential_difference(profile, 3, 6) == pytest.approx(0.0, abs=1e-12)
    assert potential_derivative(profile, 1, 6) == pytest.approx(0.6 * 6)


def test_zero_amplitude_is_uniform(small_grid):
    assert not np.any(random_potential(0, 0.0, small_grid).values)


def test_minimal_grid():
    grid = build_grid(1e-9, 1e9, 4, 4)
    assert grid.dimension == 16
