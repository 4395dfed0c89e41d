import numpy as np
import pytest

from moyal.assembly import (
    AUTO,
    CLASSICAL,
    MEASUREMENT,
    ObservationPolicy,
    assemble,
    assemble_classical,
    assemble_measurement,
    assemble_measurement_slice,
    assemble_windowed,
    dump_matrix,
    DOMINANCE_WARNING,
    injection_values,
    sparsity,
    truncate_series,
    window_kernels,
)
from moyal.errors import InvalidGrid, OutOfDomain, Unmeasurable
from moyal.phasespace import (
    MaterialParams,
    PotentialProfile,
    build_grid,
    flat_potential,
    linear_potential,
    pulse_potential,
    random_potential,
)


def _row_peaks(system):
    return np.asarray(abs(system.matrix).max(axis=1).todense()).ravel()


def test_injection_is_symmetric_in_k(small_grid, material):
    boundary = injection_values(small_grid, material)
    np.testing.assert_array_equal(boundary.left_values, boundary.right_values)
    np.testing.assert_array_equal(boundary.left_values, boundary.left_values[::-1])
    assert np.all(boundary.left_values > 0)


def test_higher_fermi_level_injects_more(small_grid):
    boundary = injection_values(small_grid, MaterialParams(fermi_left=0.08, fermi_right=0.02))
    assert np.all(boundary.left_values > boundary.right_values)


def test_flat_potential_is_pure_advection(small_grid, material):
    boundary = injection_values(small_grid, material)
    system = assemble_classical(small_grid, flat_potential(small_grid), boundary)
    assert system.dimension == small_grid.nx * small_grid.nk
    assert sparsity(system)["max_row_nz"] <= 2
    assert all(keep == () for keep in system.retained_orders)


def test_classical_rows_stay_narrow(material):
    grid = build_grid(1e-9, 2e8, 8, 16)
    system = assemble_classical(grid, linear_potential(grid, 0.0, -0.05), injection_values(grid, material))
    assert sparsity(system)["max_row_nz"] <= 5
    np.testing.assert_allclose(_row_peaks(system), 1.0)


def test_injection_rows_are_identities(small_grid, material):
    boundary = injection_values(small_grid, material)
    system = assemble_classical(small_grid, linear_potential(small_grid, 0.0, -0.05), boundary)
    nk = small_grid.nk
    inflow = np.flatnonzero(small_grid.k > 0)
    for j in inflow:
        row = system.matrix.getrow(j)
        assert row.nnz == 1 and row[0, j] == 1.0
        assert system.rhs[j] == boundary.left_values[j]
    outflow = np.flatnonzero(small_grid.k < 0)
    last = (small_grid.nx - 1) * nk
    for j in outflow:
        assert system.matrix.getrow(last + j).nnz == 1


def test_classical_matches_windowed_at_unit_mesh(unit_grid, material):
    profile = linear_potential(unit_grid, 0.0, -0.125)
    boundary = injection_values(unit_grid, material)
    classical = assemble_classical(unit_grid, profile, boundary)
    windowed = assemble_windowed(unit_grid, profile, ObservationPolicy(), boundary)
    assert (classical.matrix != windowed.matrix).nnz == 0
    np.testing.assert_array_equal(classical.rhs, windowed.rhs)


def test_kernels_annihilate_constants():
    kernels, peaks = window_kernels(3, 7, 16)
    assert kernels.shape == (8, 16)
    np.testing.assert_allclose(kernels.sum(axis=1), 0.0, atol=1e-9 * peaks.max())


def test_kernels_are_cached():
    assert window_kernels(2, 3, 8)[0] is window_kernels(2, 3, 8)[0]


@pytest.mark.parametrize(
    "magnitudes, kept",
    [
        ([1.0, 1e-7, 1e-5], (0, 2)),
        ([0.0, 2.0, 1e-7], (1,)),
        ([0.0, 0.0], ()),
        ([], ()),
    ],
)
def test_truncation(magnitudes, kept):
    assert truncate_series(magnitudes) == kept


def test_auto_window_follows_mesh_product():
    policy = ObservationPolicy()
    assert policy.default_window(build_grid(0.4e-9, 0.05e9, 8, 8)) == 50
    assert policy.default_window(build_grid(0.4e-9, 0.07e9, 8, 8)) == 36
    assert policy.default_window(build_grid(1e-9, 3e9, 8, 8)) == 1


def test_window_overrides(small_grid):
    policy = ObservationPolicy(n_obs_default=5, overrides=((2, 1),))
    assert policy.windows(small_grid).tolist() == [5, 5, 1, 5, 5, 5]
    with pytest.raises(OutOfDomain):
        ObservationPolicy(overrides=((9, 1),)).windows(small_grid)
    assert policy.series_cap(small_grid) == small_grid.nk // 2 - 1
    assert "overrides=2:1" in policy.describe()


@pytest.mark.parametrize("kwargs", [{"mode": "quantum"}, {"n_obs_default": 0}, {"j_max": -1}])
def test_invalid_policies(kwargs):
    with pytest.raises(ValueError):
        ObservationPolicy(**kwargs)


def test_dispatch(small_grid, material):
    profile = flat_potential(small_grid)
    boundary = injection_values(small_grid, material)
    assert assemble(small_grid, profile, ObservationPolicy(mode=CLASSICAL), boundary).mode == CLASSICAL
    with pytest.raises(ValueError):
        assemble(small_grid, profile, ObservationPolicy(mode=MEASUREMENT), boundary)
    with pytest.raises(ValueError):
        assemble_windowed(small_grid, profile, ObservationPolicy(mode=CLASSICAL), boundary)


def test_potential_must_match_grid(small_grid, material):
    boundary = injection_values(small_grid, material)
    with pytest.raises(InvalidGrid):
        assemble_classical(small_grid, PotentialProfile(np.zeros(5), small_grid.dx), boundary)
    with pytest.raises(InvalidGrid):
        assemble_classical(small_grid, PotentialProfile(np.zeros(6), 2 * small_grid.dx), boundary)


def test_windowed_rows_are_equilibrated(small_grid, material):
    profile = random_potential(0, 0.2, small_grid)
    system = assemble_windowed(small_grid, profile, ObservationPolicy(n_obs_default=AUTO), injection_values(small_grid, material))
    np.testing.assert_allclose(_row_peaks(system), 1.0)
    assert len(system.retained_orders) == small_grid.nx


def test_uniform_slice_is_unmeasurable(small_grid):
    with pytest.raises(Unmeasurable) as excinfo:
        assemble_measurement_slice(small_grid, flat_potential(small_grid), 2, [(4, 1.0)])
    assert excinfo.value.x_index == 2


def test_measurement_marks_every_slice(small_grid):
    systems = assemble_measurement(small_grid, random_potential(1, 0.5, small_grid), [(2, 4, 1.0)])
    assert len(systems) == small_grid.nx
    assert systems[2].unmeasurable_reason is None
    assert systems[2].dimension == small_grid.nk
    assert systems[2].matrix.getrow(4).toarray().ravel().tolist() == [0, 0, 0, 0, 1, 0, 0, 0]
    assert systems[0].unmeasurable_reason == "no pinned node on this slice"


def test_measurement_needs_pins(small_grid):
    profile = random_potential(1, 0.5, small_grid)
    with pytest.raises(ValueError):
        assemble_measurement(small_grid, profile, [])
    with pytest.raises(OutOfDomain):
        assemble_measurement(small_grid, profile, [(2, 8, 1.0)])


def test_dump_matrix(tmp_path, small_grid, material):
    system = assemble_classical(small_grid, flat_potential(small_grid), injection_values(small_grid, material))
    path = dump_matrix(system, tmp_path / "matrix.txt")
    lines = path.read_text().splitlines()
    assert lines[0] == "%%moyal 6 8 classical"
    assert len(lines) == system.nz + 1


def test_dominance_grows_with_series_order(material):
    grid = build_grid(0.4e-9, 0.05e9, 24, 32)
    pulse = pulse_potential(grid, grid.x[12], 1, 0.5)
    boundary = injection_values(grid, material)
    first = assemble_windowed(grid, pulse, ObservationPolicy(n_obs_default=1, j_max=0), boundary)
    full = assemble_windowed(grid, pulse, ObservationPolicy(n_obs_default=1), boundary)
    assert first.dominance.shape == (grid.nx,)
    assert 0.0 < first.dominance.max() < DOMINANCE_WARNING
    assert full.dominance.max() > 1e6 * first.dominance.max()
    assert sparsity(full)["max_dominance"] == pytest.approx(full.dominance.max())


def test_flat_potential_has_no_dominance(small_grid, material):
    system = assemble_classical(small_grid, flat_potential(small_grid), injection_values(small_grid, material))
    assert not np.any(system.dominance)
