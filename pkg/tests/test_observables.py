import numpy as np
import pytest

from moyal.assembly import ObservationPolicy, assemble_classical, injection_values
from moyal.errors import GridMismatch
from moyal import observables
from moyal.observables import (
    IVRecord,
    cat_state,
    current,
    density,
    gaussian_state,
    gaussian_wigner,
    iv_sweep,
    ndr_metrics,
    negativity,
    observe,
    wigner_transform,
)
from moyal.phasespace import DeviceGeometry, build_grid, flat_potential
from moyal.solve import NEAR_SINGULAR, SUCCESS, solve_direct


@pytest.fixture
def oracle_grid():
    return build_grid(0.1, 0.1, 201, 96, x0=-10.0)


def test_density_of_constant_field():
    grid = build_grid(1.0, 1.0, 4, 4)
    np.testing.assert_allclose(density(np.ones((4, 4)), grid), 4.0 / (2.0 * np.pi))


def test_current_of_symmetric_field_vanishes(material):
    grid = build_grid(1e-9, 1e8, 5, 8)
    j = current(np.ones((5, 8)), grid, material)
    assert j.shape == (4,)
    np.testing.assert_allclose(j, 0.0, atol=1e-12 * np.abs(material.velocity(grid.k)).sum() * grid.dk)


def test_current_of_right_movers(material):
    grid = build_grid(1e-9, 1e8, 5, 8)
    f = np.where(grid.k > 0, 1.0, 0.0)[None, :].repeat(5, axis=0)
    expected = material.velocity(grid.k[grid.k > 0]).sum() * grid.dk / (2.0 * np.pi)
    np.testing.assert_allclose(current(f, grid, material), expected, rtol=1e-12)


def test_negativity():
    assert negativity(np.array([[1.0, -1.0], [2.0, 3.0]])) == (-1.0, 0.25)


def test_flat_device_carries_constant_current(small_grid, material):
    boundary = injection_values(small_grid, material)
    field_, _ = solve_direct(assemble_classical(small_grid, flat_potential(small_grid), boundary))
    result = observe(field_, small_grid, material)
    scale = np.abs(material.velocity(small_grid.k)) @ boundary.left_values * small_grid.dk / (2.0 * np.pi)
    assert result.current_deviation <= 1e-10 * scale
    assert result.min_f > 0
    assert result.negative_fraction == 0.0


def test_gaussian_wigner_transform(oracle_grid):
    psi = gaussian_state(oracle_grid, 0.5, 1.0, 0.5)
    field_ = wigner_transform(psi, oracle_grid)
    np.testing.assert_allclose(field_.values, gaussian_wigner(oracle_grid, 0.5, 1.0, 0.5), atol=1e-8)


def test_marginals(oracle_grid):
    psi = gaussian_state(oracle_grid, 0.5, 1.0, 0.5)
    field_ = wigner_transform(psi, oracle_grid)
    np.testing.assert_allclose(density(field_, oracle_grid), np.abs(psi) ** 2, atol=1e-8)


def test_density_matrix_input(oracle_grid):
    psi = gaussian_state(oracle_grid, 0.0, 1.0)
    from_state = wigner_transform(psi, oracle_grid).values
    from_matrix = wigner_transform(np.outer(psi, psi.conj()), oracle_grid).values
    np.testing.assert_allclose(from_matrix, from_state, atol=1e-14)


def test_cat_state_goes_negative(oracle_grid):
    min_f, fraction = negativity(wigner_transform(cat_state(oracle_grid, 6.0, 0.5), oracle_grid))
    assert min_f < 0
    assert 0 < fraction < 1


def test_transform_rejects_bad_input(oracle_grid):
    with pytest.raises(GridMismatch):
        wigner_transform(np.ones(7), oracle_grid)
    coarse = build_grid(1.0, 1.0, 8, 8)
    with pytest.raises(GridMismatch):
        wigner_transform(np.ones(8), coarse)


def test_ndr_peak_and_valley():
    metrics = ndr_metrics(range(7), [0.0, 1.0, 3.0, 2.0, 1.0, 2.0, 4.0])
    assert metrics["peak_index"] == 2
    assert metrics["valley_index"] == 4
    assert metrics["pvr"] == pytest.approx(3.0)


def test_ndr_valley_at_end_of_sweep():
    metrics = ndr_metrics([0.0, 0.1, 0.2, 0.3], [0.0, 2.0, 1.0, 0.5])
    assert metrics["peak_bias"] == 0.1
    assert metrics["valley_index"] == 3
    assert metrics["pvr"] == pytest.approx(4.0)


def test_monotone_curve_has_no_ndr():
    assert ndr_metrics([0.0, 0.1, 0.2, 0.3], [0.0, 1.0, 2.0, 3.0]) is None
    assert ndr_metrics([0.0, 0.1], [0.0, 1.0]) is None


def test_small_iv_sweep(material):
    geometry = DeviceGeometry(
        total_length=14e-9, barrier_height=0.3, barrier_width=2e-9, well_width=2e-9, spacer_width=4e-9
    )
    grid = build_grid(1e-9, 5e8, 14, 16)
    sweep = iv_sweep(grid, geometry, material, [0.05, 0.0], ObservationPolicy(), keep_fields=True)
    records = sweep.records
    assert len(sweep.fields) == 2
    assert [r.bias for r in records] == [0.0, 0.05]
    assert all(r.status in (SUCCESS, NEAR_SINGULAR) for r in records)
    assert all(r.mesh_product == pytest.approx(0.5) for r in records)
    assert records[0].policy == "windowed n_obs=auto"


def test_sweep_carries_ndr_metrics(monkeypatch, small_grid, material):
    currents = {0.0: 0.0, 0.1: 1.0, 0.2: 3.0, 0.3: 2.0, 0.4: 1.0, 0.5: 2.0}

    def point(grid, geometry, material, bias, policy, method, tol):
        status = NEAR_SINGULAR if bias == 0.5 else SUCCESS
        return IVRecord(bias, currents[bias], 0.0, status, policy.describe(), grid.mesh_product), None

    monkeypatch.setattr(observables, "_iv_point", point)
    sweep = iv_sweep(small_grid, None, material, list(currents), ObservationPolicy())
    assert sweep.fields is None
    assert sweep.metrics["peak_bias"] == 0.2
    assert sweep.metrics["valley_bias"] == 0.4
    assert sweep.pvr == 3.0
    assert [r.bias for r in sweep.records if r.peak_flag] == [0.2]
    assert len(sweep.succeeded) == 5


def test_transform_preserves_normalization(oracle_grid):
    field_ = wigner_transform(gaussian_state(oracle_grid, -1.0, 0.8, 1.0), oracle_grid)
    total = field_.values.sum() * oracle_grid.dx * oracle_grid.dk / (2.0 * np.pi)
    assert total == pytest.approx(1.0, abs=1e-8)
