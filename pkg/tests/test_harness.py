import json

import pandas as pd
import pytest

from moyal.config import parse_config
from moyal.errors import AcceptanceFailure
from moyal.harness import (
    ExperimentSpec,
    check_sparsity,
    check_classical_limit,
    check_linearity,
    check_stencils,
    check_wigner_oracle,
    coefficient_rows,
    monotone_tail,
    run_bigbang,
    run_cj,
    run_coeffs,
    run_decohere,
    run_equilibrium,
    run_iv,
    run_measure,
    run_mesh_sweep,
    run_weights,
    run_window_sweep,
)
from moyal.solve import NEAR_SINGULAR


def test_coefficient_rows():
    assert run_coeffs(1, 2) == ["-1,-0.5", "0,0.0", "1,0.5", "A,1.0"]


def test_rational_coefficients(tmp_path):
    lines = run_coeffs(3, 2, rational=True, csv_path=tmp_path / "d3.csv")
    assert lines == ["-2,-1/2", "-1,1", "0,0", "1,-1", "2,1/2", "A,3"]
    frame = pd.read_csv(tmp_path / "d3.csv", dtype=str)
    assert frame.columns.tolist() == ["l", "value"]
    assert frame["value"].iloc[-1] == "3"


def test_coefficient_rows_end_with_weight_sum():
    rows = coefficient_rows(1, 4)
    assert rows[-1] == ("A", "1.5")
    assert len(rows) == 6


def test_stencil_check_passes_on_sampled_pairs():
    assert check_stencils(seed=3, samples=20) == []


def test_classical_limit_check():
    assert check_classical_limit() == []


def test_wigner_oracle_check():
    assert check_wigner_oracle() == []


def test_linearity_check():
    assert check_linearity(seed=1) == []


def test_monotone_tail_ignores_nan():
    assert monotone_tail(pd.Series([3.0, float("nan"), 2.0, 2.0]).to_numpy())
    assert not monotone_tail(pd.Series([1.0, 2.0]).to_numpy())


def test_lenient_finish_writes_manifest(tmp_path):
    spec = ExperimentSpec(kind="demo", config=None, out_dir=tmp_path, lenient=True)
    summary = spec.finish({"acceptance": {"bar": False}})
    assert summary["acceptance"] == {"bar": False}
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["kind"] == "demo"
    assert "numpy" in manifest["packages"]


def test_finish_raises_on_failed_bar_by_default(tmp_path):
    spec = ExperimentSpec(kind="demo", config=None, out_dir=tmp_path)
    with pytest.raises(AcceptanceFailure) as excinfo:
        spec.finish({"acceptance": {"bar": False, "other": True}})
    assert excinfo.value.failures == ["demo: bar"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["summary"]["acceptance"] == {"bar": False, "other": True}


def test_nonlocal_power_experiment(tmp_path):
    summary = run_cj(ExperimentSpec(kind="cj", config=None, out_dir=tmp_path))
    assert all(summary["acceptance"].values())
    frame = pd.read_csv(tmp_path / "nonlocal_power.csv")
    assert frame["j"].tolist() == list(range(101))
    peaks = {row["mesh_product"]: row["peak_j"] for row in summary["meshes"]}
    assert peaks[2.0] == 1
    assert peaks[0.02] > 1


@pytest.mark.slow
def test_weight_sum_experiment(tmp_path):
    run_weights(ExperimentSpec(kind="weights", config=None, out_dir=tmp_path))
    frame = pd.read_csv(tmp_path / "weight_sums.csv")
    assert set(frame["d"]) == {9, 15, 21}
    assert (tmp_path / "manifest.json").exists()


def _shipped(configs_dir, name, **settings):
    """A shipped config with some ``key = value`` lines replaced."""
    lines = []
    for line in (configs_dir / name).read_text().splitlines():
        key = line.split("=")[0].strip()
        lines.append(f"{key} = {settings.pop(key)}" if key in settings else line)
    assert not settings, f"{name} has no {sorted(settings)}"
    return parse_config("\n".join(lines), source=name, environment={})


def _spec(kind, config, tmp_path, lenient=False):
    return ExperimentSpec(kind=kind, config=config, out_dir=tmp_path / kind, lenient=lenient)


@pytest.mark.slow
def test_measure_experiment_meets_its_bars(configs_dir, tmp_path):
    summary = run_measure(_spec("measure", _shipped(configs_dir, "measure.ini"), tmp_path))
    assert summary["acceptance"] == {
        "all_measurable": True,
        "argmax_at_pin": True,
        "mean_cosine_similarity": True,
        "multi_pin_local_maxima": True,
    }
    assert summary["mean_cosine_similarity"] >= 0.9
    assert {row["status"] for row in summary["seeds"]} == {"Success"}
    assert (tmp_path / "measure" / "multi_pin_slice.csv").exists()


@pytest.mark.slow
def test_flat_measure_is_unmeasurable(configs_dir, tmp_path):
    config = _shipped(configs_dir, "measure.ini", amplitude_eV=0.0, seeds="0, 1")
    with pytest.raises(AcceptanceFailure):
        run_measure(_spec("measure", config, tmp_path))
    manifest = json.loads((tmp_path / "measure" / "manifest.json").read_text())
    assert manifest["summary"]["acceptance"] == {"all_measurable": False}
    assert {row["status"] for row in manifest["summary"]["seeds"]} == {"Unmeasurable"}


@pytest.mark.slow
def test_bigbang_experiment_meets_its_bars(configs_dir, tmp_path):
    summary = run_bigbang(_spec("bigbang", _shipped(configs_dir, "bigbang.ini"), tmp_path))
    assert summary["acceptance"] == {
        "no_pulse_unmeasurable": True,
        "jmax40_out_of_reach": True,
        "jmax56_measures_at_pin": True,
    }
    assert summary["pulse_cell"] - summary["pin"][0] == 55


@pytest.mark.slow
def test_sparsity_check_on_the_rtd():
    passed, detail = check_sparsity()
    assert passed, detail


@pytest.mark.slow
def test_equilibrium_auto_window_fails_its_bar(configs_dir, tmp_path):
    with pytest.raises(AcceptanceFailure) as excinfo:
        run_equilibrium(_spec("equilibrium", _shipped(configs_dir, "equilibrium.ini"), tmp_path))
    assert "equilibrium: mp0.02_auto_stable" in excinfo.value.failures
    manifest = json.loads((tmp_path / "equilibrium" / "manifest.json").read_text())
    acceptance = manifest["summary"]["acceptance"]
    assert acceptance["mp0.02_lowest_order_unstable"] is True
    assert acceptance["mp0.028_lowest_order_unstable"] is True
    statuses = {(run["mesh_product"], run["window"]): run["status"] for run in manifest["summary"]["runs"]}
    assert statuses[(0.02, "auto")] == NEAR_SINGULAR


@pytest.mark.slow
def test_iv_experiment_records_every_bias(configs_dir, tmp_path):
    config = _shipped(configs_dir, "iv.ini", bias_step_V=0.15)
    summary = run_iv(_spec("iv", config, tmp_path, lenient=True))
    assert sum(summary["statuses"].values()) == 3
    assert summary["statuses"].get(NEAR_SINGULAR) == 3
    assert summary["ndr"] is None
    frame = pd.read_csv(tmp_path / "iv" / "iv.csv")
    assert len(frame) == 3


@pytest.mark.slow
def test_window_sweep_flags_the_narrowest_window(configs_dir, tmp_path):
    config = _shipped(configs_dir, "window_sweep.ini", windows="5, 50", bias_step_V=0.15)
    summary = run_window_sweep(_spec("window-sweep", config, tmp_path, lenient=True))
    assert summary["uncertainty_window"] == 50
    assert summary["acceptance"]["narrow_window_flagged"] is True
    rows = {row["n_obs"]: row for row in summary["windows"]}
    assert rows[5]["near_singular"] > 0
    assert rows[50]["nz"] < rows[5]["nz"]


@pytest.mark.slow
def test_mesh_sweep_writes_one_curve_per_mesh(configs_dir, tmp_path):
    config = _shipped(configs_dir, "mesh_sweep.ini", dk_scales="1.0, 1.5", bias_step_V=0.15)
    summary = run_mesh_sweep(_spec("mesh-sweep", config, tmp_path, lenient=True))
    assert [row["dk_scale"] for row in summary["meshes"]] == [1.0, 1.5]
    assert summary["meshes"][1]["mesh_product"] == pytest.approx(0.03)
    for scale in ("1", "1.5"):
        assert len(pd.read_csv(tmp_path / "mesh-sweep" / f"iv_dk{scale}.csv")) == 3


@pytest.mark.slow
def test_decohere_experiment_compares_three_policies(configs_dir, tmp_path):
    config = _shipped(configs_dir, "decohere.ini", bias_step_V=0.15)
    summary = run_decohere(_spec("decohere", config, tmp_path, lenient=True))
    assert [row["policy"] for row in summary["policies"]] == ["coherent", "decohere_A", "decohere_B"]
    assert summary["peak_bias_V"] == 0.16
    assert set(summary["acceptance"]) == {
        "A_suppresses_resonance",
        "B_keeps_resonance",
        "coherent_field_negative",
        "A_reduces_negativity",
    }
    assert (tmp_path / "decohere" / "field_coherent.csv").exists()
