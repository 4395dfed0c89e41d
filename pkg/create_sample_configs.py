"""Generate sample run configurations for the moyal experiments"""
from pathlib import Path

CONFIG_DIR = Path("configs")
CONFIG_DIR.mkdir(exist_ok=True)

# Resonant-tunnelling diode on 0.4 nm cells: every layer is a whole number of cells
RTD_DEVICE = """[device]
kind = rtd
barrier_height_eV = 0.3
barrier_width_nm = 3.2
well_width_nm = 4.8
spacer_nm = 30
"""

RTD_GRID = """[grid]
dx_nm = 0.4
dk_per_nm = 0.05
nk = 128
"""

MATERIAL = """[material]
mstar_rel = 0.07
temperature_K = 77
fermi_mV = 50
"""

SOLVER = """[solver]
method = direct
tol = 1e-10
"""

BIAS_RANGE = """bias_start_V = 0.0
bias_stop_V = 0.30
bias_step_V = 0.01
"""


def write_config(name: str, *sections: str) -> Path:
    path = CONFIG_DIR / name
    path.write_text("\n".join(section.strip() + "\n" for section in sections))
    print(f"Created: {path}")
    return path


def create_equilibrium_config():
    """Zero bias at dx*dk = 0.02 and 0.028, lowest-order window against auto"""
    write_config(
        "equilibrium.ini",
        RTD_GRID,
        MATERIAL,
        RTD_DEVICE,
        "[observation]\nmode = windowed\nn_obs = auto\n",
        SOLVER,
        "[experiment]\nmesh_products = 0.02, 0.028\nwindows = 1, auto\n",
    )


def create_iv_config():
    write_config(
        "iv.ini",
        RTD_GRID,
        MATERIAL,
        RTD_DEVICE,
        "[observation]\nmode = windowed\nn_obs = auto\n",
        SOLVER,
        "[experiment]\n" + BIAS_RANGE,
    )


def create_window_sweep_config():
    write_config(
        "window_sweep.ini",
        RTD_GRID,
        MATERIAL,
        RTD_DEVICE,
        "[observation]\nmode = windowed\nn_obs = auto\n",
        SOLVER,
        "[experiment]\nwindows = 5, 22, 50, 100, 200\n" + BIAS_RANGE,
    )


def create_mesh_sweep_config():
    write_config(
        "mesh_sweep.ini",
        RTD_GRID,
        MATERIAL,
        RTD_DEVICE,
        "[observation]\nmode = windowed\nn_obs = auto\n",
        SOLVER,
        "[experiment]\ndk_scales = 0.75, 1.0, 1.5, 2.0\n" + BIAS_RANGE,
    )


def create_decohere_config():
    """Points A and B default to the cells just outside the double barrier"""
    write_config(
        "decohere.ini",
        RTD_GRID,
        MATERIAL,
        RTD_DEVICE,
        "[observation]\nmode = windowed\nn_obs = 50\n",
        SOLVER,
        "[experiment]\ndecohere_n_obs = 22\npeak_bias_V = 0.16\n" + BIAS_RANGE,
    )


def create_measure_config():
    write_config(
        "measure.ini",
        "[grid]\ndx_nm = 0.4\ndk_per_nm = 0.05\nnx = 200\nnk = 128\n",
        MATERIAL,
        "[device]\nkind = random\nseed = 0\namplitude_eV = 0.5\n",
        "[observation]\nmode = measurement\n",
        SOLVER,
        "[experiment]\nseeds = 0, 1, 2, 3, 4, 5, 6, 7, 8, 9\npins = 70:0:1\nmulti_pins = 70:-1:1; 70:1:1\n",
    )


def create_bigbang_config():
    """Pin at 20 nm, one-cell pulse 55 cells away"""
    write_config(
        "bigbang.ini",
        "[grid]\ndx_nm = 0.4\ndk_per_nm = 0.05\nnx = 160\nnk = 128\n",
        MATERIAL,
        "[device]\nkind = flat\npulse_height_eV = 0.5\n",
        "[observation]\nmode = measurement\n",
        SOLVER,
        "[experiment]\npins = 20:0:1\npulse_distance_cells = 55\nj_max_values = 40, 56\n",
    )


def create_coefficient_configs():
    grid = "[grid]\ndx_nm = 1\ndk_per_nm = 1\nnx = 8\nnk = 8\n"
    device = "[device]\nkind = flat\n"
    write_config(
        "cj.ini",
        grid,
        device,
        "[experiment]\nmesh_products = 0.02, 0.028, 0.1, 0.25, 0.5, 1.0, 2.0\nj_max = 100\n",
    )
    write_config(
        "weights.ini",
        grid,
        device,
        "[experiment]\nweight_orders = 9, 15, 21\nweight_accuracy_max = 80\n",
    )


if __name__ == "__main__":
    print("Creating sample configurations...\n")

    create_equilibrium_config()
    create_iv_config()
    create_window_sweep_config()
    create_mesh_sweep_config()
    create_decohere_config()
    create_measure_config()
    create_bigbang_config()
    create_coefficient_configs()

    print("\nAll sample configurations created in configs/")
    print("\nExample runs:")
    print("  python app.py equilibrium --config configs/equilibrium.ini --plot")
    print("  python app.py iv --config configs/iv.ini --jobs 4")
    print("  python app.py window-sweep --config configs/window_sweep.ini --jobs 4")
    print("  python app.py measure --config configs/measure.ini")
    print("  python app.py coeffs -d 3 -m 4 --rational")
    print("  python app.py validate")
