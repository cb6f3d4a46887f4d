import json
from pathlib import Path

import numpy as np
import pytest

from wealthkin.cli import main
from wealthkin.config import default_config, describe_schema, load_config, parse_config
from wealthkin.errors import ConfigError
from wealthkin.harness import epsilon_sweep, micro_meso_compare, run_experiment
from wealthkin.io import read_csv, write_csv

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

FAST = {
    "equilibrium": ["grid.G=256", "numerics.tol=1e-8"],
    "kinetic-homogeneous": ["grid.G=128", "numerics.t_end=0.5", "numerics.dt=0.05"],
    "kinetic-inhomogeneous": ["grid.G=48", "grid.x_cells=16", "numerics.t_end=0.01", "numerics.dt=0.002",
                              "model.velocity=linear"],
    "particles": ["initial.N=200", "numerics.t_end=0.1", "numerics.dt=0.01", "output.stride=2"],
    "hydro": ["grid.G=96", "grid.x_cells=32", "numerics.t_end=0.02", "model.velocity=linear"],
    "invariants": ["invariants.G=256"],
}


# -- parsing ----------------------------------------------------------------

def test_d_zero_rejected_with_line_number():
    with pytest.raises(ConfigError, match=r"line 3: .*d > 0"):
        parse_config("[model]\nkappa = 2\nd = 0\n")


def test_unknown_key_and_section_carry_line_numbers():
    with pytest.raises(ConfigError, match=r"line 4: unknown key 'kapa'"):
        parse_config("[experiment]\nkind = hydro\n[model]\nkapa = 2\n")
    with pytest.raises(ConfigError, match=r"line 1: unknown section"):
        parse_config("[modle]\nkappa = 2\n")


def test_bad_value_and_bad_kind():
    with pytest.raises(ConfigError, match=r"line 2: \[grid\] G"):
        parse_config("[grid]\nG = many\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("[experiment]\nkind = teleport\n")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError, match="line"):
        parse_config("[model]\nkappa = 2\nthis line has no separator\n")


def test_overrides_apply_and_validate():
    c = default_config("hydro", ["model.kappa=3.5", "grid.x_cells=64"])
    assert c.params.kappa == 3.5 and c.x_grid.cells == 64
    assert c.with_overrides(["model.d=0.5"]).params.d == 0.5
    with pytest.raises(ConfigError):
        default_config("hydro", ["model.nonsense=1"])
    with pytest.raises(ConfigError):
        default_config("hydro", ["kappa=1"])


def test_every_shipped_config_parses():
    files = sorted(CONFIG_DIR.glob("*.ini"))
    assert len(files) >= 8
    kinds = {load_config(f).experiment for f in files}
    assert {"equilibrium", "hydro", "epsilon-sweep", "micro-meso-compare"} <= kinds


def test_schema_lists_every_section():
    text = describe_schema()
    for s in ("[model]", "[grid]", "[numerics]", "[initial]", "[sweep]", "[output]"):
        assert s in text


# -- run_experiment ---------------------------------------------------------

def test_equilibrium_artifacts(tmp_path):
    arts = run_experiment(default_config("equilibrium", FAST["equilibrium"]), tmp_path)
    assert set(arts.files) == {"equilibrium.csv", "metadata.json"}
    assert arts.exit_status == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    for key in ("config", "version", "conservation", "timings", "results"):
        assert key in meta


@pytest.mark.parametrize("kind", sorted(FAST))
def test_runs_are_byte_identical(tmp_path, kind):
    c = default_config(kind, FAST[kind])
    a = run_experiment(c, tmp_path / "a")
    run_experiment(c, tmp_path / "b")
    csvs = sorted(n for n in a.files if n.endswith(".csv"))
    assert csvs
    for name in csvs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "metadata.json").read_text())
    mb = json.loads((tmp_path / "b" / "metadata.json").read_text())
    ma.pop("timings"), mb.pop("timings")
    assert ma == mb


@pytest.mark.parametrize("kind", sorted(FAST))
def test_csv_round_trip(tmp_path, kind):
    arts = run_experiment(default_config(kind, FAST[kind]), tmp_path)
    for name in (n for n in arts.files if n.endswith(".csv")):
        src = tmp_path / name
        data = read_csv(src)
        header = src.read_text().splitlines()[0].split(",")
        out = write_csv(tmp_path / ("copy_" + name), header, [data[h] for h in header])
        assert out.read_bytes() == src.read_bytes()


def test_seed_changes_particle_output(tmp_path):
    c = default_config("particles", FAST["particles"])
    run_experiment(c, tmp_path / "a")
    run_experiment(c.with_overrides(["numerics.seed=1"]), tmp_path / "b")
    assert (tmp_path / "a" / "histogram.csv").read_bytes() != (tmp_path / "b" / "histogram.csv").read_bytes()


# -- sweep and compare ------------------------------------------------------

SMALL_SWEEP = ["grid.G=48", "grid.y_max=1000", "grid.x_cells=16", "sweep.t_end=0.01", "sweep.dt=0.002",
               "model.velocity=linear"]


def test_sweep_needs_three_epsilons():
    c = default_config("epsilon-sweep", SMALL_SWEEP)
    with pytest.raises(ConfigError):
        epsilon_sweep(c, [0.1])


def test_sweep_needs_quadratic_potential():
    c = default_config("epsilon-sweep", SMALL_SWEEP + ["model.potential=even-polynomial",
                                                        "model.potential_coeffs=0, 0, 0.25"])
    with pytest.raises(ConfigError):
        epsilon_sweep(c)


def test_sweep_warns_for_large_epsilon():
    c = default_config("epsilon-sweep", SMALL_SWEEP)
    with pytest.warns(RuntimeWarning, match="not small"):
        tab = epsilon_sweep(c, [1.0, 0.1, 0.05])
    assert len(tab.errors) == 3 and all(np.isfinite(tab.errors))
    assert any("scale-separation" in w for w in tab.warnings)


COMPARE = ["numerics.t_end=1", "numerics.dt=0.01", "grid.G=256", "grid.y_max=1000"]


def test_small_ensemble_warning():
    rep = micro_meso_compare(default_config("micro-meso-compare", COMPARE + ["initial.N=100"]))
    assert rep.N == 100 and any("small ensemble" in w for w in rep.warnings)
    assert 0 <= rep.ks_particles_kinetic <= 1


def test_quartic_compare_uses_fixed_point():
    c = default_config("micro-meso-compare", COMPARE + [
        "initial.N=1000", "model.potential=even-polynomial", "model.potential_coeffs=0, 0, 0.25",
        "model.kappa=1"])
    rep = micro_meso_compare(c)
    assert rep.reference == "fixed-point" and np.isnan(rep.ks_particles_reference_rescaled)


def test_compare_requires_homogeneous_setting():
    c = default_config("micro-meso-compare", COMPARE + ["model.kernel=gaussian", "model.velocity_v0=1"])
    with pytest.raises(ConfigError):
        micro_meso_compare(c)


# -- CLI --------------------------------------------------------------------

def test_cli_success(tmp_path, capsys):
    args = ["equilibrium", "--out", str(tmp_path)]
    for o in FAST["equilibrium"]:
        args += ["--override", o]
    assert main(args) == 0
    assert (tmp_path / "equilibrium.csv").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nkappa = 2\nd = 0\n")
    assert main(["equilibrium", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "line 3" in err and str(bad) in err


def test_cli_numerical_abort_exit_code(tmp_path, capsys):
    args = ["kinetic", "--out", str(tmp_path), "--override", "numerics.scheme=explicit-euler",
            "--override", "numerics.dt=10", "--override", "grid.G=64"]
    assert main(args) == 3
    assert "numerical abort" in capsys.readouterr().err


def test_cli_seed_flag_and_schema(tmp_path, capsys):
    args = ["particles", "--seed", "18446744073709551615", "--out", str(tmp_path)]
    for o in FAST["particles"]:
        args += ["--override", o]
    assert main(args) == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["config"]["numerics"]["seed"] == 2 ** 64 - 1
    assert main(["schema"]) == 0
    assert "[numerics]" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        main(["particles", "--seed", "-1"])


def test_cli_inhomogeneous_flag(tmp_path):
    args = ["kinetic", "--inhomogeneous", "--out", str(tmp_path)]
    for o in FAST["kinetic-inhomogeneous"]:
        args += ["--override", o]
    assert main(args) == 0
    assert (tmp_path / "field.csv").exists()
