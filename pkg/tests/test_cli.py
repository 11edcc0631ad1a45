import json
import os

import numpy as np
import pytest

from main import main
from services.data_service import DATASET_SCHEMAS, DataService


def _write_spec(tmp_path, name="spec.json", **overrides):
    spec = {
        "system": "schrodinger_1d",
        "grid": {"extent": [[0.0, 2 * np.pi]], "points": [64]},
        "gauge": {"phi": "0.1", "A": ["0"]},
        "initial_state": {"family": "plane_wave", "params": {"mode": 1}},
        "dt": 1e-2,
        "t_final": 0.5,
        "snapshot_stride": 10,
        "stepper": "crank_nicolson",
    }
    spec.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(spec))
    return str(path)


def _read(out_dir, name):
    return DataService(str(out_dir)).read_dataset(os.path.join(str(out_dir), f"{name}.csv"))[0]


def test_version(capsys):
    assert main(["version"]) == 0
    assert "weyl-pilot-lab" in capsys.readouterr().out


def test_validate(tmp_path, capsys):
    assert main(["validate", _write_spec(tmp_path)]) == 0
    assert "valid" in capsys.readouterr().out
    bad = _write_spec(tmp_path, "bad.json", grid={"extent": [[0.0, 1.0]], "points": [100]})
    assert main(["validate", bad]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_unknown_key_is_a_configuration_error(tmp_path):
    assert main(["run", _write_spec(tmp_path, colour="blue"), "--out", str(tmp_path / "out")]) == 2


def test_hermitian_run_keeps_born_norm_flat(tmp_path):
    spec = _write_spec(tmp_path, experiments=[{"kind": "density", "times": [0.5], "methods": ["backward"]}])
    out = tmp_path / "out"
    assert main(["run", spec, "--out", str(out)]) == 0
    born = _read(out, "born_norm")
    assert len(born) == 51
    np.testing.assert_allclose(born["born_norm"], 1.0, atol=1e-8)
    norms = _read(out, "conserved_norm")
    assert norms["norm"].iloc[0] == pytest.approx(1.0, abs=1e-8)

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_status"] == 0
    assert manifest["outputs"] == sorted(["born_norm.csv", "conserved_norm.csv", "summary.json"])
    assert manifest["conventions"]
    assert manifest["spec"]["dt"] == 1e-2


def test_reruns_write_identical_datasets(tmp_path):
    spec = _write_spec(tmp_path, coupling={"e": 0.0, "e_imag": 0.5}, gauge={"phi": "0.3*cos(x)", "A": ["0"]},
                       initial_state={"family": "cosine", "params": {"amplitude": 0.5, "k_mode": 1}})
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["run", spec, "--out", str(first)]) == 0
    assert main(["run", spec, "--out", str(second)]) == 0
    assert (first / "born_norm.csv").read_bytes() == (second / "born_norm.csv").read_bytes()


def test_overflowing_potential_exits_with_divergence(tmp_path):
    spec = _write_spec(tmp_path, gauge={"phi": "exp(x*1000)", "A": ["0"]})
    out = tmp_path / "out"
    assert main(["run", spec, "--out", str(out)]) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    summary = json.loads((out / "summary.json").read_text())
    assert manifest["exit_status"] == 3
    assert summary["divergence_step"] == 1


def test_small_figure_datasets(tmp_path):
    spec = _write_spec(
        tmp_path,
        coupling={"e": 0.0, "e_imag": 0.5},
        gauge={"phi": "0.3*cos(x)", "A": ["0"]},
        initial_state={"family": "cosine", "params": {"amplitude": 0.5, "k_mode": 1}},
        t_final=1.0,
        experiments=[{"kind": "figures", "times": [0.0, 0.5, 1.0], "x_min": 1.0, "x_max": 2.0,
                      "x_step": 0.5, "sample_every": 0.25}],
        degraded_fails=False,
    )
    out = tmp_path / "out"
    assert main(["run", spec, "--out", str(out)]) == 0
    for name in ("trajectories", "scale_factor", "densities"):
        assert list(_read(out, name).columns) == DATASET_SCHEMAS[name]

    densities = _read(out, "densities")
    assert len(densities) == 9
    start = densities[densities["t"] == 0.0]
    np.testing.assert_array_equal(start["born_density"], start["conserved_density"])

    scale = _read(out, "scale_factor")
    np.testing.assert_array_equal(scale[scale["t"] == 0.0]["one_squared"], 1.0)

    traces = _read(out, "trajectories")
    last = traces[(traces["t_cross"] == 1.0)].groupby("trace").tail(1)
    np.testing.assert_allclose(last["x"], last["x_cross"], atol=1e-12)


def test_convergence_experiment(tmp_path):
    spec = _write_spec(
        tmp_path,
        coupling={"e": 0.0, "e_imag": 0.5},
        gauge={"phi": "0.3*cos(x)", "A": ["0"]},
        initial_state={"family": "cosine", "params": {"amplitude": 0.5, "k_mode": 1}},
        dt=0.02,
        t_final=0.2,
        snapshot_stride=1,
        stepper="crank_nicolson",
        experiments=[{"kind": "convergence", "times": [0.1], "levels": 2}],
        degraded_fails=False,
    )
    out = tmp_path / "out"
    assert main(["run", spec, "--out", str(out)]) == 0
    frame = _read(out, "convergence")
    assert list(frame.columns) == DATASET_SCHEMAS["convergence"]
    assert len(frame) == 4
    assert sorted(set(frame["points"])) == [64, 128]
    np.testing.assert_allclose(sorted(set(frame["dt"])), [0.01, 0.02])
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["convergence"]["observed_order"]) == {"continuity", "hamilton_jacobi"}


@pytest.mark.slow
def test_sinx_preset(tmp_path):
    out = tmp_path / "sinx"
    assert main(["figures", "sinx", "--out", str(out)]) in (0, 4)
    norms = _read(out, "conserved_norm")
    assert set(norms["method"]) == {"backward", "comoving"}
    np.testing.assert_allclose(norms["norm"], 1.0, atol=1e-3)
    born = _read(out, "born_norm")
    assert np.max(np.abs(born["born_norm"] - 1.0)) > 0.1

    densities = _read(out, "densities")
    start = densities[densities["t"] == 0.0]
    np.testing.assert_array_equal(start["born_density"], start["conserved_density"])


@pytest.mark.slow
def test_relaxation_preset(tmp_path):
    out = tmp_path / "relax"
    assert main(["figures", "relax", "--out", str(out)]) in (0, 4)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["relaxation"]["h_final"] <= 0.5 * summary["relaxation"]["h_initial"]
