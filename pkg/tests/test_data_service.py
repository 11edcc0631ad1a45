import json
from io import StringIO

import numpy as np
import pandas as pd
import pytest

from models.errors import ConfigurationError
from services.data_service import DATASET_SCHEMAS, DataService


@pytest.fixture
def data_service(tmp_path):
    return DataService(str(tmp_path / "out"))


def test_output_directory_is_created(tmp_path):
    DataService(str(tmp_path / "nested" / "out"))
    assert (tmp_path / "nested" / "out").is_dir()


def test_dataset_round_trip_with_metadata(data_service):
    df = pd.DataFrame({"step": [0, 1], "t": [0.0, 0.1], "born_norm": [1.0, 0.9999999999999998]})
    path = data_service.write_dataset("born_norm", df, {"system": "schrodinger_1d", "dt": 0.1})
    read, metadata = data_service.read_dataset(path)
    assert metadata == {"system": "schrodinger_1d", "dt": "0.1"}
    pd.testing.assert_frame_equal(read, df)


def test_floats_keep_full_precision(data_service):
    value = 1.0 / 3.0
    path = data_service.write_dataset("scale_factor", pd.DataFrame({"x": [value], "t": [0.1], "one_squared": [np.pi]}))
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    assert lines[0] == "x,t,one_squared"
    assert lines[1] == f"{value:.17g},0.10000000000000001,{np.pi:.17g}"


def test_named_schema_is_enforced_on_write(data_service):
    with pytest.raises(ConfigurationError, match="schema mismatch"):
        data_service.write_dataset("densities", pd.DataFrame({"x": [0.0], "rho": [1.0]}))


def test_schema_is_enforced_on_read(data_service):
    text = "# source: test\nx,t\n0.0,1.0\n"
    with pytest.raises(ConfigurationError):
        data_service.read_dataset(StringIO(text), expected_columns=["x", "t", "one_squared"])
    df, metadata = data_service.read_dataset(StringIO(text), expected_columns=["x", "t"])
    assert metadata == {"source": "test"}
    assert len(df) == 1


def test_figure_dataset_headers():
    assert DATASET_SCHEMAS["trajectories"] == ["trace", "t_cross", "x_cross", "t", "x", "ln_one"]
    assert DATASET_SCHEMAS["scale_factor"] == ["x", "t", "one_squared"]
    assert DATASET_SCHEMAS["densities"] == ["x", "t", "born_density", "conserved_density"]


def test_json_handles_numpy_values(data_service):
    data_service.write_json("summary", {"norm": np.float64(1.5), "steps": np.int64(3), "grid": np.arange(2)})
    assert data_service.read_json("summary") == {"grid": [0, 1], "norm": 1.5, "steps": 3}


def test_manifest_lists_outputs_and_versions(data_service):
    data_service.write_dataset("uniqueness_norms", pd.DataFrame({"t": [0.0], "norm": [1.0], "norm_modified": [1.0]}))
    path = data_service.write_manifest({"dt": 0.1}, {"line_integral": "phi c dt - A.dx"}, 0.5, 7, 0)
    with open(path, encoding="utf-8") as handle:
        manifest = json.load(handle)
    assert manifest["outputs"] == ["uniqueness_norms.csv"]
    assert manifest["exit_status"] == 0
    assert manifest["seed"] == 7
    assert set(manifest["versions"]) == {"weyl-pilot-lab", "numpy", "scipy", "pandas", "pydantic"}
