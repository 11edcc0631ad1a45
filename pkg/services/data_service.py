"""
Data service for writing and reading run artifacts (CSV datasets, JSON summaries, manifest).
"""
import json
import logging
import os
from io import StringIO
from typing import Dict, IO, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
import scipy

from config.settings import AppConfig, app_config
from models.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Column schemas of the named datasets
DATASET_SCHEMAS: Dict[str, List[str]] = {
    "trajectories": ["trace", "t_cross", "x_cross", "t", "x", "ln_one"],
    "scale_factor": ["x", "t", "one_squared"],
    "densities": ["x", "t", "born_density", "conserved_density"],
    "born_norm": ["step", "t", "born_norm"],
    "conserved_norm": ["t", "method", "norm", "degraded"],
    "relaxation": ["t", "h_coarse", "h_lower", "h_upper", "noise_floor", "degraded"],
    "uniqueness_densities": ["x", "rho", "rho_modified"],
    "uniqueness_norms": ["t", "norm", "norm_modified"],
    "gauge_check": ["quantity", "t", "max_deviation", "masked_deviation", "degraded"],
    "convergence": ["quantity", "t", "level", "points", "dt", "residual", "order", "degraded"],
}


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class DataService:
    """Service for persisting run artifacts under one output directory."""

    def __init__(self, output_dir: Optional[str] = None, settings: AppConfig = None):
        self.settings = settings or app_config
        self.output_dir = output_dir or self.settings.DEFAULT_OUTPUT_DIR
        self._ensure_output_directory()
        self.written: List[str] = []

    def _ensure_output_directory(self) -> None:
        """Ensure the output directory exists."""
        self.settings.ensure_output_directory(self.output_dir)

    def _path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def _validate_columns(self, df: pd.DataFrame, expected_columns: Sequence[str]) -> None:
        """Validate that a dataset has exactly the expected columns in the expected order."""
        incoming_columns = [str(col).strip() for col in df.columns.tolist()]
        if incoming_columns != list(expected_columns):
            raise ConfigurationError(
                "CSV schema mismatch. Expected columns exactly: "
                f"{list(expected_columns)} but got {incoming_columns}."
            )

    def write_dataset(self, name: str, df: pd.DataFrame, metadata: Optional[dict] = None) -> str:
        """
        Write a dataset as CSV with '# key: value' metadata lines before the header.

        Args:
            name: Dataset name; named schemas are enforced
            df: Data to write
            metadata: Header metadata

        Returns:
            Path of the written file
        """
        path = self._path(f"{name}.csv")
        try:
            if name in DATASET_SCHEMAS:
                self._validate_columns(df, DATASET_SCHEMAS[name])
            lines = [f"# {key}: {value}\n" for key, value in (metadata or {}).items()]
            body = df.to_csv(index=False, float_format=self.settings.CSV_FLOAT_FORMAT, lineterminator="\n")
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.writelines(lines)
                handle.write(body)
            self.written.append(path)
            logger.info(f"Wrote {len(df)} rows to {path}")
            return path
        except Exception as e:
            logger.error(f"Error writing dataset {name}: {e}")
            raise

    def read_dataset(
        self,
        input_source: Union[str, IO[str]],
        expected_columns: Optional[Sequence[str]] = None,
    ) -> Tuple[pd.DataFrame, Dict[str, str]]:
        """
        Read a dataset back, returning its frame and header metadata.

        The column schema must match `expected_columns` exactly (named
        datasets are checked against their schema by file name).
        """
        try:
            if isinstance(input_source, str):
                with open(input_source, "r", encoding="utf-8") as handle:
                    text = handle.read()
                if expected_columns is None:
                    stem = os.path.splitext(os.path.basename(input_source))[0]
                    expected_columns = DATASET_SCHEMAS.get(stem)
            else:
                text = input_source.read()
        except Exception as e:
            logger.error(f"Failed to read dataset: {e}")
            raise

        metadata: Dict[str, str] = {}
        lines = text.splitlines(keepends=True)
        n_meta = 0
        for line in lines:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            metadata[key.strip()] = value.strip()
            n_meta += 1
        df = pd.read_csv(StringIO("".join(lines[n_meta:])))
        if expected_columns is not None:
            self._validate_columns(df, expected_columns)
        logger.debug(f"Read dataset with {len(df)} rows and {len(metadata)} metadata entries")
        return df, metadata

    def write_json(self, name: str, payload: dict) -> str:
        """Write a JSON document with sorted keys."""
        path = self._path(f"{name}.json")
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
                handle.write("\n")
            self.written.append(path)
            logger.info(f"Wrote {path}")
            return path
        except Exception as e:
            logger.error(f"Error writing {name}.json: {e}")
            raise

    def read_json(self, name: str) -> dict:
        with open(self._path(f"{name}.json"), "r", encoding="utf-8") as handle:
            return json.load(handle)

    def library_versions(self) -> Dict[str, str]:
        return {
            self.settings.APP_NAME: self.settings.VERSION,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        }

    def write_manifest(
        self,
        spec_echo: dict,
        convention: dict,
        wall_time: float,
        seed: Optional[int],
        exit_status: int,
        extra: Optional[dict] = None,
    ) -> str:
        """Write manifest.json: spec echo, convention record, versions, wall time and outputs."""
        manifest = {
            "spec": spec_echo,
            "conventions": convention,
            "versions": self.library_versions(),
            "wall_time_seconds": wall_time,
            "seed": seed,
            "exit_status": exit_status,
            "outputs": sorted(os.path.basename(p) for p in self.written),
        }
        if extra:
            manifest.update(extra)
        return self.write_json("manifest", manifest)
