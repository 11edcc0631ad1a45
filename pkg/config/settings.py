"""
Configuration settings for the pilot-wave laboratory.
"""
import logging
import os
from dataclasses import dataclass
from typing import Tuple

logger = logging.getLogger(__name__)


@dataclass
class AppConfig:
    """Application configuration settings."""

    APP_NAME: str = "weyl-pilot-lab"
    VERSION: str = "0.1.0"

    # Output
    DEFAULT_OUTPUT_DIR: str = "runs"
    CSV_FLOAT_FORMAT: str = "%.17g"

    # Numerical thresholds
    NODE_THRESHOLD: float = 1e-12
    VELOCITY_CAP_FACTOR: float = 10.0
    RK4_STABILITY_LIMIT: float = 2.8
    MAX_SUBSTEP_LEVELS: int = 4
    MIN_GRID_POINTS: int = 16

    # Result quality thresholds
    UNRELIABLE_TRAJECTORY_FRACTION: float = 0.01
    DEGRADED_SNAPSHOT_FRACTION: float = 0.05
    MIN_ENSEMBLE_SIZE: int = 1000

    # Data-parallel sections
    THREADS_ENV_VAR: str = "PWLAB_THREADS"
    TRAJECTORY_BATCH_SIZE: int = 4096

    # Figure preset defaults
    FIGURE_TIMES: Tuple[float, ...] = None

    def __post_init__(self):
        """Initialize default values after dataclass creation."""
        if self.FIGURE_TIMES is None:
            self.FIGURE_TIMES = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)

    @property
    def threads(self) -> int:
        """Thread count for data-parallel sections."""
        raw = os.environ.get(self.THREADS_ENV_VAR)
        if raw:
            try:
                return max(1, int(raw))
            except ValueError:
                logger.warning(f"Ignoring {self.THREADS_ENV_VAR}={raw!r}: not an integer, using the CPU count")
        return os.cpu_count() or 1

    def ensure_output_directory(self, path: str = None) -> str:
        """Ensure an output directory exists and return it."""
        out = path or self.DEFAULT_OUTPUT_DIR
        os.makedirs(out, exist_ok=True)
        return out


# Global configuration instance
app_config = AppConfig()
