"""Configuration management for the window-normalization laboratory."""

import os
from pathlib import Path
from typing import Literal, MutableMapping, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Process settings loaded from WINNORM_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="WINNORM_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Application settings
    log_level: str = Field(default="INFO")
    environment: str = Field(default="local")

    # Numerics
    default_dtype: Literal["float32", "float64"] = Field(default="float32")
    check_finite: bool = Field(default=True)
    threads: int = Field(default=0, ge=0)  # 0 leaves the BLAS default alone

    # Local storage
    data_dir: str = Field(default="./data/shapesites")
    output_dir: str = Field(default="./runs")
    log_dir: str = Field(default="./logs")

    def is_local_mode(self) -> bool:
        """Check if running in local mode."""
        return self.environment == "local"

    def ensure_directories(self):
        """Create output and log directories if they don't exist."""
        Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        Path(self.log_dir).mkdir(parents=True, exist_ok=True)

    def apply_thread_caps(self, environ: Optional[MutableMapping[str, str]] = None):
        """Export the thread cap to the BLAS/OpenMP variables; only effective before numpy is imported."""
        environ = os.environ if environ is None else environ
        if self.threads > 0:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                environ.setdefault(var, str(self.threads))


# Global settings instance
settings = Settings()
