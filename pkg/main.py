"""Command-line entry point for the window-normalization laboratory."""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.utils.config import settings  # noqa: E402

# Thread caps must be in the environment before numpy loads its BLAS
settings.apply_thread_caps()

from src.cli.commands import main  # noqa: E402

if __name__ == "__main__":
    settings.ensure_directories()
    sys.exit(main())
