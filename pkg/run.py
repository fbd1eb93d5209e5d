#!/usr/bin/env python3
"""Run the idiokv command line without installing the package."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent / "src"))

from idiokv.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
