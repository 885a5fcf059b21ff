"""Shared test configuration.

Points the dataset directory at the repository's vendored copy so tests
that need the canonical digit files find them regardless of the working
directory. An explicitly exported QAGREL_DATA_DIR wins.
"""

import os
from pathlib import Path

REPO_DATA = Path(__file__).resolve().parent.parent / "data"

if REPO_DATA.is_dir():
    os.environ.setdefault("QAGREL_DATA_DIR", str(REPO_DATA))
