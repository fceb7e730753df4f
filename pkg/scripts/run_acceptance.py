#!/usr/bin/env python3
"""Run the acceptance suite; exit 4 if any criterion fails (0 otherwise)."""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    code = pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider", *sys.argv[1:]])
    sys.exit(0 if code == 0 else 4)
