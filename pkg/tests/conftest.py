from __future__ import annotations

from pathlib import Path

import pytest

from ragmux.sources import load_registry

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def golden_dir() -> Path:
    return DATA_DIR / "golden"


@pytest.fixture
def golden_registry(golden_dir):
    # Reload per test: registries are cheap at this scale and tests must not share caches.
    return load_registry(golden_dir / "registry.json")
