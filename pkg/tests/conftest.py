from __future__ import annotations

import json
from pathlib import Path

import pytest

from hatbench import dataset as ds

DATA_DIR = Path(__file__).parent / "data"
VOC_FIXTURE = DATA_DIR / "voc_fixture"

FIXTURE_SOURCES = {
    ds.Source.HARD_HAT_WORKERS: VOC_FIXTURE / "hard_hat_workers",
    ds.Source.SHEL5K: VOC_FIXTURE / "shel5k",
}


@pytest.fixture(scope="session")
def expected_stats() -> dict:
    return json.loads((VOC_FIXTURE / "expected_stats.json").read_text())


@pytest.fixture(scope="session")
def cascaded_manifest() -> ds.DatasetManifest:
    return ds.build_manifest(FIXTURE_SOURCES, ds.RemapMode.CASCADED)


@pytest.fixture(scope="session")
def direct_nested_manifest() -> ds.DatasetManifest:
    return ds.build_manifest(FIXTURE_SOURCES, ds.RemapMode.DIRECT_NESTED)
