import os
import pathlib
import shutil

import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2]


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("DSQP_CLI") or shutil.which("dsqp")
    if not path:
        pytest.skip("dsqp executable not available")
    return path


@pytest.fixture(scope="session")
def schema():
    import json

    return json.loads((ROOT / "schemas" / "diagnostics.schema.json").read_text())


@pytest.fixture(scope="session")
def demo_dir():
    return ROOT / "data" / "demo"
