import json
import os

import pytest

from hanzibench import load_catalog_file
from hanzibench.engine import SessionConfig

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CATALOG_PATH = os.path.join(ROOT, "fixtures", "catalog_mini.json")
CONFIG_PATH = os.path.join(ROOT, "fixtures", "session_basic.json")
SCRIPT_PATH = os.path.join(ROOT, "scripts", "cat_two_users.json")


@pytest.fixture(scope="session")
def catalog():
    return load_catalog_file(CATALOG_PATH)


@pytest.fixture(scope="session")
def config():
    with open(CONFIG_PATH, "r", encoding="utf-8") as f:
        return SessionConfig.from_dict(json.load(f))


@pytest.fixture()
def fresh_config():
    with open(CONFIG_PATH, "r", encoding="utf-8") as f:
        return SessionConfig.from_dict(json.load(f))
