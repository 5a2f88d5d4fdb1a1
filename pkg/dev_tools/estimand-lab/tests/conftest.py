import copy
import logging
import sys
from pathlib import Path

import pytest

TESTS_PATH = Path(__file__).resolve().parent
MODULE_PATH = TESTS_PATH.parent
CONFIG_PATH = MODULE_PATH / "config"

if str(MODULE_PATH) not in sys.path:
    sys.path.insert(0, str(MODULE_PATH))

from estlab_config import load_scenario, parse_scenario  # noqa: E402
from estlab_logging import setup_logger  # noqa: E402
from estlab_planner import load_spec  # noqa: E402

BASE_SCENARIO = {
    "scenario": {"name": "unit", "n_per_arm": 40, "seed": 1234, "visits": 4},
    "baseline": {"mean": 10.0},
    "means": {
        "arm0": [10.0, 10.0, 10.0, 10.0],
        "arm1": [9.0, 8.0, 7.0, 6.0],
        "no_treatment": [10.0, 10.0, 10.0, 10.0],
    },
    "residual": {"sd": [2.0, 2.0, 2.0, 2.0, 2.0], "correlation": 0.6},
}


def scenario_raw(**sections) -> dict:
    """copy of the base scenario with whole sections replaced or added"""
    raw = copy.deepcopy(BASE_SCENARIO)
    for section, body in sections.items():
        if body is None:
            raw.pop(section, None)
        else:
            raw[section] = body
    return raw


@pytest.fixture
def make_scenario():
    def build(**sections):
        return parse_scenario(scenario_raw(**sections))
    return build


@pytest.fixture
def config_path() -> Path:
    return CONFIG_PATH


@pytest.fixture
def shipped_scenario():
    def load(name: str):
        return load_scenario(CONFIG_PATH / f"{name}.toml")
    return load


@pytest.fixture
def shipped_spec():
    def load(name: str):
        return load_spec(CONFIG_PATH / f"{name}.spec")
    return load


@pytest.fixture
def smoke_config(shipped_scenario):
    return shipped_scenario("smoke")


@pytest.fixture
def logger():
    return setup_logger("estlab-tests", log_file=None, stream=sys.stderr, level=logging.INFO)


def spec_text(strategies=None, imputations=None, estimand="loe_prior_visits_collected = true", extra=""):
    """complete spec text, every cause CDH/mar unless overridden (None drops an entry)"""
    causes = ["AeNormal", "AePandemic", "LackOfEfficacy", "AdminDocumented", "AdminLostToFollowUp",
              "PandemicControl"]
    strategies = {**{name: "CDH" for name in causes}, **(strategies or {})}
    imputations = {**{f"{name}.CDH": "mar" for name in causes}, "NonIce": "mar", **(imputations or {})}
    lines = ["[estimand]", "name = unit", estimand, "", "[strategy]"]
    lines += [f"{key} = {value}" for key, value in strategies.items() if value is not None]
    lines += ["", "[imputation]"]
    lines += [f"{key} = {value}" for key, value in imputations.items() if value is not None]
    return "\n".join(lines) + "\n" + extra
