from importlib.resources import files

import numpy as np
import pytest
import yaml

from mjlsynth.abstraction import build_abstraction
from mjlsynth.geometry import build_partition
from mjlsynth.model import group_steps, load_model, validate

BENCH = files("mjlsynth").joinpath("benchmarks")


def bench_path(name):
    return str(BENCH.joinpath(name))


def load_run(name):
    return yaml.safe_load(BENCH.joinpath(name).read_text())


@pytest.fixture(scope="session")
def temp_spec():
    return validate(load_model(bench_path("temperature.yaml")))


@pytest.fixture(scope="session")
def temp_cfg():
    return load_run("temperature_run.yaml")


@pytest.fixture(scope="session")
def temp_partition(temp_cfg):
    P = temp_cfg["partition"]
    return build_partition(P["bounds"], P["counts"], P["labels"])


@pytest.fixture(scope="session")
def temp_product(temp_spec, temp_partition):
    return build_abstraction(temp_spec, temp_partition, 100, 0.01, 0, "product")


@pytest.fixture(scope="session")
def temp_robust(temp_spec, temp_partition):
    return build_abstraction(temp_spec, temp_partition, 100, 0.01, 0, "robust")


@pytest.fixture(scope="session")
def uav_spec():
    cfg = load_run("uav_run.yaml")
    return validate(group_steps(load_model(bench_path("uav.yaml")), cfg["group"]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
