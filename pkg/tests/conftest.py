import sys

import numpy as np
import pytest

from imdm.config import RunConfig
from imdm.core import Rng, Schedule
from imdm.denoiser import NoiseSpec, init_params, to_imdm
from imdm.experiments import repro_synthetic
from imdm.training import DatasetSpec, TrainConfig, train


@pytest.fixture(scope="session")
def schedule():
    return Schedule()


@pytest.fixture(scope="session")
def noise_spec():
    return NoiseSpec()


@pytest.fixture(scope="session")
def pair_data():
    return DatasetSpec.synthetic_pair()


@pytest.fixture(scope="session")
def small_mdm(schedule, pair_data):
    """MDM trained briefly on {00, 11}; enough for the copy rule."""
    init = init_params(2, 2, Rng(11))
    return train(init, TrainConfig(iterations=3000, eval_every=1000, seed=11), pair_data, schedule).params


@pytest.fixture(scope="session")
def small_imdm(small_mdm, noise_spec):
    return to_imdm(small_mdm, noise_spec, Rng(12))


@pytest.fixture(scope="session")
def full_bundle(tmp_path_factory):
    """The full synthetic reproduction, run once per session (several minutes)."""
    out = tmp_path_factory.mktemp("repro")
    res = repro_synthetic(RunConfig.default(env={}), out, quick=False)
    res["out"] = out
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "LINES", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
