import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aip.data import SynthConfig, make_dataset
from aip.recommenders import (BPR_DEFAULTS, DVBPR_DEFAULTS, VBPR_DEFAULTS, bpr_train, build_simrank, dvbpr_train,
                              pretrain_extractor, vbpr_train)

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY = SynthConfig(n_users=30, n_items=60, n_cold=8, latent_dim=4, n_clusters=3, interactions_per_user=6,
                   image_shape=(8, 8, 3), seed=7)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def tiny_ds():
    return make_dataset(TINY, n_cold=TINY.n_cold)


@pytest.fixture(scope="session")
def tiny_bpr(tiny_ds):
    return bpr_train(tiny_ds, replace(BPR_DEFAULTS, epochs=5, factors=4))


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_ds):
    return pretrain_extractor(tiny_ds, out_dim=8, epochs=3, channels=(4, 4))


@pytest.fixture(scope="session")
def tiny_extractor(tiny_pretrained):
    return tiny_pretrained[0]


@pytest.fixture(scope="session")
def tiny_simrank(tiny_ds, tiny_extractor):
    return build_simrank(tiny_extractor, tiny_ds)


@pytest.fixture(scope="session")
def tiny_vbpr(tiny_ds, tiny_extractor):
    return vbpr_train(tiny_ds, tiny_extractor, replace(VBPR_DEFAULTS, epochs=4, factors=4))


@pytest.fixture(scope="session")
def tiny_dvbpr(tiny_ds):
    return dvbpr_train(tiny_ds, replace(DVBPR_DEFAULTS, epochs=2, factors=8), channels=(4, 4))


@pytest.fixture(scope="session")
def tiny_rankers(tiny_simrank, tiny_vbpr, tiny_dvbpr):
    return {"simrank": tiny_simrank, "vbpr": tiny_vbpr, "dvbpr": tiny_dvbpr}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
