import numpy as np
import pytest

from micro_encoder import MicroConfig
from signal_pipeline import standardize
from synthetic_cohort import GeneratorConfig, generate_record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_micro():
    return MicroConfig.tiny()


@pytest.fixture
def small_cohort_cfg():
    """Short nights at a 100 Hz native rate so records synthesize in well under a second"""
    return GeneratorConfig(n_pretrain=4, n_probe_train=2, n_test=2, min_epochs=120, max_epochs=130,
                           high_rate=100.0)


@pytest.fixture
def raw_record(small_cohort_cfg):
    return generate_record(0, np.random.SeedSequence(7), small_cohort_cfg)


@pytest.fixture
def standard_record(raw_record):
    return standardize(raw_record)
