import numpy as np
import pytest

from ganseg.preprocess import PreprocessConfig
from ganseg.synthdata import DataConfig, DomainSpec, GenerationConfig, build_partitions


@pytest.fixture(scope="session")
def tiny_data_config():
    return DataConfig(
        n_labelled_train=40, n_labelled_test=12, n_unlabelled=48,
        n_annotated_subset=12, n_out_of_domain_test=12,
        out_of_domain=DomainSpec(scale=1.25, lateral_shift=2.0, intensity_offset=0.15),
        generation=GenerationConfig(resolution=32), seed=0)


@pytest.fixture(scope="session")
def tiny_partitions(tiny_data_config):
    return build_partitions(tiny_data_config)


@pytest.fixture(scope="session")
def pp32():
    return PreprocessConfig(resolution=32)


def random_mask_pair(rng, size=16, p=0.35):
    a = (rng.random((size, size)) < p).astype(np.uint8)
    b = (rng.random((size, size)) < p).astype(np.uint8)
    return a, b
