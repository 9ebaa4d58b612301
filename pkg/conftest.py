import numpy as np
import pytest

from shadows import ScoreSet
from synthdata import SyntheticConfig, generate_spurious_dataset
from trainer import ModelConfig, TrainConfig


SMALL = SyntheticConfig(n_train=200, n_test=200, d_core=4, d_spur=2, d_noise=2, spur_strength=0.9, seed=3)


@pytest.fixture
def small_dataset():
    """(manifest, train, test) of a 2-class, 2-attribute dataset with 200 + 200 samples."""
    return generate_spurious_dataset(SMALL)


@pytest.fixture
def linear_model():
    return ModelConfig(arch='linear')


@pytest.fixture
def fast_erm():
    return TrainConfig(lr=0.1, epochs=3, batch_size=32)


def make_scores(confidence, membership, groups=None, roles=None, model_ids=None, sample_ids=None):
    """A ScoreSet from raw (models x samples) arrays; correctness is confidence > 0.5."""
    confidence = np.asarray(confidence, dtype=np.float64)
    n_models, n_samples = confidence.shape
    return ScoreSet(
        model_ids=np.arange(n_models) if model_ids is None else model_ids,
        sample_ids=np.arange(n_samples) if sample_ids is None else sample_ids,
        confidence=confidence,
        correct=confidence > 0.5,
        membership=np.asarray(membership, dtype=bool),
        groups=np.zeros(n_samples, dtype=np.int64) if groups is None else groups,
        classes=np.zeros(n_samples, dtype=np.int64),
        roles=roles or ('shadow',) * n_models,
        methods=('erm',) * n_models,
    )
