import numpy as np
import pytest

from somnoloop import scoring
from somnoloop.core import SleepStage
from somnoloop.simulator import DEFAULT_RECIPES, SyntheticSource, synthesize_epoch


@pytest.fixture(scope="session")
def small_corpus():
    """Compact labeled corpus shared by the training-path tests."""
    return scoring.build_corpus(epochs_per_stage=60, seed=11)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    X, y, names = small_corpus
    return scoring.train(X, y, names, seed=11)


@pytest.fixture()
def n2_epoch():
    return synthesize_epoch(DEFAULT_RECIPES, SleepStage.N2, (4, 0), epoch_index=0)


def synthetic_raw_matrix(n_epochs: int, seed: int = 0,
                         stage: SleepStage = SleepStage.N2) -> np.ndarray:
    """Raw int16 sample matrix for n_epochs of one stage."""
    src = SyntheticSource([(stage, n_epochs)], seed=seed)
    return np.vstack(list(src.blocks()))
