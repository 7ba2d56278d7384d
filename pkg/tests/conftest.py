import numpy as np
import pytest

from mctseq.corpus import SyntheticTaskSpec, gen_synthetic, synthetic_vocab
from mctseq.model import TabularModel
from mctseq.train import pretrain_policy


@pytest.fixture(scope="session")
def tiny_task():
    """Source alphabet of 4 ids, so the full vocabulary has 8 entries."""
    return SyntheticTaskSpec(src_vocab_size=4, min_len=2, max_len=2)


@pytest.fixture(scope="session")
def small_task():
    return SyntheticTaskSpec(src_vocab_size=12, min_len=3, max_len=6)


@pytest.fixture(scope="session")
def small_vocab(small_task):
    return synthetic_vocab(small_task)


@pytest.fixture(scope="session")
def small_train(small_task):
    return gen_synthetic(small_task, 120, seed=11)


@pytest.fixture(scope="session")
def small_test(small_task):
    return gen_synthetic(small_task, 30, seed=12)


@pytest.fixture()
def fresh_model(small_vocab):
    return TabularModel(small_vocab.size, small_vocab.fingerprint())


@pytest.fixture(scope="session")
def trained_model(small_task, small_vocab, small_train):
    """Converged policy for the small task (value head untouched)."""
    model = TabularModel(small_vocab.size, small_vocab.fingerprint())
    pretrain_policy(model, small_train, epochs=6, lr=0.5)
    return model


@pytest.fixture(scope="session")
def halfway_model(small_task, small_vocab, small_train):
    """Deliberately weak policy: one low-rate epoch."""
    model = TabularModel(small_vocab.size, small_vocab.fingerprint())
    pretrain_policy(model, small_train, epochs=1, lr=0.02)
    return model


def rng_for(test_seed: int) -> np.random.Generator:
    return np.random.default_rng(test_seed)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, capture-proof."""
    lines = getattr(terminalreporter.config, "acceptance_reports", None)
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
