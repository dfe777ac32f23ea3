import pytest

from rsnmt.data import gen_synthetic
from rsnmt.model import ModelConfig
from rsnmt.training import TrainConfig, train_model


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")
    config.addinivalue_line("markers", "acceptance: acceptance criteria")


@pytest.fixture(scope="session")
def copy_model():
    """Converged copy-task model over vocabulary 16 (ids 4..15 are content)."""
    corpus = gen_synthetic("copy", 3000, 16, (2, 8), 11)
    cfg = ModelConfig(d_model=32, n_heads=4, d_ff=64, src_vocab_size=16, tgt_vocab_size=16)
    tc = TrainConfig(total_steps=700, token_budget=512, warmup_steps=100, lr_scale=2.0)
    params, _ = train_model(cfg, corpus, tc, seed=0)
    return params


@pytest.fixture(scope="session")
def tiny_model():
    """Small trained model over vocabulary 8 for exhaustive-search checks."""
    corpus = gen_synthetic("reverse", 600, 8, (1, 3), 5)
    cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, src_vocab_size=8, tgt_vocab_size=8, dtype="float64")
    tc = TrainConfig(total_steps=80, token_budget=128, warmup_steps=20)
    params, _ = train_model(cfg, corpus, tc, seed=1)
    return params
