import warnings

import numpy as np
import pytest

from ttrec import datagen
from ttrec.backbone import ModelConfig, RecommenderModel, build_inputs
from ttrec.clustering import assign, select_high_confidence, sharpen
from ttrec.ttt import SSLBatch, _ssl_pass

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance line; printed now and repeated in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# d=4, N=8, K=2 gradient-check instance
D, N_PAIRS, K = 4, 8, 2


def tiny_model(seed=0, n_users=5, n_items=6, feature_dim=3):
    cfg = ModelConfig(n_users, n_items, feature_dim, hidden=5, embed_dim=D,
                      fusion_hidden=(6,), dropout=0.0)
    return RecommenderModel(cfg, seed=seed)


def tiny_inputs(rng, n_users=5, n_items=6, feature_dim=3):
    hist = (rng.random((n_users, n_items)) < 0.4).astype(float)
    return build_inputs(rng.normal(size=(n_users, feature_dim)),
                        rng.normal(size=(n_items, feature_dim)), hist)


def frozen_ssl_batch(model, inputs, rng, T=0.5, bandwidth=0.05):
    """8 pairs with P and the confident selection pinned, as finite differences need."""
    users = rng.integers(0, 5, N_PAIRS)
    items = rng.integers(0, 6, N_PAIRS)
    probe = SSLBatch(users, items, np.zeros((K, D)), bandwidth=bandwidth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, _, E, _ = _ssl_pass(probe, model, inputs, need_grads=False, tau=0.0)
    order = np.argsort(E[:, 0])
    centers = np.stack([E[order[:4]].mean(0), E[order[4:]].mean(0)])
    Q = assign(E, centers, bandwidth=bandwidth)
    sel = select_high_confidence(Q, 0.0)
    assert len(set(sel.labels.tolist())) == K
    return SSLBatch(users, items, centers, P=sharpen(Q, T), selection=sel, bandwidth=bandwidth)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = datagen.SyntheticConfig(n_users=40, n_items=30, feature_dim=4, seed=3)
    return datagen.generate(cfg)
