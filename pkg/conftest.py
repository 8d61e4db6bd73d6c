"""Shared fixtures and independent reference oracles for the test suite."""

from pathlib import Path

import numpy as np
import pytest
import torch

from comp_pruner.models import ModelConfig
from comp_pruner.workbench import build_model

ROOT = Path(__file__).parent
CORPUS_PATH = ROOT / "data" / "corpus.txt"


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run multi-seed trend tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains toy models over several seeds (use --run-slow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# Oracles

def naive_matmul(a, b):
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            total = 0.0
            for k in range(inner):
                total += a[i, k] * b[k, j]
            out[i, j] = total
    return out


def jacobi_eigh(m, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; eigenvalues ascending with matching eigenvector columns."""
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    vectors = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- R^T A R and V <- V R, touching only rows and columns p, q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p, vec_q = vectors[:, p].copy(), vectors[:, q].copy()
                vectors[:, p] = c * vec_p - s * vec_q
                vectors[:, q] = s * vec_p + c * vec_q
    values = np.diag(a)
    order = np.argsort(values)
    return values[order], vectors[:, order]


def two_pass_variance(v):
    v = np.asarray(v, dtype=np.float64)
    mean = sum(v) / len(v)
    return sum((x - mean) ** 2 for x in v) / len(v)


def random_spd(n, rng, eigenvalues=None):
    """Q D Q^T with a random orthogonal Q."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if eigenvalues is None:
        eigenvalues = np.geomspace(1.0, 1e3, n)
    m = q @ np.diag(eigenvalues) @ q.T
    return 0.5 * (m + m.T)


def stacked_design(weight, inputs, retained):
    """Columns of the token-stacked tuning system, rows ordered (output, token)."""
    return np.stack([(weight[:, j:j + 1] * inputs[j:j + 1, :]).ravel() for j in retained], axis=1)


# Fixtures

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus() -> bytes:
    return CORPUS_PATH.read_bytes()


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_layers=6, d_model=8, n_heads=2, d_ff=12, max_seq=16)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0, init_std=0.3)


@pytest.fixture
def small_batch(rng):
    return rng.integers(0, 256, size=(2, 16))


def zero_layer_update(model, layer_index):
    """Zero the residual-writing denses so the layer passes its input through unchanged."""
    layer = next(l for l in model.layers if l.index == layer_index)
    with torch.no_grad():
        for name in ("o_proj", "down_proj"):
            layer.denses[name].weight.zero_()
            layer.denses[name].bias.zero_()
    return model
