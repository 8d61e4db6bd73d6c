import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_array_equal

from comp_pruner.models import ModelConfig, TrainConfig
from comp_pruner.utils import InputOutputError, ModelError, TrainingDivergedError
from comp_pruner.workbench import (
    TransformerModel,
    build_model,
    byte_tokenize,
    fidelity,
    fidelity_from_logits,
    forward,
    perplexity,
    perplexity_from_logits,
    read_corpus,
    train_toy,
)
from comp_pruner.workbench import trainer


def _softmax(z):
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


class TestTokenizer:
    def test_deterministic(self, corpus):
        assert_array_equal(byte_tokenize(corpus, 16, 4, seed=3), byte_tokenize(corpus, 16, 4, seed=3))

    def test_shape_and_range(self, corpus):
        batch = byte_tokenize(corpus, seq_len=16, n_samples=5, seed=1)
        assert batch.shape == (5, 16)
        assert batch.dtype == np.int64
        assert batch.min() >= 0 and batch.max() <= 255

    def test_windows_are_corpus_slices(self, corpus):
        for row in byte_tokenize(corpus, seq_len=12, n_samples=3, seed=9):
            assert bytes(row.astype(np.uint8)) in corpus

    def test_seed_changes_offsets(self, corpus):
        assert not np.array_equal(byte_tokenize(corpus, 16, 4, seed=0), byte_tokenize(corpus, 16, 4, seed=1))

    def test_text_input(self):
        assert_array_equal(byte_tokenize("abcd", seq_len=4, n_samples=1), [[97, 98, 99, 100]])

    def test_corpus_too_short(self):
        with pytest.raises(InputOutputError) as info:
            byte_tokenize(b"abc", seq_len=16)
        assert info.value.exit_code == 2

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(InputOutputError):
            read_corpus(tmp_path / "absent.txt")


class TestPerplexity:
    def test_uniform_logits(self):
        assert perplexity_from_logits(np.zeros((256, 10)), np.arange(10)) == pytest.approx(256.0, rel=1e-12)

    def test_confident_correct_logits(self):
        targets = np.array([3, 7, 1])
        logits = np.full((8, 3), -50.0)
        logits[targets, np.arange(3)] = 50.0
        assert perplexity_from_logits(logits, targets) == pytest.approx(1.0, abs=1e-12)

    def test_matches_logsumexp_oracle(self, rng):
        logits = rng.standard_normal((16, 20)) * 3.0
        targets = rng.integers(0, 16, size=20)
        nll = [math.log(sum(math.exp(v) for v in logits[:, t])) - logits[targets[t], t] for t in range(20)]
        assert perplexity_from_logits(logits, targets) == pytest.approx(math.exp(np.mean(nll)), rel=1e-10)

    def test_zero_model_is_uniform(self, tiny_config, small_batch):
        assert perplexity(TransformerModel(tiny_config), small_batch) == pytest.approx(256.0, rel=1e-10)

    def test_predicts_next_token(self, tiny_model):
        tokens = np.array([[5, 9, 200, 17]])
        logits = forward(tiny_model, tokens)
        expected = perplexity_from_logits(logits[:, :3], tokens[0, 1:])
        assert perplexity(tiny_model, tokens) == pytest.approx(expected, rel=1e-12)

    def test_needs_two_tokens(self, tiny_model):
        with pytest.raises(ModelError):
            perplexity(tiny_model, [[4]])


class TestFidelity:
    def test_self_comparison(self, tiny_model, small_batch):
        assert fidelity(tiny_model, tiny_model, small_batch) == (0.0, 0.0)

    def test_non_negative(self, tiny_config, small_batch):
        a = build_model(tiny_config, seed=1, init_std=0.3)
        b = build_model(tiny_config, seed=2, init_std=0.3)
        kl, mse = fidelity(a, b, small_batch)
        assert kl > 0.0 and mse > 0.0

    def test_matches_per_position_oracle(self, rng):
        a = rng.standard_normal((10, 6))
        b = rng.standard_normal((10, 6))
        p, q = _softmax(a), _softmax(b)
        kl = np.mean([np.sum(p[:, t] * np.log(p[:, t] / q[:, t])) for t in range(6)])
        got_kl, got_mse = fidelity_from_logits(a, b)
        assert got_kl == pytest.approx(kl, rel=1e-10)
        assert got_mse == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)

    def test_shift_invariant_kl(self, rng):
        a = rng.standard_normal((10, 4))
        kl, mse = fidelity_from_logits(a, a + 3.0)
        assert kl == pytest.approx(0.0, abs=1e-12)
        assert mse == pytest.approx(9.0)

    def test_vocab_mismatch(self, tiny_model):
        other = TransformerModel(ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=12, max_seq=16, vocab=128))
        with pytest.raises(ModelError):
            fidelity(tiny_model, other, [[1, 2, 3]])


@pytest.fixture
def quick_train():
    return TrainConfig(steps=150, lr=1e-2, batch_size=8, seq_len=16, eval_every=50, seed=0)


class TestTrainToy:
    def test_learns_below_uniform(self, corpus, tiny_config, quick_train):
        model, history = train_toy(tiny_config, corpus, quick_train)
        assert [p.step for p in history.points] == [50, 100, 150]
        assert history.final_heldout_loss < math.log(256)
        assert history.bits_per_byte == pytest.approx(history.final_heldout_loss / math.log(2))
        assert model.compute_dtype == torch.float64

    def test_deterministic(self, corpus, tiny_config, quick_train):
        first, _ = train_toy(tiny_config, corpus, quick_train)
        second, _ = train_toy(tiny_config, corpus, quick_train)
        for name, tensor in first.state_dict().items():
            assert torch.equal(tensor, second.state_dict()[name]), name

    def test_short_corpus(self, tiny_config, quick_train):
        with pytest.raises(InputOutputError):
            train_toy(tiny_config, b"x" * 1024, quick_train)

    def test_divergence(self, corpus, tiny_config, quick_train, monkeypatch):
        monkeypatch.setattr(trainer, "_loss", lambda model, batch: torch.tensor(float("nan")))
        with pytest.raises(TrainingDivergedError) as info:
            train_toy(tiny_config, corpus, quick_train)
        assert info.value.exit_code == 3
        assert info.value.context["step"] == 1

