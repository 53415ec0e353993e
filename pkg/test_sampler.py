"""
샘플러 테스트: CFG 결합, 토큰 추출, 증분 디코딩 세션, 생성
"""

import math

import numpy as np
import pytest

from aim_model import ModelConfig, forward_context, init_weights
from sampler import DECODE_STREAM, DecodeSession, GuidanceConfig, cfg_combine, generate, sample_token
from tensor_core import Rng, reset_tape


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def config() -> ModelConfig:
    return ModelConfig(n_layers=2, embed_dim=8, n_groups=1, vocab_size=8, n_classes=3, seq_len=9,
                       state_dim=4, conv_k=3, dtype="float64")


@pytest.fixture
def weights(config):
    w = init_weights(config, seed=5)
    w.cond.b.data[...] = Rng(6).normal(w.cond.b.shape, std=0.5)
    w.cond.W.data[...] = Rng(7).normal(w.cond.W.shape, std=0.1)
    return w


class TestGuidanceConfig:
    @pytest.mark.parametrize("kwargs", [
        {"w": -0.5},
        {"temperature": 0.0},
        {"top_k": 0},
        {"top_p": 0.0},
        {"top_p": 1.5},
        {"space": "energy"},
        {"space": "prob", "w": 2.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GuidanceConfig(**kwargs)

    def test_guided_flag(self):
        assert GuidanceConfig(w=2.0).guided
        assert GuidanceConfig(w=0.0).guided
        assert not GuidanceConfig(w=1.0).guided


class TestCfgCombine:
    def test_w_one_is_conditional(self):
        cond = np.array([0.1, 2.0, -1.0])
        np.testing.assert_array_equal(cfg_combine(np.zeros(3), cond, 1.0), cond)

    def test_w_zero_is_unconditional(self):
        uncond = np.array([0.4, -0.2])
        np.testing.assert_array_equal(cfg_combine(uncond, np.ones(2), 0.0), uncond)

    def test_extrapolation(self):
        assert cfg_combine(np.array([0.1]), np.array([0.3]), 2.0)[0] == pytest.approx(0.5)

    def test_probability_space(self):
        uncond = np.log(np.array([0.5, 0.5]))
        cond = np.log(np.array([0.1, 0.9]))
        mixed = np.exp(cfg_combine(uncond, cond, 0.5, space="prob"))
        np.testing.assert_allclose(mixed, [0.3, 0.7])
        with pytest.raises(ValueError):
            cfg_combine(uncond, cond, 1.5, space="prob")


class TestSampleToken:
    def test_argmax(self):
        cfg = GuidanceConfig(argmax=True)
        assert sample_token(np.array([0.0, 5.0, 1.0]), cfg, None) == 1
        assert sample_token(np.array([2.0, 2.0, 1.0]), cfg, None) == 0

    def test_top_k_one_is_argmax(self):
        logits = Rng(0).normal((50, 8))
        picked = sample_token(logits, GuidanceConfig(top_k=1), Rng(1))
        np.testing.assert_array_equal(picked, np.argmax(logits, axis=-1))

    def test_top_p_keeps_head(self):
        logits = np.tile(np.log([0.5, 0.3, 0.2]), (200, 1))
        picked = sample_token(logits, GuidanceConfig(top_p=0.4), Rng(2))
        assert np.all(picked == 0)

    def test_frequencies(self):
        logits = np.tile([0.0, math.log(3.0)], (100_000, 1))
        picked = sample_token(logits, GuidanceConfig(), Rng(3))
        assert np.mean(picked == 1) == pytest.approx(0.75, abs=0.01)

    def test_low_temperature_sharpens(self):
        logits = np.tile([0.0, 1.0], (5000, 1))
        picked = sample_token(logits, GuidanceConfig(temperature=0.05), Rng(4))
        assert np.mean(picked == 1) > 0.99

    def test_per_row_rngs(self):
        logits = np.zeros((3, 4))
        a = sample_token(logits, GuidanceConfig(), [Rng(i) for i in range(3)])
        b = sample_token(logits, GuidanceConfig(), [Rng(i) for i in range(3)])
        np.testing.assert_array_equal(a, b)
        with pytest.raises(ValueError):
            sample_token(logits, GuidanceConfig(), [Rng(0)])

    def test_requires_rng(self):
        with pytest.raises(ValueError):
            sample_token(np.zeros(4), GuidanceConfig(), None)


class TestDecodeSession:
    def test_matches_full_forward(self, config, weights):
        tokens = Rng(8).integers(0, config.vocab_size, size=config.seq_len)
        full = forward_context([1], tokens[None, :-1], weights, config).data[0]
        session = DecodeSession(weights, config, [1], guided=False)
        rows = [session.step()[0][0]]
        for t in range(config.seq_len - 1):
            rows.append(session.step(tokens[t:t + 1])[0][0])
        np.testing.assert_allclose(np.stack(rows), full, rtol=1e-8, atol=1e-8)

    def test_matches_full_forward_at_every_position(self):
        config = ModelConfig(n_layers=2, embed_dim=32, vocab_size=64, n_classes=10, seq_len=256, dtype="float64")
        weights = init_weights(config, seed=12)
        weights.cond.b.data[...] = Rng(13).normal(weights.cond.b.shape, std=0.3)
        tokens = Rng(14).integers(0, config.vocab_size, size=config.seq_len)
        full = forward_context([7], tokens[None, :-1], weights, config).data[0]
        session = DecodeSession(weights, config, [7], guided=False)
        rows = [session.step()[0][0]]
        for t in range(config.seq_len - 1):
            rows.append(session.step(tokens[t:t + 1])[0][0])
        np.testing.assert_allclose(np.stack(rows), full, rtol=1e-6, atol=1e-8)

    def test_guided_streams(self, config, weights):
        tokens = Rng(9).integers(0, config.vocab_size, size=config.seq_len)
        cond_full = forward_context([2], tokens[None, :-1], weights, config).data[0]
        null_full = forward_context([None], tokens[None, :-1], weights, config).data[0]
        session = DecodeSession(weights, config, [2], guided=True)
        cond, uncond = session.step()
        for t in range(4):
            cond, uncond = session.step(tokens[t:t + 1])
        np.testing.assert_allclose(cond[0], cond_full[4], rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(uncond[0], null_full[4], rtol=1e-8, atol=1e-8)

    def test_state_is_constant_size(self, config, weights):
        session = DecodeSession(weights, config, [0, 1], guided=False)
        size = session.state_nbytes
        session.step()
        for _ in range(5):
            session.step(np.array([1, 2]))
            assert session.state_nbytes == size
        assert session.position == 6

    def test_guided_doubles_state(self, config, weights):
        single = DecodeSession(weights, config, [0], guided=False).state_nbytes
        assert DecodeSession(weights, config, [0], guided=True).state_nbytes == 2 * single

    def test_errors(self, config, weights):
        session = DecodeSession(weights, config, [0], guided=False)
        session.step()
        with pytest.raises(ValueError):
            session.step(None)
        with pytest.raises(IndexError):
            session.step(np.array([config.vocab_size]))
        for _ in range(config.seq_len - 1):
            session.step(np.array([0]))
        with pytest.raises(RuntimeError):
            session.step(np.array([0]))


class TestGenerate:
    def test_shapes_and_range(self, config, weights):
        grids = generate(weights, config, 1, n_samples=5, cfg=GuidanceConfig(w=2.0), seed=0, chunk_size=2)
        assert len(grids) == 5
        for grid in grids:
            assert (grid.height, grid.width) == (3, 3)
            assert grid.tokens.min() >= 0 and grid.tokens.max() < config.vocab_size

    def test_deterministic(self, config, weights):
        cfg = GuidanceConfig(w=1.5)
        a = generate(weights, config, 0, n_samples=4, cfg=cfg, seed=11, chunk_size=2)
        b = generate(weights, config, 0, n_samples=4, cfg=cfg, seed=11, chunk_size=2, workers=2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.tokens, y.tokens)

    def test_argmax_w_one_follows_conditional_stream(self, config, weights):
        grids = generate(weights, config, 2, n_samples=1, cfg=GuidanceConfig(w=1.0, argmax=True))
        session = DecodeSession(weights, config, [2], guided=False)
        expected = []
        previous = None
        for _ in range(config.seq_len):
            logits, _ = session.step(previous)
            previous = np.argmax(logits, axis=-1)
            expected.append(int(previous[0]))
        np.testing.assert_array_equal(grids[0].tokens.reshape(-1), expected)

    def test_uses_decode_streams(self, config, weights):
        cfg = GuidanceConfig(w=1.0)
        grids = generate(weights, config, 1, n_samples=1, cfg=cfg, seed=21, chunk_size=1)
        rng = Rng.derive(21, DECODE_STREAM, 0)
        session = DecodeSession(weights, config, [1], guided=False)
        expected = []
        previous = None
        for _ in range(config.seq_len):
            logits, _ = session.step(previous)
            previous = np.asarray(sample_token(logits, cfg, [rng]))
            expected.append(int(previous[0]))
        np.testing.assert_array_equal(grids[0].tokens.reshape(-1), expected)

    def test_decode_streams_differ_from_dataset_streams(self):
        decode = Rng.derive(21, DECODE_STREAM, 0).random(8)
        dataset = Rng.derive(21, "sample", 0).random(8)
        assert not np.allclose(decode, dataset)

    def test_unconditional(self, config, weights):
        grids = generate(weights, config, None, n_samples=2, cfg=GuidanceConfig(), seed=3)
        assert len(grids) == 2

    def test_errors(self, config, weights):
        with pytest.raises(ValueError):
            generate(weights, config, 0, n_samples=0, cfg=GuidanceConfig())
        with pytest.raises(ValueError):
            generate(weights, config, config.n_classes, n_samples=1, cfg=GuidanceConfig())
