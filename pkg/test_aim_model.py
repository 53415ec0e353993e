"""
AiM 모델 조립 테스트 (구성, 파라미터 수, 순전파, 손실, 기울기)
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from aim_model import (
    ModelConfig, TokenSequence, apply_class_dropout, dataset_nll, embed_inputs, expected_shapes, forward,
    forward_context, init_weights, nll_loss, param_census, param_count, resolve_class_ids, sequence_loss,
    weights_from_tensors,
)
from conditioning import CondWeights
from tensor_core import Rng, ShapeError, Tensor, gradient_check, reset_tape


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def config() -> ModelConfig:
    return ModelConfig(n_layers=2, embed_dim=8, n_groups=2, vocab_size=8, n_classes=3, seq_len=6,
                       state_dim=4, conv_k=3, dtype="float64")


@pytest.fixture
def active_weights(config):
    """조건화 bias 를 흔들어 γ ≠ 0 인 가중치"""
    w = init_weights(config, seed=1)
    w.cond.b.data[...] = Rng(2).normal(w.cond.b.shape, std=0.5)
    return w


@pytest.fixture
def tokens(config) -> np.ndarray:
    return Rng(3).integers(0, config.vocab_size, size=(2, config.seq_len))


class TestModelConfig:
    @pytest.mark.parametrize("kwargs", [
        {"n_layers": 0},
        {"n_layers": 2, "n_groups": 3},
        {"vocab_size": 1},
        {"pe_kind": "rotary"},
        {"scan_mode": "fft"},
        {"dt_rank": 0},
        {"dtype": "int8"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_presets(self):
        base = ModelConfig.preset("aim-b")
        assert (base.n_layers, base.embed_dim, base.n_groups) == (24, 768, 24)
        assert (base.vocab_size, base.n_classes, base.seq_len) == (16384, 1000, 256)
        assert ModelConfig.preset("aim-l", dtype="float64").dtype == "float64"
        with pytest.raises(ValueError):
            ModelConfig.preset("aim-huge")

    def test_grid_shape(self):
        assert ModelConfig(seq_len=64).grid_shape == (8, 8)
        assert ModelConfig(seq_len=6).grid_shape == (1, 6)

    def test_from_dict_coerces_strings(self):
        cfg = ModelConfig.from_dict({"n_layers": "3", "n_groups": "1", "use_pe": "false", "dt_rank": "none"})
        assert cfg.n_layers == 3 and cfg.use_pe is False and cfg.dt_rank is None
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"n_heads": 4})


class TestParamCount:
    @pytest.mark.parametrize("name,target", [("aim-b", 148e6), ("aim-l", 350e6)])
    def test_presets_match_table(self, name, target):
        assert abs(param_count(ModelConfig.preset(name)) - target) / target < 0.10

    @pytest.mark.parametrize("overrides", [
        {},
        {"tie_head": True},
        {"pe_kind": "sinusoidal"},
        {"use_pe": False},
        {"n_groups": 1},
    ])
    def test_census_matches_formula(self, config, overrides):
        cfg = replace(config, **overrides)
        weights = init_weights(cfg, seed=0)
        assert param_census(weights) == param_count(cfg)
        assert {k: v.shape for k, v in weights.tensors().items()} == expected_shapes(cfg)

    def test_groups_increase_count(self, config):
        assert param_count(replace(config, n_groups=1)) < param_count(config)


class TestInputs:
    def test_resolve_class_ids(self, config):
        np.testing.assert_array_equal(resolve_class_ids(None, config), [3])
        np.testing.assert_array_equal(resolve_class_ids([-1, 1, None], config), [3, 1, 3])
        with pytest.raises(IndexError):
            resolve_class_ids([4], config)

    def test_class_dropout_extremes(self, config):
        ids = np.array([0, 1, 2])
        np.testing.assert_array_equal(apply_class_dropout(ids, config, 0.0, None), ids)
        np.testing.assert_array_equal(apply_class_dropout(ids, config, 1.0, None), [3, 3, 3])

    def test_class_dropout_rate(self, config):
        ids = np.zeros(4000, dtype=np.int64)
        dropped = apply_class_dropout(ids, config, 0.1, Rng(0))
        assert np.mean(dropped == config.null_class) == pytest.approx(0.1, abs=0.02)

    def test_class_dropout_errors(self, config):
        with pytest.raises(ValueError):
            apply_class_dropout(np.array([0]), config, 1.5, Rng(0))
        with pytest.raises(ValueError):
            apply_class_dropout(np.array([0]), config, 0.5, None)

    def test_embed_rows(self, config):
        weights = init_weights(config, seed=0)
        hidden, c = embed_inputs([1], [[2, 5]], weights, config)
        assert hidden.shape == (1, 3, config.embed_dim)
        pos = weights.pos_embed.data
        np.testing.assert_allclose(hidden.data[0, 0], weights.class_embed.data[1] + pos[0])
        np.testing.assert_allclose(hidden.data[0, 2], weights.token_embed.data[5] + pos[2])
        np.testing.assert_array_equal(c.data[0], weights.class_embed.data[1])

    def test_first_logits_depend_on_class_at_init(self, config):
        weights = init_weights(config, seed=0)
        a = forward_context([0], [[2]], weights, config).data[0, 0]
        b = forward_context([1], [[2]], weights, config).data[0, 0]
        assert not np.allclose(a, b)

    def test_embed_errors(self, config):
        weights = init_weights(config, seed=0)
        with pytest.raises(ShapeError):
            embed_inputs([0], [[0] * (config.seq_len + 1)], weights, config)
        with pytest.raises(IndexError):
            embed_inputs([0], [[config.vocab_size]], weights, config)
        with pytest.raises(ShapeError):
            embed_inputs([0, 1], [[0, 1]], weights, config)


class TestForward:
    def test_shapes(self, config, active_weights, tokens):
        logits = forward_context([0, 2], tokens[:, :-1], active_weights, config)
        assert logits.shape == (2, config.seq_len, config.vocab_size)
        single = forward(TokenSequence(0, list(tokens[0])), active_weights, config)
        np.testing.assert_allclose(single.data, logits.data[0], rtol=1e-12, atol=1e-12)

    def test_forward_requires_full_length(self, config, active_weights):
        with pytest.raises(ShapeError):
            forward(TokenSequence(0, [1, 2]), active_weights, config)

    def test_causality(self, config, active_weights, tokens):
        context = tokens[:1, :-1].copy()
        base = forward_context([1], context, active_weights, config).data
        for j in range(context.shape[1]):
            moved = context.copy()
            moved[0, j] = (moved[0, j] + 1) % config.vocab_size
            out = forward_context([1], moved, active_weights, config).data
            np.testing.assert_allclose(out[0, :j + 1], base[0, :j + 1], rtol=0, atol=1e-13)
            assert not np.allclose(out[0, j + 1], base[0, j + 1])

    def test_zero_init_ignores_class_after_first_row(self, config, tokens):
        weights = init_weights(config, seed=0)
        a = forward_context([0], tokens[:1, :-1], weights, config).data
        b = forward_context([2], tokens[:1, :-1], weights, config).data
        np.testing.assert_array_equal(a[0, 1:], b[0, 1:])
        assert not np.allclose(a[0, 0], b[0, 0])

    def test_sinusoidal_and_tied_head(self, config, tokens):
        cfg = replace(config, pe_kind="sinusoidal", tie_head=True)
        weights = init_weights(cfg, seed=0)
        assert weights.pos_embed is None and weights.head is None
        logits = forward_context([0], tokens[:1, :-1], weights, cfg)
        assert np.all(np.isfinite(logits.data))

    def test_weights_from_tensors(self, config, active_weights, tokens):
        arrays = {k: v.data.copy() for k, v in active_weights.tensors().items()}
        rebuilt = weights_from_tensors(config, arrays)
        np.testing.assert_array_equal(
            forward_context([0], tokens[:1, :-1], rebuilt, config).data,
            forward_context([0], tokens[:1, :-1], active_weights, config).data,
        )
        del arrays["head"]
        with pytest.raises(ValueError):
            weights_from_tensors(config, arrays)


class TestLoss:
    def test_two_position_example(self):
        logits = Tensor(np.array([[0.0, math.log(3.0)], [0.0, 0.0]]))
        assert nll_loss(logits, [1, 0]).item() == pytest.approx(0.49041, abs=1e-4)

    def test_uniform_logits(self):
        loss = nll_loss(Tensor(np.zeros((5, 64))), np.arange(5))
        assert loss.item() == pytest.approx(math.log(64), rel=1e-12)

    def test_dataset_nll_independent_of_batch_size(self, config, active_weights):
        rng = Rng(4)
        tokens = rng.integers(0, config.vocab_size, size=(5, config.seq_len))
        class_ids = np.array([0, 1, 2, 0, 1])
        full, count = dataset_nll(active_weights, config, class_ids, tokens, batch_size=5)
        split, _ = dataset_nll(active_weights, config, class_ids, tokens, batch_size=2)
        assert count == tokens.size
        assert split == pytest.approx(full, rel=1e-12)
        assert full == pytest.approx(sequence_loss(class_ids, tokens, active_weights, config).item(), rel=1e-12)

    def test_dataset_nll_empty(self, config, active_weights):
        with pytest.raises(ValueError):
            dataset_nll(active_weights, config, np.zeros(0), np.zeros((0, config.seq_len)))

    def test_sequence_loss_length(self, config, active_weights):
        with pytest.raises(ShapeError):
            sequence_loss([0], [[0, 1, 2]], active_weights, config)

    @pytest.mark.parametrize("name", ["cond.bias", "token_embed", "head", "class_embed"])
    def test_loss_gradient(self, config, active_weights, tokens, name):
        def f(t):
            if name == "cond.bias":
                w = replace(active_weights, cond=CondWeights(active_weights.cond.W, t))
            else:
                w = replace(active_weights, **{name: t})
            return sequence_loss([0, 2], tokens, w, config)

        start = Tensor(active_weights.tensors()[name].data.copy())
        assert gradient_check(f, start, eps=1e-6) < 1e-4
