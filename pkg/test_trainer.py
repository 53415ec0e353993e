"""
학습 루프 / 옵티마이저 / 체크포인트 테스트
"""

import math
import os
from dataclasses import replace

import numpy as np
import pytest

from aim_model import ModelConfig, forward_context, init_weights, sequence_loss
from tensor_core import NonFiniteError, Tensor, log_softmax_array, no_grad, reset_tape
from toy_tokenizer import SyntheticSpec, generate_dataset, split_dataset
from trainer import (
    LAST_CHECKPOINT, METRICS_FILE, CheckpointError, TrainConfig, adamw_step, batch_indices, clip_grad_norm,
    compute_grads, effective_lr, init_optim, is_decay_exempt, load_checkpoint, save_checkpoint, train,
)

slow = pytest.mark.skipif(os.getenv("AIM_RUN_SLOW") != "1", reason="AIM_RUN_SLOW=1 일 때만 실행")


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def spec() -> SyntheticSpec:
    return SyntheticSpec(n_classes=4, image_size=8, patch_size=2, levels=4)


@pytest.fixture
def dataset(spec):
    return generate_dataset(spec, n_per_class=5, seed=1)


@pytest.fixture
def config(spec) -> ModelConfig:
    return ModelConfig(n_layers=2, embed_dim=8, n_groups=2, vocab_size=spec.vocab_size,
                       n_classes=spec.n_classes, seq_len=spec.seq_len, state_dim=4, conv_k=3, dtype="float64")


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(batch_size=4, base_lr_per_256=0.5, warmup_steps=2, steps=4, seed=3)


class TestLearningRate:
    def test_linear_scaling_rule(self):
        assert effective_lr(TrainConfig(batch_size=256)) == pytest.approx(1e-4)
        assert effective_lr(TrainConfig(batch_size=64)) == pytest.approx(2.5e-5)

    def test_invalid_batch(self):
        with pytest.raises(ValueError):
            effective_lr(TrainConfig(), batch_size=0)

    def test_warmup(self):
        cfg = TrainConfig(batch_size=256, warmup_steps=100)
        assert effective_lr(cfg, step=0) == pytest.approx(1e-6)
        assert effective_lr(cfg, step=99) == pytest.approx(1e-4)
        assert effective_lr(cfg, step=500) == pytest.approx(1e-4)

    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0},
        {"class_dropout": 1.5},
        {"betas": (0.9, 1.0)},
        {"base_lr_per_256": 0.0},
        {"grad_clip": 0.0},
        {"shards": 17},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestOptimizer:
    @pytest.mark.parametrize("name,exempt", [
        ("layers.0.in_proj", False),
        ("layers.3.out_proj", False),
        ("cond.W", False),
        ("head", False),
        ("layers.0.D", True),
        ("layers.1.A_log", True),
        ("layers.0.dt_bias", True),
        ("cond.bias", True),
        ("norm.weight", True),
        ("token_embed", True),
        ("pos_embed", True),
    ])
    def test_decay_exemptions(self, name, exempt):
        assert is_decay_exempt(name) is exempt

    def test_first_step_is_sign_update(self):
        params = {"head": Tensor(np.array([1.0, -2.0, 3.0]))}
        optim = init_optim(params)
        adamw_step(params, {"head": np.array([0.5, -4.0, 1e-3])}, optim, lr=0.1, weight_decay=0.0)
        np.testing.assert_allclose(params["head"].data, [0.9, -1.9, 2.9], rtol=1e-6)
        assert optim.step == 1

    def test_decoupled_decay(self):
        params = {"head": Tensor(np.array([2.0])), "norm.bias": Tensor(np.array([2.0]))}
        optim = init_optim(params)
        zeros = {name: np.zeros(1) for name in params}
        adamw_step(params, zeros, optim, lr=0.1, weight_decay=0.5)
        assert params["head"].data[0] == pytest.approx(2.0 * (1 - 0.05))
        assert params["norm.bias"].data[0] == 2.0

    def test_grad_shape_mismatch(self):
        params = {"head": Tensor(np.ones(3))}
        with pytest.raises(ValueError):
            adamw_step(params, {"head": np.ones(2)}, init_optim(params), lr=0.1)

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert grads["a"][0] == pytest.approx(0.6) and grads["b"][0] == pytest.approx(0.8)
        assert clip_grad_norm(grads, 10.0) == pytest.approx(1.0)


class TestBatches:
    def test_epoch_covers_dataset(self):
        seen = np.concatenate([batch_indices(10, 5, step, seed=0) for step in range(2)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(10))

    def test_deterministic_per_step(self):
        np.testing.assert_array_equal(batch_indices(10, 4, 7, seed=2), batch_indices(10, 4, 7, seed=2))

    def test_shards_match_single_pass(self, config, dataset):
        weights = init_weights(config, seed=0)
        weights.cond.b.data[...] += 0.3
        ids, tokens = dataset.class_ids[:6], dataset.tokens[:6]
        loss1, grads1 = compute_grads(weights, config, ids, tokens, shards=1)
        loss3, grads3 = compute_grads(weights, config, ids, tokens, shards=3, workers=3)
        assert loss3 == pytest.approx(loss1, rel=1e-12)
        for name in grads1:
            np.testing.assert_allclose(grads3[name], grads1[name], rtol=1e-10, atol=1e-14)


def active_weights(config):
    weights = init_weights(config, seed=2)
    weights.cond.b.data[...] += 0.3
    return weights


class TestTeacherForcing:
    def test_targets_are_inputs_shifted_by_one(self, config, dataset):
        weights = active_weights(config)
        ids, tokens = dataset.class_ids[:3], dataset.tokens[:3]
        with no_grad():
            logits = forward_context(ids, tokens[:, :-1], weights, config).data
            loss = sequence_loss(ids, tokens, weights, config).item()
        assert logits.shape == (3, config.seq_len, config.vocab_size)
        picked = np.take_along_axis(log_softmax_array(logits), tokens[..., None], axis=-1)
        assert loss == pytest.approx(-np.mean(picked), rel=1e-12)

    def test_first_position_sees_only_the_class(self, config, dataset):
        weights = active_weights(config)
        ids, tokens = dataset.class_ids[:2], dataset.tokens[:2]
        changed = (tokens + 1) % config.vocab_size
        other_ids = (ids + 1) % config.n_classes
        with no_grad():
            base = forward_context(ids, tokens[:, :-1], weights, config).data
            new_tokens = forward_context(ids, changed[:, :-1], weights, config).data
            new_class = forward_context(other_ids, tokens[:, :-1], weights, config).data
        np.testing.assert_allclose(new_tokens[:, 0], base[:, 0], rtol=0, atol=1e-12)
        assert not np.allclose(new_tokens[:, 1], base[:, 1])
        assert not np.allclose(new_class[:, 0], base[:, 0])

    def test_token_t_only_feeds_later_positions(self, config, dataset):
        weights = active_weights(config)
        ids, tokens = dataset.class_ids[:1], dataset.tokens[:1].copy()
        changed = tokens.copy()
        changed[0, 3] = (changed[0, 3] + 1) % config.vocab_size
        with no_grad():
            base = forward_context(ids, tokens[:, :-1], weights, config).data
            moved = forward_context(ids, changed[:, :-1], weights, config).data
        np.testing.assert_allclose(moved[0, :4], base[0, :4], rtol=0, atol=1e-12)
        assert not np.allclose(moved[0, 4], base[0, 4])


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path, config, train_config):
        weights = init_weights(config, seed=4)
        optim = init_optim(weights.tensors())
        for name in optim.m:
            optim.m[name] += 0.125
            optim.v[name] += 0.5
        optim.step = 9
        path = save_checkpoint(tmp_path / "a.aimc", config, weights, optim, step=9, train_config=train_config)
        ckpt = load_checkpoint(path)
        assert ckpt.model_config == config
        assert ckpt.train_config == train_config
        assert ckpt.step == 9 and ckpt.optim.step == 9
        for name, tensor in weights.tensors().items():
            np.testing.assert_array_equal(ckpt.weights.tensors()[name].data, tensor.data)
            np.testing.assert_array_equal(ckpt.optim.m[name], optim.m[name])
            np.testing.assert_array_equal(ckpt.optim.v[name], optim.v[name])

    def test_float32_payload(self, tmp_path, config):
        cfg = replace(config, dtype="float32")
        weights = init_weights(cfg, seed=0)
        path = save_checkpoint(tmp_path / "f32.aimc", cfg, weights, init_optim(weights.tensors()))
        ckpt = load_checkpoint(path)
        assert ckpt.weights.token_embed.dtype == np.float32
        assert ckpt.meta["meta.payload"] == "f32"

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.aimc")

    @pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
    def test_damaged(self, tmp_path, config, damage):
        weights = init_weights(config, seed=0)
        path = save_checkpoint(tmp_path / "d.aimc", config, weights, init_optim(weights.tensors()))
        raw = bytearray(path.read_bytes())
        if damage == "magic":
            raw[:4] = b"XXXX"
        elif damage == "version":
            raw[4:8] = (7).to_bytes(4, "little")
        elif damage == "truncate":
            raw = raw[:-3]
        else:
            raw += b"\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestTrain:
    def test_metrics_and_last_checkpoint(self, tmp_path, config, dataset, train_config):
        result = train(init_weights(config, seed=0), config, dataset, train_config, out_dir=tmp_path,
                       progress=False)
        assert result.start_step == 0 and result.final_step == 4
        assert len(result.losses) == 4 and all(np.isfinite(result.losses))
        assert result.lrs[0] == pytest.approx(effective_lr(train_config, 0))
        lines = (tmp_path / METRICS_FILE).read_text(encoding="utf-8").splitlines()
        assert [int(line.split("\t")[0]) for line in lines] == [0, 1, 2, 3]
        assert float(lines[2].split("\t")[1]) == result.losses[2]
        assert load_checkpoint(tmp_path / LAST_CHECKPOINT).step == 4

    def test_periodic_checkpoints(self, tmp_path, config, dataset, train_config):
        tc = replace(train_config, checkpoint_every=2)
        result = train(init_weights(config, seed=0), config, dataset, tc, out_dir=tmp_path, progress=False)
        assert [p.name for p in result.checkpoints] == ["ckpt_000002.aimc", "ckpt_000004.aimc", LAST_CHECKPOINT]

    def test_resume_matches_uninterrupted(self, tmp_path, config, dataset, train_config):
        full = train(init_weights(config, seed=0), config, dataset, train_config, progress=False)
        first = replace(train_config, steps=2)
        train(init_weights(config, seed=0), config, dataset, first, out_dir=tmp_path, progress=False)
        resumed = train(init_weights(config, seed=0), config, dataset, train_config, out_dir=tmp_path,
                        resume=load_checkpoint(tmp_path / LAST_CHECKPOINT), progress=False)
        assert resumed.start_step == 2
        assert resumed.losses == full.losses[2:]
        for name, tensor in full.weights.tensors().items():
            np.testing.assert_array_equal(resumed.weights.tensors()[name].data, tensor.data)
        lines = (tmp_path / METRICS_FILE).read_text(encoding="utf-8").splitlines()
        assert [int(line.split("\t")[0]) for line in lines] == [0, 1, 2, 3]

    def test_resume_config_mismatch(self, tmp_path, config, dataset, train_config):
        train(init_weights(config, seed=0), config, dataset, replace(train_config, steps=1), out_dir=tmp_path,
              progress=False)
        other = replace(config, n_groups=1)
        with pytest.raises(CheckpointError):
            train(init_weights(other, seed=0), other, dataset, train_config,
                  resume=load_checkpoint(tmp_path / LAST_CHECKPOINT), progress=False)

    def test_eval_nll(self, config, dataset, train_config):
        result = train(init_weights(config, seed=0), config, dataset, replace(train_config, steps=1),
                       eval_dataset=split_dataset(dataset, "all"), progress=False)
        assert result.eval_nll is not None and result.eval_nll > 0

    def test_dataset_mismatch(self, config, dataset, train_config):
        with pytest.raises(ValueError):
            train(init_weights(replace(config, seq_len=8), seed=0), replace(config, seq_len=8), dataset,
                  train_config, progress=False)

    def test_non_finite_stops(self, config, dataset, train_config):
        weights = init_weights(config, seed=0)
        weights.head.data[0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            train(weights, config, dataset, train_config, progress=False)

    def test_moving_average_loss_decreases(self, config, dataset):
        tc = TrainConfig(batch_size=4, base_lr_per_256=0.5, warmup_steps=2, steps=20, seed=0)
        result = train(init_weights(config, seed=0), config, dataset, tc, progress=False)
        window = np.convolve(result.losses, np.ones(5) / 5, mode="valid")
        assert window[-1] < window[0]

    def test_same_seed_same_losses(self, config, dataset, train_config):
        a = train(init_weights(config, seed=0), config, dataset, train_config, progress=False)
        b = train(init_weights(config, seed=0), config, dataset, train_config, progress=False)
        assert a.losses == b.losses

    @slow
    def test_micro_model_halves_uniform_loss(self):
        spec = SyntheticSpec()
        dataset = generate_dataset(spec, n_per_class=40, seed=0)
        config = ModelConfig(n_layers=2, embed_dim=32, n_groups=2, vocab_size=64, n_classes=spec.n_classes,
                             seq_len=64)
        tc = TrainConfig(batch_size=16, base_lr_per_256=0.05, warmup_steps=20, steps=200, class_dropout=0.1,
                         seed=0)
        result = train(init_weights(config, seed=0), config, dataset, tc, progress=False)
        assert result.losses[0] == pytest.approx(math.log(64), abs=0.1)
        assert min(result.losses[-10:]) <= 0.5 * math.log(64)
