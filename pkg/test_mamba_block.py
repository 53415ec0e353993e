"""
Mamba 블록 테스트: 전체 시퀀스 ↔ 증분 스텝 동등성, 인과성, 초기화, 기울기
"""

from dataclasses import replace

import numpy as np
import pytest

from mamba_block import (
    DT_MAX, DT_MIN, WEIGHT_NAMES, BlockWeights, block_forward, block_step, default_dt_rank, init_block_weights,
    init_state, inverse_softplus,
)
from tensor_core import (
    Rng, ShapeError, Tensor, get_tape, gradient_check, no_grad, reset_tape, softplus_array, sum_,
)


D_MODEL = 4


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def weights() -> BlockWeights:
    w = init_block_weights(D_MODEL, 8, state_dim=4, conv_k=3, dt_rank=2, seed=3, dtype="float64")
    # 출력이 무시할 수준이 되지 않도록 투영을 키웁니다
    w.in_proj.data *= 20.0
    w.x_proj.data *= 20.0
    w.out_proj.data *= 20.0
    return w


@pytest.fixture
def mod():
    rng = Rng(17)
    return tuple(rng.normal((D_MODEL,), std=0.5) + bias for bias in (1.0, 0.0, 0.5))


def as_tensors(mod):
    return tuple(Tensor(m) for m in mod)


def run_steps(x: np.ndarray, w: BlockWeights, mod, batch=None) -> np.ndarray:
    state = init_state(w, batch)
    ys = []
    for t in range(x.shape[-2]):
        y, state = block_step(x[..., t, :], state, w, mod)
        ys.append(y)
    return np.stack(ys, axis=-2)


class TestBlockForward:
    def test_zero_gate_is_identity(self, weights):
        x = Rng(0).normal((6, D_MODEL))
        zero_gate = (Tensor(np.ones(D_MODEL)), Tensor(np.zeros(D_MODEL)), Tensor(np.zeros(D_MODEL)))
        np.testing.assert_array_equal(block_forward(Tensor(x), weights, zero_gate).data, x)

    def test_single_step_matches_forward(self, weights, mod):
        x = Rng(1).normal((1, D_MODEL))
        full = block_forward(Tensor(x), weights, as_tensors(mod)).data
        step, _ = block_step(x[0], init_state(weights), weights, mod)
        np.testing.assert_allclose(step, full[0], rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("steps", [16, 97])
    def test_chained_steps_match_forward(self, weights, mod, steps):
        x = Rng(2).normal((steps, D_MODEL))
        full = block_forward(Tensor(x), weights, as_tensors(mod)).data
        stepped = run_steps(x, weights, mod)
        assert np.max(np.abs(stepped - full) / np.maximum(1.0, np.abs(full))) < 1e-10

    def test_batched_steps_match_batched_forward(self, weights):
        rng = Rng(3)
        x = rng.normal((2, 12, D_MODEL))
        mod = tuple(rng.normal((2, D_MODEL), std=0.5) for _ in range(3))
        full = block_forward(Tensor(x), weights, as_tensors(mod)).data
        stepped = run_steps(x, weights, mod, batch=2)
        np.testing.assert_allclose(stepped, full, rtol=1e-10, atol=1e-10)

    def test_parallel_scan_mode(self, weights, mod):
        x = Rng(4).normal((70, D_MODEL))
        seq = block_forward(Tensor(x), weights, as_tensors(mod)).data
        par = block_forward(Tensor(x), weights, as_tensors(mod), scan_mode="parallel").data
        np.testing.assert_allclose(par, seq, rtol=1e-10, atol=1e-10)

    def test_causality(self, weights, mod):
        rng = Rng(5)
        x = rng.normal((20, D_MODEL))
        base = block_forward(Tensor(x), weights, as_tensors(mod)).data
        for t in (0, 7, 19):
            moved = x.copy()
            moved[t] += rng.normal((D_MODEL,))
            out = block_forward(Tensor(moved), weights, as_tensors(mod)).data
            np.testing.assert_allclose(out[:t], base[:t], rtol=0, atol=1e-13)
            assert not np.allclose(out[t], base[t])

    def test_wrong_width(self, weights, mod):
        with pytest.raises(ShapeError):
            block_forward(Tensor(np.ones((3, D_MODEL + 1))), weights, as_tensors(mod))

    def test_gradient_wrt_input(self, weights, mod):
        projection = Rng(6).normal((5, D_MODEL))
        x = Tensor(Rng(7).normal((5, D_MODEL)))
        f = lambda t: sum_(block_forward(t, weights, as_tensors(mod)) * Tensor(projection))
        assert gradient_check(f, x, eps=1e-6) < 1e-4

    @pytest.mark.parametrize("name", WEIGHT_NAMES)
    def test_gradient_wrt_weights(self, weights, mod, name):
        projection = Rng(8).normal((5, D_MODEL))
        x = Tensor(Rng(9).normal((5, D_MODEL)))

        def f(t):
            return sum_(block_forward(x, replace(weights, **{name: t}), as_tensors(mod)) * Tensor(projection))

        assert gradient_check(f, Tensor(getattr(weights, name).data.copy()), eps=1e-6) < 1e-4


class TestBlockStep:
    def test_init_state_is_zero_and_independent(self, weights):
        a = init_state(weights)
        b = init_state(weights)
        assert not a.conv_ring.any() and not a.ssm_h.h.any()
        a.conv_ring += 1.0
        a.ssm_h.h += 1.0
        assert not b.conv_ring.any() and not b.ssm_h.h.any()

    def test_state_shapes_do_not_grow(self, weights, mod):
        state = init_state(weights, batch=3)
        shapes = (state.conv_ring.shape, state.ssm_h.h.shape)
        size = state.nbytes
        x = Rng(10).normal((3, D_MODEL))
        for _ in range(5):
            _, state = block_step(x, state, weights, tuple(np.broadcast_to(m, (3, D_MODEL)) for m in mod))
        assert (state.conv_ring.shape, state.ssm_h.h.shape) == shapes
        assert state.nbytes == size
        assert shapes == ((3, 8, 2), (3, 8, 4))

    def test_missing_state(self, weights, mod):
        with pytest.raises(RuntimeError):
            block_step(np.zeros(D_MODEL), None, weights, mod)

    def test_batch_mismatch(self, weights, mod):
        with pytest.raises(ShapeError):
            block_step(np.zeros((2, D_MODEL)), init_state(weights, batch=3), weights, mod)

    def test_step_does_not_mutate_input_state(self, weights, mod):
        state = init_state(weights)
        block_step(np.ones(D_MODEL), state, weights, mod)
        assert not state.conv_ring.any() and not state.ssm_h.h.any()


class TestInit:
    def test_shapes(self):
        w = init_block_weights(32, 64, state_dim=16, conv_k=4, seed=0)
        assert w.dt_rank == default_dt_rank(32) == 2
        assert w.in_proj.shape == (32, 128)
        assert w.x_proj.shape == (64, 2 + 32)
        assert w.A_log.shape == (64, 16)
        assert set(w.tensors("layers.0.")) == {f"layers.0.{n}" for n in WEIGHT_NAMES}

    def test_delta_and_a_ranges(self):
        w = init_block_weights(16, 32, seed=1)
        dt = softplus_array(w.dt_bias.data)
        assert np.all(dt >= DT_MIN * (1 - 1e-9)) and np.all(dt <= DT_MAX * (1 + 1e-9))
        A = -np.exp(w.A_log.data)
        assert np.all(A < 0)
        np.testing.assert_allclose(-A[0], np.arange(1, 17))

    def test_inverse_softplus(self):
        y = np.array([1e-3, 0.05, 2.0])
        np.testing.assert_allclose(softplus_array(inverse_softplus(y)), y, rtol=1e-12)

    def test_deterministic_per_seed_and_layer(self):
        a = init_block_weights(8, 16, seed=5, layer_idx=2)
        b = init_block_weights(8, 16, seed=5, layer_idx=2)
        c = init_block_weights(8, 16, seed=5, layer_idx=3)
        np.testing.assert_array_equal(a.in_proj.data, b.in_proj.data)
        assert not np.array_equal(a.in_proj.data, c.in_proj.data)

    def test_dtype(self):
        w = init_block_weights(8, 16, seed=0, dtype="float32")
        assert all(t.dtype == np.float32 for t in w.tensors().values())

    def test_no_grad_forward_leaves_tape_empty(self, weights, mod):
        with no_grad():
            block_forward(Tensor(np.ones((3, D_MODEL))), weights, as_tensors(mod))
        assert len(get_tape()) == 0
