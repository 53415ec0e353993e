"""
Mamba 블록 모듈

입력 투영 → 인과적 depthwise conv → SiLU → 입력 의존 (Δ, B, C) 투영 →
선택적 스캔 → SiLU 게이트 → 출력 투영 으로 이루어진 기본 Mamba 블록을
adaLN 변조(modulate)로 감쌉니다. 전체 시퀀스 모드(Tensor, 역전파 가능)와
한 스텝씩 진행하는 증분 모드(numpy, 상수 메모리)를 제공합니다.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from conditioning import modulate, modulate_array
from ssm_kernel import DiscreteParams, ScanState, scan_step, selective_scan, zoh_discretize
from tensor_core import (
    Rng, ShapeError, Tensor, add, conv1d_causal_depthwise, exp, matmul, mul, neg,
    resolve_dtype, silu, slice_, softplus, softplus_array, swish_array,
)

# 로깅 설정
logger = logging.getLogger(__name__)

DT_MIN = 1e-3
DT_MAX = 1e-1
DT_FLOOR = 1e-4
INIT_STD = 0.02

WEIGHT_NAMES = ("in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "A_log", "D", "out_proj")


@dataclass
class BlockWeights:
    in_proj: Tensor   # [d, 2·d_inner]
    conv_w: Tensor    # [d_inner, k]
    conv_b: Tensor    # [d_inner]
    x_proj: Tensor    # [d_inner, dt_rank + 2·N]
    dt_proj: Tensor   # [dt_rank, d_inner]
    dt_bias: Tensor   # [d_inner]
    A_log: Tensor     # [d_inner, N]
    D: Tensor         # [d_inner]
    out_proj: Tensor  # [d_inner, d]

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.in_proj.shape[1] // 2

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[1]

    @property
    def conv_k(self) -> int:
        return self.conv_w.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]

    def tensors(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}{name}": getattr(self, name) for name in WEIGHT_NAMES}


@dataclass
class BlockState:
    """증분 디코딩 상태: conv 링 버퍼 [..., d_inner, k-1] 와 SSM 은닉 상태"""
    conv_ring: np.ndarray
    ssm_h: ScanState

    @property
    def nbytes(self) -> int:
        return int(self.conv_ring.nbytes + self.ssm_h.h.nbytes)


def default_dt_rank(embed_dim: int) -> int:
    return math.ceil(embed_dim / 16)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_block_weights(d_model: int, d_inner: int, state_dim: int = 16, conv_k: int = 4,
                       dt_rank: Optional[int] = None, seed: int = 0, layer_idx: int = 0,
                       dtype="float64", dt_min: float = DT_MIN, dt_max: float = DT_MAX) -> BlockWeights:
    """
    기본 Mamba 초기화

    투영 가중치는 N(0, 0.02²), conv 는 U(±1/√k), dt_proj 는 U(±dt_rank^-½),
    Δ bias 는 softplus 출력이 [dt_min, dt_max] 에서 로그 균등이 되도록,
    A_log 는 log(1..N) (S4D-real), D 는 1 로 둡니다.
    """
    dt_rank = dt_rank or default_dt_rank(d_model)
    dtype = resolve_dtype(dtype)

    def rng(name: str) -> Rng:
        return Rng.derive(seed, "init", "block", layer_idx, name)

    conv_bound = 1.0 / math.sqrt(conv_k)
    dt_bound = dt_rank ** -0.5
    dt = np.exp(rng("dt_bias").uniform((d_inner,), math.log(dt_min), math.log(dt_max)))
    dt = np.maximum(dt, DT_FLOOR)
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d_inner, 1)))

    arrays = {
        "in_proj": rng("in_proj").normal((d_model, 2 * d_inner), INIT_STD),
        "conv_w": rng("conv_w").uniform((d_inner, conv_k), -conv_bound, conv_bound),
        "conv_b": rng("conv_b").uniform((d_inner,), -conv_bound, conv_bound),
        "x_proj": rng("x_proj").normal((d_inner, dt_rank + 2 * state_dim), INIT_STD),
        "dt_proj": rng("dt_proj").uniform((dt_rank, d_inner), -dt_bound, dt_bound),
        "dt_bias": inverse_softplus(dt),
        "A_log": a_log,
        "D": np.ones(d_inner),
        "out_proj": rng("out_proj").normal((d_inner, d_model), INIT_STD),
    }
    return BlockWeights(**{
        name: Tensor(arrays[name].astype(dtype), requires_grad=True, name=f"layers.{layer_idx}.{name}")
        for name in WEIGHT_NAMES
    })


def _split(t: Tensor, *sizes: int) -> Tuple[Tensor, ...]:
    parts = []
    start = 0
    for size in sizes:
        parts.append(slice_(t, (Ellipsis, slice(start, start + size))))
        start += size
    return tuple(parts)


def mixer_forward(h: Tensor, w: BlockWeights, exact: bool = True,
                  scan_mode: str = "sequential", workers: int = 1) -> Tensor:
    """변조된 입력 [..., T, d] 에 대한 Mamba 내부 계산 F"""
    if h.ndim < 2 or h.shape[-1] != w.d_model:
        raise ShapeError(f"mixer_forward: 입력 형상 {h.shape} 이 d={w.d_model} 와 맞지 않습니다")
    di, n, r = w.d_inner, w.state_dim, w.dt_rank
    main, gate = _split(matmul(h, w.in_proj), di, di)
    a = silu(add(conv1d_causal_depthwise(main, w.conv_w), w.conv_b))
    dt_raw, B, C = _split(matmul(a, w.x_proj), r, n, n)
    delta = softplus(add(matmul(dt_raw, w.dt_proj), w.dt_bias))
    A = neg(exp(w.A_log))
    y = selective_scan(a, delta, A, B, C, exact=exact, mode=scan_mode, workers=workers)
    y = mul(add(y, mul(a, w.D)), silu(gate))
    return matmul(y, w.out_proj)


def block_forward(x: Tensor, w: BlockWeights, mod: Tuple[Tensor, Tensor, Tensor],
                  exact: bool = True, scan_mode: str = "sequential", workers: int = 1) -> Tensor:
    """
    전체 시퀀스 블록 순전파

    Args:
        x: 입력 [T, d] 또는 [B, T, d]
        w: 블록 가중치
        mod: (α, β, γ) 변조값 ([d] 또는 [B, d])
        exact: 정확한 ZOH 사용 여부
        scan_mode: "sequential" 또는 "parallel"

    Returns:
        Tensor: x + γ ⊙ F(α ⊙ LN(x) + β)
    """
    if x.shape[-2] < 1:
        raise ShapeError("block_forward: 시퀀스 길이는 1 이상이어야 합니다")
    alpha, beta, gamma = mod
    return modulate(x, alpha, beta, gamma,
                    lambda h: mixer_forward(h, w, exact=exact, scan_mode=scan_mode, workers=workers))


def init_state(w: BlockWeights, batch: Optional[int] = None) -> BlockState:
    """0 으로 채운 링 버퍼와 은닉 상태를 만듭니다. batch=None 이면 배치 축이 없습니다."""
    lead = () if batch is None else (int(batch),)
    dtype = w.in_proj.dtype
    ring = np.zeros(lead + (w.d_inner, w.conv_k - 1), dtype=dtype)
    h = np.zeros(lead + (w.d_inner, w.state_dim), dtype=dtype)
    return BlockState(ring, ScanState(h))


def mixer_step(h_t: np.ndarray, state: BlockState, w: BlockWeights,
               exact: bool = True) -> Tuple[np.ndarray, BlockState]:
    di, n, r = w.d_inner, w.state_dim, w.dt_rank
    u = np.matmul(h_t, w.in_proj.data)
    main, gate = u[..., :di], u[..., di:]
    window = np.concatenate([state.conv_ring, main[..., None]], axis=-1)
    conv = np.zeros_like(main)
    for j in range(w.conv_k):
        conv += window[..., j] * w.conv_w.data[:, j]
    a = swish_array(conv + w.conv_b.data)
    p = np.matmul(a, w.x_proj.data)
    dt_raw, B, C = p[..., :r], p[..., r:r + n], p[..., r + n:]
    delta = softplus_array(np.matmul(dt_raw, w.dt_proj.data) + w.dt_bias.data)
    A = -np.exp(w.A_log.data)
    Abar, Bbar = zoh_discretize(delta, A, B, exact=exact)
    y, ssm = scan_step(DiscreteParams(Abar, Bbar, C), a, state.ssm_h)
    y = (y + a * w.D.data) * swish_array(gate)
    return np.matmul(y, w.out_proj.data), BlockState(window[..., 1:].copy(), ssm)


def block_step(x_t: np.ndarray, state: BlockState, w: BlockWeights,
               mod: Tuple[np.ndarray, np.ndarray, np.ndarray],
               exact: bool = True) -> Tuple[np.ndarray, BlockState]:
    """
    한 토큰 증분 스텝

    Args:
        x_t: 입력 [d] 또는 [B, d]
        state: init_state 로 만든 상태 (입력 배치 형상과 일치)
        w: 블록 가중치
        mod: (α, β, γ) numpy 배열

    Returns:
        Tuple[np.ndarray, BlockState]: (y_t, 새 상태)
    """
    if state is None:
        raise RuntimeError("block_step: 상태가 초기화되지 않았습니다 (init_state 필요)")
    x_t = np.asarray(x_t)
    if state.conv_ring.shape[:-2] != x_t.shape[:-1]:
        raise ShapeError(
            f"block_step: 상태 배치 형상 {state.conv_ring.shape[:-2]} 이 입력 {x_t.shape[:-1]} 와 다릅니다")
    alpha, beta, gamma = mod
    holder = {}

    def _mixer(h):
        out, holder["state"] = mixer_step(h, state, w, exact=exact)
        return out

    y = modulate_array(x_t, alpha, beta, gamma, _mixer)
    return y, holder["state"]
