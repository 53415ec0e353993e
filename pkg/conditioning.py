"""
adaLN-group 조건화 모듈

클래스 임베딩 c 로부터 레이어별 scale(α), shift(β), gate(γ) 를 회귀합니다.
N 개 레이어를 G 개의 연속 그룹으로 나누어 가중치 W_j 는 그룹 내에서 공유하고
bias b_i 는 레이어마다 따로 둡니다. G=1 이면 adaLN-single, G=N 이면 일반 adaLN 과
같습니다.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from tensor_core import (
    ShapeError, Tensor, add, layer_norm, layer_norm_array, matmul, mul, reshape,
    slice_, swish, swish_array,
)

# 로깅 설정
logger = logging.getLogger(__name__)

Modulation = Tuple[Tensor, Tensor, Tensor]


@dataclass
class GroupSpec:
    n_layers: int
    n_groups: int
    embed_dim: int

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers 는 1 이상이어야 합니다 ({self.n_layers})")
        if not 1 <= self.n_groups <= self.n_layers:
            raise ValueError(f"n_groups 는 [1, {self.n_layers}] 범위여야 합니다 ({self.n_groups})")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim 은 1 이상이어야 합니다 ({self.embed_dim})")

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> "GroupSpec":
        return cls(int(data["n_layers"]), int(data["n_groups"]), int(data["embed_dim"]))


@dataclass
class CondWeights:
    """W: [G, d, 3d] 그룹 공유 가중치, b: [N, 3d] 레이어별 bias"""
    W: Tensor
    b: Tensor

    def tensors(self) -> Dict[str, Tensor]:
        return {"cond.W": self.W, "cond.bias": self.b}


def assign_group(layer_idx: int, spec: GroupSpec) -> int:
    """레이어 i 를 그룹 floor(i·G/N) 에 배정합니다."""
    if not 0 <= layer_idx < spec.n_layers:
        raise ValueError(f"layer_idx 범위를 벗어났습니다: {layer_idx} (N={spec.n_layers})")
    return layer_idx * spec.n_groups // spec.n_layers


def identity_bias(n_rows: int, embed_dim: int, dtype=np.float64) -> np.ndarray:
    """α=1, β=0, γ=0 이 되도록 하는 bias 행들"""
    row = np.concatenate([np.ones(embed_dim), np.zeros(2 * embed_dim)]).astype(dtype)
    return np.tile(row, (n_rows, 1))


def init_cond_weights(spec: GroupSpec, dtype=np.float64) -> CondWeights:
    """W 는 0, bias 는 항등 잔차(γ=0)가 되도록 초기화합니다."""
    d = spec.embed_dim
    W = Tensor(np.zeros((spec.n_groups, d, 3 * d), dtype=dtype), requires_grad=True, name="cond.W")
    b = Tensor(identity_bias(spec.n_layers, d, dtype), requires_grad=True, name="cond.bias")
    return CondWeights(W, b)


def _split3(m: Tensor, d: int) -> Modulation:
    return (slice_(m, (Ellipsis, slice(0, d))),
            slice_(m, (Ellipsis, slice(d, 2 * d))),
            slice_(m, (Ellipsis, slice(2 * d, 3 * d))))


def _as_rows(c: Tensor, d: int) -> Tuple[Tensor, bool]:
    if c.shape[-1] != d:
        raise ShapeError(f"regress_modulation: 클래스 임베딩 차원 {c.shape[-1]} 이 d={d} 와 다릅니다")
    if c.ndim == 1:
        return reshape(c, (1, d)), True
    return c, False


def _regress(activated: Tensor, W_j: Tensor, b_i: Tensor, d: int, squeeze: bool) -> Modulation:
    m = add(matmul(activated, W_j), b_i)
    if squeeze:
        m = reshape(m, (3 * d,))
    return _split3(m, d)


def regress_modulation(c: Tensor, weights: CondWeights, layer_idx: int,
                       spec: GroupSpec) -> Modulation:
    """
    [α, β, γ] = split₃(Swish(c)·W_{group(i)} + b_i)

    Args:
        c: 클래스 임베딩 [d] 또는 [B, d]
        weights: 조건화 가중치
        layer_idx: 레이어 번호
        spec: 그룹 구성

    Returns:
        Modulation: (α, β, γ), 각각 c 와 같은 앞쪽 형상에 [d]
    """
    d = spec.embed_dim
    if weights.W.shape != (spec.n_groups, d, 3 * d) or weights.b.shape != (spec.n_layers, 3 * d):
        raise ShapeError(
            f"regress_modulation: 가중치 형상이 맞지 않습니다 W={weights.W.shape}, b={weights.b.shape}")
    rows, squeeze = _as_rows(c, d)
    j = assign_group(layer_idx, spec)
    return _regress(swish(rows), slice_(weights.W, j), slice_(weights.b, layer_idx), d, squeeze)


def regress_all(c: Tensor, weights: CondWeights, spec: GroupSpec) -> List[Modulation]:
    """모든 레이어의 변조값을 한 번에 계산합니다 (Swish(c) 와 그룹 가중치 슬라이스 재사용)."""
    d = spec.embed_dim
    rows, squeeze = _as_rows(c, d)
    activated = swish(rows)
    group_w = [slice_(weights.W, j) for j in range(spec.n_groups)]
    return [
        _regress(activated, group_w[assign_group(i, spec)], slice_(weights.b, i), d, squeeze)
        for i in range(spec.n_layers)
    ]


def regress_single(c: Tensor, W: Tensor, b: Tensor, layer_idx: int) -> Modulation:
    """adaLN-single 기준 구현: 모든 레이어가 하나의 W [d, 3d] 를 공유"""
    d = W.shape[0]
    rows, squeeze = _as_rows(c, d)
    return _regress(swish(rows), W, slice_(b, layer_idx), d, squeeze)


def regress_vanilla(c: Tensor, W: Tensor, b: Tensor, layer_idx: int) -> Modulation:
    """일반 adaLN 기준 구현: 레이어마다 W_i [d, 3d]"""
    d = W.shape[1]
    rows, squeeze = _as_rows(c, d)
    return _regress(swish(rows), slice_(W, layer_idx), slice_(b, layer_idx), d, squeeze)


def _lift(m: Tensor, x: Tensor) -> Tensor:
    # [B, d] 변조값을 [B, 1, d] 로 바꿔 시간 축에 브로드캐스트합니다
    if x.ndim >= 3 and m.ndim == x.ndim - 1:
        return reshape(m, m.shape[:-1] + (1, m.shape[-1]))
    return m


def modulate(x: Tensor, alpha: Tensor, beta: Tensor, gamma: Tensor,
             F: Callable[[Tensor], Tensor], normalize: bool = True) -> Tensor:
    """
    x' = x + γ ⊙ F(α ⊙ LN(x) + β)

    normalize=False 는 정규화를 건너뛰는 테스트용 경로입니다.
    """
    alpha, beta, gamma = _lift(alpha, x), _lift(beta, x), _lift(gamma, x)
    h = layer_norm(x) if normalize else x
    return add(x, mul(gamma, F(add(mul(alpha, h), beta))))


def modulate_array(x: np.ndarray, alpha: np.ndarray, beta: np.ndarray, gamma: np.ndarray,
                   F: Callable[[np.ndarray], np.ndarray], normalize: bool = True) -> np.ndarray:
    """증분 디코딩용 numpy 버전 (연산 순서는 modulate 와 동일)"""
    h = layer_norm_array(x) if normalize else x
    return x + gamma * F(alpha * h + beta)


def regress_all_array(c: np.ndarray, W: np.ndarray, b: np.ndarray,
                      spec: GroupSpec) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """numpy 배열 버전 regress_all. c: [B, d]"""
    d = spec.embed_dim
    activated = swish_array(c)
    projected = [np.matmul(activated, W[j]) for j in range(spec.n_groups)]
    out = []
    for i in range(spec.n_layers):
        m = projected[assign_group(i, spec)] + b[i]
        out.append((m[..., :d], m[..., d:2 * d], m[..., 2 * d:]))
    return out


def cond_param_count(spec: GroupSpec) -> int:
    """G·d·3d + N·3d"""
    d = spec.embed_dim
    return spec.n_groups * d * 3 * d + spec.n_layers * 3 * d
