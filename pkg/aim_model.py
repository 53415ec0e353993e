"""
AiM 모델 조립 모듈

토큰 임베딩, 클래스 임베딩(CFG 용 null 행 포함), 절대 위치 인코딩,
adaLN-group 으로 조건화된 N 개의 Mamba 블록, 최종 정규화와 출력 헤드를
묶고 다음 토큰 예측 손실(NLL)을 계산합니다.

입력 배치는 teacher-forcing 배치로 구성됩니다: 행 0 은 클래스 임베딩, 행 t(≥1) 는
토큰 q_t 이며, 행 t 의 로짓이 q_{t+1} 을 예측합니다.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from conditioning import CondWeights, GroupSpec, cond_param_count, init_cond_weights, regress_all
from config_utils import dataclass_from_dict, dataclass_to_dict
from mamba_block import BlockWeights, WEIGHT_NAMES, block_forward, default_dt_rank, init_block_weights
from tensor_core import (
    Rng, ShapeError, Tensor, add, concat, embedding, layer_norm, layer_norm_array, log_softmax,
    matmul, mean, mul, neg, no_grad, pick, reshape, resolve_dtype, slice_, transpose,
)

# 로깅 설정
logger = logging.getLogger(__name__)

INIT_STD = 0.02
PE_KINDS = ("learned", "sinusoidal")
SCAN_MODES = ("sequential", "parallel")

# 표 형태의 모델 구성 (V=16384, K=1000, L=256)
PRESETS: Dict[str, Dict[str, Any]] = {
    "aim-b": {"n_layers": 24, "embed_dim": 768, "n_groups": 24},
    "aim-l": {"n_layers": 48, "embed_dim": 1024, "n_groups": 4},
    "aim-xl": {"n_layers": 48, "embed_dim": 1536, "n_groups": 4},
    "aim-1b": {"n_layers": 48, "embed_dim": 2048, "n_groups": 4},
}
PRESET_COMMON = {"vocab_size": 16384, "n_classes": 1000, "seq_len": 256}


@dataclass
class ModelConfig:
    n_layers: int = 2
    embed_dim: int = 32
    n_groups: int = 1
    vocab_size: int = 64
    n_classes: int = 10
    seq_len: int = 64
    state_dim: int = 16
    expand: int = 2
    conv_k: int = 4
    dt_rank: Optional[int] = None
    use_pe: bool = True
    pe_kind: str = "learned"
    tie_head: bool = False
    dtype: str = "float32"
    exact_zoh: bool = True
    scan_mode: str = "sequential"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers 는 1 이상이어야 합니다 ({self.n_layers})")
        if not 1 <= self.n_groups <= self.n_layers:
            raise ValueError(f"n_groups 는 [1, n_layers] 범위여야 합니다 ({self.n_groups})")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size 는 2 이상이어야 합니다 ({self.vocab_size})")
        if self.seq_len < 1 or self.n_classes < 1 or self.embed_dim < 1:
            raise ValueError("seq_len, n_classes, embed_dim 은 1 이상이어야 합니다")
        if self.state_dim < 1 or self.expand < 1 or self.conv_k < 1:
            raise ValueError("state_dim, expand, conv_k 는 1 이상이어야 합니다")
        if self.dt_rank is not None and self.dt_rank < 1:
            raise ValueError(f"dt_rank 는 1 이상이어야 합니다 ({self.dt_rank})")
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"pe_kind 는 {PE_KINDS} 중 하나여야 합니다 ({self.pe_kind})")
        if self.scan_mode not in SCAN_MODES:
            raise ValueError(f"scan_mode 는 {SCAN_MODES} 중 하나여야 합니다 ({self.scan_mode})")
        resolve_dtype(self.dtype)

    @property
    def d_inner(self) -> int:
        return self.expand * self.embed_dim

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or default_dt_rank(self.embed_dim)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        """L 이 완전제곱수이면 √L×√L, 아니면 1×L"""
        side = math.isqrt(self.seq_len)
        return (side, side) if side * side == self.seq_len else (1, self.seq_len)

    @property
    def group_spec(self) -> GroupSpec:
        return GroupSpec(self.n_layers, self.n_groups, self.embed_dim)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def to_dict(self) -> Dict[str, Any]:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return dataclass_from_dict(cls, data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"알 수 없는 프리셋입니다: {name} (사용 가능: {', '.join(PRESETS)})")
        kwargs = dict(PRESET_COMMON)
        kwargs.update(PRESETS[name])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class TokenSequence:
    """class_id 가 None 이면 무조건부(null) 시퀀스입니다."""
    class_id: Optional[int]
    tokens: List[int]


@dataclass
class ModelWeights:
    token_embed: Tensor            # [V, d]
    class_embed: Tensor            # [K+1, d], 행 K 는 null 임베딩
    pos_embed: Optional[Tensor]    # [L+1, d], 학습형 PE 일 때만
    blocks: List[BlockWeights]
    cond: CondWeights
    norm_weight: Tensor            # [d]
    norm_bias: Tensor              # [d]
    head: Optional[Tensor]         # [d, V], tie_head 이면 None
    pe_table: Optional[np.ndarray] = field(default=None, repr=False)  # 사인파 PE (학습 안 함)

    def tensors(self) -> Dict[str, Tensor]:
        """이름 → 텐서 (체크포인트/옵티마이저 순서 고정)"""
        out: Dict[str, Tensor] = {"token_embed": self.token_embed, "class_embed": self.class_embed}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        for i, block in enumerate(self.blocks):
            out.update(block.tensors(prefix=f"layers.{i}."))
        out.update(self.cond.tensors())
        out["norm.weight"] = self.norm_weight
        out["norm.bias"] = self.norm_bias
        if self.head is not None:
            out["head"] = self.head
        return out


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """고정 사인파 위치 인코딩 [n_positions, dim]"""
    positions = np.arange(n_positions, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(1, half))
    angles = positions * freqs[None, :]
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angles)[:, : table[:, 0::2].shape[1]]
    table[:, 1::2] = np.cos(angles)[:, : table[:, 1::2].shape[1]]
    return table


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """
    모델 가중치를 초기화합니다.

    조건화 가중치는 W=0, bias 는 (α=1, β=0, γ=0) 으로 두어 초기 순전파가
    클래스와 무관하게 항등 잔차가 되도록 합니다.
    """
    dtype = resolve_dtype(config.dtype)
    d = config.embed_dim

    def param(name: str, shape: Tuple[int, ...]) -> Tensor:
        data = Rng.derive(seed, "init", name).normal(shape, INIT_STD, dtype)
        return Tensor(data, requires_grad=True, name=name)

    pos_embed = None
    pe_table = None
    if config.use_pe and config.pe_kind == "learned":
        pos_embed = param("pos_embed", (config.seq_len + 1, d))
    elif config.use_pe:
        pe_table = sinusoidal_table(config.seq_len + 1, d).astype(dtype)

    blocks = [
        init_block_weights(d, config.d_inner, config.state_dim, config.conv_k, config.resolved_dt_rank,
                           seed=seed, layer_idx=i, dtype=dtype)
        for i in range(config.n_layers)
    ]
    weights = ModelWeights(
        token_embed=param("token_embed", (config.vocab_size, d)),
        class_embed=param("class_embed", (config.n_classes + 1, d)),
        pos_embed=pos_embed,
        blocks=blocks,
        cond=init_cond_weights(config.group_spec, dtype),
        norm_weight=Tensor(np.ones(d, dtype=dtype), requires_grad=True, name="norm.weight"),
        norm_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="norm.bias"),
        head=None if config.tie_head else param("head", (d, config.vocab_size)),
        pe_table=pe_table,
    )
    logger.info(f"모델 가중치 초기화 완료: {param_count(config):,} 개 파라미터 (seed={seed})")
    return weights


def weights_from_tensors(config: ModelConfig, tensors: Dict[str, np.ndarray]) -> ModelWeights:
    """이름 → 배열 사전으로부터 ModelWeights 를 재구성합니다 (체크포인트 로드용)."""
    expected = expected_shapes(config)
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise ValueError(f"가중치가 누락되었습니다: {', '.join(missing[:5])}")
    extra = [name for name in tensors if name not in expected]
    if extra:
        raise ValueError(f"알 수 없는 가중치입니다: {', '.join(extra[:5])}")
    dtype = resolve_dtype(config.dtype)

    def t(name: str) -> Tensor:
        array = np.asarray(tensors[name])
        if array.shape != expected[name]:
            raise ShapeError(f"{name}: 형상 {array.shape} 이 구성 {expected[name]} 과 다릅니다")
        return Tensor(array.astype(dtype, copy=True), requires_grad=True, name=name)

    blocks = [
        BlockWeights(**{n: t(f"layers.{i}.{n}") for n in WEIGHT_NAMES})
        for i in range(config.n_layers)
    ]
    pe_table = None
    if config.use_pe and config.pe_kind == "sinusoidal":
        pe_table = sinusoidal_table(config.seq_len + 1, config.embed_dim).astype(dtype)
    return ModelWeights(
        token_embed=t("token_embed"),
        class_embed=t("class_embed"),
        pos_embed=t("pos_embed") if "pos_embed" in expected else None,
        blocks=blocks,
        cond=CondWeights(t("cond.W"), t("cond.bias")),
        norm_weight=t("norm.weight"),
        norm_bias=t("norm.bias"),
        head=t("head") if "head" in expected else None,
        pe_table=pe_table,
    )


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """구성에서 결정되는 이름 → 형상 목록 (ModelWeights.tensors() 와 같은 순서)"""
    d, di = config.embed_dim, config.d_inner
    n, k, r = config.state_dim, config.conv_k, config.resolved_dt_rank
    V, K, L, N, G = config.vocab_size, config.n_classes, config.seq_len, config.n_layers, config.n_groups
    shapes: Dict[str, Tuple[int, ...]] = {"token_embed": (V, d), "class_embed": (K + 1, d)}
    if config.use_pe and config.pe_kind == "learned":
        shapes["pos_embed"] = (L + 1, d)
    block = {
        "in_proj": (d, 2 * di), "conv_w": (di, k), "conv_b": (di,), "x_proj": (di, r + 2 * n),
        "dt_proj": (r, di), "dt_bias": (di,), "A_log": (di, n), "D": (di,), "out_proj": (di, d),
    }
    for i in range(N):
        for name in WEIGHT_NAMES:
            shapes[f"layers.{i}.{name}"] = block[name]
    shapes["cond.W"] = (G, d, 3 * d)
    shapes["cond.bias"] = (N, 3 * d)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if not config.tie_head:
        shapes["head"] = (d, V)
    return shapes


def block_param_count(config: ModelConfig) -> int:
    """블록 하나의 파라미터 수"""
    d, di = config.embed_dim, config.d_inner
    n, k, r = config.state_dim, config.conv_k, config.resolved_dt_rank
    return (d * 2 * di          # in_proj
            + di * k + di       # conv 커널 + bias
            + di * (r + 2 * n)  # x_proj
            + r * di + di       # dt_proj + bias
            + di * n            # A_log
            + di                # D
            + di * d)           # out_proj


def embedding_param_count(config: ModelConfig) -> int:
    d = config.embed_dim
    count = config.vocab_size * d + (config.n_classes + 1) * d
    if config.use_pe and config.pe_kind == "learned":
        count += (config.seq_len + 1) * d
    return count


def non_embedding_param_count(config: ModelConfig) -> int:
    """블록 + 조건화 + 최종 정규화 (임베딩과 출력 헤드 제외)"""
    return (config.n_layers * block_param_count(config)
            + cond_param_count(config.group_spec)
            + 2 * config.embed_dim)


def param_count(config: ModelConfig) -> int:
    """
    학습 가능한 전체 파라미터 수

    V·d + (K+1)·d + [(L+1)·d] + N·block + G·d·3d + N·3d + 2d + [d·V]
    """
    head = 0 if config.tie_head else config.embed_dim * config.vocab_size
    return embedding_param_count(config) + non_embedding_param_count(config) + head


def param_census(weights: ModelWeights) -> int:
    return int(sum(t.size for t in weights.tensors().values()))


# ----------------------------------------------------------------------
# 순전파
# ----------------------------------------------------------------------

def resolve_class_ids(class_ids: Any, config: ModelConfig) -> np.ndarray:
    """None/-1 을 null 클래스(K)로 바꾸고 범위를 확인합니다."""
    if class_ids is None:
        return np.array([config.null_class])
    ids = np.array([config.null_class if c is None or c == -1 else c
                    for c in np.atleast_1d(np.asarray(class_ids, dtype=object))], dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > config.n_classes):
        raise IndexError(f"class_id 가 범위 [0, {config.n_classes}] 를 벗어났습니다")
    return ids


def apply_class_dropout(class_ids: np.ndarray, config: ModelConfig, p: float,
                        rng: Optional[Rng]) -> np.ndarray:
    """확률 p 로 클래스를 null 임베딩으로 바꿉니다."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"class dropout 확률은 [0, 1] 범위여야 합니다 ({p})")
    if p == 0.0:
        return class_ids
    if p == 1.0:
        return np.full_like(class_ids, config.null_class)
    if rng is None:
        raise ValueError("class dropout 에는 Rng 가 필요합니다")
    drop = rng.random(class_ids.shape[0]) < p
    return np.where(drop, config.null_class, class_ids)


def position_rows(weights: ModelWeights, start: int, count: int) -> Optional[Tensor]:
    if weights.pos_embed is not None:
        return slice_(weights.pos_embed, slice(start, start + count))
    if weights.pe_table is not None:
        return Tensor(weights.pe_table[start:start + count])
    return None


def embed_inputs(class_ids: Any, context: Any, weights: ModelWeights, config: ModelConfig,
                 rng: Optional[Rng] = None, class_dropout_p: float = 0.0) -> Tuple[Tensor, Tensor]:
    """
    teacher-forcing 입력 행을 만듭니다.

    Args:
        class_ids: [B] 클래스 (None/-1 은 null)
        context: [B, T-1] 앞선 토큰 (학습 시 q_1..q_{L-1})
        weights: 모델 가중치
        config: 모델 구성
        rng: class dropout 용 난수 생성기
        class_dropout_p: class dropout 확률

    Returns:
        Tuple[Tensor, Tensor]: (hidden [B, T, d], 조건 임베딩 c [B, d])
    """
    ids = resolve_class_ids(class_ids, config)
    ids = apply_class_dropout(ids, config, class_dropout_p, rng)
    context = np.asarray(context, dtype=np.int64)
    if context.ndim == 1:
        context = context[None, :]
    if context.shape[0] != ids.shape[0]:
        raise ShapeError(f"embed_inputs: 배치 크기 불일치 class={ids.shape[0]}, tokens={context.shape[0]}")
    if context.shape[1] > config.seq_len:
        raise ShapeError(f"embed_inputs: 문맥 길이 {context.shape[1]} 가 L={config.seq_len} 를 넘습니다")
    if context.size and (context.min() < 0 or context.max() >= config.vocab_size):
        raise IndexError(f"토큰 인덱스가 범위 [0, {config.vocab_size}) 를 벗어났습니다")

    d = config.embed_dim
    c = embedding(weights.class_embed, ids)
    rows = [reshape(c, (ids.shape[0], 1, d))]
    if context.shape[1]:
        rows.append(embedding(weights.token_embed, context))
    hidden = concat(rows, axis=1) if len(rows) > 1 else rows[0]
    if config.use_pe:
        hidden = add(hidden, position_rows(weights, 0, hidden.shape[1]))
    return hidden, c


def final_norm(x: Tensor, weights: ModelWeights) -> Tensor:
    return add(mul(layer_norm(x), weights.norm_weight), weights.norm_bias)


def output_head(x: Tensor, weights: ModelWeights) -> Tensor:
    if weights.head is not None:
        return matmul(x, weights.head)
    return matmul(x, transpose(weights.token_embed))


def forward_context(class_ids: Any, context: Any, weights: ModelWeights, config: ModelConfig,
                    rng: Optional[Rng] = None, class_dropout_p: float = 0.0,
                    workers: int = 1) -> Tensor:
    """
    배치 순전파

    Returns:
        Tensor: 로짓 [B, T, V], 행 t 는 q_{t+1} 의 분포
    """
    hidden, c = embed_inputs(class_ids, context, weights, config, rng, class_dropout_p)
    mods = regress_all(c, weights.cond, config.group_spec)
    for i, block in enumerate(weights.blocks):
        hidden = block_forward(hidden, block, mods[i], exact=config.exact_zoh,
                               scan_mode=config.scan_mode, workers=workers)
    return output_head(final_norm(hidden, weights), weights)


def forward(seq: TokenSequence, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """단일 시퀀스 순전파. Returns: 로짓 [L, V]"""
    if len(seq.tokens) != config.seq_len:
        raise ShapeError(f"forward: 시퀀스 길이 {len(seq.tokens)} 가 L={config.seq_len} 와 다릅니다")
    logits = forward_context([seq.class_id], [list(seq.tokens)[:-1]], weights, config)
    return reshape(logits, (config.seq_len, config.vocab_size))


def nll_loss(logits: Tensor, targets: Any) -> Tensor:
    """위치 평균 -log softmax(logits)[target] (nats)"""
    targets = np.asarray(targets, dtype=np.int64)
    return mean(neg(pick(log_softmax(logits), targets)))


def sequence_loss(class_ids: Any, tokens: Any, weights: ModelWeights, config: ModelConfig,
                  rng: Optional[Rng] = None, class_dropout_p: float = 0.0) -> Tensor:
    """토큰 배치 [B, L] 의 teacher-forcing 손실"""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] != config.seq_len:
        raise ShapeError(f"sequence_loss: 길이 {tokens.shape[1]} 가 L={config.seq_len} 와 다릅니다")
    logits = forward_context(class_ids, tokens[:, :-1], weights, config, rng, class_dropout_p)
    return nll_loss(logits, tokens)


def dataset_nll(weights: ModelWeights, config: ModelConfig, class_ids: Any, tokens: Any,
                batch_size: int = 32) -> Tuple[float, int]:
    """
    고정된 순서로 배치를 나누어 평균 NLL 을 계산합니다 (테이프 기록 없음).

    Returns:
        Tuple[float, int]: (토큰당 평균 NLL [nats], 토큰 수)
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if tokens.shape[0] == 0:
        raise ValueError("dataset_nll: 평가할 샘플이 없습니다")
    total = 0.0
    with no_grad():
        for start in range(0, tokens.shape[0], batch_size):
            chunk = tokens[start:start + batch_size]
            loss = sequence_loss(class_ids[start:start + batch_size], chunk, weights, config)
            total += loss.item() * chunk.size
    return total / tokens.size, int(tokens.size)


# ----------------------------------------------------------------------
# 증분 디코딩용 numpy 경로
# ----------------------------------------------------------------------

def input_row_array(weights: ModelWeights, config: ModelConfig, token_ids: Optional[np.ndarray],
                    class_ids: Optional[np.ndarray], position: int) -> np.ndarray:
    """위치 position 의 입력 행 [B, d]. position 0 은 클래스 행입니다."""
    if position == 0:
        row = weights.class_embed.data[class_ids]
    else:
        row = weights.token_embed.data[token_ids]
    if config.use_pe:
        table = weights.pos_embed.data if weights.pos_embed is not None else weights.pe_table
        row = row + table[position]
    return row


def head_array(x: np.ndarray, weights: ModelWeights) -> np.ndarray:
    h = layer_norm_array(x) * weights.norm_weight.data + weights.norm_bias.data
    if weights.head is not None:
        return np.matmul(h, weights.head.data)
    return np.matmul(h, weights.token_embed.data.T)
