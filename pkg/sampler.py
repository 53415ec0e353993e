"""
자기회귀 샘플러

분류기 없는 가이던스(CFG), temperature/top-k/top-p 필터, 레이어별 증분 디코딩
상태를 이용해 토큰 격자를 생성합니다. 조건부/무조건부 두 스트림은 한 배치의
앞/뒤 절반으로 묶어 같은 토큰을 함께 입력받습니다.
"""

import concurrent.futures
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from aim_model import ModelConfig, ModelWeights, head_array, input_row_array, resolve_class_ids
from conditioning import regress_all_array
from config_utils import dataclass_from_dict, dataclass_to_dict
from mamba_block import BlockState, block_step, init_state
from tensor_core import Rng, softmax_array
from toy_tokenizer import TokenGrid, unflatten

# 로깅 설정
logger = logging.getLogger(__name__)

GUIDANCE_SPACES = ("logit", "prob")
DEFAULT_CHUNK = 16
# 데이터셋 생성("sample")과 겹치지 않는 샘플링 스트림 라벨
DECODE_STREAM = "decode"


@dataclass
class GuidanceConfig:
    w: float = 2.0
    temperature: float = 1.0
    top_k: Optional[int] = None
    top_p: Optional[float] = None
    argmax: bool = False
    space: str = "logit"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"가이던스 스케일 w 는 0 이상이어야 합니다 ({self.w})")
        if self.temperature <= 0:
            raise ValueError(f"temperature 는 0 보다 커야 합니다 ({self.temperature})")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k 는 1 이상이어야 합니다 ({self.top_k})")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p 는 (0, 1] 범위여야 합니다 ({self.top_p})")
        if self.space not in GUIDANCE_SPACES:
            raise ValueError(f"space 는 {GUIDANCE_SPACES} 중 하나여야 합니다 ({self.space})")
        if self.space == "prob" and not 0.0 <= self.w <= 1.0:
            raise ValueError(f"확률 공간 가이던스는 w ∈ [0, 1] 에서만 정의됩니다 ({self.w})")

    @property
    def guided(self) -> bool:
        """w ≠ 1 이면 무조건부 스트림이 필요합니다."""
        return self.w != 1.0

    def to_dict(self) -> Dict[str, Any]:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GuidanceConfig":
        return dataclass_from_dict(cls, data)


def cfg_combine(logits_uncond: np.ndarray, logits_cond: np.ndarray, w: float,
                space: str = "logit") -> np.ndarray:
    """
    guided = (1 − w)·uncond + w·cond

    space="prob" 이면 두 분포를 확률 공간에서 보간한 뒤 로그를 돌려줍니다
    (w ∈ [0, 1] 에서만 허용).
    """
    logits_uncond = np.asarray(logits_uncond, dtype=np.float64)
    logits_cond = np.asarray(logits_cond, dtype=np.float64)
    if space == "logit":
        return (1.0 - w) * logits_uncond + w * logits_cond
    if space != "prob":
        raise ValueError(f"알 수 없는 가이던스 공간입니다: {space}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"확률 공간 가이던스는 w ∈ [0, 1] 에서만 정의됩니다 ({w})")
    mixed = (1.0 - w) * softmax_array(logits_uncond) + w * softmax_array(logits_cond)
    with np.errstate(divide="ignore"):
        return np.log(mixed)


def _filter(z: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """top-k 다음 top-p 로 잘라낸 확률 [B, V]"""
    if cfg.top_k is not None and cfg.top_k < z.shape[-1]:
        order = np.argsort(-z, axis=-1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(z.shape[-1])[None, :].repeat(z.shape[0], 0), axis=-1)
        z = np.where(ranks < cfg.top_k, z, -np.inf)
    with np.errstate(invalid="ignore"):
        probs = softmax_array(z)
    if cfg.top_p is not None and cfg.top_p < 1.0:
        order = np.argsort(-probs, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(probs, order, axis=-1)
        before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep_sorted = before < cfg.top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        probs = np.where(keep, probs, 0.0)
    total = np.sum(probs, axis=-1, keepdims=True)
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise ValueError("sample_token: 모든 토큰이 제외된 분포입니다")
    return probs / total


def sample_token(logits: np.ndarray, cfg: GuidanceConfig,
                 rng: Union[Rng, Sequence[Rng], None]) -> Union[int, np.ndarray]:
    """
    로짓에서 토큰을 하나 뽑습니다.

    temperature 로 나눈 뒤 top-k, top-p 순서로 잘라내고 재정규화하여
    역 CDF 로 추출합니다. argmax 모드는 가장 작은 인덱스로 동점을 깹니다.

    Args:
        logits: [V] 또는 [B, V]
        cfg: 샘플링 설정
        rng: 하나의 Rng (모든 행이 공유) 또는 행마다 하나씩

    Returns:
        int 또는 [B] 정수 배열
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    if cfg.argmax:
        picked = np.argmax(z, axis=-1)
        return int(picked[0]) if single else picked

    probs = _filter(z / cfg.temperature, cfg)
    if rng is None:
        raise ValueError("sample_token: 확률적 샘플링에는 Rng 가 필요합니다")
    if isinstance(rng, Rng):
        u = np.asarray(rng.random(z.shape[0]), dtype=np.float64)
    else:
        if len(rng) != z.shape[0]:
            raise ValueError(f"sample_token: Rng 개수 {len(rng)} 가 행 수 {z.shape[0]} 와 다릅니다")
        u = np.array([r.random() for r in rng], dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    picked = np.minimum(np.sum(cdf <= u[:, None], axis=-1), z.shape[-1] - 1)
    # 확률 0 인 토큰에 떨어지지 않도록 가장 가까운 유효 토큰으로 보정
    invalid = probs[np.arange(z.shape[0]), picked] == 0
    if np.any(invalid):
        for row in np.nonzero(invalid)[0]:
            picked[row] = int(np.nonzero(probs[row])[0][-1])
    return int(picked[0]) if single else picked


class DecodeSession:
    """
    B 개 샘플의 증분 디코딩 세션

    guided 이면 상태 배치는 [조건부 B 행; null B 행] 의 2B 행이며, 레이어별
    (α, β, γ) 는 세션 시작 시 한 번 계산해 둡니다. 상태 크기는 위치와 무관하게
    일정합니다.
    """

    def __init__(self, weights: ModelWeights, config: ModelConfig, class_ids: Any,
                 guided: bool = True):
        self.weights = weights
        self.config = config
        self.class_ids = resolve_class_ids(class_ids, config)
        self.batch = int(self.class_ids.shape[0])
        self.guided = guided
        rows = self.class_ids
        if guided:
            rows = np.concatenate([rows, np.full(self.batch, config.null_class)])
        self.row_classes = rows
        c = weights.class_embed.data[rows]
        self.mods = regress_all_array(c, weights.cond.W.data, weights.cond.b.data, config.group_spec)
        self.states: List[BlockState] = [init_state(block, batch=rows.shape[0]) for block in weights.blocks]
        self.position = 0

    @property
    def state_nbytes(self) -> int:
        return sum(state.nbytes for state in self.states)

    def step(self, tokens: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """
        한 위치를 진행하고 다음 토큰의 로짓을 돌려줍니다.

        Args:
            tokens: position ≥ 1 일 때 직전에 뽑힌 토큰 [B]

        Returns:
            Tuple: (조건부 로짓 [B, V], 무조건부 로짓 [B, V] 또는 None)
        """
        if self.position >= self.config.seq_len:
            raise RuntimeError(f"DecodeSession: 이미 {self.config.seq_len} 개 토큰을 생성했습니다")
        if self.position == 0:
            x = input_row_array(self.weights, self.config, None, self.row_classes, 0)
        else:
            if tokens is None:
                raise ValueError("DecodeSession.step: position ≥ 1 에서는 토큰이 필요합니다")
            tokens = np.asarray(tokens, dtype=np.int64).reshape(self.batch)
            if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
                raise IndexError(f"토큰이 범위 [0, {self.config.vocab_size}) 를 벗어났습니다")
            if self.guided:
                tokens = np.concatenate([tokens, tokens])
            x = input_row_array(self.weights, self.config, tokens, None, self.position)

        for i, block in enumerate(self.weights.blocks):
            x, self.states[i] = block_step(x, self.states[i], block, self.mods[i],
                                           exact=self.config.exact_zoh)
        logits = head_array(x, self.weights)
        self.position += 1
        if self.guided:
            return logits[:self.batch], logits[self.batch:]
        return logits, None


def _decode_chunk(weights: ModelWeights, config: ModelConfig, class_ids: np.ndarray,
                  cfg: GuidanceConfig, rngs: List[Rng]) -> np.ndarray:
    session = DecodeSession(weights, config, class_ids, guided=cfg.guided)
    out = np.zeros((len(rngs), config.seq_len), dtype=np.int64)
    previous = None
    for t in range(config.seq_len):
        cond, uncond = session.step(previous)
        logits = cfg_combine(uncond, cond, cfg.w, cfg.space) if uncond is not None else cond
        previous = np.asarray(sample_token(logits, cfg, rngs))
        out[:, t] = previous
    return out


def generate(weights: ModelWeights, config: ModelConfig, class_id: Optional[int], n_samples: int,
             cfg: GuidanceConfig, seed: int = 0, chunk_size: int = DEFAULT_CHUNK,
             workers: int = 1) -> List[TokenGrid]:
    """
    클래스 조건부 토큰 격자를 n_samples 개 생성합니다.

    샘플 i 는 난수 스트림 (seed, "decode", i) 를 사용하며 고정 크기 청크로 묶여
    디코딩됩니다. w=1 이면 조건부 스트림 하나만 실행합니다.

    Args:
        weights: 모델 가중치
        config: 모델 구성
        class_id: 클래스 (None 이면 무조건부)
        n_samples: 생성할 샘플 수
        cfg: 가이던스/샘플링 설정
        seed: 난수 시드
        chunk_size: 한 세션에서 함께 디코딩할 샘플 수
        workers: 청크를 병렬 처리할 스레드 수

    Returns:
        List[TokenGrid]: 생성된 격자
    """
    if n_samples < 1:
        raise ValueError(f"n_samples 는 1 이상이어야 합니다 ({n_samples})")
    if class_id is not None and not 0 <= class_id < config.n_classes:
        raise ValueError(f"class_id 가 범위 [0, {config.n_classes}) 를 벗어났습니다: {class_id}")
    rngs = [Rng.derive(seed, DECODE_STREAM, i) for i in range(n_samples)]
    starts = list(range(0, n_samples, max(1, chunk_size)))
    label = -1 if class_id is None else class_id

    def _run(start: int) -> np.ndarray:
        chunk = rngs[start:start + chunk_size]
        return _decode_chunk(weights, config, np.full(len(chunk), label), cfg, chunk)

    logger.info(f"생성 시작: class={class_id}, n={n_samples}, w={cfg.w}, seed={seed}")
    if workers > 1 and len(starts) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(_run, starts))
    else:
        parts = [_run(start) for start in starts]
    tokens = np.concatenate(parts, axis=0)
    height, width = config.grid_shape
    return [unflatten(row, height, width) for row in tokens]

