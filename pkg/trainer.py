"""
학습 모듈

AdamW(분리된 weight decay), 배치 크기 선형 학습률 규칙, 클래스 임베딩 dropout,
고정 순서 샤드 기울기 합산, 체크포인트 저장/재개를 제공합니다.
"""

import concurrent.futures
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from aim_model import (
    ModelConfig, ModelWeights, apply_class_dropout, dataset_nll, expected_shapes, resolve_class_ids,
    sequence_loss, weights_from_tensors,
)
from config_utils import dataclass_from_dict, dataclass_to_dict, format_value
from tensor_core import NonFiniteError, Rng, grad, reset_tape
from toy_tokenizer import Dataset

# 로깅 설정
logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AIMC"
CHECKPOINT_VERSION = 1
REFERENCE_BATCH = 256
METRICS_FILE = "metrics.tsv"
LAST_CHECKPOINT = "last.aimc"

# weight decay 를 적용하지 않는 파라미터 이름 (접미사 기준)
NO_DECAY_SUFFIXES = (
    "conv_b", "dt_bias", "A_log", ".D", "bias", "norm.weight",
    "token_embed", "class_embed", "pos_embed",
)


class CheckpointError(ValueError):
    """체크포인트 파일이 손상되었거나 구성과 맞지 않을 때 발생합니다."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr_per_256: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    class_dropout: float = 0.1
    steps: int = 200
    warmup_steps: int = 100
    seed: int = 0
    grad_clip: Optional[float] = None
    shards: int = 1
    checkpoint_every: int = 0
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size 는 1 이상이어야 합니다 ({self.batch_size})")
        if not 0.0 <= self.class_dropout <= 1.0:
            raise ValueError(f"class_dropout 은 [0, 1] 범위여야 합니다 ({self.class_dropout})")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas 는 [0, 1) 범위의 두 값이어야 합니다 ({self.betas})")
        if self.base_lr_per_256 <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr_per_256, eps 는 양수, weight_decay 는 0 이상이어야 합니다")
        if self.steps < 0 or self.warmup_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("steps, warmup_steps, checkpoint_every 는 0 이상이어야 합니다")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip 은 양수여야 합니다 ({self.grad_clip})")
        if not 1 <= self.shards <= self.batch_size:
            raise ValueError(f"shards 는 [1, batch_size] 범위여야 합니다 ({self.shards})")

    def to_dict(self) -> Dict[str, Any]:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return dataclass_from_dict(cls, data)


@dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: ModelWeights
    optim: OptimState
    step: int
    train_config: Optional[TrainConfig] = None
    meta: Dict[str, str] = field(default_factory=dict)


@dataclass
class TrainResult:
    losses: List[float]
    lrs: List[float]
    start_step: int
    final_step: int
    eval_nll: Optional[float] = None
    checkpoints: List[Path] = field(default_factory=list)
    weights: Optional[ModelWeights] = field(default=None, repr=False)


# ----------------------------------------------------------------------
# 학습률 / 옵티마이저
# ----------------------------------------------------------------------

def effective_lr(config: TrainConfig, step: Optional[int] = None, batch_size: Optional[int] = None) -> float:
    """
    lr = base_lr_per_256 · batch / 256, warmup 구간에서는 (step+1)/warmup 배

    Args:
        config: 학습 설정
        step: 0 부터 시작하는 스텝 번호 (None 이면 warmup 미적용)
        batch_size: 배치 크기 (None 이면 config 값)
    """
    batch = config.batch_size if batch_size is None else batch_size
    if batch < 1:
        raise ValueError(f"batch_size 는 1 이상이어야 합니다 ({batch})")
    lr = config.base_lr_per_256 * batch / REFERENCE_BATCH
    if step is not None and config.warmup_steps > 0 and step < config.warmup_steps:
        lr *= (step + 1) / config.warmup_steps
    return lr


def is_decay_exempt(name: str) -> bool:
    """bias, 정규화, 임베딩, A_log, D 는 weight decay 대상에서 제외합니다."""
    return name.endswith(NO_DECAY_SUFFIXES) or name == "D"


def init_optim(params: Dict[str, Any]) -> OptimState:
    def zeros(p):
        data = p.data if hasattr(p, "data") else np.asarray(p)
        return np.zeros_like(data)
    return OptimState({n: zeros(p) for n, p in params.items()}, {n: zeros(p) for n, p in params.items()}, 0)


def adamw_step(params: Dict[str, Any], grads: Dict[str, np.ndarray], optim: OptimState, lr: float,
               betas: Tuple[float, float] = (0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.05,
               exempt: Callable[[str], bool] = is_decay_exempt) -> None:
    """
    분리된 weight decay 와 편향 보정을 포함한 AdamW 한 스텝 (제자리 갱신)

    p ← p·(1 − lr·wd);  p ← p − lr·m̂ / (√v̂ + eps)
    """
    b1, b2 = betas
    optim.step += 1
    bc1 = 1.0 - b1 ** optim.step
    bc2 = 1.0 - b2 ** optim.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: {name} 기울기 형상 {g.shape} 이 {p.data.shape} 와 다릅니다")
        if weight_decay and not exempt(name):
            p.data *= (1.0 - lr * weight_decay)
        m = optim.m[name]
        v = optim.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """전체 L2 노름이 max_norm 을 넘으면 비율로 줄입니다. Returns: 원래 노름"""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# ----------------------------------------------------------------------
# 기울기 계산
# ----------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """스텝 번호만으로 결정되는 배치 인덱스 (에폭마다 다시 섞음)"""
    positions = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs = positions // n
    out = np.empty(batch_size, dtype=np.int64)
    for epoch in np.unique(epochs):
        perm = Rng.derive(seed, "shuffle", int(epoch)).permutation(n)
        mask = epochs == epoch
        out[mask] = perm[positions[mask] % n]
    return out


def compute_grads(weights: ModelWeights, config: ModelConfig, class_ids: np.ndarray, tokens: np.ndarray,
                  shards: int = 1, workers: int = 1) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    배치를 샤드로 나누어 손실과 기울기를 구하고 고정된 샤드 순서로 합산합니다.

    class_ids 는 dropout 이 이미 적용된 값이어야 합니다.
    """
    params = weights.tensors()
    names = list(params)
    tensors = [params[n] for n in names]
    pieces = [idx for idx in np.array_split(np.arange(tokens.shape[0]), shards) if idx.size]
    total = tokens.shape[0]

    def _shard(idx: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        reset_tape()
        loss = sequence_loss(class_ids[idx], tokens[idx], weights, config)
        return loss.item(), grad(loss, tensors)

    if workers > 1 and len(pieces) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_shard, pieces))
    else:
        results = [_shard(idx) for idx in pieces]

    loss_sum = 0.0
    grads = {n: np.zeros_like(t.data) for n, t in zip(names, tensors)}
    for idx, (loss, shard_grads) in zip(pieces, results):
        weight = idx.size / total
        loss_sum += loss * weight
        for n, g in zip(names, shard_grads):
            grads[n] += g * weight
    return loss_sum, grads


# ----------------------------------------------------------------------
# 체크포인트
# ----------------------------------------------------------------------

def _payload_dtype(config: ModelConfig) -> Tuple[str, str]:
    return ("f64", "<f8") if config.dtype == "float64" else ("f32", "<f4")


def _write_table(f, tensors: Dict[str, np.ndarray], dtype: str) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise CheckpointError(f"체크포인트가 잘렸습니다 (offset {self.offset}, 필요 {n} 바이트)")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self, dtype: str) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        itemsize = np.dtype(dtype).itemsize
        for _ in range(count):
            (length,) = self.unpack("<H")
            name = self.take(length).decode("utf-8")
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(size * itemsize), dtype=dtype).reshape(shape).copy()
        return out


def save_checkpoint(path: Union[str, Path], config: ModelConfig, weights: ModelWeights, optim: OptimState,
                    step: int = 0, train_config: Optional[TrainConfig] = None) -> Path:
    """
    magic "AIMC", 버전, 구성 블록(key=value), 가중치 표, 옵티마이저 표 순으로 기록합니다.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag, dtype = _payload_dtype(config)
    lines = [f"model.{k}={format_value(v)}" for k, v in config.to_dict().items()]
    if train_config is not None:
        lines += [f"train.{k}={format_value(v)}" for k, v in train_config.to_dict().items()]
    lines += [f"meta.step={step}", f"meta.optim_step={optim.step}", f"meta.payload={tag}"]
    block = "\n".join(lines).encode("utf-8")
    tensors = {name: t.data for name, t in weights.tensors().items()}
    moments = {}
    for name in tensors:
        moments[f"m.{name}"] = optim.m[name]
        moments[f"v.{name}"] = optim.v[name]

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(block)))
        f.write(block)
        _write_table(f, tensors, dtype)
        _write_table(f, moments, dtype)
    tmp.replace(path)
    logger.info(f"체크포인트 저장: {path} (step {step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"체크포인트 파일을 찾을 수 없습니다: {path}")
    reader = _Reader(path.read_bytes())
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"체크포인트 magic 이 올바르지 않습니다: {magic!r}")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"지원하지 않는 체크포인트 버전입니다: {version}")
    (length,) = reader.unpack("<I")
    try:
        entries = dict(line.split("=", 1) for line in reader.take(length).decode("utf-8").splitlines() if line)
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"체크포인트 구성 블록을 해석할 수 없습니다: {str(e)}")

    model_keys = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
    train_keys = {k[len("train."):]: v for k, v in entries.items() if k.startswith("train.")}
    try:
        config = ModelConfig.from_dict(model_keys)
        train_config = TrainConfig.from_dict(train_keys) if train_keys else None
        step = int(entries.get("meta.step", 0))
        optim_step = int(entries.get("meta.optim_step", 0))
    except ValueError as e:
        raise CheckpointError(f"체크포인트 구성이 올바르지 않습니다: {str(e)}")
    tag, dtype = _payload_dtype(config)
    if entries.get("meta.payload", tag) != tag:
        raise CheckpointError(f"payload 형식 {entries.get('meta.payload')} 이 모델 dtype 과 맞지 않습니다")

    tensors = reader.table(dtype)
    moments = reader.table(dtype)
    if reader.offset != len(reader.raw):
        raise CheckpointError("체크포인트 끝에 알 수 없는 데이터가 있습니다")
    try:
        weights = weights_from_tensors(config, tensors)
    except ValueError as e:
        raise CheckpointError(f"체크포인트 가중치가 구성과 맞지 않습니다: {str(e)}")
    np_dtype = np.dtype(config.dtype)
    try:
        optim = OptimState({n: moments[f"m.{n}"].astype(np_dtype) for n in expected_shapes(config)},
                           {n: moments[f"v.{n}"].astype(np_dtype) for n in expected_shapes(config)},
                           optim_step)
    except KeyError as e:
        raise CheckpointError(f"옵티마이저 상태가 누락되었습니다: {str(e)}")
    return Checkpoint(config, weights, optim, step, train_config, entries)


# ----------------------------------------------------------------------
# 학습 루프
# ----------------------------------------------------------------------

def _rewrite_metrics(path: Path, start_step: int) -> None:
    """재개 시 start_step 이후의 기록을 잘라냅니다."""
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and int(line.split("\t", 1)[0]) < start_step]
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def train(weights: ModelWeights, config: ModelConfig, dataset: Dataset, train_config: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None, resume: Optional[Checkpoint] = None,
          eval_dataset: Optional[Dataset] = None, workers: int = 1, progress: bool = True) -> TrainResult:
    """
    학습 루프

    Args:
        weights: 학습할 가중치 (제자리 갱신, resume 이 있으면 그 가중치를 사용)
        config: 모델 구성
        dataset: 학습 데이터셋
        train_config: 학습 설정
        out_dir: 체크포인트와 metrics.tsv 를 기록할 디렉토리 (None 이면 기록 안 함)
        resume: 이어서 학습할 체크포인트
        eval_dataset: 학습 후 NLL 을 평가할 데이터셋
        workers: 샤드 병렬 처리 스레드 수

    Returns:
        TrainResult: 스텝별 손실/학습률과 최종 평가 결과
    """
    if len(dataset) == 0:
        raise ValueError("train: 학습 데이터셋이 비어 있습니다")
    if dataset.tokens.shape[1] != config.seq_len:
        raise ValueError(f"train: 데이터셋 길이 {dataset.tokens.shape[1]} 가 L={config.seq_len} 와 다릅니다")
    if dataset.tokens.max() >= config.vocab_size or dataset.class_ids.max() >= config.n_classes:
        raise ValueError("train: 데이터셋의 토큰/클래스가 모델 구성 범위를 벗어났습니다")

    start_step = 0
    optim = init_optim(weights.tensors())
    if resume is not None:
        if resume.model_config != config:
            raise CheckpointError("train: 재개할 체크포인트의 모델 구성이 현재 구성과 다릅니다")
        weights, optim, start_step = resume.weights, resume.optim, resume.step
        logger.info(f"체크포인트에서 학습 재개: step {start_step}")

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / METRICS_FILE
        if start_step:
            _rewrite_metrics(metrics_path, start_step)
        elif metrics_path.exists():
            metrics_path.unlink()

    params = weights.tensors()
    result = TrainResult([], [], start_step, start_step, weights=weights)
    tc = train_config
    bar = tqdm(range(start_step, tc.steps), desc="train", disable=not progress, initial=start_step, total=tc.steps)
    for step in bar:
        lr = effective_lr(tc, step)
        idx = batch_indices(len(dataset), tc.batch_size, step, tc.seed)
        ids = resolve_class_ids(dataset.class_ids[idx], config)
        ids = apply_class_dropout(ids, config, tc.class_dropout, Rng.derive(tc.seed, "dropout", step))
        try:
            loss, grads = compute_grads(weights, config, ids, dataset.tokens[idx], tc.shards, workers)
            if not np.isfinite(loss):
                raise NonFiniteError("손실이 유한하지 않습니다")
        except NonFiniteError as e:
            reset_tape()
            logger.error(f"step {step}: 비유한 값으로 학습을 중단합니다: {str(e)}")
            raise NonFiniteError(f"step {step}: {str(e)}")
        if tc.grad_clip is not None:
            clip_grad_norm(grads, tc.grad_clip)
        adamw_step(params, grads, optim, lr, tc.betas, tc.eps, tc.weight_decay)

        result.losses.append(loss)
        result.lrs.append(lr)
        result.final_step = step + 1
        bar.set_postfix(loss=f"{loss:.4f}")
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(f"{step}\t{loss!r}\t{lr!r}\n")
        if out_path is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            result.checkpoints.append(save_checkpoint(
                out_path / f"ckpt_{step + 1:06d}.aimc", config, weights, optim, step + 1, tc))

    if out_path is not None:
        result.checkpoints.append(save_checkpoint(
            out_path / LAST_CHECKPOINT, config, weights, optim, result.final_step, tc))
    if eval_dataset is not None and len(eval_dataset):
        result.eval_nll, _ = dataset_nll(weights, config, eval_dataset.class_ids, eval_dataset.tokens,
                                         tc.eval_batch_size)
        logger.info(f"평가 NLL: {result.eval_nll:.4f} nats/token")
    if result.losses:
        logger.info(f"학습 완료: step {result.final_step}, 마지막 손실 {result.losses[-1]:.4f}")
    return result
