"""
벤치마크 / 평가 모듈

- 디코딩 시간 스케일링 (Mamba 상수 상태 vs 어텐션 KV 캐시)
- 열 정확도(column accuracy) 로 보는 거울상 아티팩트
- PE × adaLN 그룹 수 × CFG 스케일 ablation
- 두 크기 모델의 축소 스케일링 경향
"""

import logging
import math
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from aim_model import ModelConfig, dataset_nll, init_weights, param_count
from sampler import DecodeSession, GuidanceConfig, generate
from tensor_core import Rng, layer_norm_array, resolve_dtype, softmax_array
from toy_tokenizer import (
    FAMILIES, RAMP_FAMILIES, Dataset, TokenGrid, allocate_palette, fit_histogram_classifier,
    split_dataset, token_histograms,
)
from trainer import TrainConfig, TrainResult, train

# 로깅 설정
logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = (64, 128, 256, 512, 1024, 2048)
DEFAULT_CFG_SCALES = (0.0, 1.0, 1.5, 2.0)
HEAD_DIM = 64
MIN_TIMER_MULTIPLE = 100


class TimingRecorder:
    """구간별 측정 시간을 기록하는 클래스 (스레드 안전)"""

    def __init__(self):
        self.timings: Dict[str, List[float]] = {}
        self.lock = threading.Lock()

    def record(self, name: str, duration: float) -> None:
        with self.lock:
            self.timings.setdefault(name, []).append(duration)

    def median(self, name: str) -> float:
        with self.lock:
            return float(np.median(self.timings[name]))

    def get_summary(self) -> Dict[str, Dict[str, float]]:
        """측정 구간별 요약 (횟수, 중앙값, 평균, 최솟값)"""
        with self.lock:
            return {
                name: {
                    "count": len(values),
                    "median": float(np.median(values)),
                    "mean": sum(values) / len(values),
                    "min": min(values),
                }
                for name, values in self.timings.items() if values
            }


# ----------------------------------------------------------------------
# 디코딩 백엔드
# ----------------------------------------------------------------------

class DecodeBackend(ABC):
    """
    증분 디코딩 백엔드를 위한 추상 기본 클래스

    같은 d, N, 배치, 타이머로 비교할 수 있도록 공통 인터페이스를 정의합니다.
    """

    name = "base"

    @abstractmethod
    def reset(self, batch: int, max_len: int) -> None:
        """
        새 디코딩 스트림을 시작합니다.

        Args:
            batch: 동시에 디코딩할 시퀀스 수
            max_len: 이번 스트림의 최대 길이
        """
        pass

    @abstractmethod
    def step(self, tokens: np.ndarray) -> np.ndarray:
        """
        토큰 하나를 입력하고 다음 토큰 로짓을 돌려줍니다.

        Args:
            tokens: 입력 토큰 [batch]

        Returns:
            np.ndarray: 로짓 [batch, V]
        """
        pass

    @property
    @abstractmethod
    def state_nbytes(self) -> int:
        """현재 디코딩 상태가 차지하는 바이트 수"""
        pass


class MambaBackend(DecodeBackend):
    """AiM 모델의 상수 크기 상태 디코딩"""

    name = "mamba"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.weights = init_weights(config, seed)
        self.session: Optional[DecodeSession] = None

    def reset(self, batch: int, max_len: int) -> None:
        if max_len > self.config.seq_len:
            raise ValueError(f"MambaBackend: 길이 {max_len} 가 구성 L={self.config.seq_len} 를 넘습니다")
        self.session = DecodeSession(self.weights, self.config, np.zeros(batch, dtype=np.int64), guided=False)

    def step(self, tokens: np.ndarray) -> np.ndarray:
        if self.session is None:
            raise RuntimeError("MambaBackend: reset() 이 먼저 호출되어야 합니다")
        logits, _ = self.session.step(tokens if self.session.position else None)
        return logits

    @property
    def state_nbytes(self) -> int:
        return self.session.state_nbytes if self.session is not None else 0


class AttentionBaseline(DecodeBackend):
    """
    비교용 최소 인과 self-attention 스택 (MLP 없음)

    헤드 수는 d/64 이며, 스트림마다 키/값 메모리가 위치에 비례해 늘어납니다.
    """

    name = "attention"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        d = config.embed_dim
        self.heads = max(1, d // HEAD_DIM)
        if d % self.heads:
            self.heads = 1
        self.head_dim = d // self.heads
        dtype = resolve_dtype(config.dtype)

        def param(name: str, shape: Tuple[int, ...]) -> np.ndarray:
            return Rng.derive(seed, "init", "attention", name).normal(shape, 0.02, dtype)

        self.token_embed = param("token_embed", (config.vocab_size, d))
        self.layers = [
            {k: param(f"{i}.{k}", (d, d)) for k in ("wq", "wk", "wv", "wo")}
            for i in range(config.n_layers)
        ]
        self.norm_weight = np.ones(d, dtype=dtype)
        self.norm_bias = np.zeros(d, dtype=dtype)
        self.head = param("head", (d, config.vocab_size))
        self.keys: List[np.ndarray] = []
        self.values: List[np.ndarray] = []
        self.length = 0

    def reset(self, batch: int, max_len: int) -> None:
        shape = (batch, self.heads, max_len, self.head_dim)
        dtype = self.token_embed.dtype
        self.keys = [np.zeros(shape, dtype=dtype) for _ in self.layers]
        self.values = [np.zeros(shape, dtype=dtype) for _ in self.layers]
        self.length = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        if not self.keys:
            raise RuntimeError("AttentionBaseline: reset() 이 먼저 호출되어야 합니다")
        t = self.length
        if t >= self.keys[0].shape[2]:
            raise RuntimeError(f"AttentionBaseline: 최대 길이 {t} 를 넘었습니다")
        x = self.token_embed[np.asarray(tokens, dtype=np.int64)]
        batch = x.shape[0]
        scale = 1.0 / math.sqrt(self.head_dim)
        for i, layer in enumerate(self.layers):
            h = layer_norm_array(x)
            q = (h @ layer["wq"]).reshape(batch, self.heads, self.head_dim)
            self.keys[i][:, :, t] = (h @ layer["wk"]).reshape(batch, self.heads, self.head_dim)
            self.values[i][:, :, t] = (h @ layer["wv"]).reshape(batch, self.heads, self.head_dim)
            scores = np.einsum("bhd,bhtd->bht", q, self.keys[i][:, :, :t + 1]) * scale
            attn = np.einsum("bht,bhtd->bhd", softmax_array(scores), self.values[i][:, :, :t + 1])
            x = x + attn.reshape(batch, -1) @ layer["wo"]
        self.length = t + 1
        h = layer_norm_array(x) * self.norm_weight + self.norm_bias
        return h @ self.head

    @property
    def state_nbytes(self) -> int:
        # 지금까지 채워진 키/값 메모리
        per_position = sum(k[:, :, :1].nbytes + v[:, :, :1].nbytes for k, v in zip(self.keys, self.values))
        return int(per_position * self.length)


class DecodeBackendFactory:
    """
    디코딩 백엔드를 생성하는 팩토리 클래스
    """

    BACKENDS = {"mamba": MambaBackend, "attention": AttentionBaseline}

    @staticmethod
    def create_backend(kind: str, config: ModelConfig, seed: int = 0) -> DecodeBackend:
        """
        종류에 맞는 디코딩 백엔드를 생성합니다.

        Args:
            kind: "mamba" 또는 "attention"
            config: 모델 구성 (두 백엔드가 같은 d, N, V 를 사용)
            seed: 가중치 초기화 시드

        Returns:
            DecodeBackend: 생성된 백엔드
        """
        try:
            if kind not in DecodeBackendFactory.BACKENDS:
                raise ValueError(f"지원되지 않는 백엔드입니다: {kind}")
            backend = DecodeBackendFactory.BACKENDS[kind](config, seed)
            logger.info(f"{kind} 디코딩 백엔드를 사용합니다 (d={config.embed_dim}, N={config.n_layers})")
            return backend
        except Exception as e:
            logger.error(f"디코딩 백엔드 생성 중 오류 발생: {str(e)}")
            raise RuntimeError(f"디코딩 백엔드를 생성할 수 없습니다: {str(e)}")


# ----------------------------------------------------------------------
# 디코딩 스케일링 벤치마크
# ----------------------------------------------------------------------

@dataclass
class BenchReport:
    kind: str
    lengths: List[int]
    times: List[float]                  # 길이별 전체 디코딩 시간 중앙값 (초)
    slope: float                        # log-log 최소제곱 기울기
    step_latency: Dict[int, float]      # 위치 t 부근의 스텝 지연 중앙값 (초)
    peak_state_bytes: int
    tokens_per_sec: float
    batch: int
    trials: int
    config: Dict[str, Any] = field(default_factory=dict)

    def latency_ratio(self, t_small: int, t_large: int) -> float:
        return self.step_latency[t_large] / self.step_latency[t_small]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "length": self.lengths,
            "time_s": self.times,
            "step_latency_s": [self.step_latency[n] for n in self.lengths],
            "tokens_per_sec": [self.batch * n / t for n, t in zip(self.lengths, self.times)],
        })

    def to_table(self) -> str:
        header = [
            f"# kind={self.kind} batch={self.batch} trials={self.trials}",
            f"# slope={self.slope:.3f} peak_state_bytes={self.peak_state_bytes} "
            f"tokens_per_sec={self.tokens_per_sec:.1f}",
            "# config " + " ".join(f"{k}={v}" for k, v in self.config.items()),
        ]
        return "\n".join(header) + "\n" + self.to_frame().to_string(index=False) + "\n"

    def to_long_frame(self) -> pd.DataFrame:
        rows = [(self.kind, "slope", self.slope), (self.kind, "peak_state_bytes", self.peak_state_bytes),
                (self.kind, "tokens_per_sec", self.tokens_per_sec)]
        for n, t in zip(self.lengths, self.times):
            rows.append((self.kind, f"time_s@{n}", t))
            rows.append((self.kind, f"step_latency_s@{n}", self.step_latency[n]))
        return pd.DataFrame(rows, columns=["variant", "metric", "value"])

    def write(self, out_prefix: Union[str, Path]) -> List[Path]:
        """<prefix>.txt (표), <prefix>.csv (variant,metric,value), <prefix>.dat (gnuplot)"""
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        paths = [out_prefix.with_suffix(".txt"), out_prefix.with_suffix(".csv"), out_prefix.with_suffix(".dat")]
        paths[0].write_text(self.to_table(), encoding="utf-8")
        self.to_long_frame().to_csv(paths[1], index=False)
        lines = ["# length time_s step_latency_s"]
        lines += [f"{n} {t!r} {self.step_latency[n]!r}" for n, t in zip(self.lengths, self.times)]
        paths[2].write_text("\n".join(lines) + "\n", encoding="utf-8")
        return paths


def loglog_slope(lengths: Sequence[float], times: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)),
                            np.log(np.asarray(times, dtype=np.float64)), 1)[0])


def _validate_lengths(lengths: Sequence[int]) -> List[int]:
    lengths = [int(n) for n in lengths]
    if len(lengths) < 4:
        raise ValueError(f"길이는 4 개 이상이어야 합니다 ({lengths})")
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
        raise ValueError(f"길이는 양수이며 엄격히 증가해야 합니다 ({lengths})")
    if lengths[-1] < 16 * lengths[0]:
        raise ValueError(f"길이 범위가 16 배 이상이어야 합니다 ({lengths[0]}..{lengths[-1]})")
    return lengths


def bench_config(lengths: Sequence[int], embed_dim: int = 64, n_layers: int = 2, vocab_size: int = 64,
                 dtype: str = "float32") -> ModelConfig:
    return ModelConfig(n_layers=n_layers, embed_dim=embed_dim, n_groups=1, vocab_size=vocab_size,
                       n_classes=1, seq_len=max(lengths), dtype=dtype)


def decode_scaling_bench(kind: str, lengths: Sequence[int] = DEFAULT_LENGTHS, batch: int = 16,
                         config: Optional[ModelConfig] = None, trials: int = 5, warmup: int = 2,
                         seed: int = 0, latency_window: int = 8,
                         recorder: Optional[TimingRecorder] = None) -> BenchReport:
    """
    길이별 전체 디코딩 시간(중앙값)과 스텝 지연을 측정합니다.

    Args:
        kind: "mamba" 또는 "attention"
        lengths: 측정할 길이 (4 개 이상, 16 배 이상 범위)
        batch: 배치 크기
        config: 모델 구성 (None 이면 d=64, N=2)
        trials: 길이별 측정 횟수 (5 이상)
        warmup: 버리는 예열 횟수
        seed: 가중치/입력 토큰 시드
        latency_window: 스텝 지연 중앙값을 구할 창 반폭

    Returns:
        BenchReport: 측정 결과
    """
    lengths = _validate_lengths(lengths)
    if trials < 5:
        raise ValueError(f"trials 는 5 이상이어야 합니다 ({trials})")
    config = config or bench_config(lengths)
    recorder = recorder or TimingRecorder()
    backend = DecodeBackendFactory.create_backend(kind, config, seed)
    max_len = lengths[-1]
    tokens = Rng.derive(seed, "bench", "tokens").integers(0, config.vocab_size, size=(max_len, batch))

    medians = []
    for n in lengths:
        for trial in range(warmup + trials):
            backend.reset(batch, n)
            start = time.perf_counter()
            for t in range(n):
                backend.step(tokens[t])
            elapsed = time.perf_counter() - start
            if trial >= warmup:
                recorder.record(f"{kind}/total@{n}", elapsed)
        medians.append(recorder.median(f"{kind}/total@{n}"))
        logger.info(f"{kind} L={n}: {medians[-1]:.4f}s (중앙값, {trials} 회)")

    resolution = time.get_clock_info("perf_counter").resolution
    if min(medians) < MIN_TIMER_MULTIPLE * resolution:
        raise RuntimeError(
            f"타이머 해상도({resolution:.2e}s)에 비해 측정 시간이 너무 짧습니다: 길이를 늘리세요")

    # 가장 긴 길이에서 스텝별 지연
    backend.reset(batch, max_len)
    step_times = np.zeros(max_len)
    for t in range(max_len):
        start = time.perf_counter()
        backend.step(tokens[t])
        step_times[t] = time.perf_counter() - start
    peak = backend.state_nbytes
    step_latency = {}
    for n in lengths:
        lo, hi = max(0, n - 1 - latency_window), min(max_len, n - 1 + latency_window)
        step_latency[n] = float(np.median(step_times[lo:hi]))

    return BenchReport(
        kind=kind, lengths=lengths, times=medians, slope=loglog_slope(lengths, medians),
        step_latency=step_latency, peak_state_bytes=int(peak),
        tokens_per_sec=batch * max_len / medians[-1], batch=batch, trials=trials,
        config={"embed_dim": config.embed_dim, "n_layers": config.n_layers,
                "vocab_size": config.vocab_size, "dtype": config.dtype},
    )


# ----------------------------------------------------------------------
# 평가 지표
# ----------------------------------------------------------------------

def _grid_array(grids: Union[Sequence[TokenGrid], np.ndarray]) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        return grids if grids.ndim == 3 else grids[None]
    return np.stack([np.asarray(g.tokens) for g in grids])


def column_accuracy(grids: Union[Sequence[TokenGrid], np.ndarray], spec, class_id: Optional[int] = None) -> float:
    """
    램프 클래스 격자에서 위치별 기대 팔레트 인덱스와 일치하는 토큰 비율

    ramp_lr 은 열 번호, ramp_tb 는 행 번호가 토큰 값을 결정합니다.
    """
    if class_id is not None and not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id 가 범위를 벗어났습니다: {class_id}")
    family = spec.family(class_id) if class_id is not None else "ramp_lr"
    if family not in RAMP_FAMILIES:
        raise ValueError(f"column_accuracy: 램프 계열 클래스가 아닙니다 ({family})")
    start, _ = allocate_palette(spec)[family]
    tokens = _grid_array(grids)
    if tokens.size == 0:
        raise ValueError("column_accuracy: 격자가 없습니다")
    rows, cols = np.indices(tokens.shape[1:])
    expected = start + (cols if family == "ramp_lr" else rows)
    return float(np.mean(tokens == expected[None]))


def class_consistency(tokens: Any, class_id: int, classifier, vocab_size: int) -> float:
    """토큰 히스토그램 분류기가 요청한 클래스로 판정한 비율"""
    tokens = np.asarray(tokens)
    if tokens.ndim == 3:
        tokens = tokens.reshape(tokens.shape[0], -1)
    predicted = classifier.predict(token_histograms(tokens, vocab_size))
    return float(np.mean(predicted == class_id))


def nll_eval(weights, config: ModelConfig, dataset: Dataset, split: str = "val",
             batch_size: int = 32) -> Tuple[float, int]:
    """
    데이터셋 분할의 토큰당 평균 NLL (nats)

    Returns:
        Tuple[float, int]: (평균 NLL, 토큰 수)
    """
    part = split_dataset(dataset, split)
    if len(part) == 0:
        raise ValueError(f"nll_eval: '{split}' 분할이 비어 있습니다")
    return dataset_nll(weights, config, part.class_ids, part.tokens, batch_size)


# ----------------------------------------------------------------------
# ablation / 스케일링
# ----------------------------------------------------------------------

def train_variant(config: ModelConfig, dataset: Dataset, train_config: TrainConfig,
                  seed: int) -> Tuple[Any, TrainResult]:
    """같은 예산으로 한 변형을 학습합니다 (가중치/셔플/dropout 모두 seed 로 결정)."""
    weights = init_weights(config, seed)
    result = train(weights, config, split_dataset(dataset, "train"), replace(train_config, seed=seed),
                   progress=False)
    return result.weights, result


def _group_grid(n_layers: int, groups: Optional[Sequence[int]]) -> List[int]:
    candidates = groups if groups is not None else (1, 2, 4, n_layers)
    return sorted({g for g in candidates if 1 <= g <= n_layers})


def _ramp_class(dataset: Dataset) -> int:
    ramp = FAMILIES.index("ramp_lr")
    if ramp >= dataset.spec.n_classes:
        raise ValueError("ablation: 데이터셋에 ramp_lr 클래스가 없습니다")
    return ramp


def ablation_suite(dataset: Dataset, base_config: ModelConfig, train_config: TrainConfig,
                   pe_options: Sequence[bool] = (False, True), groups: Optional[Sequence[int]] = None,
                   cfg_scales: Sequence[float] = DEFAULT_CFG_SCALES, seeds: Sequence[int] = (0,),
                   n_samples: int = 16, sample_w: float = 2.0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    {no-PE, PE} × {G} 변형을 같은 예산으로 학습하고 지표 표를 만듭니다.

    CFG 스케일 비교는 PE 를 쓰고 그룹 수가 가장 큰 변형에서 수행합니다.

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: (변형별 표, CFG 스케일별 class-consistency 표)
    """
    ramp = _ramp_class(dataset)
    classifier = fit_histogram_classifier(split_dataset(dataset, "train"))
    group_grid = _group_grid(base_config.n_layers, groups)
    rows = []
    cfg_rows = []
    for seed in seeds:
        for pe in pe_options:
            for g in group_grid:
                config = replace(base_config, use_pe=pe, n_groups=g)
                variant = f"{'pe' if pe else 'nope'}-G{g}"
                weights, result = train_variant(config, dataset, train_config, seed)
                nll, _ = nll_eval(weights, config, dataset, "val")
                grids = generate(weights, config, ramp, n_samples, GuidanceConfig(w=sample_w), seed=seed)
                rows.append({
                    "variant": variant, "seed": seed, "pe": pe, "groups": g,
                    "params": param_count(config), "train_loss": result.losses[-1] if result.losses else float("nan"),
                    "nll": nll, "column_accuracy": column_accuracy(grids, dataset.spec, ramp),
                })
                logger.info(f"ablation {variant} seed={seed}: nll={nll:.4f}")
                if pe == max(pe_options) and g == group_grid[-1]:
                    for w in cfg_scales:
                        scores = []
                        for k in range(config.n_classes):
                            sampled = generate(weights, config, k, n_samples, GuidanceConfig(w=w), seed=seed)
                            scores.append(class_consistency(
                                np.stack([s.tokens for s in sampled]), k, classifier, config.vocab_size))
                        cfg_rows.append({"variant": f"w={w}", "seed": seed, "w": w,
                                         "class_consistency": float(np.mean(scores))})
    return pd.DataFrame(rows), pd.DataFrame(cfg_rows)


def summarize(frame: pd.DataFrame, metrics: Sequence[str]) -> pd.DataFrame:
    """seed 에 대한 중앙값 표"""
    return frame.groupby("variant", sort=False)[list(metrics)].median().reset_index()


def pe_column_gap(variants: pd.DataFrame) -> float:
    """PE 변형과 no-PE 변형의 열 정확도 중앙값 차이 (모든 G 포함)"""
    pe = variants.loc[variants["pe"], "column_accuracy"].median()
    nope = variants.loc[~variants["pe"], "column_accuracy"].median()
    return float(pe - nope)


def write_report(frame: pd.DataFrame, out_prefix: Union[str, Path]) -> List[Path]:
    """<prefix>.txt (정렬된 표) 와 <prefix>.csv (variant,metric,value)"""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    text_path = out_prefix.with_suffix(".txt")
    csv_path = out_prefix.with_suffix(".csv")
    text_path.write_text(frame.to_string(index=False) + "\n", encoding="utf-8")
    value_columns = [c for c in frame.columns if c != "variant"]
    long = frame.melt(id_vars="variant", value_vars=value_columns, var_name="metric", value_name="value")
    long.to_csv(csv_path, index=False)
    return [text_path, csv_path]


def scaling_miniature(dataset: Dataset, base_config: ModelConfig, train_config: TrainConfig,
                      dims: Sequence[int] = (64, 128), seeds: Sequence[int] = (0, 1, 2),
                      out_dir: Optional[Union[str, Path]] = None, plot: bool = False) -> pd.DataFrame:
    """
    같은 예산으로 두 크기 모델을 학습해 평가 NLL 을 비교합니다.

    out_dir 이 주어지면 scaling.dat (gnuplot) 과 plot=True 일 때 scaling.png 를 기록합니다.
    """
    rows = []
    for d in dims:
        config = replace(base_config, embed_dim=d)
        for seed in seeds:
            weights, _ = train_variant(config, dataset, train_config, seed)
            nll, _ = nll_eval(weights, config, dataset, "val")
            rows.append({"variant": f"d{d}", "seed": seed, "embed_dim": d,
                         "params": param_count(config), "nll": nll})
            logger.info(f"scaling d={d} seed={seed}: nll={nll:.4f}")
    frame = pd.DataFrame(rows)
    medians = frame.groupby("embed_dim")[["params", "nll"]].median().reset_index()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["# embed_dim params median_nll"]
        lines += [f"{int(r.embed_dim)} {int(r.params)} {r.nll!r}" for r in medians.itertuples()]
        (out_dir / "scaling.dat").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if plot:
            plot_scaling(medians, out_dir / "scaling.png")
    return frame


def plot_scaling(medians: pd.DataFrame, path: Union[str, Path]) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    ax.plot(medians["params"], medians["nll"], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("parameters")
    ax.set_ylabel("eval NLL (nats/token)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_bench(reports: Sequence[BenchReport], path: Union[str, Path]) -> Path:
    """백엔드별 길이-시간 log-log 그래프"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    for report in reports:
        ax.plot(report.lengths, report.times, marker="o", label=f"{report.kind} (slope {report.slope:.2f})")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("decode length")
    ax.set_ylabel("total decode time (s)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
