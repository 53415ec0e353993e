"""
합성 토크나이저 모듈

1단계(VQ 토크나이저)를 대신하는 결정적 구성요소입니다.
- 고정 팔레트 코드북 (levels³ 개의 단색 2×2 패치)
- 클래스별 패턴 계열로 만든 합성 이미지
- 패치 단위 최근접 양자화(encode) / 복원(decode)
- 래스터 스캔 평탄화, 데이터셋 파일 저장/로드, PPM 내보내기
"""

import concurrent.futures
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from sklearn.neighbors import NearestCentroid

from config_utils import dataclass_from_dict, dataclass_to_dict
from tensor_core import Rng

# 로깅 설정
logger = logging.getLogger(__name__)

DATASET_MAGIC = b"AIMD"
DATASET_VERSION = 1
VAL_EVERY = 10

FAMILIES = (
    "solid", "hstripes", "vstripes", "ramp_lr", "ramp_tb",
    "checker", "diagonal", "frame", "quadrants", "dots",
)
RAMP_FAMILIES = ("ramp_lr", "ramp_tb")


class DatasetError(ValueError):
    """데이터셋 파일 형식이 잘못되었을 때 발생합니다."""


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    image_size: int = 16
    patch_size: int = 2
    levels: int = 4
    noise: float = 12.0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(FAMILIES):
            raise ValueError(f"n_classes 는 [1, {len(FAMILIES)}] 범위여야 합니다 ({self.n_classes})")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"image_size({self.image_size}) 는 patch_size({self.patch_size}) 로 나누어져야 합니다")
        if self.levels < 2:
            raise ValueError(f"levels 는 2 이상이어야 합니다 ({self.levels})")
        margin = 255.0 / (self.levels - 1) / 2.0
        if not 0.0 <= self.noise < margin:
            raise ValueError(f"noise 는 [0, {margin:.1f}) 범위여야 양자화가 안정적입니다 ({self.noise})")
        allocate_palette(self)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid_size ** 2

    @property
    def vocab_size(self) -> int:
        return self.levels ** 3

    def family(self, class_id: int) -> str:
        if not 0 <= class_id < self.n_classes:
            raise ValueError(f"class_id 가 범위 [0, {self.n_classes}) 를 벗어났습니다: {class_id}")
        return FAMILIES[class_id]

    def to_dict(self) -> Dict[str, Any]:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        return dataclass_from_dict(cls, data)


def allocate_palette(spec: SyntheticSpec) -> Dict[str, Tuple[int, int]]:
    """
    계열별로 서로 겹치지 않는 팔레트 구간 [start, stop) 을 배정합니다.

    램프 계열은 격자 폭(또는 높이)만큼의 연속 토큰을, 나머지 색상 계열은
    남은 토큰을 균등하게 나누어 받습니다.
    """
    families = FAMILIES[:spec.n_classes]
    side = spec.grid_size
    n_ramp = sum(1 for f in families if f in RAMP_FAMILIES)
    n_color = len(families) - n_ramp
    remaining = spec.vocab_size - n_ramp * side
    per_color = remaining // n_color if n_color else 0
    if remaining < 0 or (n_color and per_color < 2):
        raise ValueError(
            f"팔레트가 부족합니다: V={spec.vocab_size}, 격자 {side}, 클래스 {spec.n_classes}")
    slices = {}
    start = 0
    for family in families:
        size = side if family in RAMP_FAMILIES else per_color
        slices[family] = (start, start + size)
        start += size
    return slices


# ----------------------------------------------------------------------
# 코드북
# ----------------------------------------------------------------------

class Codebook:
    """고정(frozen) 팔레트 코드북: 항목 i 는 단색 패치"""

    def __init__(self, levels: int = 4, patch_size: int = 2):
        self.levels = levels
        self.patch_size = patch_size
        values = np.linspace(0.0, 255.0, levels)
        idx = np.arange(levels ** 3)
        self.colors = np.stack([values[idx // levels ** 2], values[(idx // levels) % levels],
                                values[idx % levels]], axis=1)
        self.entries = np.repeat(self.colors[:, None, :], patch_size * patch_size, axis=1).reshape(
            levels ** 3, -1)
        self.entries.setflags(write=False)

    @classmethod
    def from_spec(cls, spec: SyntheticSpec) -> "Codebook":
        return cls(spec.levels, spec.patch_size)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [H, W]

    @property
    def height(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def _patches(image: np.ndarray, p: int) -> np.ndarray:
    H, W = image.shape[0] // p, image.shape[1] // p
    return image.reshape(H, p, W, p, 3).transpose(0, 2, 1, 3, 4).reshape(H, W, p * p * 3)


def encode(image: np.ndarray, codebook: Codebook) -> TokenGrid:
    """
    패치마다 L2 최근접 코드북 항목을 고릅니다 (동점이면 가장 작은 인덱스).

    Args:
        image: [H·p, W·p, 3] RGB 배열
        codebook: 코드북

    Returns:
        TokenGrid: [H, W] 인덱스 격자
    """
    image = np.asarray(image, dtype=np.float64)
    p = codebook.patch_size
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] % p or image.shape[1] % p:
        raise ValueError(f"encode: 이미지 형상 {image.shape} 이 패치 크기 {p} 로 나누어지지 않습니다")
    patches = _patches(image, p)
    diff = patches[:, :, None, :] - codebook.entries[None, None, :, :]
    distances = np.sum(diff * diff, axis=-1)
    return TokenGrid(np.argmin(distances, axis=-1).astype(np.int64))


def decode(grid: TokenGrid, codebook: Codebook) -> np.ndarray:
    tokens = np.asarray(grid.tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.size):
        raise ValueError(f"decode: 토큰이 코드북 범위 [0, {codebook.size}) 를 벗어났습니다")
    p = codebook.patch_size
    H, W = tokens.shape
    patches = codebook.entries[tokens].reshape(H, W, p, p, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(H * p, W * p, 3)


def flatten(grid: TokenGrid) -> np.ndarray:
    """행 우선(row-major) 래스터 스캔"""
    return np.asarray(grid.tokens).reshape(-1).copy()


def unflatten(tokens: Any, height: int, width: int) -> TokenGrid:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size != height * width:
        raise ValueError(f"unflatten: 길이 {tokens.size} 가 {height}×{width} 와 맞지 않습니다")
    return TokenGrid(tokens.reshape(height, width).copy())


# ----------------------------------------------------------------------
# 합성 이미지
# ----------------------------------------------------------------------

def pattern_tokens(spec: SyntheticSpec, class_id: int, rng: Rng) -> np.ndarray:
    """클래스 계열의 토큰 격자 [H, W] (노이즈 이전의 정답 패턴)"""
    family = spec.family(class_id)
    start, stop = allocate_palette(spec)[family]
    side = spec.grid_size
    rows, cols = np.indices((side, side))

    if family == "ramp_lr":
        return start + cols
    if family == "ramp_tb":
        return start + rows

    pair = start + rng.permutation(stop - start)[:2]
    c1, c2 = int(pair[0]), int(pair[1])
    phase = int(rng.integers(0, 4))
    if family == "solid":
        mask = np.ones((side, side), dtype=bool)
    elif family == "hstripes":
        mask = (rows + phase) % 2 == 0
    elif family == "vstripes":
        mask = (cols + phase) % 2 == 0
    elif family == "checker":
        mask = (rows + cols + phase) % 2 == 0
    elif family == "diagonal":
        mask = (cols - rows + phase) % 4 < 2
    elif family == "frame":
        mask = (rows == 0) | (cols == 0) | (rows == side - 1) | (cols == side - 1)
    elif family == "quadrants":
        mask = ((rows < side // 2) ^ (cols < side // 2)) ^ bool(phase % 2)
    else:  # dots
        mask = (rows % 2 == phase % 2) & (cols % 2 == phase // 2)
    return np.where(mask, c1, c2)


def generate_sample(spec: SyntheticSpec, class_id: int, rng: Rng) -> np.ndarray:
    """
    클래스 하나의 합성 이미지를 생성합니다.

    Returns:
        np.ndarray: [image_size, image_size, 3] float64 (0..255)
    """
    codebook = Codebook.from_spec(spec)
    clean = decode(TokenGrid(pattern_tokens(spec, class_id, rng)), codebook)
    if spec.noise > 0:
        clean = clean + rng.uniform(clean.shape, -spec.noise, spec.noise)
    return np.clip(clean, 0.0, 255.0)


@dataclass
class Dataset:
    spec: SyntheticSpec
    seed: int
    class_ids: np.ndarray  # [n]
    tokens: np.ndarray     # [n, L]

    def __len__(self) -> int:
        return int(self.class_ids.shape[0])

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.class_ids.shape[0]:
            raise DatasetError(f"데이터셋 형상이 맞지 않습니다 class={self.class_ids.shape}, tokens={self.tokens.shape}")


def _sample_tokens(spec: SyntheticSpec, seed: int, index: int) -> np.ndarray:
    class_id = index % spec.n_classes
    image = generate_sample(spec, class_id, Rng.derive(seed, "sample", index))
    return flatten(encode(image, Codebook.from_spec(spec)))


def generate_dataset(spec: SyntheticSpec, n_per_class: int, seed: int = 0, workers: int = 1) -> Dataset:
    """
    샘플 i 는 클래스 i mod K, 난수 스트림 (seed, "sample", i) 로 생성합니다.
    작업자 수와 무관하게 같은 결과를 만듭니다.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class 는 1 이상이어야 합니다 ({n_per_class})")
    n = n_per_class * spec.n_classes
    logger.info(f"합성 데이터셋 생성: {n} 개 샘플 (클래스 {spec.n_classes}, seed={seed}, workers={workers})")
    indices = range(n)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(lambda i: _sample_tokens(spec, seed, i), indices))
    else:
        rows = [_sample_tokens(spec, seed, i) for i in indices]
    class_ids = np.arange(n, dtype=np.int64) % spec.n_classes
    return Dataset(spec, seed, class_ids, np.stack(rows).astype(np.int64))


def split_dataset(dataset: Dataset, split: str) -> Dataset:
    """(i // K) mod 10 == 9 인 샘플을 val 로 둡니다."""
    if split not in ("train", "val", "all"):
        raise ValueError(f"split 은 train/val/all 중 하나여야 합니다 ({split})")
    if split == "all":
        return dataset
    index = np.arange(len(dataset))
    is_val = (index // dataset.spec.n_classes) % VAL_EVERY == VAL_EVERY - 1
    keep = is_val if split == "val" else ~is_val
    return Dataset(dataset.spec, dataset.seed, dataset.class_ids[keep], dataset.tokens[keep])


def _record_dtype(seq_len: int) -> np.dtype:
    return np.dtype([("class_id", "<u2"), ("tokens", "<u2", (seq_len,))])


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """헤더(magic, version, key=value) 와 고정 길이 레코드로 저장합니다."""
    header = dict(dataset.spec.to_dict())
    header.update({"seed": dataset.seed, "n_samples": len(dataset), "seq_len": dataset.tokens.shape[1]})
    text = "\n".join(f"{k}={v}" for k, v in header.items()).encode("utf-8")
    records = np.zeros(len(dataset), dtype=_record_dtype(dataset.tokens.shape[1]))
    records["class_id"] = dataset.class_ids
    records["tokens"] = dataset.tokens
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(np.uint32(DATASET_VERSION).astype("<u4").tobytes())
        f.write(np.uint32(len(text)).astype("<u4").tobytes())
        f.write(text)
        f.write(records.tobytes())
    logger.info(f"데이터셋 저장 완료: {path} ({len(dataset)} 개 샘플)")


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"데이터셋 파일을 찾을 수 없습니다: {path}")
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetError(f"데이터셋 magic 이 올바르지 않습니다: {raw[:4]!r}")
    if len(raw) < 12:
        raise DatasetError("데이터셋 헤더가 잘렸습니다")
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if version != DATASET_VERSION:
        raise DatasetError(f"지원하지 않는 데이터셋 버전입니다: {version}")
    length = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    if len(raw) < 12 + length:
        raise DatasetError("데이터셋 헤더가 잘렸습니다")
    try:
        header = dict(line.split("=", 1) for line in raw[12:12 + length].decode("utf-8").splitlines() if line)
        seed = int(header.pop("seed"))
        n = int(header.pop("n_samples"))
        seq_len = int(header.pop("seq_len"))
        spec = SyntheticSpec.from_dict(header)
    except (KeyError, ValueError) as e:
        raise DatasetError(f"데이터셋 헤더를 해석할 수 없습니다: {str(e)}")
    dtype = _record_dtype(seq_len)
    body = raw[12 + length:]
    if len(body) != n * dtype.itemsize:
        raise DatasetError(f"데이터셋 레코드 크기가 맞지 않습니다: {len(body)} != {n * dtype.itemsize}")
    records = np.frombuffer(body, dtype=dtype, count=n)
    return Dataset(spec, seed, records["class_id"].astype(np.int64), records["tokens"].astype(np.int64))


# ----------------------------------------------------------------------
# 히스토그램 분류기 / 이미지 내보내기
# ----------------------------------------------------------------------

def token_histograms(tokens: Any, vocab_size: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    hist = np.zeros((tokens.shape[0], vocab_size))
    rows = np.repeat(np.arange(tokens.shape[0]), tokens.shape[1])
    np.add.at(hist, (rows, tokens.reshape(-1)), 1.0)
    return hist


def fit_histogram_classifier(dataset: Dataset) -> NearestCentroid:
    """토큰 히스토그램 최근접 중심 분류기"""
    classifier = NearestCentroid()
    classifier.fit(token_histograms(dataset.tokens, dataset.spec.vocab_size), dataset.class_ids)
    return classifier


def class_separability(dataset: Dataset, classifier: Optional[NearestCentroid] = None) -> float:
    classifier = classifier or fit_histogram_classifier(dataset)
    predicted = classifier.predict(token_histograms(dataset.tokens, dataset.spec.vocab_size))
    return float(np.mean(predicted == dataset.class_ids))


def save_ppm(image: np.ndarray, path: Union[str, Path]) -> None:
    """바이너리 PPM(P6) 으로 저장합니다."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(image)), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def grids_from_tokens(tokens: Any, height: int, width: int) -> List[TokenGrid]:
    return [unflatten(row, height, width) for row in np.atleast_2d(np.asarray(tokens))]
