"""
선택적 스캔(selective scan) 커널

ZOH 이산화와 대각 A 를 갖는 선형 순환 h_t = Abar_t ⊙ h_{t-1} + Bbar_t ⊙ x_t,
y_t = <C_t, h_t> 를 세 가지 동등한 형태(순차, 병렬 prefix scan, 단일 스텝)로
제공합니다. 형상 규약:

    x, delta : [..., T, C]
    A        : [C, N]      (음수, 대각)
    B, C     : [..., T, N] (채널 방향으로 브로드캐스트)
    h        : [..., C, N]
"""

import concurrent.futures
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from tensor_core import NonFiniteError, ShapeError, Tensor, make_result, register_primitive

# 로깅 설정
logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-6
# 도함수 (z·e^z − (e^z − 1)) / z² 는 상쇄가 더 심하므로 더 넓은 구간에서 급수를 씁니다
DERIVATIVE_SERIES_THRESHOLD = 1e-3
DEFAULT_BLOCK_SIZE = 64


@dataclass
class SsmParams:
    """연속 시간 파라미터 (A 대각, 시점별 B, C, Δ)"""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray
    exact: bool = True


@dataclass
class DiscreteParams:
    """이산화된 파라미터 Abar, Bbar: [..., T, C, N], C: [..., T, N]"""
    Abar: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray


@dataclass
class ScanState:
    h: np.ndarray

    @classmethod
    def zeros(cls, shape: Tuple[int, ...], dtype=np.float64) -> "ScanState":
        return cls(np.zeros(shape, dtype=dtype))


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) − 1) / z, |z| < 1e-6 에서는 1 + z/2 + z²/6"""
    small = np.abs(z) < SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    exact = np.expm1(zs) / zs
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, exact)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < DERIVATIVE_SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    exact = (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    return np.where(small, series, exact)


def zoh_discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray,
                   exact: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    영차 유지(ZOH) 이산화

    Abar = exp(Δ⊙A), Bbar = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB.
    exact=False 이면 Bbar = Δ·B (오일러 근사) 를 사용합니다.

    Args:
        delta: 스텝 크기 [..., C] (모두 양수)
        A: 대각 상태 행렬 [C, N]
        B: 입력 행렬 [..., N]
        exact: 정확한 ZOH 사용 여부

    Returns:
        Tuple[np.ndarray, np.ndarray]: (Abar, Bbar), 각각 [..., C, N]
    """
    delta = np.asarray(delta)
    A = np.asarray(A)
    B = np.asarray(B)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: delta 는 0 보다 커야 합니다")
    if A.ndim != 2 or delta.shape[-1] != A.shape[0] or B.shape[-1] != A.shape[1]:
        raise ShapeError(f"zoh_discretize: 형상이 맞지 않습니다 delta={delta.shape}, A={A.shape}, B={B.shape}")
    z = delta[..., None] * A
    Abar = np.exp(z)
    scale = delta[..., None] * (_phi(z) if exact else 1.0)
    Bbar = scale * B[..., None, :]
    return Abar, Bbar


def discretize(params: SsmParams) -> DiscreteParams:
    Abar, Bbar = zoh_discretize(params.delta, params.A, params.B, exact=params.exact)
    return DiscreteParams(Abar, Bbar, np.asarray(params.C))


def _as_discrete(params: Union[SsmParams, DiscreteParams]) -> DiscreteParams:
    return discretize(params) if isinstance(params, SsmParams) else params


def _validate(params: DiscreteParams, x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ShapeError(f"scan: x 는 [..., T, C] 형상이어야 합니다 {x.shape}")
    if params.Abar.shape != params.Bbar.shape or params.Abar.shape[:-1] != x.shape:
        raise ShapeError(
            f"scan: 형상이 맞지 않습니다 Abar={params.Abar.shape}, Bbar={params.Bbar.shape}, x={x.shape}")
    if params.C.shape[-1] != params.Abar.shape[-1] or params.C.shape[-2] != x.shape[-2]:
        raise ShapeError(f"scan: C 형상이 맞지 않습니다 {params.C.shape}")


def _initial(h0: Optional[ScanState], params: DiscreteParams) -> np.ndarray:
    shape = params.Abar.shape[:-3] + params.Abar.shape[-2:]
    if h0 is None:
        return np.zeros(shape, dtype=params.Abar.dtype)
    h = np.asarray(h0.h, dtype=params.Abar.dtype)
    return np.broadcast_to(h, shape).copy()


def _states_sequential(Abar: np.ndarray, U: np.ndarray, h: np.ndarray) -> np.ndarray:
    steps = Abar.shape[-3]
    hs = np.empty_like(U)
    for t in range(steps):
        h = Abar[..., t, :, :] * h + U[..., t, :, :]
        hs[..., t, :, :] = h
    if not np.all(np.isfinite(hs)):
        raise NonFiniteError("scan: 은닉 상태에 비유한 값이 발생했습니다")
    return hs


def _blelloch_inclusive(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    축 1 에 대한 inclusive scan (블록 크기는 2의 거듭제곱)

    결합 연산 (a₁,b₁)∘(a₂,b₂) = (a₂·a₁, a₂·b₁ + b₂) 에 대해
    up-sweep / down-sweep 두 단계로 exclusive prefix 를 구한 뒤 원소를 결합합니다.
    """
    n = a.shape[1]
    ea = a.copy()
    eb = b.copy()

    step = 2
    while step <= n:
        idx = np.arange(step - 1, n, step)
        left = idx - step // 2
        right_a = ea[:, idx]
        eb[:, idx] = right_a * eb[:, left] + eb[:, idx]
        ea[:, idx] = right_a * ea[:, left]
        step *= 2

    ea[:, n - 1] = 1.0
    eb[:, n - 1] = 0.0
    step = n
    while step >= 2:
        idx = np.arange(step - 1, n, step)
        left = idx - step // 2
        left_a = ea[:, left].copy()
        left_b = eb[:, left].copy()
        parent_a = ea[:, idx].copy()
        parent_b = eb[:, idx].copy()
        ea[:, left] = parent_a
        eb[:, left] = parent_b
        ea[:, idx] = left_a * parent_a
        eb[:, idx] = left_a * parent_b + left_b
        step //= 2

    return a * ea, a * eb + b


def _states_parallel(Abar: np.ndarray, U: np.ndarray, h0: np.ndarray,
                     block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> np.ndarray:
    if block_size < 1 or block_size & (block_size - 1):
        raise ValueError(f"scan_parallel: block_size 는 2의 거듭제곱이어야 합니다 ({block_size})")
    steps = Abar.shape[-3]
    a = np.moveaxis(Abar, -3, 0)
    b = np.moveaxis(U, -3, 0)
    bs = min(block_size, 1 << max(0, (steps - 1).bit_length()))
    n_blocks = -(-steps // bs)
    padded = n_blocks * bs
    if padded != steps:
        tail = (padded - steps,) + a.shape[1:]
        a = np.concatenate([a, np.ones(tail, dtype=a.dtype)], axis=0)
        b = np.concatenate([b, np.zeros(tail, dtype=b.dtype)], axis=0)
    a = a.reshape((n_blocks, bs) + a.shape[1:])
    b = b.reshape((n_blocks, bs) + b.shape[1:])

    inc_a = np.empty_like(a)
    inc_b = np.empty_like(b)
    workers = max(1, min(int(workers), n_blocks))
    chunks = np.array_split(np.arange(n_blocks), workers)

    def _run(chunk):
        if chunk.size:
            lo, hi = chunk[0], chunk[-1] + 1
            inc_a[lo:hi], inc_b[lo:hi] = _blelloch_inclusive(a[lo:hi], b[lo:hi])

    if workers == 1:
        _run(chunks[0])
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(_run, chunks))

    # 블록 간 carry 는 고정된 순서로 전파합니다
    carry = h0
    hs = np.empty_like(b)
    for k in range(n_blocks):
        hs[k] = inc_a[k] * carry + inc_b[k]
        carry = hs[k, -1]

    hs = hs.reshape((padded,) + hs.shape[2:])[:steps]
    hs = np.moveaxis(hs, 0, -3)
    if not np.all(np.isfinite(hs)):
        raise NonFiniteError("scan_parallel: 은닉 상태에 비유한 값이 발생했습니다")
    return np.ascontiguousarray(hs)


def _readout(hs: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.sum(hs * C[..., None, :], axis=-1)


def scan_sequential(params: Union[SsmParams, DiscreteParams], x: np.ndarray,
                    h0: Optional[ScanState] = None) -> Tuple[np.ndarray, ScanState]:
    """
    순환식을 그대로 반복하는 기준(oracle) 구현

    Returns:
        Tuple[np.ndarray, ScanState]: (y [..., T, C], 마지막 상태)
    """
    params = _as_discrete(params)
    x = np.asarray(x)
    _validate(params, x)
    U = params.Bbar * x[..., None]
    hs = _states_sequential(params.Abar, U, _initial(h0, params))
    return _readout(hs, params.C), ScanState(hs[..., -1, :, :].copy())


def scan_parallel(params: Union[SsmParams, DiscreteParams], x: np.ndarray,
                  h0: Optional[ScanState] = None, block_size: int = DEFAULT_BLOCK_SIZE,
                  workers: int = 1) -> Tuple[np.ndarray, ScanState]:
    """
    블록 단위 Blelloch prefix scan

    블록 내부 scan 은 workers 개의 스레드로 나누어 계산하지만 트리 형태가
    고정되어 있어 결과는 workers 값과 무관합니다.
    """
    params = _as_discrete(params)
    x = np.asarray(x)
    _validate(params, x)
    U = params.Bbar * x[..., None]
    hs = _states_parallel(params.Abar, U, _initial(h0, params), block_size, workers)
    return _readout(hs, params.C), ScanState(hs[..., -1, :, :].copy())


def scan_step(params_t: DiscreteParams, x_t: np.ndarray,
              state: ScanState) -> Tuple[np.ndarray, ScanState]:
    """
    한 시점만 진행하는 O(1) 메모리 형태

    Args:
        params_t: Abar, Bbar [..., C, N], C [..., N]
        x_t: 입력 [..., C]
        state: 이전 상태 h [..., C, N]

    Returns:
        Tuple[np.ndarray, ScanState]: (y_t [..., C], 새 상태)
    """
    if state is None:
        raise RuntimeError("scan_step: 상태가 초기화되지 않았습니다")
    h = params_t.Abar * state.h + params_t.Bbar * np.asarray(x_t)[..., None]
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("scan_step: 은닉 상태에 비유한 값이 발생했습니다")
    y = np.sum(h * params_t.C[..., None, :], axis=-1)
    return y, ScanState(h)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   h0: Optional[ScanState] = None, exact: bool = True,
                   mode: str = "sequential", block_size: int = DEFAULT_BLOCK_SIZE,
                   workers: int = 1) -> Tensor:
    """
    미분 가능한 융합 선택적 스캔 프리미티브

    순전파는 mode 에 따라 순차/병렬 scan 을 사용하고, 역전파는 ZOH 를 통과하는
    해석적 기울기를 계산합니다 (x, delta, A, B, C 모두에 대해).

    Returns:
        Tensor: y [..., T, C]
    """
    if x.shape != delta.shape:
        raise ShapeError(f"selective_scan: x {x.shape} 와 delta {delta.shape} 형상이 다릅니다")
    if B.shape != C.shape or B.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"selective_scan: B {B.shape}, C {C.shape} 형상이 x {x.shape} 와 맞지 않습니다")
    if np.any(delta.data <= 0):
        raise ValueError("selective_scan: delta 는 0 보다 커야 합니다")

    z = delta.data[..., None] * A.data
    Abar = np.exp(z)
    phi = _phi(z) if exact else np.ones_like(z)
    Bbar = phi * delta.data[..., None] * B.data[..., None, :]
    U = Bbar * x.data[..., None]
    disc = DiscreteParams(Abar, Bbar, C.data)
    h_init = _initial(h0, disc)
    if mode == "sequential":
        hs = _states_sequential(Abar, U, h_init)
    elif mode == "parallel":
        hs = _states_parallel(Abar, U, h_init, block_size, workers)
    else:
        raise ValueError(f"selective_scan: 알 수 없는 mode 입니다 ({mode})")
    y = _readout(hs, C.data)

    def _bw(g):
        steps = x.shape[-2]
        h_prev = np.concatenate([h_init[..., None, :, :], hs[..., :-1, :, :]], axis=-3)
        direct = g[..., None] * C.data[..., None, :]
        G = np.empty_like(direct)
        run = np.zeros_like(h_init)
        for t in reversed(range(steps)):
            run = direct[..., t, :, :] + run
            G[..., t, :, :] = run
            run = Abar[..., t, :, :] * run

        gC = np.sum(g[..., None] * hs, axis=-2)
        gx = np.sum(G * Bbar, axis=-1)
        gBbar = G * x.data[..., None]
        gz = G * h_prev * Abar
        gdelta = np.sum(gBbar * phi * B.data[..., None, :], axis=-1)
        gB = np.sum(gBbar * phi * delta.data[..., None], axis=-2)
        if exact:
            gz = gz + gBbar * _dphi(z) * delta.data[..., None] * B.data[..., None, :]
        gdelta = gdelta + np.sum(gz * A.data, axis=-1)
        gA = np.sum((gz * delta.data[..., None]).reshape((-1,) + A.shape), axis=0)
        return gx, gdelta, gA, gB, gC

    return make_result("selective-scan", y, (x, delta, A, B, C), _bw)


register_primitive("selective-scan", selective_scan)
