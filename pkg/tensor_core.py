"""
텐서 코어 모듈

numpy 배열 위에 얇은 역전파(reverse-mode) 자동미분 계층을 얹은 모듈입니다.
모든 연산은 스레드별 테이프에 기록되며, backward() 호출 시 역순으로 재생된 뒤
테이프가 비워집니다. NaN/Inf 는 발생한 연산에서 즉시 오류로 처리합니다.
"""

import hashlib
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

# 로깅 설정
logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5

DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}


class ShapeError(ValueError):
    """연산의 입력 형상이 규칙에 맞지 않을 때 발생합니다."""


class NonFiniteError(FloatingPointError):
    """연산 결과에 NaN 또는 Inf 가 포함될 때 발생합니다."""


def resolve_dtype(dtype: Union[str, type, np.dtype, None]) -> np.dtype:
    """문자열/타입으로 지정된 원소 타입을 numpy dtype 으로 변환합니다."""
    if dtype is None:
        return np.dtype(np.float64)
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"지원되지 않는 원소 타입입니다: {dtype}")
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"지원되지 않는 원소 타입입니다: {resolved}")
    return resolved


def _check_finite(op: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op}: 결과에 비유한 값(NaN/Inf)이 포함되어 있습니다")


class Tensor:
    """
    기울기 슬롯을 가진 조밀(dense) n차원 텐서

    data 는 연속 numpy 배열(float32 또는 float64)이며, requires_grad 가 참인
    리프 텐서는 backward() 이후 grad 에 기울기가 누적됩니다.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False,
                 dtype: Union[str, np.dtype, None] = None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(resolve_dtype(dtype), copy=False)
        elif array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        self.data: np.ndarray = np.ascontiguousarray(array)
        _check_finite(name or "tensor", self.data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._is_leaf = True

    # 편의 속성
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: 스칼라가 아닌 텐서입니다 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{req}{nm})"

    # 연산자 오버로딩
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return slice_(self, key)


# ----------------------------------------------------------------------
# 테이프
# ----------------------------------------------------------------------

@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """한 스레드에 한정된 연산 기록"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.enabled = True

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    """현재 스레드의 테이프를 반환합니다 (없으면 생성)."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """현재 스레드의 테이프를 비웁니다."""
    get_tape().clear()


@contextmanager
def no_grad():
    """블록 안의 연산을 테이프에 기록하지 않습니다 (추론 전용)."""
    tape = get_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def _as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    연산 결과 텐서를 만들고 필요하면 테이프에 기록합니다.

    다른 모듈이 융합(fused) 프리미티브를 등록할 때도 이 함수를 사용합니다.

    Args:
        op: 연산 이름 (오류 메시지에 사용)
        data: 순전파 결과 배열
        inputs: 입력 텐서 목록
        backward: 상위 기울기를 받아 입력별 기울기(또는 None)를 돌려주는 함수

    Returns:
        Tensor: 결과 텐서
    """
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out._is_leaf = True
    out.requires_grad = False
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape.record(TapeNode(op, out, tuple(inputs), backward))
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: 브로드캐스트할 수 없는 형상입니다 {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# 순수 배열 커널 (증분 디코딩에서도 그대로 사용)
# ----------------------------------------------------------------------

def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def swish_array(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return x * sigmoid_array(beta * x)


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm_array(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# ----------------------------------------------------------------------
# 프리미티브
# ----------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("add", a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Any, b: Any) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Any, b: Any) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("mul", a, b)
    return make_result("mul", a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log: 0 이하의 입력은 허용되지 않습니다")
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor, beta: float = 1.0) -> Tensor:
    """Swish(x) = x·σ(βx). β=1 이면 SiLU 와 같습니다."""
    s = sigmoid_array(beta * a.data)
    out = a.data * s
    return make_result("swish", out, (a,),
                       lambda g: (g * (s + beta * a.data * s * (1.0 - s)),))


def silu(a: Tensor) -> Tensor:
    return swish(a, 1.0)


def softplus(a: Tensor) -> Tensor:
    return make_result("softplus", softplus_array(a.data), (a,),
                       lambda g: (g * sigmoid_array(a.data),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    마지막 두 축에 대한 행렬곱 (앞쪽 축은 브로드캐스트)

    a: [..., m, k], b: [..., k, n] -> [..., m, n]
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: 형상이 맞지 않습니다 {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", out, (a, b), _bw)


def softmax(a: Tensor) -> Tensor:
    """마지막 축 softmax"""
    s = softmax_array(a.data)
    return make_result("softmax", s, (a,),
                       lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    out = log_softmax_array(a.data)

    def _bw(g):
        s = np.exp(out)
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return make_result("log_softmax", out, (a,), _bw)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """아핀 변환 없는 layer norm (마지막 축 평균 0, 분산 1)"""
    mu = np.mean(a.data, axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered ** 2, axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _bw(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gx = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return make_result("layer_norm", xhat, (a,), _bw)


def rms_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    r = np.sqrt(np.mean(a.data ** 2, axis=-1, keepdims=True) + eps)
    out = a.data / r

    def _bw(g):
        return (g / r - a.data * np.mean(g * a.data, axis=-1, keepdims=True) / r ** 3,)

    return make_result("rms_norm", out, (a,), _bw)


def conv1d_causal_depthwise(x: Tensor, w: Tensor) -> Tensor:
    """
    인과적 depthwise 1D 합성곱

    x: [..., T, C], w: [C, k]. 시간 축 왼쪽에 k-1 개의 0 을 채우며,
    마지막 탭 w[:, k-1] 이 현재 시점 입력에 곱해집니다.
    """
    if x.ndim < 2 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1d_causal_depthwise: 형상이 맞지 않습니다 {x.shape} * {w.shape}")
    k = w.shape[1]
    steps = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + steps, :] * w.data[:, j]

    def _bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[..., j:j + steps, :] += g * w.data[:, j]
            gw[:, j] = np.sum((g * xp[..., j:j + steps, :]).reshape(-1, w.shape[0]), axis=0)
        return gxp[..., k - 1:, :], gw

    return make_result("conv1d_causal_depthwise", out, (x, w), _bw)


def embedding(table: Tensor, indices: Any) -> Tensor:
    """table: [V, d], indices: 정수 배열 -> [..., d]"""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding: 정수 인덱스가 필요합니다 ({idx.dtype})")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: 인덱스 범위를 벗어났습니다 [0, {table.shape[0]})")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_result("embedding", table.data[idx], (table,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: 입력이 비어 있습니다")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: 형상이 맞지 않습니다 {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result("concat", out, tuple(tensors),
                       lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: Tensor, key: Any) -> Tensor:
    """기본 인덱싱(정수/슬라이스)만 지원합니다."""
    out = a.data[key]

    def _bw(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return make_result("slice", np.array(out, copy=True), (a,), _bw)


def sum_(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None,
         keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def _bw(g):
        return (np.broadcast_to(g.reshape(kept), a.shape).copy(),)

    return make_result("sum", np.asarray(out), (a,), _bw)


def mean(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None,
         keepdims: bool = False) -> Tensor:
    out = sum_(a, axis=axis, keepdims=keepdims)
    count = a.size // max(1, out.size) if axis is not None else a.size
    return mul(out, 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inverse),))


def pick(a: Tensor, indices: Any) -> Tensor:
    """마지막 축에서 행마다 하나의 원소를 고릅니다. a: [..., V], indices: [...]"""
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: 인덱스 형상 {idx.shape} 가 {a.shape[:-1]} 와 다릅니다")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError(f"pick: 인덱스 범위를 벗어났습니다 [0, {a.shape[-1]})")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return make_result("pick", out, (a,), _bw)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "silu": silu,
    "swish": swish,
    "softmax-last-axis": softmax,
    "log-softmax": log_softmax,
    "layer-norm-no-affine": layer_norm,
    "rms-norm": rms_norm,
    "conv1d-causal-depthwise": conv1d_causal_depthwise,
    "embedding-lookup": embedding,
    "concat": concat,
    "slice": slice_,
    "softplus": softplus,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "pick": pick,
}


def register_primitive(name: str, fn: Callable[..., Tensor]) -> None:
    """외부 모듈의 융합 프리미티브를 등록합니다."""
    PRIMITIVES[name] = fn


def apply_primitive(op: str, inputs: Sequence[Any], **kwargs) -> Tensor:
    """
    이름으로 프리미티브를 적용합니다.

    Args:
        op: 프리미티브 이름 (PRIMITIVES 의 키)
        inputs: 입력 목록 (concat 은 텐서 목록 하나를 받습니다)
        **kwargs: 연산별 추가 인자 (axis, eps, beta 등)

    Returns:
        Tensor: 결과 텐서
    """
    if op not in PRIMITIVES:
        raise ValueError(f"알 수 없는 프리미티브입니다: {op}")
    if op == "concat":
        return concat(list(inputs), **kwargs)
    return PRIMITIVES[op](*inputs, **kwargs)


# ----------------------------------------------------------------------
# 역전파
# ----------------------------------------------------------------------

def _propagate(loss: Tensor) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise ShapeError(f"backward: 손실은 스칼라여야 합니다 {loss.shape}")
    tape = get_tape()
    if loss._is_leaf or not any(node.output is loss for node in tape.nodes):
        raise RuntimeError("backward: 손실이 현재 테이프에 연결되어 있지 않습니다 (detached graph)")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for tensor, tg in zip(node.inputs, input_grads):
            if tg is None or not tensor.requires_grad:
                continue
            tg = _unbroadcast(np.asarray(tg), tensor.shape)
            if tensor._is_leaf:
                if id(tensor) in leaves:
                    leaves[id(tensor)] = (tensor, leaves[id(tensor)][1] + tg)
                else:
                    leaves[id(tensor)] = (tensor, tg)
            elif id(tensor) in grads:
                grads[id(tensor)] = grads[id(tensor)] + tg
            else:
                grads[id(tensor)] = tg
    tape.clear()
    return leaves


def backward(loss: Tensor) -> None:
    """
    스칼라 손실에서 역전파하여 리프 텐서의 grad 에 기울기를 누적합니다.

    호출 후 테이프는 비워지므로 같은 손실로 다시 호출하면 오류가 발생합니다.
    """
    for tensor, g in _propagate(loss).values():
        g = g.astype(tensor.dtype, copy=False)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def grad(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """리프 텐서를 변경하지 않고 params 에 대한 기울기 목록을 반환합니다."""
    leaves = _propagate(loss)
    return [leaves[id(p)][1].astype(p.dtype, copy=False) if id(p) in leaves
            else np.zeros_like(p.data) for p in params]


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """
    중앙 차분으로 해석적 기울기를 검증합니다.

    Args:
        f: 텐서를 받아 스칼라 텐서를 돌려주는 함수
        x: 64비트 입력 텐서
        eps: 섭동 크기 [1e-7, 1e-3], 기본 1e-4

    Returns:
        float: max_i |analytic - numeric| / max(1, |analytic|)
    """
    if x.dtype != np.float64:
        raise ValueError(f"gradient_check: 64비트 입력이 필요합니다 ({x.dtype})")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"gradient_check: eps 범위 [1e-7, 1e-3] 를 벗어났습니다 ({eps})")

    reset_tape()
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    _check_finite("gradient_check", loss.data)
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros_like(x.data)
    flat = numeric.reshape(-1)
    base = x.data.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy()
            plus[i] += eps
            minus = base.copy()
            minus[i] -= eps
            f_plus = f(Tensor(plus.reshape(x.shape))).item()
            f_minus = f(Tensor(minus.reshape(x.shape))).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("gradient_check: f 값이 유한하지 않습니다")
            flat[i] = (f_plus - f_minus) / (2.0 * eps)

    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(np.max(error)) if error.size else 0.0


# ----------------------------------------------------------------------
# 난수
# ----------------------------------------------------------------------

def stream_id(*labels: Any) -> int:
    """라벨(용도, 레이어, 스텝 등)로부터 64비트 스트림 ID 를 만듭니다."""
    key = "/".join(str(label) for label in labels)
    digest = hashlib.md5(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """
    (seed, stream-id) 로 키가 정해지는 카운터 기반 난수 생성기 (Philox)

    같은 (seed, stream-id) 는 항상 같은 수열을 만들고, 서로 다른 stream-id 는
    독립적인 수열을 만듭니다.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def derive(cls, seed: int, *labels: Any) -> "Rng":
        return cls(seed, stream_id(*labels))

    def normal(self, shape: Iterable[int], std: float = 1.0, dtype: Any = np.float64) -> np.ndarray:
        return (self.generator.standard_normal(tuple(shape)) * std).astype(resolve_dtype(dtype))

    def uniform(self, shape: Iterable[int], low: float = 0.0, high: float = 1.0,
                dtype: Any = np.float64) -> np.ndarray:
        return self.generator.uniform(low, high, tuple(shape)).astype(resolve_dtype(dtype))

    def random(self, size: Optional[int] = None) -> Union[float, np.ndarray]:
        return self.generator.random(size)

    def integers(self, low: int, high: int, size: Optional[Any] = None) -> Union[int, np.ndarray]:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
