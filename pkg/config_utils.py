"""
설정 유틸리티

dataclass 설정 객체와 `key = value` 문자열 사이의 변환을 담당합니다.
"""

import logging
import typing
from dataclasses import fields
from typing import Any, Dict, Type, TypeVar

# 로깅 설정
logger = logging.getLogger(__name__)

T = TypeVar("T")

TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}
NONE_VALUES = {"", "none", "null"}


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in TRUE_VALUES:
        return True
    if text in FALSE_VALUES:
        return False
    raise ValueError(f"불리언 값으로 해석할 수 없습니다: {value!r}")


def format_value(value: Any) -> str:
    """설정 값을 key=value 직렬화용 문자열로 변환합니다."""
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def coerce(value: Any, annotation: Any) -> Any:
    """타입 주석에 맞게 값을 변환합니다 (int, float, bool, str, Optional, Tuple)."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.strip().lower() in NONE_VALUES):
            return None
        return coerce(value, inner[0])
    if origin in (tuple, typing.Tuple):
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(coerce(item, args[0]) for item in items)
    if annotation is bool:
        return parse_bool(value)
    if annotation is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"정수 값이 필요합니다: {value!r}")
        return int(str(value).strip()) if isinstance(value, str) else int(value)
    if annotation is float:
        return float(value)
    if annotation is str:
        return str(value).strip()
    return value


def dataclass_from_dict(cls: Type[T], data: Dict[str, Any], strict: bool = True) -> T:
    """
    dict(문자열 값 허용)로부터 dataclass 인스턴스를 만듭니다.

    Args:
        cls: 대상 dataclass
        data: 필드 이름 → 값
        strict: 알 수 없는 키를 오류로 처리할지 여부

    Returns:
        T: 생성된 인스턴스
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown and strict:
        raise ValueError(f"{cls.__name__}: 알 수 없는 설정 키입니다: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            continue
        try:
            kwargs[key] = coerce(value, hints[key])
        except (TypeError, ValueError) as e:
            raise ValueError(f"{cls.__name__}.{key}: 값을 해석할 수 없습니다 ({value!r}): {str(e)}")
    return cls(**kwargs)


def dataclass_to_dict(obj: Any) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.init}
