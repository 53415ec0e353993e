#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
AiM 실행 스크립트

서브커맨드: dataset, train, sample, eval, bench, inspect, experiment

설정 파일은 한 줄에 `key = value` 하나, `#` 주석을 허용합니다. 모든 키는
DEFAULTS 표에 기본값과 함께 정의되며 같은 이름의 플래그가 있습니다
(`model.n_layers` ↔ `--model-n-layers`). 플래그가 설정 파일보다 우선합니다.
"""

import os
import sys
import argparse
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from dotenv import load_dotenv

from config_utils import coerce, format_value

logger = logging.getLogger("run")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_LOG_FILE = "aim.log"


class UsageError(Exception):
    """잘못된 명령행 사용"""


class ConfigError(ValueError):
    """설정 파일/값 오류"""


def check_dependencies() -> bool:
    """필요한 패키지가 설치되어 있는지 확인합니다."""
    try:
        import numpy
        import pandas
        import sklearn
        import PIL
        import tqdm
        import dotenv
        return True
    except ImportError as e:
        logger.error(f"필요한 패키지가 설치되어 있지 않습니다: {str(e)}")
        logger.info("pip install -r requirements.txt 명령으로 필요한 패키지를 설치하세요.")
        return False


def setup_logging(log_file: str, level: str) -> None:
    """StreamHandler + FileHandler 로 루트 로거를 설정합니다."""
    root = logging.getLogger()
    numeric = getattr(logging, level.upper(), None)
    if not isinstance(numeric, int):
        raise UsageError(f"알 수 없는 로그 레벨입니다: {level}")
    if root.handlers:
        root.setLevel(numeric)
        return
    logging.basicConfig(
        level=numeric,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(log_file, encoding='utf-8')
        ]
    )


# ----------------------------------------------------------------------
# 설정 키 표
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Option:
    key: str
    annotation: Any
    default: Any
    help: str
    aliases: Tuple[str, ...] = ()

    @property
    def section(self) -> str:
        return self.key.split(".", 1)[0]

    @property
    def name(self) -> str:
        return self.key.split(".", 1)[1]

    @property
    def flag(self) -> str:
        return "--" + self.key.replace(".", "-").replace("_", "-")


# 데이터클래스에서 기본값을 가져오는 키의 설명
FIELD_HELP = {
    "model.n_layers": "Mamba 블록 수 N",
    "model.embed_dim": "임베딩 차원 d",
    "model.n_groups": "adaLN 그룹 수 G (1=adaLN-single, N=vanilla adaLN)",
    "model.vocab_size": "토큰 어휘 크기 V",
    "model.n_classes": "클래스 수 K (null 클래스는 K)",
    "model.seq_len": "시퀀스 길이 L",
    "model.state_dim": "SSM 상태 차원",
    "model.expand": "내부 차원 배수",
    "model.conv_k": "인과 depthwise conv 커널 크기",
    "model.dt_rank": "Δ 저랭크 투영 랭크 (none 이면 ceil(d/16))",
    "model.use_pe": "학습 위치 임베딩 사용 여부",
    "model.pe_kind": "위치 임베딩 종류 (learned|sinusoidal)",
    "model.tie_head": "출력 헤드를 토큰 임베딩과 공유",
    "model.dtype": "수치 정밀도 (float32|float64)",
    "model.exact_zoh": "B 의 정확한 ZOH 이산화 (false 면 Δ·B)",
    "model.scan_mode": "학습 시 스캔 방식 (sequential|parallel)",
    "train.batch_size": "배치 크기",
    "train.base_lr_per_256": "배치 256 기준 학습률",
    "train.betas": "AdamW β1,β2",
    "train.eps": "AdamW ε",
    "train.weight_decay": "가중치 감쇠",
    "train.class_dropout": "클래스 조건 dropout 확률",
    "train.steps": "학습 스텝 수",
    "train.warmup_steps": "선형 warmup 스텝 수",
    "train.seed": "학습 시드 (초기화/셔플/dropout)",
    "train.grad_clip": "그래디언트 norm 클리핑 (none 이면 사용 안 함)",
    "train.shards": "데이터 병렬 샤드 수",
    "train.checkpoint_every": "체크포인트 간격 (0 이면 마지막만)",
    "train.eval_batch_size": "평가 배치 크기",
    "sample.w": "CFG 스케일 w (1 이면 가이던스 없음)",
    "sample.temperature": "샘플링 온도",
    "sample.top_k": "top-k 필터 (none 이면 사용 안 함)",
    "sample.top_p": "top-p 필터 (none 이면 사용 안 함)",
    "sample.argmax": "argmax 디코딩",
    "sample.space": "CFG 결합 공간 (logit|prob)",
    "data.n_classes": "클래스(패턴 계열) 수",
    "data.image_size": "이미지 한 변의 픽셀 수",
    "data.patch_size": "패치 한 변의 픽셀 수",
    "data.levels": "채널당 색상 단계 수 (V = levels³)",
    "data.noise": "픽셀 잡음 크기",
}

ALIASES = {
    "train.seed": ("--seed",),
    "sample.w": ("--w",),
    "sample.temperature": ("--temperature",),
    "sample.top_k": ("--top-k",),
    "sample.top_p": ("--top-p",),
}

EXTRA_OPTIONS = [
    Option("data.n_per_class", int, 20, "클래스당 샘플 수"),
    Option("data.seed", int, 0, "데이터셋 시드", ("--seed",)),
    Option("sample.class_id", int, 0, "생성할 클래스 (-1 이면 무조건부)", ("--class",)),
    Option("sample.n", int, 8, "생성할 샘플 수", ("--n",)),
    Option("sample.seed", int, 0, "샘플링 시드", ("--seed",)),
    Option("sample.chunk_size", int, 16, "한 세션에서 함께 디코딩할 샘플 수"),
    Option("sample.patch_size", int, 2, "이미지 복원에 쓸 패치 크기"),
    Option("eval.split", str, "val", "평가 분할 (train|val|all)", ("--split",)),
    Option("eval.batch_size", int, 32, "NLL 평가 배치 크기"),
    Option("eval.n_per_class", int, 8, "class-consistency 용 클래스당 샘플 수 (0 이면 생략)"),
    Option("bench.kind", str, "both", "백엔드 (mamba|attention|both)", ("--kind",)),
    Option("bench.lengths", Tuple[int, ...], (64, 128, 256, 512, 1024, 2048), "디코딩 길이 목록", ("--lengths",)),
    Option("bench.batch", int, 16, "배치 크기", ("--batch",)),
    Option("bench.trials", int, 5, "길이별 측정 횟수"),
    Option("bench.warmup", int, 2, "예열 횟수"),
    Option("bench.embed_dim", int, 64, "벤치마크 모델 차원 d"),
    Option("bench.n_layers", int, 2, "벤치마크 레이어 수 N"),
    Option("bench.vocab_size", int, 64, "벤치마크 어휘 크기"),
    Option("bench.seed", int, 0, "벤치마크 시드", ("--seed",)),
    Option("bench.plot", bool, False, "PNG 그래프 저장"),
    Option("experiment.kind", str, "ablation", "실험 종류 (ablation|scaling)", ("--kind",)),
    Option("experiment.seeds", Tuple[int, ...], (0, 1, 2), "시드 목록"),
    Option("experiment.groups", Tuple[int, ...], (1, 2, 4), "adaLN 그룹 수 후보 (N 은 항상 포함)"),
    Option("experiment.cfg_scales", Tuple[float, ...], (0.0, 1.0, 1.5, 2.0), "CFG 스케일 목록"),
    Option("experiment.dims", Tuple[int, ...], (64, 128), "스케일링 실험 차원 목록"),
    Option("experiment.n_samples", int, 16, "변형당 생성 샘플 수"),
    Option("experiment.plot", bool, False, "PNG 그래프 저장"),
]


def _dataclass_options(section: str, cls: type) -> List[Option]:
    hints = typing.get_type_hints(cls)
    options = []
    for f in fields(cls):
        if not f.init:
            continue
        key = f"{section}.{f.name}"
        options.append(Option(key, hints[f.name], f.default, FIELD_HELP[key], ALIASES.get(key, ())))
    return options


def build_defaults() -> Dict[str, Option]:
    from aim_model import ModelConfig
    from sampler import GuidanceConfig
    from toy_tokenizer import SyntheticSpec
    from trainer import TrainConfig

    options = (_dataclass_options("model", ModelConfig) + _dataclass_options("train", TrainConfig)
               + _dataclass_options("sample", GuidanceConfig) + _dataclass_options("data", SyntheticSpec)
               + EXTRA_OPTIONS)
    return {opt.key: opt for opt in options}


DEFAULTS = build_defaults()

COMMAND_SECTIONS = {
    "dataset": ("data",),
    "train": ("model", "train"),
    "sample": ("sample",),
    "eval": ("eval", "sample"),
    "bench": ("bench",),
    "inspect": ("model",),
    "experiment": ("model", "train", "experiment"),
}


def parse_config_file(path: str) -> Dict[str, str]:
    """
    설정 파일을 읽어 key → 문자열 값 dict 로 반환합니다.

    Args:
        path: 설정 파일 경로

    Returns:
        Dict[str, str]: 설정 값 (알 수 없는 키/중복 키는 ConfigError)
    """
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"설정 파일을 찾을 수 없습니다: {path}")
    values = {}
    for lineno, raw in enumerate(file_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: 'key = value' 형식이 아닙니다")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: 알 수 없는 설정 키입니다: {key}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: 중복된 설정 키입니다: {key}")
        values[key] = value
    return values


def resolve_config(file_values: Dict[str, str], flag_values: Dict[str, str]) -> Tuple[Dict[str, Any], Set[str]]:
    """기본값 ← 설정 파일 ← 플래그 순으로 병합하고 타입을 맞춥니다."""
    values = {key: opt.default for key, opt in DEFAULTS.items()}
    for source in (file_values, flag_values):
        for key, raw in source.items():
            try:
                values[key] = coerce(raw, DEFAULTS[key].annotation)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{key}: 값을 해석할 수 없습니다 ({raw!r}): {str(e)}")
    return values, set(file_values) | set(flag_values)


def section(values: Dict[str, Any], name: str, cls: Optional[type] = None) -> Dict[str, Any]:
    prefix = name + "."
    items = {key[len(prefix):]: value for key, value in values.items() if key.startswith(prefix)}
    if cls is not None:
        names = {f.name for f in fields(cls) if f.init}
        items = {k: v for k, v in items.items() if k in names}
    return items


def build_config(cls: type, values: Dict[str, Any], name: str, base: Optional[Dict[str, Any]] = None):
    kwargs = dict(base or {})
    kwargs.update(section(values, name, cls))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: 잘못된 설정입니다: {str(e)}")


# ----------------------------------------------------------------------
# 명령행 파서
# ----------------------------------------------------------------------

class AimArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_section_flags(parser: argparse.ArgumentParser, sections: Sequence[str]) -> None:
    for name in sections:
        group = parser.add_argument_group(f"{name}.* 설정")
        for opt in DEFAULTS.values():
            if opt.section != name:
                continue
            group.add_argument(opt.flag, *opt.aliases, dest=opt.key, default=None, metavar="VALUE",
                               help=f"{opt.help} (default: {format_value(opt.default)})")


def build_parser() -> argparse.ArgumentParser:
    common = AimArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="설정 파일 경로 (default: 없음)")
    common.add_argument("--threads", type=int, default=None,
                        help="작업 스레드 수 상한 (default: 환경 변수 AIM_THREADS 또는 1)")
    common.add_argument("--log-file", default=None, help=f"로그 파일 (default: {DEFAULT_LOG_FILE})")
    common.add_argument("--log-level", default=None, help="로그 레벨 (default: 환경 변수 AIM_LOG_LEVEL 또는 INFO)")

    parser = AimArgumentParser(description="AiM: Mamba 기반 클래스 조건부 자기회귀 토큰 생성기")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("dataset", parents=[common], help="합성 토큰 데이터셋 생성")
    p.add_argument("--spec", dest="config", default=None, help="data.* 키가 담긴 설정 파일 (--config 와 동일)")
    p.add_argument("--out", required=True, help="출력 데이터셋 파일")
    p.add_argument("--preview", default=None, help="클래스별 첫 샘플 PPM 을 저장할 디렉토리 (default: 없음)")

    p = sub.add_parser("train", parents=[common], help="모델 학습")
    p.add_argument("--data", required=True, help="데이터셋 파일")
    p.add_argument("--out-dir", required=True, help="체크포인트/metrics.tsv 출력 디렉토리")
    p.add_argument("--resume", default=None, help="재개할 체크포인트 (default: 없음)")

    p = sub.add_parser("sample", parents=[common], help="이미지 토큰 생성")
    p.add_argument("--ckpt", required=True, help="체크포인트 파일")
    p.add_argument("--out-dir", required=True, help="PPM/토큰 파일 출력 디렉토리")

    p = sub.add_parser("eval", parents=[common], help="NLL 및 class-consistency 평가")
    p.add_argument("--ckpt", required=True, help="체크포인트 파일")
    p.add_argument("--data", required=True, help="데이터셋 파일")
    p.add_argument("--out", default=None, help="보고서 파일 접두사 (default: 없음)")

    p = sub.add_parser("bench", parents=[common], help="디코딩 시간 스케일링 벤치마크")
    p.add_argument("--out", required=True, help="보고서 파일 접두사")

    p = sub.add_parser("inspect", parents=[common], help="체크포인트 구성/파라미터 수 확인")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--ckpt", default=None, help="체크포인트 파일")
    target.add_argument("--preset", default=None, help="프리셋 이름 (aim-b|aim-l|aim-xl|aim-1b)")

    p = sub.add_parser("experiment", parents=[common], help="ablation / 스케일링 실험")
    p.add_argument("--data", required=True, help="데이터셋 파일")
    p.add_argument("--out-dir", required=True, help="보고서 출력 디렉토리")

    for name, sections in COMMAND_SECTIONS.items():
        _add_section_flags(sub.choices[name], sections)
    return parser


# ----------------------------------------------------------------------
# 서브커맨드
# ----------------------------------------------------------------------

def _require_file(path: Optional[str], what: str) -> None:
    if path is not None and not Path(path).exists():
        raise FileNotFoundError(f"{what} 파일을 찾을 수 없습니다: {path}")


def _check_resume_overrides(config, values: Dict[str, Any], explicit: Set[str]) -> None:
    """재개 시 체크포인트 구조와 다른 model.* 값을 명시했다면 거부합니다."""
    for key in sorted(k for k in explicit if k.startswith("model.")):
        name = key[len("model."):]
        if hasattr(config, name) and values[key] != getattr(config, name):
            raise ConfigError(f"{key}={values[key]} 이 체크포인트 값 {getattr(config, name)} 와 다릅니다 "
                              f"(재개 시 모델 구성은 바꿀 수 없습니다)")


def _check_compatible(config, spec) -> None:
    expected = {"vocab_size": spec.vocab_size, "n_classes": spec.n_classes, "seq_len": spec.seq_len}
    for key, value in expected.items():
        if getattr(config, key) != value:
            raise ConfigError(f"model.{key}={getattr(config, key)} 이 데이터셋 값 {value} 와 다릅니다")


def cmd_dataset(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    from toy_tokenizer import Codebook, SyntheticSpec, decode, generate_dataset, save_dataset, save_ppm, unflatten

    spec = build_config(SyntheticSpec, values, "data")
    n_per_class = values["data.n_per_class"]
    if n_per_class < 1:
        raise ConfigError(f"data.n_per_class 는 1 이상이어야 합니다 ({n_per_class})")
    dataset = generate_dataset(spec, n_per_class, values["data.seed"], workers=threads)
    save_dataset(dataset, args.out)
    if args.preview:
        codebook = Codebook.from_spec(spec)
        for k in range(spec.n_classes):
            grid = unflatten(dataset.tokens[k], spec.grid_size, spec.grid_size)
            save_ppm(decode(grid, codebook), Path(args.preview) / f"class_{k:02d}_{spec.family(k)}.ppm")
    print(f"dataset\t{args.out}\tsamples={len(dataset)}\tV={spec.vocab_size}\tL={spec.seq_len}")
    return 0


def cmd_train(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    from aim_model import ModelConfig, init_weights
    from toy_tokenizer import load_dataset, split_dataset
    from trainer import TrainConfig, load_checkpoint, train

    _require_file(args.data, "데이터셋")
    _require_file(args.resume, "체크포인트")
    dataset = load_dataset(args.data)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        config = resume.model_config
        _check_resume_overrides(config, values, explicit)
        weights = resume.weights
        base = resume.train_config.to_dict() if resume.train_config is not None else {}
        overrides = {k: v for k, v in values.items() if k in explicit}
        train_config = build_config(TrainConfig, overrides, "train", base)
    else:
        config = build_config(ModelConfig, values, "model")
        train_config = build_config(TrainConfig, values, "train")
        weights = init_weights(config, train_config.seed)
    _check_compatible(config, dataset.spec)

    result = train(weights, config, split_dataset(dataset, "train"), train_config, out_dir=args.out_dir,
                   resume=resume, eval_dataset=split_dataset(dataset, "val"), workers=threads)
    final_loss = result.losses[-1] if result.losses else float("nan")
    eval_nll = result.eval_nll if result.eval_nll is not None else float("nan")
    print(f"train\tstep={result.final_step}\tloss={final_loss:.6f}\teval_nll={eval_nll:.6f}\t"
          f"ckpt={result.checkpoints[-1] if result.checkpoints else ''}")
    return 0


def _codebook_for(config, patch_size: int):
    from toy_tokenizer import Codebook

    levels = round(config.vocab_size ** (1.0 / 3.0))
    if levels ** 3 != config.vocab_size:
        logger.warning(f"V={config.vocab_size} 가 levels³ 형태가 아니어서 이미지를 저장하지 않습니다")
        return None
    return Codebook(levels, patch_size)


def cmd_sample(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    import numpy as np
    from sampler import GuidanceConfig, generate
    from toy_tokenizer import decode, save_ppm
    from trainer import load_checkpoint

    guidance = build_config(GuidanceConfig, values, "sample")
    n = values["sample.n"]
    if n < 1:
        raise ConfigError(f"sample.n 은 1 이상이어야 합니다 ({n})")
    _require_file(args.ckpt, "체크포인트")
    ckpt = load_checkpoint(args.ckpt)
    class_id = values["sample.class_id"]
    if class_id < -1 or class_id >= ckpt.model_config.n_classes:
        raise ConfigError(f"sample.class_id 가 범위 [-1, {ckpt.model_config.n_classes}) 를 벗어났습니다: {class_id}")
    grids = generate(ckpt.weights, ckpt.model_config, None if class_id == -1 else class_id, n, guidance,
                     seed=values["sample.seed"], chunk_size=values["sample.chunk_size"], workers=threads)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(str(int(t)) for t in np.asarray(g.tokens).reshape(-1)) for g in grids]
    (out_dir / "tokens.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    codebook = _codebook_for(ckpt.model_config, values["sample.patch_size"])
    if codebook is not None:
        for i, grid in enumerate(grids):
            save_ppm(decode(grid, codebook), out_dir / f"sample_{i:04d}.ppm")
    print(f"sample\tclass={class_id}\tn={n}\tw={guidance.w}\tout={out_dir}")
    return 0


def cmd_eval(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    import numpy as np
    import pandas as pd
    from bench_eval import class_consistency, nll_eval, write_report
    from sampler import GuidanceConfig, generate
    from toy_tokenizer import fit_histogram_classifier, load_dataset, split_dataset
    from trainer import load_checkpoint

    guidance = build_config(GuidanceConfig, values, "sample")
    split = values["eval.split"]
    if split not in ("train", "val", "all"):
        raise ConfigError(f"eval.split 은 train/val/all 중 하나여야 합니다 ({split})")
    _require_file(args.ckpt, "체크포인트")
    _require_file(args.data, "데이터셋")
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_compatible(ckpt.model_config, dataset.spec)

    nll, count = nll_eval(ckpt.weights, ckpt.model_config, dataset, split, values["eval.batch_size"])
    rows = [{"variant": "eval", "split": split, "nll": nll, "tokens": count}]
    n_per_class = values["eval.n_per_class"]
    if n_per_class > 0:
        classifier = fit_histogram_classifier(split_dataset(dataset, "train"))
        scores = []
        for k in range(ckpt.model_config.n_classes):
            grids = generate(ckpt.weights, ckpt.model_config, k, n_per_class, guidance,
                             seed=values["sample.seed"], workers=threads)
            scores.append(class_consistency(np.stack([g.tokens for g in grids]), k, classifier,
                                            ckpt.model_config.vocab_size))
        rows[0]["class_consistency"] = float(np.mean(scores))
        rows[0]["w"] = guidance.w
    frame = pd.DataFrame(rows)
    print(frame.to_string(index=False))
    if args.out:
        write_report(frame.drop(columns=["split"]), args.out)
    return 0


def cmd_bench(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    from bench_eval import bench_config, decode_scaling_bench, plot_bench

    kind = values["bench.kind"]
    kinds = ["mamba", "attention"] if kind == "both" else [kind]
    if any(k not in ("mamba", "attention") for k in kinds):
        raise ConfigError(f"bench.kind 는 mamba|attention|both 중 하나여야 합니다 ({kind})")
    lengths = list(values["bench.lengths"])
    config = bench_config(lengths, values["bench.embed_dim"], values["bench.n_layers"], values["bench.vocab_size"])
    reports = []
    for k in kinds:
        try:
            report = decode_scaling_bench(k, lengths, batch=values["bench.batch"], config=config,
                                          trials=values["bench.trials"], warmup=values["bench.warmup"],
                                          seed=values["bench.seed"])
        except ValueError as e:
            raise ConfigError(str(e))
        suffix = f"_{k}" if len(kinds) > 1 else ""
        report.write(f"{args.out}{suffix}")
        print(report.to_table(), end="")
        reports.append(report)
    if values["bench.plot"]:
        plot_bench(reports, Path(args.out).with_suffix(".png"))
    return 0


def cmd_inspect(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    from aim_model import (
        ModelConfig, embedding_param_count, expected_shapes, non_embedding_param_count, param_census, param_count,
    )
    from trainer import load_checkpoint

    if args.preset:
        overrides = section({k: v for k, v in values.items() if k in explicit}, "model", ModelConfig)
        try:
            config = ModelConfig.preset(args.preset, **overrides)
        except ValueError as e:
            raise ConfigError(str(e))
        census = None
        shapes = expected_shapes(config)
    else:
        _require_file(args.ckpt, "체크포인트")
        ckpt = load_checkpoint(args.ckpt)
        config = ckpt.model_config
        census = param_census(ckpt.weights)
        shapes = {name: t.data.shape for name, t in ckpt.weights.tensors().items()}
        print(f"step = {ckpt.step}")

    for key, value in config.to_dict().items():
        print(f"model.{key} = {format_value(value)}")
    for name, shape in shapes.items():
        print(f"tensor\t{name}\t{'x'.join(str(s) for s in shape)}")
    print(f"param_count = {param_count(config)}")
    print(f"non_embedding_param_count = {non_embedding_param_count(config)}")
    print(f"embedding_param_count = {embedding_param_count(config)}")
    if census is not None:
        print(f"param_census = {census}")
    return 0


def cmd_experiment(args, values: Dict[str, Any], explicit: Set[str], threads: int) -> int:
    from aim_model import ModelConfig
    from bench_eval import ablation_suite, pe_column_gap, scaling_miniature, summarize, write_report
    from toy_tokenizer import load_dataset
    from trainer import TrainConfig

    kind = values["experiment.kind"]
    if kind not in ("ablation", "scaling"):
        raise ConfigError(f"experiment.kind 는 ablation|scaling 중 하나여야 합니다 ({kind})")
    _require_file(args.data, "데이터셋")
    dataset = load_dataset(args.data)
    config = build_config(ModelConfig, values, "model")
    train_config = build_config(TrainConfig, values, "train")
    _check_compatible(config, dataset.spec)
    out_dir = Path(args.out_dir)
    seeds = values["experiment.seeds"]

    if kind == "ablation":
        groups = tuple(values["experiment.groups"]) + (config.n_layers,)
        variants, cfg_frame = ablation_suite(dataset, config, train_config, groups=groups,
                                             cfg_scales=values["experiment.cfg_scales"], seeds=seeds,
                                             n_samples=values["experiment.n_samples"])
        table = summarize(variants, ["params", "nll", "column_accuracy"])
        write_report(table, out_dir / "ablation")
        write_report(summarize(cfg_frame, ["class_consistency"]), out_dir / "cfg")
        print(table.to_string(index=False))
        print(f"pe_column_gap = {pe_column_gap(variants):.4f}")
    else:
        frame = scaling_miniature(dataset, config, train_config, dims=values["experiment.dims"], seeds=seeds,
                                  out_dir=out_dir, plot=values["experiment.plot"])
        table = summarize(frame, ["params", "nll"])
        write_report(table, out_dir / "scaling")
        print(table.to_string(index=False))
    return 0


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "experiment": cmd_experiment,
}


def error_code(e: BaseException) -> str:
    from tensor_core import NonFiniteError
    from toy_tokenizer import DatasetError
    from trainer import CheckpointError

    if isinstance(e, UsageError):
        return "USAGE"
    if isinstance(e, FileNotFoundError):
        return "FILE_NOT_FOUND"
    if isinstance(e, CheckpointError):
        return "CHECKPOINT"
    if isinstance(e, DatasetError):
        return "DATASET"
    if isinstance(e, ConfigError):
        return "CONFIG"
    if isinstance(e, NonFiniteError):
        return "NON_FINITE"
    return "RUNTIME"


def resolve_threads(flag: Optional[int]) -> int:
    raw = flag if flag is not None else os.getenv("AIM_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"AIM_THREADS 는 정수여야 합니다: {raw!r}")
    if threads < 1:
        raise UsageError(f"스레드 수는 1 이상이어야 합니다 ({threads})")
    return threads


def main(argv: Optional[List[str]] = None) -> int:
    """메인 함수"""
    load_dotenv()
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
        setup_logging(args.log_file or DEFAULT_LOG_FILE, args.log_level or os.getenv("AIM_LOG_LEVEL", "INFO"))

        # 의존성 확인
        if not check_dependencies():
            raise RuntimeError("필요한 패키지가 설치되어 있지 않습니다")

        threads = resolve_threads(args.threads)
        file_values = parse_config_file(args.config) if args.config else {}
        flag_values = {key: value for key, value in vars(args).items() if key in DEFAULTS and value is not None}
        values, explicit = resolve_config(file_values, flag_values)
        logger.info(f"{args.command} 실행 (threads={threads})")
        return COMMANDS[args.command](args, values, explicit, threads)
    except Exception as e:
        code = error_code(e)
        message = " ".join(str(e).split())
        logger.error(f"{code}: {message}")
        print(f"error: {code}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
