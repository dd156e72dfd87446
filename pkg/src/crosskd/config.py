"""Run configuration.

A :class:`RunConfig` is a tree of dataclasses.  On disk it is a JSON object
with flat dotted keys (``"kd.temperature": 4.0``); :func:`to_flat` always
emits every key, so a manifest's config echo reproduces a run on its own.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dataio import SyntheticSpec
from .errors import ConfigError
from .losses import LossWeights
from .models import StudentConfig, TeacherConfig

COMPONENTS = LossWeights.COMPONENTS


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | csv
    path: str | None = None
    channels: int = 1
    counts: list = field(default_factory=lambda: [60, 60, 60, 60])
    image_side: int = 32
    sigma: float = 0.05
    seed: int = 0

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(list(self.counts), self.image_side, self.channels, self.sigma, self.seed)


@dataclass
class ScheduleConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-2
    weight_decay: float = 1e-4
    warmup: int = 3
    eta_min: float = 1e-5
    patience: int = 10
    clip_norm: float | None = 5.0

    def validate(self, name: str) -> None:
        if self.epochs < 1:
            raise ConfigError(f"{name}.epochs must be >= 1")
        if not 0 <= self.warmup < self.epochs:
            raise ConfigError(f"{name}.warmup must satisfy 0 <= warmup < epochs")
        if self.patience < 1:
            raise ConfigError(f"{name}.patience must be >= 1")
        if self.batch_size < 2:
            raise ConfigError(f"{name}.batch_size must be >= 2")
        if self.lr < 0 or self.eta_min < 0 or self.weight_decay < 0:
            raise ConfigError(f"{name}: lr, eta_min and weight_decay must be >= 0")


@dataclass
class KDConfig:
    temperature: float = 4.0
    beta1: float = 1.0
    beta2: float = 1.0
    label_smoothing: float = 0.1
    mask_p: float = 0.5
    proj1_dropout: float = 0.2
    proj2_dropout: float = 0.4
    lambda_source: str = "heuristic"  # heuristic | explicit
    # explicit lambdas in component order (ce, proj1, proj2, logits, relation)
    lambdas: list = field(default_factory=lambda: [0.2, 0.2, 0.2, 0.2, 0.2])
    components: list = field(default_factory=lambda: list(COMPONENTS))
    heuristic_fraction: float = 0.2
    heuristic_epochs: int = 10
    heuristic_scores: list | None = None  # inject scores instead of measuring them

    def validate(self) -> None:
        if self.lambda_source not in ("heuristic", "explicit"):
            raise ConfigError(f"kd.lambda_source must be heuristic or explicit, got {self.lambda_source!r}")
        if len(self.lambdas) != 5:
            raise ConfigError("kd.lambdas needs five values (ce, proj1, proj2, logits, relation)")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown loss components {sorted(unknown)}; choose from {list(COMPONENTS)}")
        if not self.components:
            raise ConfigError("kd.components must enable at least one loss")
        if self.heuristic_scores is not None and len(self.heuristic_scores) != 5:
            raise ConfigError("kd.heuristic_scores needs five values")
        if not 0.0 < self.heuristic_fraction <= 1.0:
            raise ConfigError("kd.heuristic_fraction must lie in (0, 1]")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError(f"kd.mask_p {self.mask_p} outside [0, 1]")
        self.loss_weights(self.lambdas)

    def loss_weights(self, lambdas) -> LossWeights:
        return LossWeights(
            *[float(v) for v in lambdas],
            temperature=self.temperature,
            beta1=self.beta1,
            beta2=self.beta2,
            label_smoothing=self.label_smoothing,
        )


@dataclass
class ImbalanceConfig:
    mode: str = "none"  # none | wrs | focal
    alpha: float = 1.0
    gamma: float = 2.0

    def validate(self) -> None:
        if self.mode not in ("none", "wrs", "focal"):
            raise ConfigError(f"imbalance.mode must be none, wrs or focal, got {self.mode!r}")
        if self.alpha <= 0 or self.gamma < 0:
            raise ConfigError("focal loss needs alpha > 0 and gamma >= 0")


@dataclass
class PretrainConfig:
    """Auxiliary synthetic corpus the teacher is trained on before per-fold
    fine-tuning.  Its templates come from ``seed``, not the task's data seed,
    so it shares no classes or samples with the task."""

    enabled: bool = True
    classes: int = 8
    samples_per_class: int = 600
    sigma: float = 0.25
    seed: int = 1000
    epochs: int = 30

    def validate(self) -> None:
        if self.enabled and (self.classes < 2 or self.samples_per_class < 2 or self.epochs < 1):
            raise ConfigError("pretrain needs >= 2 classes, >= 2 samples per class and >= 1 epoch")

    def synthetic_spec(self, image_side: int, channels: int) -> SyntheticSpec:
        return SyntheticSpec([self.samples_per_class] * self.classes, image_side, channels, self.sigma, self.seed)


@dataclass
class CVConfig:
    folds: int = 5
    val_fraction: float = 0.1
    teacher_mode: str = "per_fold"  # per_fold | checkpoint
    teacher_checkpoint: str | None = None
    jobs: int = 1

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"cv.folds must be >= 2, got {self.folds}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("cv.val_fraction must lie in (0, 1)")
        if self.teacher_mode not in ("per_fold", "checkpoint"):
            raise ConfigError(f"cv.teacher_mode must be per_fold or checkpoint, got {self.teacher_mode!r}")
        if self.teacher_mode == "checkpoint" and not self.teacher_checkpoint:
            raise ConfigError("cv.teacher_mode=checkpoint needs cv.teacher_checkpoint")
        if self.jobs < 1:
            raise ConfigError("cv.jobs must be >= 1")


@dataclass
class ReportConfig:
    measure_latency: bool = True
    latency_iters: int = 30


def _teacher_schedule() -> ScheduleConfig:
    return ScheduleConfig(epochs=30, batch_size=16, lr=1e-3, weight_decay=1e-2, warmup=3, eta_min=1e-5, patience=8)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    teacher_train: ScheduleConfig = field(default_factory=_teacher_schedule)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    student_train: ScheduleConfig = field(default_factory=ScheduleConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    imbalance: ImbalanceConfig = field(default_factory=ImbalanceConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def validate(self) -> RunConfig:
        self.teacher_train.validate("teacher_train")
        self.pretrain.validate()
        if self.pretrain.enabled and self.pretrain.epochs <= self.teacher_train.warmup:
            raise ConfigError("pretrain.epochs must exceed teacher_train.warmup")
        self.student_train.validate("student_train")
        self.kd.validate()
        self.imbalance.validate()
        self.cv.validate()
        self.teacher.validate()
        self.student.validate()
        return self


def to_flat(cfg: RunConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = _plain(getattr(value, sub.name))
        else:
            flat[f.name] = _plain(value)
    return flat


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def from_flat(flat: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply dotted-key overrides to ``base`` (defaults when None)."""
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    for key, value in flat.items():
        set_key(cfg, key, value)
    return cfg


def set_key(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    target: Any = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {key!r} names a section, not a value")
    setattr(target, leaf, _coerce(key, current, value))


def _coerce(key: str, current, value):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, (list, tuple)) and isinstance(value, list):
        return value
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key} expects {type(current).__name__}, got {value!r}")


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with a JSON value; a bare word is taken as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
    for text in overrides or []:
        key, value = parse_override(text)
        flat[key] = value
    return from_flat(flat).validate()
