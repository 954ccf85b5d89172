"""Run configuration: a single TOML file per experiment.

Schema (all keys optional unless noted; defaults target the 32x32
synthetic desk benchmark):

    [run]
    name = "desk"              # run id stem; default: config file stem
    out_dir = "runs"           # parent directory for run outputs
    seed = 0

    [data]
    kind = "synthetic"         # "synthetic" or "folder"
    root = ""                  # folder kind: dataset root (required there)
    classes = 4                # synthetic kind
    per_class = 62
    image_hw = [32, 32]
    split_ratio = 0.8
    noise = 0.2                # synthetic texture noise level
    mean = [0.0, 0.0, 0.0]     # per-channel normalization after /255
    std = [1.0, 1.0, 1.0]

    [teacher]
    width = 0.25               # VGG width multiplier
    checkpoint = ""            # reuse a pretrained teacher checkpoint
    epochs = 20                # pretraining epochs when no checkpoint given
    lr = 0.02

    [student]
    stem_channels = 8
    stages = [ {out_channels = 16, blocks = 2, ghost_ratio = 0.25, stride = 2}, ... ]

    [train]
    epochs = 35
    batch_size = 32
    lr = 0.02
    lr_final = 0.0001
    momentum = 0.937
    weight_decay = 0.00005

    [distill]
    enabled = true
    temperature = 4.0
    weight_inter = 1.0
    weight_intra = 1.0
    weight_task = 1.0
    variant = "row_column"     # or "target_nontarget"
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backbone import StageSettings, StudentConfig, TeacherConfig
from .losses import DistillConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass(frozen=True)
class DataSettings:
    kind: str = "synthetic"
    root: str = ""
    classes: int = 4
    per_class: int = 62
    image_hw: tuple[int, int] = (32, 32)
    split_ratio: float = 0.8
    noise: float = 0.2
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TeacherSettings:
    width: float = 0.25
    checkpoint: str = ""
    epochs: int = 20
    lr: float = 0.02


@dataclass(frozen=True)
class RunSettings:
    name: str = "run"
    out_dir: str = "runs"
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataSettings = field(default_factory=DataSettings)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    student_stem: int = 8
    student_stages: tuple[StageSettings, ...] = (
        StageSettings(out_channels=16, blocks=2, ghost_ratio=0.25, stride=2),
        StageSettings(out_channels=32, blocks=3, ghost_ratio=0.5, stride=2),
    )
    train_epochs: int = 35
    batch_size: int = 32
    lr: float = 0.02
    lr_final: float = 0.0001
    momentum: float = 0.937
    weight_decay: float = 0.00005
    distill_enabled: bool = True
    distill: DistillConfig = field(default_factory=DistillConfig)
    config_hash: str = ""
    source_path: str = ""

    def num_classes(self) -> int:
        return self.data.classes

    def student_config(self, num_classes: int) -> StudentConfig:
        return StudentConfig(num_classes=num_classes, stem_channels=self.student_stem,
                             stages=self.student_stages)

    def teacher_config(self, num_classes: int) -> TeacherConfig:
        return TeacherConfig(num_classes=num_classes, width=self.teacher.width)

    def train_config(self, seed: int | None = None,
                     distill: DistillConfig | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.train_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_final=self.lr_final,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.run.seed if seed is None else seed,
            distill=self.distill if distill is None else distill,
        )

    def teacher_train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.teacher.epochs,
            batch_size=self.batch_size,
            lr=self.teacher.lr,
            lr_final=self.lr_final,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.run.seed if seed is None else seed,
            distill=DistillConfig(weight_inter=0.0, weight_intra=0.0),
        )


def _take(section: dict, section_name: str, key: str, kind, default):
    if key not in section:
        return default
    value = section.pop(key)
    origin = f"{section_name}.{key}"
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{origin}: expected {getattr(kind, '__name__', kind)}, "
                          f"got {type(value).__name__} ({value!r})")
    return value


def _reject_leftovers(section: dict, name: str) -> None:
    if section:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(section))}")


def _pair(section: dict, name: str, key: str, default):
    raw = _take(section, name, key, list, list(default))
    if len(raw) != len(default) or not all(isinstance(v, (int, float)) for v in raw):
        raise ConfigError(f"{name}.{key}: expected {len(default)} numbers, got {raw!r}")
    return tuple(raw)


def parse_run_config(raw: dict, name_default: str = "run",
                     config_hash: str = "", source_path: str = "") -> RunConfig:
    raw = dict(raw)

    run_sec = dict(raw.pop("run", {}))
    run = RunSettings(
        name=_take(run_sec, "run", "name", str, name_default),
        out_dir=_take(run_sec, "run", "out_dir", str, "runs"),
        seed=_take(run_sec, "run", "seed", int, 0),
    )
    _reject_leftovers(run_sec, "run")

    data_sec = dict(raw.pop("data", {}))
    kind = _take(data_sec, "data", "kind", str, "synthetic")
    if kind not in ("synthetic", "folder"):
        raise ConfigError(f"data.kind: expected 'synthetic' or 'folder', got {kind!r}")
    data = DataSettings(
        kind=kind,
        root=_take(data_sec, "data", "root", str, ""),
        classes=_take(data_sec, "data", "classes", int, 4),
        per_class=_take(data_sec, "data", "per_class", int, 62),
        image_hw=tuple(int(v) for v in _pair(data_sec, "data", "image_hw", (32, 32))),
        split_ratio=_take(data_sec, "data", "split_ratio", float, 0.8),
        noise=_take(data_sec, "data", "noise", float, 0.2),
        mean=_pair(data_sec, "data", "mean", (0.0, 0.0, 0.0)),
        std=_pair(data_sec, "data", "std", (1.0, 1.0, 1.0)),
    )
    _reject_leftovers(data_sec, "data")
    if not 0.0 < data.split_ratio < 1.0:
        raise ConfigError(f"data.split_ratio: must be in (0, 1), got {data.split_ratio}")
    if data.kind == "folder" and not data.root:
        raise ConfigError("data.root: required when data.kind = 'folder'")

    teacher_sec = dict(raw.pop("teacher", {}))
    teacher = TeacherSettings(
        width=_take(teacher_sec, "teacher", "width", float, 0.25),
        checkpoint=_take(teacher_sec, "teacher", "checkpoint", str, ""),
        epochs=_take(teacher_sec, "teacher", "epochs", int, 20),
        lr=_take(teacher_sec, "teacher", "lr", float, 0.02),
    )
    _reject_leftovers(teacher_sec, "teacher")

    student_sec = dict(raw.pop("student", {}))
    stem = _take(student_sec, "student", "stem_channels", int, 8)
    stages_raw = _take(student_sec, "student", "stages", list, None)
    _reject_leftovers(student_sec, "student")
    if stages_raw is None:
        stages = RunConfig.__dataclass_fields__["student_stages"].default
    else:
        stages = []
        for i, entry in enumerate(stages_raw):
            if not isinstance(entry, dict):
                raise ConfigError(f"student.stages[{i}]: expected a table")
            entry = dict(entry)
            where = f"student.stages[{i}]"
            if "out_channels" not in entry:
                raise ConfigError(f"{where}.out_channels: required")
            stages.append(StageSettings(
                out_channels=_take(entry, where, "out_channels", int, None),
                blocks=_take(entry, where, "blocks", int, 2),
                ghost_ratio=_take(entry, where, "ghost_ratio", float, 0.5),
                stride=_take(entry, where, "stride", int, 2),
                mix_enabled=_take(entry, where, "mix_enabled", bool, True),
            ))
            _reject_leftovers(entry, where)
        stages = tuple(stages)

    train_sec = dict(raw.pop("train", {}))
    train_kw = dict(
        train_epochs=_take(train_sec, "train", "epochs", int, 35),
        batch_size=_take(train_sec, "train", "batch_size", int, 32),
        lr=_take(train_sec, "train", "lr", float, 0.02),
        lr_final=_take(train_sec, "train", "lr_final", float, 0.0001),
        momentum=_take(train_sec, "train", "momentum", float, 0.937),
        weight_decay=_take(train_sec, "train", "weight_decay", float, 0.00005),
    )
    _reject_leftovers(train_sec, "train")

    distill_sec = dict(raw.pop("distill", {}))
    enabled = _take(distill_sec, "distill", "enabled", bool, True)
    try:
        distill = DistillConfig(
            temperature=_take(distill_sec, "distill", "temperature", float, 4.0),
            weight_inter=_take(distill_sec, "distill", "weight_inter", float, 1.0),
            weight_intra=_take(distill_sec, "distill", "weight_intra", float, 1.0),
            weight_task=_take(distill_sec, "distill", "weight_task", float, 1.0),
            variant=_take(distill_sec, "distill", "variant", str, "row_column"),
        )
    except ValueError as exc:
        raise ConfigError(f"distill: {exc}") from exc
    _reject_leftovers(distill_sec, "distill")

    _reject_leftovers(raw, "top level")

    try:
        cfg = RunConfig(
            run=run, data=data, teacher=teacher,
            student_stem=stem, student_stages=stages,
            distill_enabled=enabled, distill=distill,
            config_hash=config_hash, source_path=source_path,
            **train_kw,
        )
        # surface range errors (epochs, momentum, stage shapes, ...) now,
        # with exit-code-2 semantics, instead of mid-run
        cfg.train_config()
        cfg.teacher_train_config()
        probe_classes = max(2, cfg.data.classes)
        cfg.student_config(probe_classes)
        cfg.teacher_config(probe_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    blob = path.read_bytes()
    try:
        raw = tomllib.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: not valid TOML ({exc})") from exc
    digest = hashlib.sha256(blob).hexdigest()[:12]
    return parse_run_config(raw, name_default=path.stem, config_hash=digest,
                            source_path=str(path))
