from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union, get_args, get_origin, get_type_hints

from vitkd.module.data.dataset import DataConfig
from vitkd.module.distill.distill_losses import DistillConfig, GenBlockKind
from vitkd.module.train.trainer import TrainConfig
from vitkd.module.vit.vision_transformer import ViTConfig
from vitkd.util.errors import ConfigError, TokenGridError
from vitkd.util.export_utils import create_and_write, jsonable

RUN_CONFIG_FILE = "run_config.json"


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a run depends on, resolved before it starts
    """

    teacher: ViTConfig = field(default_factory=lambda: ViTConfig(depth=6, dim=64, heads=4))
    student: ViTConfig = field(default_factory=ViTConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "results"
    teacher_checkpoint: Optional[str] = None

    def teacher_path(self) -> str:
        """
        :return: teacher checkpoint path, `<out_dir>/teacher.vkd1` unless set
        """
        if self.teacher_checkpoint is not None:
            return self.teacher_checkpoint
        return str(Path(self.out_dir) / "teacher.vkd1")

    def validate(self) -> None:
        self.teacher.validate("teacher")
        self.student.validate("student")
        self.train.validate()
        self.data.validate()
        if not self.teacher.image_size == self.student.image_size == self.data.image_size:
            raise ConfigError(F"image sizes differ: teacher {self.teacher.image_size}, "
                              F"student {self.student.image_size}, data {self.data.image_size}")
        if self.teacher.num_patches != self.student.num_patches:
            raise TokenGridError(F"teacher grid {self.teacher.grid_size}x{self.teacher.grid_size} "
                                 F"and student grid {self.student.grid_size}x"
                                 F"{self.student.grid_size} differ")
        if not self.teacher.num_classes == self.student.num_classes == self.data.classes:
            raise ConfigError("teacher.num_classes, student.num_classes and data.classes differ")
        self.distill.validate(self.student.depth, self.teacher.depth)
        if self.distill.gen_block != GenBlockKind.CONV \
                and self.teacher.dim % self.distill.gen_heads != 0:
            raise ConfigError(F"distill.gen_heads {self.distill.gen_heads} does not divide "
                              F"teacher.dim {self.teacher.dim}")


def _join(path: str, key: str) -> str:
    return F"{path}.{key}" if path else key


def _coerce(hint: Any, value: Any, path: str) -> Any:
    if is_dataclass(hint):
        return _build(hint, value, path)
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None:
            return None
        inner = next(arg for arg in args if arg is not type(None))
        return _coerce(inner, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            raise ConfigError(F"{path}: {value!r} is not one of "
                              F"{[member.value for member in hint]}") from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(F"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], item, path) for item in value)
        if len(args) != len(value):
            raise ConfigError(F"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(arg, item, path) for arg, item in zip(args, value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(F"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(F"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(F"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str and not isinstance(value, str):
        raise ConfigError(F"{path}: expected a string, got {value!r}")
    return value


def _build(cls: type, raw: Any, path: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(F"{path or 'config'}: expected an object, got {raw!r}")
    hints = get_type_hints(cls)
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(F"unknown config key {_join(path, unknown[0])}")
    return cls(**{name: _coerce(hints[name], value, _join(path, name))
                  for name, value in raw.items()})


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    """
    :param raw: nested JSON object; missing keys take the defaults
    :return: typed config (not validated yet)
    """
    return _build(RunConfig, raw, "")


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return jsonable(asdict(cfg))


def parse_override(override: str) -> Sequence[Any]:
    """
    :param override: `dotted.key=value`, value parsed as JSON or kept as a string
    :return: key path and value
    """
    key, sep, text = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(F"override {override!r} is not of the form key=value")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.strip().split("."), value


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """
    :param cfg: base config
    :param overrides: `dotted.key=value` items, applied in order; keys must exist
    :return: new config
    """
    tree = to_dict(cfg)
    for override in overrides:
        keys, value = parse_override(override)
        node = tree
        for depth, key in enumerate(keys):
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(F"unknown config key {'.'.join(keys[:depth + 1])}")
            if depth == len(keys) - 1:
                node[key] = value
            else:
                node = node[key]
    return from_dict(tree)


def load_run_config(path: Optional[str] = None,
                    overrides: Sequence[str] = (),
                    seed: Optional[int] = None,
                    out_dir: Optional[str] = None) -> RunConfig:
    """
    Resolve a run config: defaults <- file <- --set overrides <- --seed/--out
    :param path: JSON config file, defaults only when None
    :param overrides: `dotted.key=value` items
    :param seed: shorthand for train.seed
    :param out_dir: output directory override
    :return: validated config
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(F"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fin:
                raw = json.load(fin)
        except json.JSONDecodeError as error:
            raise ConfigError(F"config file {path} is not valid JSON: {error}") from None
    extra = list(overrides)
    if seed is not None:
        extra.append(F"train.seed={seed}")
    if out_dir is not None:
        extra.append(F"out_dir={json.dumps(str(out_dir))}")
    cfg = apply_overrides(from_dict(raw), extra)
    cfg.validate()
    return cfg


def echo_run_config(cfg: RunConfig) -> str:
    """
    Write the resolved config to `<out_dir>/run_config.json`; the file re-runs as a config
    :return: written path
    """
    path = str(Path(cfg.out_dir) / RUN_CONFIG_FILE)
    create_and_write(to_dict(cfg), path, sort_keys=False)
    return path
