"""
Run configuration and its canonical text form.

The document is flat ``key = value`` text. The first line is
``schema_version = 1``; every other line is ``section.field = value`` (nested
sections add more dotted parts, e.g. ``data.case.extents``) in declaration
order. Tuples are space separated, booleans are ``true``/``false`` and unset
optional values are ``none``. Unknown keys are errors.
"""

import logging
import types
from pathlib import Path
from typing import Any, Literal, Union, get_args, get_origin

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from lesionseg.autodiff import set_default_dtype
from lesionseg.backbone import BackboneConfig
from lesionseg.curriculum import ScheduleConfig
from lesionseg.dataset import DatasetConfig
from lesionseg.errors import ConfigError
from lesionseg.guidance import GuidanceConfig
from lesionseg.metrics import MetricConfig
from lesionseg.refiner import RefinerConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_FILE = "run_config.txt"


class AblationConfig(BaseModel):
    seeds: tuple[int, ...] = Field((0, 1, 2), description="Training seeds per variant")
    workers: int = Field(1, ge=1, description="Parallel training processes")


class RunConfig(BaseModel):
    """Everything a run needs; a run is reproducible from this document alone."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, description="Seed for model initialisation and patch sampling")
    precision: Literal["float32", "float64"] = Field("float32", description="Engine dtype")
    output_dir: str = Field("runs/default", description="Default output directory")
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    refiner: RefinerConfig = Field(default_factory=RefinerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    def apply_precision(self) -> None:
        set_default_dtype(self.precision)

    def dumps(self) -> str:
        return dump_config(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


# ---- dumping ------------------------------------------------------------------


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(model: BaseModel, prefix: str = "") -> list[tuple[str, str]]:
    lines = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            lines.extend(_flatten(value, f"{key}."))
        else:
            lines.append((key, _format_value(value)))
    return lines


def dump_config(cfg: RunConfig) -> str:
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    lines.extend(f"{key} = {value}" for key, value in _flatten(cfg))
    return "\n".join(lines) + "\n"


# ---- loading ------------------------------------------------------------------


def _annotation_for(key: str) -> Any:
    model: type[BaseModel] = RunConfig
    parts = key.split(".")
    for depth, part in enumerate(parts):
        field = model.model_fields.get(part)
        if field is None:
            raise ConfigError(f"unknown config key {key!r}")
        annotation = field.annotation
        is_section = isinstance(annotation, type) and issubclass(annotation, BaseModel)
        if depth == len(parts) - 1:
            if is_section:
                raise ConfigError(f"{key!r} is a section, not a field")
            return annotation
        if not is_section:
            raise ConfigError(f"unknown config key {key!r}")
        model = annotation
    raise ConfigError(f"unknown config key {key!r}")


def _parse_value(raw: str, annotation: Any, key: str) -> Any:
    origin, args = get_origin(annotation), get_args(annotation)
    if origin in (Union, types.UnionType):
        if raw == "none" and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        return _parse_value(raw, options[0], key)
    if origin is tuple:
        items = raw.split()
        if len(args) == 2 and args[1] is Ellipsis:
            kinds = [args[0]] * len(items)
        elif len(args) == len(items):
            kinds = list(args)
        else:
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(items)}")
        return tuple(_parse_value(item, kind, key) for item, kind in zip(items, kinds))
    if origin is Literal:
        return raw
    try:
        if annotation is bool:
            if raw not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw == "true"
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return raw


def load_config_text(text: str) -> RunConfig:
    """
    Parse a canonical config document.

    Raises:
        ConfigError: On a missing or different schema version, an unknown or
            repeated key, or a value that fails validation
    """
    entries: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {number} is not 'key = value': {line!r}")
        key, value = key.strip(), value.strip()
        if key in entries:
            raise ConfigError(f"duplicate config key {key!r}")
        entries[key] = value

    version = entries.pop("schema_version", None)
    if version is None:
        raise ConfigError("config has no schema_version")
    if version != str(SCHEMA_VERSION):
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")

    nested: dict[str, Any] = {}
    for key, raw in entries.items():
        value = _parse_value(raw, _annotation_for(key), key)
        node = nested
        *sections, leaf = key.split(".")
        for section in sections:
            node = node.setdefault(section, {})
        node[leaf] = value

    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    cfg = load_config_text(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded config from {path}")
    return cfg
