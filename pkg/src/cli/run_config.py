"""Run configuration files and KEY=VALUE overrides."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.core.dataset_io import DataConfig
from src.core.exceptions import ConfigError
from src.core.model import CnnSpec, StageSpec
from src.core.normalization import NormConfig
from src.core.training import TrainConfig
from src.utils.config import settings


class RunConfigFile(BaseModel):
    """One training run: backbone, normalization, optimizer, data and output dir."""

    model_config = ConfigDict(extra="forbid")

    run_id: str = "run"
    norm: NormConfig = Field(default_factory=NormConfig)
    channels: List[int] = Field(default_factory=lambda: [32, 64, 128], min_length=1)
    convs_per_stage: int = Field(default=2, ge=1)
    downsample: bool = True
    init_seed: Optional[int] = Field(default=None, ge=0)  # None: use train.seed
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=lambda: DataConfig(data_dir=settings.data_dir))
    out_dir: str = Field(default_factory=lambda: settings.output_dir)

    def cnn_spec(self, num_classes: int, input_dims=(3, 32, 32)) -> CnnSpec:
        stages = [
            StageSpec(out_channels=c, norm=self.norm, downsample=self.downsample,
                      convs_per_stage=self.convs_per_stage)
            for c in self.channels
        ]
        init_seed = self.train.seed if self.init_seed is None else self.init_seed
        try:
            return CnnSpec(stages=stages, input_dims=tuple(input_dims), num_classes=num_classes, init_seed=init_seed)
        except ValidationError as e:
            raise ConfigError(f"Invalid model spec: {e}")

    @property
    def method(self) -> str:
        if self.train.trainer == "win_win":
            return "WIN-WIN"
        return self.norm.kind


def parse_override(item: str) -> tuple:
    """Split "a.b=VALUE"; VALUE is parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"Override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    if not key:
        raise ConfigError(f"Override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = document
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return document


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfigFile:
    """
    Read a JSON run config (or defaults) and apply overrides.

    Raises:
        ConfigError: Unreadable file, unknown keys or invalid values
    """
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r") as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if overrides:
        # Start from the full default document so nested overrides land on real sections
        base = RunConfigFile().model_dump(mode="json")
        document = _merge(base, document)
        document = apply_overrides(document, overrides)
    try:
        return RunConfigFile.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}")


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def echo_config(config: RunConfigFile, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.echo.json"
    with open(path, "w") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2)
    return path
