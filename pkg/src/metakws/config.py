"""Run configuration: TOML file + command-line overrides -> resolved config.

Layout::

    data_root = "/data/speech_commands_v0.02"
    preset = "digits"
    seed = 0
    out = "runs/digits"

    [frontend]   # FrontendConfig fields
    [model]      # ModelConfig fields
    [episode]    # EpisodeConfig fields
    [train]      # TrainConfig fields
"""

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

import tomli
import tomli_w

from .audio import FrontendConfig
from .episodes import EpisodeConfig
from .meta_learn import TrainConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


SECTIONS = {"frontend": FrontendConfig, "model": ModelConfig,
            "episode": EpisodeConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    data_root: str = ""
    manifest: str = ""
    preset: str = "digits"
    seed: int = 0
    out: str = "runs/default"
    cache_dir: str = ""
    threads: int = 1
    max_shot: int = 0
    n_trials: int = 100
    base_seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in SECTIONS:
                value = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(value).items()}
            d[f.name] = value
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


_TOP_LEVEL = {f.name: f for f in fields(RunConfig) if f.name not in SECTIONS}


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int) and not isinstance(value, bool):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            return tuple(type(c)(v) for c, v in zip(current, value)) if len(value) == len(current) else tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None
    return value


def build_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge a parsed TOML mapping with dotted-key overrides (``train.alpha``)."""
    merged: Dict[str, Any] = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            merged.setdefault(section, {})[name] = value
        else:
            merged[key] = value

    base = RunConfig()
    top: Dict[str, Any] = {}
    parts: Dict[str, Any] = {}
    for key, value in merged.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            defaults = getattr(base, key)
            known = {f.name for f in fields(defaults)}
            kwargs = {}
            for name, v in value.items():
                if name not in known:
                    raise ConfigError(f"unknown config key '{key}.{name}'")
                kwargs[name] = _coerce(v, getattr(defaults, name), f"{key}.{name}")
            parts[key] = kwargs
        elif key in _TOP_LEVEL:
            top[key] = _coerce(value, getattr(base, key), key)
        else:
            raise ConfigError(f"unknown config key '{key}'")

    try:
        built = {name: cls(**parts.get(name, {})) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if "n_outputs" not in parts.get("model", {}):
        built["model"] = dataclasses.replace(built["model"], n_outputs=built["episode"].n_way)
    if built["model"].n_outputs != built["episode"].n_way:
        raise ConfigError(f"model.n_outputs={built['model'].n_outputs} does not match "
                          f"episode.n_new + episode.n_fixed = {built['episode'].n_way}")
    expected = built["frontend"].feature_shape()
    if tuple(built["model"].input_shape) != expected:
        if "input_shape" in parts.get("model", {}):
            raise ConfigError(f"model.input_shape {built['model'].input_shape} does not match "
                              f"front-end output {expected}")
        built["model"] = dataclasses.replace(built["model"], input_shape=expected)
    return RunConfig(**top, **built)


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(data, overrides)
