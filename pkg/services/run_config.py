"""
Run configuration: typed sections loaded from JSON, overridden from the
command line and echoed to the run directory.
"""
import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from services.encoding import HashGridConfig, ShConfig
from services.errors import ConfigError
from services.field import FieldConfig
from services.sampler import GridConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_rays: int = 1024
    epochs: int = 5
    steps_per_epoch: Optional[int] = None  # None: one pass over every training ray
    lr: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_gamma: float = 0.9
    lambda_solar: float = 0.05
    solar_rays: int = 128
    solar_samples: int = 64
    robust: bool = True
    robust_percentile: float = 0.5
    robust_warmup_steps: int = 1000
    patch_sampling: bool = False
    patch_size: int = 16
    seed: int = 0
    save_optimizer: bool = False
    render_chunk: int = 4096
    log_every: int = 50

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ConfigError("train.batch_rays must be >= 1", "train.batch_rays")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0", "train.epochs")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("train.steps_per_epoch must be >= 1", "train.steps_per_epoch")
        if not 0.0 < self.robust_percentile <= 1.0:
            raise ConfigError("train.robust_percentile must lie in (0, 1]", "train.robust_percentile")
        if self.patch_sampling and self.batch_rays % (self.patch_size ** 2):
            raise ConfigError("train.batch_rays must be a multiple of patch_size^2 in patch mode",
                              "train.batch_rays")
        if self.solar_rays < 0 or self.solar_samples < 1:
            raise ConfigError("train.solar_rays >= 0 and train.solar_samples >= 1 required", "train.solar_rays")


SECTIONS = {
    "hash": HashGridConfig,
    "sh": ShConfig,
    "field": FieldConfig,
    "grid": GridConfig,
    "train": TrainConfig,
}

DESK_PRESET: Dict[str, Dict[str, Any]] = {
    "hash": {"table_size": 2 ** 15, "levels": 6},
    "grid": {"resolution": 128},
}


@dataclass
class RunConfig:
    hash: HashGridConfig = dc_field(default_factory=HashGridConfig)
    sh: ShConfig = dc_field(default_factory=ShConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    grid: GridConfig = dc_field(default_factory=GridConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        return apply_overrides(cls(), d)

    def canonical_json(self, indent: Optional[int] = None) -> str:
        if indent is None:
            return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)


def _coerce(value: Any, default: Any, key: str) -> Any:
    if value is None:
        return value
    if default is None:
        # the optional fields are counts
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects an integer or null, got {value!r}", key)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key} expects a boolean, got {value!r}", key)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(_coerce(v, d, key) for v, d in zip(value, default))
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}", key)
    return value


def _nested(overrides: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Accept {"train": {"epochs": 2}} and {"train.epochs": 2} alike."""
    nested: Dict[str, Dict[str, Any]] = {}
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = value
        elif isinstance(value, dict):
            nested.setdefault(key, {}).update(value)
        else:
            raise ConfigError(f"unknown config key '{key}'", key)
    return nested


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """New RunConfig with overrides applied; unknown sections or keys raise ConfigError."""
    result = copy.deepcopy(cfg)
    for section, values in _nested(overrides).items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}'", section)
        current = getattr(result, section)
        known = {f.name for f in fields(current)}
        changes = {}
        for name, value in values.items():
            key = f"{section}.{name}"
            if name not in known:
                raise ConfigError(f"unknown config key '{key}'", key)
            default = getattr(SECTIONS[section](), name)
            changes[name] = _coerce(value, default if default is not None else getattr(current, name), key)
        try:
            setattr(result, section, replace(current, **changes))
        except TypeError as e:
            raise ConfigError(str(e), section)
    return result


def load_run_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None,
                    preset: Optional[str] = None) -> RunConfig:
    """Defaults < preset < config file < overrides."""
    cfg = RunConfig()
    if preset:
        if preset != "desk":
            raise ConfigError(f"unknown preset '{preset}'", "preset")
        cfg = apply_overrides(cfg, DESK_PRESET)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = apply_overrides(cfg, data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def write_effective_config(cfg: RunConfig, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(cfg.canonical_json(indent=2) + "\n")
    log.info("effective config written to %s", path)
    return path


def resolve_threads(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.getenv("SATNGP_THREADS")
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"SATNGP_THREADS must be an integer, got {env!r}", "SATNGP_THREADS")
    if n < 1:
        raise ConfigError("SATNGP_THREADS must be >= 1", "SATNGP_THREADS")
    return n
