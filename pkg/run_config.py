"""
Layered experiment configuration.

Effective values are the dataclass defaults, then a --config file (plain
`key = value` lines or YAML sections), then --set overrides. Keys are
dotted by section: net.*, train.*, loss.*, synth.*, run.*.
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from errors import ConfigError
from losses import LossConfig, LossKind, parse_loss_name
from segnet import NetConfig
from synthdata import SynthConfig
from trainer import TrainConfig

load_dotenv()
logger = logging.getLogger(__name__)

COMMANDS = (
    "gen-data",
    "train",
    "eval",
    "sweep-gamma",
    "sweep-threshold",
    "compare-losses",
    "render-heatmap",
)
GAMMA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_LOSSES = (
    "CE",
    "DSC",
    "DSC++",
    "Tversky",
    "Tversky++",
    "FocalTversky",
    "FocalTversky++",
    "Combo",
    "Combo++",
    "UnifiedFocal",
    "UnifiedFocal++",
)
TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")


def _default_workers() -> int:
    raw = os.getenv("CALSEG_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CALSEG_WORKERS must be an integer, got {raw!r}")


@dataclass(frozen=True)
class RunConfig:
    """Settings of the experiment drivers themselves."""
    data: str = ""
    checkpoint: str = ""
    prediction: str = ""
    dataset_name: str = "vessels"
    split_seed: int = 0
    threshold: float = 0.5
    gammas: Tuple[float, ...] = GAMMA_GRID
    thresholds: Tuple[float, ...] = THRESHOLD_GRID
    losses: Tuple[str, ...] = DEFAULT_LOSSES
    hist_bins: int = 20
    bootstrap_resamples: int = 10000
    bootstrap_seed: int = 0
    ci_level: float = 0.95
    workers: int = field(default_factory=_default_workers)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"run.threshold must lie in (0, 1), got {self.threshold}")
        if not self.gammas or min(self.gammas) <= 0:
            raise ConfigError(f"run.gammas must be a non-empty list of positive values, got {self.gammas}")
        if not self.thresholds or not all(0.0 < t < 1.0 for t in self.thresholds):
            raise ConfigError(f"run.thresholds must lie in (0, 1), got {self.thresholds}")
        if not self.losses:
            raise ConfigError("run.losses must name at least one loss")
        for name in self.losses:
            parse_loss_name(name)
        if self.hist_bins < 2:
            raise ConfigError(f"run.hist_bins must be >= 2, got {self.hist_bins}")
        if self.bootstrap_resamples < 1:
            raise ConfigError(f"run.bootstrap_resamples must be >= 1, got {self.bootstrap_resamples}")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError(f"run.ci_level must lie in (0, 1), got {self.ci_level}")
        if self.workers < 1:
            raise ConfigError(f"run.workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def flat(self) -> Dict[str, object]:
        """Every effective value under its dotted key."""
        values: Dict[str, object] = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                values[f"{section}.{f.name}"] = getattr(obj, f.name)
        return values


SECTIONS = ("net", "train", "loss", "synth", "run")
SECTION_TYPES = {
    "net": NetConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "synth": SynthConfig,
    "run": RunConfig,
}


#=========================================== VALUE PARSING ===========================================

def _split_list(raw) -> List[str]:
    if isinstance(raw, (list, tuple)):
        return [str(v).strip() for v in raw]
    return [part.strip() for part in str(raw).replace(";", ",").split(",") if part.strip()]


def _coerce(key: str, default, raw):
    """Converts raw (string or YAML scalar/list) to the type of the field's default."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            word = str(raw).strip().lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(word)
        if isinstance(default, Enum):
            return type(default)(raw.value if isinstance(raw, Enum) else str(raw).strip())
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            return float(str(raw).strip())
        if isinstance(default, tuple):
            parts = _split_list(raw)
            if key == "synth.size" and len(parts) == 1 and "x" in parts[0]:
                parts = parts[0].split("x")
            if default and isinstance(default[0], str):
                return tuple(parts)
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return "" if raw is None else str(raw).strip()
    except ValueError:
        raise ConfigError(f"malformed value for {key}: {raw!r}")


def format_value(value) -> str:
    """Inverse of _coerce for resolved_config.txt."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


#=========================================== SOURCES ===========================================

def parse_key_value_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """`key = value` lines; `#` starts a comment; blank lines are skipped."""
    values: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line.strip()!r}")
        key, value = text.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _flatten_yaml(data: Mapping, source: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for section, body in data.items():
        if not isinstance(body, Mapping):
            raise ConfigError(f"{source}: section '{section}' must be a mapping")
        for key, value in body.items():
            values[f"{section}.{key}"] = value
    return values


def read_config_file(path: str) -> Dict[str, object]:
    """Loads a plain key=value file, or a YAML file when the name ends in .yaml/.yml."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        if path.endswith((".yaml", ".yml")):
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: invalid YAML ({e})")
            if not isinstance(data, Mapping):
                raise ConfigError(f"{path}: top level must be a mapping of sections")
            return _flatten_yaml(data, path)
        return parse_key_value_lines(f, path)


def parse_overrides(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """--set key=value arguments."""
    return parse_key_value_lines(pairs or (), "--set")


#=========================================== BUILDING ===========================================

def build_config(values: Mapping[str, object]) -> ExperimentConfig:
    """
    Applies dotted overrides onto the defaults.

    Parameters:
        values: Dotted key -> raw value.

    Returns:
        ExperimentConfig: Validated configuration.

    Raises:
        ConfigError: Unknown key, malformed value or invalid setting.
    """
    grouped: Dict[str, Dict[str, object]] = {section: {} for section in SECTIONS}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        known = {f.name for f in fields(SECTION_TYPES[section])}
        if name not in known:
            raise ConfigError(f"unknown config key '{key}'")
        grouped[section][name] = raw

    defaults = ExperimentConfig(run=RunConfig(workers=1))
    built = {}
    for section in SECTIONS:
        base = getattr(defaults, section)
        raw_kind = grouped[section].pop("kind", None) if section == "loss" else None
        typed = {
            name: _coerce(f"{section}.{name}", getattr(base, name), raw)
            for name, raw in grouped[section].items()
        }
        if section == "loss":
            # kind accepts list names too ("Tversky++"); an explicit loss.plusplus wins
            label = LossKind.DSC.value if raw_kind is None else str(getattr(raw_kind, "value", raw_kind)).strip()
            named = parse_loss_name(label)
            typed.setdefault("plusplus", named.plusplus)
            built[section] = LossConfig.defaults(named.kind, **typed)
        elif section == "run" and "workers" not in typed:
            built[section] = RunConfig(**typed)
        else:
            built[section] = replace(base, **typed)
    cfg = ExperimentConfig(**built)
    if not cfg.run.data:
        # generated images must fit the net; a dataset on disk is checked when loaded
        cfg.net.check_image(*cfg.synth.size)
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Iterable[str]] = None) -> ExperimentConfig:
    """defaults <- config file <- --set overrides."""
    values: Dict[str, object] = {}
    if path:
        values.update(read_config_file(path))
    values.update(parse_overrides(overrides))
    cfg = build_config(values)
    logger.debug(f"resolved {len(values)} explicit settings")
    return cfg


def write_resolved_config(cfg: ExperimentConfig, out_dir: str) -> str:
    """Sorted `key = value` lines that load_config() reads back to the same config."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.txt")
    lines = [f"{key} = {format_value(value)}\n" for key, value in sorted(cfg.flat().items())]
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)
    return path
