"""
Configuration settings for the careseg toolkit.

Process-level settings come from Streamlit secrets or environment variables
(.env supported). Run-level settings live in the PipelineConfig dataclass
tree, loaded from a single JSON file on top of a named preset.
"""
import os
import json
import logging
from dataclasses import dataclass, field, asdict, fields, is_dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from utils.errors import ConfigError

# Load environment variables
load_dotenv()

# Try to import streamlit for secrets (only available when running in Streamlit)
try:
    import streamlit as st
    _streamlit_available = True
except ImportError:
    _streamlit_available = False

logger = logging.getLogger(__name__)


def get_config_value(key, default=None):
    """Get configuration value from Streamlit secrets or environment variables."""
    if _streamlit_available:
        try:
            if hasattr(st, 'secrets') and 'careseg' in st.secrets:
                careseg_secrets = st.secrets['careseg']
                short_key = key.lower().replace('careseg_', '')
                if short_key in careseg_secrets:
                    return careseg_secrets[short_key]
        except Exception:
            pass

    # Fallback to environment variables
    return os.getenv(key, default)


# Application Settings
DEBUG = str(get_config_value("CARESEG_DEBUG", "False")).lower() == "true"
LOG_LEVEL = str(get_config_value("CARESEG_LOG_LEVEL", "DEBUG" if DEBUG else "INFO")).upper()
MAX_RETRIES = int(get_config_value("CARESEG_MAX_RETRIES", "3"))
WORKERS = int(get_config_value("CARESEG_WORKERS", "1"))
DEFAULT_PRESET = str(get_config_value("CARESEG_PRESET", "desk"))
DATA_ROOT = str(get_config_value("CARESEG_DATA_ROOT", "runs"))
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# UI Configuration
APP_TITLE = "CaRe Segmentation Reports"
APP_ICON = "🫀"
PAGE_LAYOUT = "wide"

# Label palette (BG, LV, MYO, MIT, MVO) for overlays and charts
LABEL_COLORS = [
    "#000000",  # BG
    "#DC2626",  # LV
    "#00D4AA",  # MYO
    "#F97316",  # MIT
    "#1E3A8A",  # MVO
]
CHART_COLORS = LABEL_COLORS[1:]

EXPORT_FORMATS = ["CSV", "JSON", "Excel"]


@dataclass
class GridConfig:
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)


@dataclass
class NetConfig:
    levels: int = 3
    base_filters: int = 8
    pre_convs: int = 2
    post_convs: int = 3
    dropout_rate: float = 0.1
    slope: float = 0.1
    dtype: str = "float32"


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    ema_warmup: bool = False
    seed: int = 0
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    epsilon: float = 1e-7
    weighting: str = "volume"
    augment: bool = True
    checkpoint_every: int = 500
    log_every: int = 50


@dataclass
class AugmentRanges:
    """Uniform sampling ranges for training augmentation (half-widths or bounds)."""
    translation: float = 20.0
    rotation: float = 0.35
    iso_scale: Tuple[float, float] = (0.8, 1.2)
    aniso_scale: Tuple[float, float] = (0.9, 1.1)
    elastic_nodes: int = 8
    elastic_magnitude: float = 15.0
    intensity_shift: float = 0.2
    intensity_scale: Tuple[float, float] = (0.6, 1.4)
    label_shift: float = 0.2
    label_scale: Tuple[float, float] = (0.9, 1.1)


@dataclass
class CorpusConfig:
    count: int = 60
    seed: int = 0
    train_fraction: float = 2.0 / 3.0
    d8_fraction: float = 1.0 / 3.0
    mvo_fraction: float = 0.66
    native_spacing: Tuple[float, float, float] = (1.6, 1.6, 6.0)
    noise_std: float = 0.08


@dataclass
class PostprocessConfig:
    disconnected_3d: bool = True
    disconnected_2d: bool = True
    topmost_slice: bool = True
    outliers: bool = True
    base_at: str = "z_max"
    min_volume_ml: float = 0.1
    window: Tuple[int, int, int] = (9, 9, 5)
    sigma_mm: float = 2.0


@dataclass
class EnsembleConfig:
    size: int = 3
    average: str = "probs"


@dataclass
class PathsConfig:
    corpus_dir: str = os.path.join(DATA_ROOT, "corpus")
    checkpoint_dir: str = os.path.join(DATA_ROOT, "checkpoints")
    prediction_dir: str = os.path.join(DATA_ROOT, "predictions")
    report_dir: str = os.path.join(DATA_ROOT, "reports")


@dataclass
class PipelineConfig:
    preset: str = "desk"
    grid: GridConfig = field(default_factory=GridConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def get_preset(name: str = DEFAULT_PRESET) -> PipelineConfig:
    """
    Build one of the named presets.

    Args:
        name (str): 'desk' (laptop-scale defaults) or 'full' (full-scale values)

    Returns:
        PipelineConfig: Fresh config instance
    """
    if name == "desk":
        # voxel-unit ranges shrink with the 32^3 grid (a quarter of the full-scale one)
        return PipelineConfig(preset="desk", augment=AugmentRanges(translation=5.0, elastic_magnitude=3.75))
    if name == "full":
        return PipelineConfig(
            preset="full",
            grid=GridConfig(dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0)),
            net=NetConfig(levels=5, base_filters=64),
            train=TrainConfig(iterations=200000, checkpoint_every=10000, log_every=500),
            ensemble=EnsembleConfig(size=10),
        )
    raise ConfigError(f"Unknown preset '{name}', expected 'desk' or 'full'")


def _merge(instance, overrides: Dict[str, Any], path: str = ""):
    """Return a copy of a config dataclass with JSON overrides applied."""
    known = {f.name: f for f in fields(instance)}
    updates = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{path}{key}'")
        current = getattr(instance, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section '{path}{key}' must be an object")
            updates[key] = _merge(current, value, f"{path}{key}.")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"Config key '{path}{key}' expects {len(current)} values")
            updates[key] = tuple(type(c)(v) for c, v in zip(current, value))
        elif isinstance(current, bool):
            updates[key] = bool(value)
        elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"Config key '{path}{key}' must be numeric")
        elif isinstance(current, float):
            updates[key] = float(value)
        elif isinstance(current, int):
            if int(value) != value:
                raise ConfigError(f"Config key '{path}{key}' must be an integer")
            updates[key] = int(value)
        else:
            updates[key] = value
    return replace(instance, **updates)


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    """
    Resolve a config dictionary against its preset.

    Args:
        data (dict): Parsed JSON config; optional 'preset' key

    Returns:
        PipelineConfig: Validated configuration
    """
    data = dict(data)
    preset = data.pop("preset", DEFAULT_PRESET)
    config = _merge(get_preset(preset), data)
    validate_config(config)
    return config


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """
    Load a pipeline config file; without a path the default preset is used.

    Args:
        path (str, optional): JSON config file

    Returns:
        PipelineConfig: Validated configuration
    """
    if path is None:
        config = get_preset(DEFAULT_PRESET)
        validate_config(config)
        return config
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    config = config_from_dict(data)
    logger.info(f"Loaded config from {path} (preset {config.preset})")
    return config


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    """Fully resolved config as plain JSON-compatible data."""
    data = asdict(config)

    def _lists(value):
        if isinstance(value, dict):
            return {k: _lists(v) for k, v in value.items()}
        if isinstance(value, tuple):
            return list(value)
        return value

    return _lists(data)


def save_config(config: PipelineConfig, path: str) -> None:
    """Write the resolved config as sorted JSON."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


# Validation
def validate_config(config: PipelineConfig) -> bool:
    """Validate a pipeline configuration, raising ConfigError with every problem found."""
    problems: List[str] = []

    if len(config.grid.dims) != 3 or any(d < 1 for d in config.grid.dims):
        problems.append("grid.dims must be three positive integers")
    if any(s <= 0 for s in config.grid.spacing):
        problems.append("grid.spacing must be positive")
    factor = 2 ** (config.net.levels - 1) if config.net.levels >= 1 else 1
    if any(d % factor for d in config.grid.dims):
        problems.append(f"grid.dims must be divisible by 2**(levels-1) = {factor}")
    if config.net.levels < 1 or config.net.base_filters < 1:
        problems.append("net.levels and net.base_filters must be >= 1")
    if config.net.pre_convs < 1 or config.net.post_convs < 0:
        problems.append("net.pre_convs must be >= 1 and net.post_convs >= 0")
    if not 0.0 <= config.net.dropout_rate < 1.0:
        problems.append("net.dropout_rate must lie in [0, 1)")
    if config.net.dtype not in ("float32", "float64"):
        problems.append("net.dtype must be 'float32' or 'float64'")
    if config.train.iterations < 1:
        problems.append("train.iterations must be >= 1")
    if config.train.lr <= 0 or config.train.epsilon <= 0 or config.train.adam_eps <= 0:
        problems.append("train.lr, train.epsilon and train.adam_eps must be positive")
    if not 0.0 <= config.train.ema_decay < 1.0:
        problems.append("train.ema_decay must lie in [0, 1)")
    if any(lam < 0 for lam in config.train.lambdas):
        problems.append("train.lambdas must be non-negative")
    if config.train.weighting not in ("volume", "inverse-square"):
        problems.append("train.weighting must be 'volume' or 'inverse-square'")
    if config.train.checkpoint_every < 1 or config.train.log_every < 1:
        problems.append("train.checkpoint_every and train.log_every must be >= 1")
    if config.augment.translation < 0 or config.augment.rotation < 0:
        problems.append("augment.translation and augment.rotation must be non-negative")
    if config.augment.elastic_nodes < 2:
        problems.append("augment.elastic_nodes must be >= 2")
    if config.corpus.count < 1 or not 0.0 < config.corpus.train_fraction <= 1.0:
        problems.append("corpus.count must be >= 1 and corpus.train_fraction in (0, 1]")
    if config.ensemble.size < 1:
        problems.append("ensemble.size must be >= 1")
    if config.ensemble.average not in ("probs", "logits"):
        problems.append("ensemble.average must be 'probs' or 'logits'")
    if config.postprocess.base_at not in ("z_max", "z_min"):
        problems.append("postprocess.base_at must be 'z_max' or 'z_min'")
    if config.postprocess.sigma_mm <= 0 or config.postprocess.min_volume_ml < 0:
        problems.append("postprocess.sigma_mm must be positive, min_volume_ml non-negative")
    if any(w < 1 or w % 2 == 0 for w in config.postprocess.window):
        problems.append("postprocess.window sizes must be odd and positive")

    if problems:
        raise ConfigError("Invalid configuration: " + "; ".join(problems))
    return True


def is_config_valid(config: PipelineConfig) -> bool:
    """Check if configuration is valid without raising exceptions."""
    try:
        validate_config(config)
        return True
    except ConfigError:
        return False
