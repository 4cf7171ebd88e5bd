"""Python module with the structured run configuration and its resolution from file and flag overrides.

Resolution order: packaged ``config/config.yaml`` -> ``key = value`` lines of a
config file -> ``--set key=value`` flags -> ``--seed`` -> output directory.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from hydra import compose, initialize_config_dir
from hydra.core.config_store import ConfigStore
from hydra.core.global_hydra import GlobalHydra
from hydra.errors import HydraException
from omegaconf import II, DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from utilities.exceptions import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
OUT_ENV = "XNMOE_OUT"
DEFAULT_OUT = "./runs"


@dataclass
class ModelSchema:
    profile: str = "desk"
    num_classes: int = 7
    label_smoothing: float = 0.1
    input_size: Optional[int] = None
    conv_dropout: float = 0.1
    head_dropout: float = 0.5
    cnnfe1_kernels: Optional[List[int]] = None
    cnnfe1_filters: Optional[List[int]] = None
    cnnfe2_kernels: Optional[List[int]] = None
    cnnfe2_filters: Optional[List[int]] = None
    backbone_blocks: Optional[List[int]] = None
    backbone_base_filters: Optional[int] = None
    seed: int = II("seed")


@dataclass
class MoESchema:
    num_experts: int = 4
    top_k: int = 2
    expert_dim: Optional[int] = None
    renormalize: bool = False


@dataclass
class DataSchema:
    root: str = "./data"
    labels: str = "labels.csv"
    preset: Optional[str] = None
    classes: Optional[List[str]] = None
    batch_size: int = 32
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    validation: str = "carve"
    seed: int = II("seed")
    on_error: str = "abort"
    prefetch: int = 0


@dataclass
class TrainingSchema:
    epochs: int = 15
    batch_size: int = II("data.batch_size")
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lr_reduce_factor: float = 0.5
    lr_reduce_patience: int = 2
    min_lr: float = 1e-7
    early_stop_patience: int = 3
    seed: int = II("seed")
    checked: bool = False
    resume_from: Optional[str] = None
    plot_curves: bool = True


@dataclass
class GradCheckSchema:
    step: float = 1e-4
    layer_tolerance: float = 1e-4
    model_tolerance: float = 1e-3
    max_entries: int = 0
    batch_size: int = 2
    seed: int = II("seed")
    corrupt_op: Optional[str] = None


@dataclass
class FixtureSchema:
    out: Optional[str] = None
    samples_per_class: int = 8
    size: int = 224
    grayscale: bool = False
    with_bbox: bool = False
    test_fraction: Optional[float] = None
    seed: int = II("seed")


@dataclass
class EvalSchema:
    checkpoint: Optional[str] = None
    split: str = "test"


@dataclass
class LoggingSchema:
    level: str = "INFO"


@dataclass
class RunSchema:
    seed: int = 0
    out: Optional[str] = None
    model: ModelSchema = field(default_factory=ModelSchema)
    moe: MoESchema = field(default_factory=MoESchema)
    data: DataSchema = field(default_factory=DataSchema)
    training: TrainingSchema = field(default_factory=TrainingSchema)
    gradcheck: GradCheckSchema = field(default_factory=GradCheckSchema)
    fixture: FixtureSchema = field(default_factory=FixtureSchema)
    eval: EvalSchema = field(default_factory=EvalSchema)
    logging: LoggingSchema = field(default_factory=LoggingSchema)


ConfigStore.instance().store(name="run_schema", node=RunSchema)


def parse_config_file(path) -> List[str]:
    """
    Read a flat ``key = value`` file into override strings.

    ``#`` starts a comment; blank lines are ignored.

    Raises:
        ConfigError: On a line without ``=`` (the line number is reported)
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    overrides = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected 'key = value', got '{raw.strip()}'")
        overrides.append(f"{key.strip()}={value.strip()}")
    return overrides


def resolve_output_dir(out: Optional[str] = None) -> Path:
    return Path(out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def load_run_config(
    config_file: Optional[str] = None,
    sets: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> DictConfig:
    """
    Compose the run configuration.

    Args:
        config_file: Optional flat ``key = value`` file
        sets: ``key=value`` overrides applied after the file
        seed: Root seed override (sub-seeds follow it unless set explicitly)
        out: Output directory; falls back to ``$XNMOE_OUT`` then ``./runs``

    Returns:
        Resolved, read-only DictConfig

    Raises:
        ConfigError: On unknown keys, type errors or malformed overrides (the message names the key)
    """
    overrides = parse_config_file(config_file) if config_file else []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        overrides.append(item)
    if seed is not None:
        overrides.append(f"seed={int(seed)}")

    GlobalHydra.instance().clear()
    try:
        with initialize_config_dir(config_dir=str(CONFIG_DIR), version_base=None):
            config = compose(config_name="config", overrides=overrides)
        config.out = str(resolve_output_dir(out))
        OmegaConf.resolve(config)
    except (HydraException, OmegaConfBaseException) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    finally:
        GlobalHydra.instance().clear()
    OmegaConf.set_readonly(config, True)
    logging.getLogger(__name__).debug(f"Resolved configuration with overrides {overrides}")
    return config


def to_yaml(config: DictConfig) -> str:
    return OmegaConf.to_yaml(config, resolve=True)
