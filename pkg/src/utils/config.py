"""Configuration management: environment defaults and the TOML run config."""
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import tomli_w
from dotenv import load_dotenv
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from src.data.datasets import DatasetSpec
from src.distillation.engine import TrainConfig
from src.distillation.losses import HyperParams
from src.evaluation.metrics import FEATURE_EXTRACTORS
from src.models.generator import GeneratorSpec
from src.models.nets import ClassifierSpec
from src.utils.errors import ConfigurationError

# Load environment variables
load_dotenv()

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent.parent
CONFIGS_DIR = PROJECT_ROOT / "configs"
OUTPUT_DIR = Path(os.getenv("DFKD_OUTPUT_DIR", PROJECT_ROOT / "output"))
DATA_ROOT = Path(os.getenv("DFKD_DATA_ROOT", PROJECT_ROOT / "data"))

# Runtime
DEVICE = os.getenv("DFKD_DEVICE", "cpu")
LOG_LEVEL = os.getenv("DFKD_LOG_LEVEL", "INFO")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once; later calls only adjust the level."""
    level = (level or LOG_LEVEL).upper()
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level, format=LOG_FORMAT)
    root.setLevel(level)


# ==================== RUN CONFIG ====================

class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ModelsSection(_Section):
    teacher: ClassifierSpec = ClassifierSpec()
    student: ClassifierSpec = ClassifierSpec(feature_dim=64)
    teacher_checkpoint: Optional[str] = None
    adapter_hidden: Optional[Tuple[int, int]] = None
    adapter_bypass: bool = True


class ScheduleSection(_Section):
    """Distillation and pre-training schedule."""

    k_steps: int = Field(5, ge=1)
    epochs: int = Field(60, ge=1)
    iters_per_epoch: int = Field(50, ge=1)
    batch_size: int = Field(128, ge=2)
    student_lr: float = Field(0.1, ge=0)
    student_momentum: float = Field(0.9, ge=0, lt=1)
    student_weight_decay: float = Field(5e-4, ge=0)
    gen_lr: float = Field(1e-3, ge=0)
    gen_decay_epochs: Tuple[int, ...] = (5, 15)
    gen_decay_factor: float = Field(0.1, gt=0, lt=1)
    warmup_epochs: int = Field(5, ge=0)
    dtype: str = "float32"
    pretrain_epochs: int = Field(5, ge=1)
    pretrain_lr: float = Field(0.05, gt=0)
    pretrain_batch_size: int = Field(128, ge=1)


class DataSection(_Section):
    name: str = "mnist"
    root: str = str(DATA_ROOT / "mnist")
    mean: Tuple[float, ...] = (0.1307,)
    std: Tuple[float, ...] = (0.3081,)
    random_crop_pad: int = Field(0, ge=0)
    horizontal_flip: bool = False
    subset: Optional[int] = Field(None, ge=1)
    verify: bool = True

    def spec(self, split: str) -> DatasetSpec:
        train = split == "train"
        return DatasetSpec(
            name=self.name,
            root=self.root,
            split=split,
            mean=self.mean,
            std=self.std,
            random_crop_pad=self.random_crop_pad if train else 0,
            horizontal_flip=self.horizontal_flip if train else False,
        )


class EvalSection(_Section):
    eval_every: int = Field(10, ge=1)
    batch_size: int = Field(256, ge=1)
    fid_samples: int = Field(1000, ge=2)
    fidelity_per_class: int = Field(100, ge=1)
    grid_samples_per_class: int = Field(8, ge=1)
    extractor: str = "teacher-penultimate"

    @field_validator("extractor")
    @classmethod
    def _known_extractor(cls, value: str) -> str:
        if value not in FEATURE_EXTRACTORS:
            raise ValueError(
                f"unknown extractor {value!r}, choose from {sorted(FEATURE_EXTRACTORS)}"
            )
        return value


class OutputSection(_Section):
    dir: str = str(OUTPUT_DIR)
    name: str = "run"
    device: str = DEVICE
    deterministic: bool = False

    @property
    def run_dir(self) -> Path:
        return Path(self.dir) / self.name


class RunConfig(_Section):
    """Everything one CLI command needs, addressable by dotted path."""

    seed: int
    models: ModelsSection = ModelsSection()
    generator: GeneratorSpec = GeneratorSpec()
    hyperparams: HyperParams = HyperParams()
    schedule: ScheduleSection = ScheduleSection()
    data: Optional[DataSection] = None
    eval: EvalSection = EvalSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _check_consistency(self):
        problems = []
        teacher, student = self.models.teacher, self.models.student
        if teacher.num_classes != student.num_classes:
            problems.append(
                f"teacher has {teacher.num_classes} classes, student {student.num_classes}"
            )
        if self.generator.num_classes != teacher.num_classes:
            problems.append(
                f"generator conditions on {self.generator.num_classes} classes, "
                f"teacher predicts {teacher.num_classes}"
            )
        if tuple(self.generator.output_shape) != tuple(teacher.input_shape):
            problems.append(
                f"generator output {self.generator.output_shape} does not match "
                f"teacher input {teacher.input_shape}"
            )
        if tuple(student.input_shape) != tuple(teacher.input_shape):
            problems.append("teacher and student input shapes differ")
        if self.data is not None and len(self.data.mean) != teacher.input_shape[0]:
            problems.append(
                f"data normalization has {len(self.data.mean)} channels, "
                f"images have {teacher.input_shape[0]}"
            )
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def train_config(self) -> TrainConfig:
        schedule = self.schedule
        return TrainConfig(
            hp=self.hyperparams,
            k_steps=schedule.k_steps,
            epochs=schedule.epochs,
            iters_per_epoch=schedule.iters_per_epoch,
            batch_size=schedule.batch_size,
            student_lr=schedule.student_lr,
            student_momentum=schedule.student_momentum,
            student_weight_decay=schedule.student_weight_decay,
            gen_lr=schedule.gen_lr,
            gen_decay_epochs=schedule.gen_decay_epochs,
            gen_decay_factor=schedule.gen_decay_factor,
            warmup_epochs=schedule.warmup_epochs,
            dtype=schedule.dtype,
            eval_every=self.eval.eval_every,
            grid_samples_per_class=self.eval.grid_samples_per_class,
            fidelity_per_class=self.eval.fidelity_per_class,
            seed=self.seed,
        )


def parse_override(item: str) -> Tuple[List[str], Any]:
    """Split ``a.b=c`` into (["a", "b"], parsed value).

    Values are read as TOML scalars (``3``, ``0.5``, ``true``, ``[5, 15]``);
    anything that is not valid TOML is taken as a plain string.
    """
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(f"override '{item}' must look like section.key=value")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply dotted overrides to a raw (unvalidated) config mapping in place."""
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"override '{item}': '{part}' is not a section")
            node = child
        node[path[-1]] = value
    return data


def _format_validation(error: ValidationError) -> List[str]:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems.append(f"{location}: {item['msg']}")
    return problems


def validate_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping, collecting every problem into one error."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(_format_validation(e)) from e


def load_run_config(path: Optional[Path], overrides: Iterable[str] = ()) -> RunConfig:
    """Read a TOML config (or start empty), apply ``--set`` overrides, validate."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
    apply_overrides(data, overrides)
    return validate_run_config(data)


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Fully resolved mapping with every default spelled out (None fields omitted)."""
    return cfg.model_dump(mode="json", exclude_none=True)


def dump_run_config(cfg: RunConfig, path: Path) -> Path:
    """Write the effective config as TOML; loading it back yields an equal config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        tomli_w.dump(config_to_dict(cfg), f)
    return path
