"""Alternating min/max distillation loop.

Each outer iteration runs ``k_steps`` student updates on fresh synthetic
batches (generator and teacher frozen), then one generator update (student,
adapter and teacher frozen). The engine only ever sees the teacher and its BN
snapshot; real data enters through the optional ``on_epoch_end`` callback.
"""
import logging
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from src.distillation.losses import (
    HyperParams,
    RepresentationPair,
    generator_terms,
    scl_loss,
    student_terms,
)
from src.evaluation.export import export_grid
from src.evaluation.metrics import conditional_fidelity
from src.models.generator import (
    ConditionalGenerator,
    GeneratorSpec,
    build_generator,
    generate,
    generator_parameters,
    sample_noise,
)
from src.models.nets import (
    Adapter,
    BNStatsRecorder,
    BNStatsSnapshot,
    Classifier,
    ClassifierSpec,
    PixelNormalizer,
    adapter_map,
    build_adapter,
    build_classifier,
    forward_with_features,
    frozen,
)
from src.utils.checkpoint import CheckpointBundle, save_bundle
from src.utils.errors import DivergenceError, StructureError
from src.utils.reports import MetricsLog
from src.utils.seeding import resolve_dtype

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
EVAL_FILE = "eval.jsonl"
RESUME_DIR = "checkpoint"
STUDENT_DIR = "student"
GENERATOR_DIR = "generator"
SAMPLES_DIR = "samples"
GEN_BETAS = (0.5, 0.999)


class TrainConfig(BaseModel):
    """Optimizer, schedule and loop settings of one distillation run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hp: HyperParams = HyperParams()
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
    eval_every: int = Field(10, ge=1)
    grid_samples_per_class: int = Field(8, ge=1)
    fidelity_per_class: int = Field(100, ge=1)
    seed: int = 0

    @field_validator("gen_decay_epochs")
    @classmethod
    def _sorted_epochs(cls, value):
        if any(e < 0 for e in value):
            raise ValueError(f"gen_decay_epochs must be non-negative, got {value}")
        return tuple(sorted(value))

    @property
    def steps_per_epoch(self) -> int:
        return self.iters_per_epoch * (self.k_steps + 1)


def kl_only_baseline_toggle(cfg: TrainConfig) -> TrainConfig:
    """Same config with alpha = gamma = eta = 0: BNS and KL only."""
    return cfg.model_copy(update={
        "hp": cfg.hp.model_copy(update={"alpha": 0.0, "gamma": 0.0, "eta": 0.0}),
    })


def student_lr_factor(iteration: int, total_iterations: int, warmup_iterations: int) -> float:
    """Linear warm-up, then cosine annealing that reaches 0 once every iteration has run.

    Counted in outer iterations. Warm-up is capped at half of the run so the
    cosine part always has room.
    """
    warmup = max(0, min(warmup_iterations, total_iterations // 2))
    if iteration < warmup:
        return (iteration + 1) / warmup
    span = max(1, total_iterations - warmup)
    progress = min(1.0, (iteration - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))



class DistillResult(NamedTuple):
    student_checkpoint: Path
    generator_checkpoint: Path
    metrics_log: Path


def _finite_check(stage: str, record: Dict[str, float], step: Optional[int]) -> None:
    bad = [name for name, value in record.items() if not math.isfinite(value)]
    if bad:
        raise DivergenceError(stage, record, bad, step)


def _as_record(terms: Dict[str, torch.Tensor]) -> Dict[str, float]:
    return {name: float(value.detach()) for name, value in terms.items()}


def _identity(x: torch.Tensor) -> torch.Tensor:
    return x


# ==================== STAGES ====================

def min_stage_step(teacher: Classifier, student: Classifier, adapter: Adapter,
                   generator: ConditionalGenerator, cfg: TrainConfig,
                   optimizer: torch.optim.Optimizer, rng: torch.Generator,
                   normalizer: Optional[Callable] = None,
                   step: Optional[int] = None) -> Dict[str, float]:
    """One student (and adapter) update on a fresh synthetic batch.

    Returns:
        Loss record {kl, r_l2, ikd, ce, total, adapter_scl}; ``total`` is the
        student objective alone.

    Raises:
        DivergenceError: A component is not finite (no update is applied)
    """
    normalizer = normalizer or _identity
    param = next(generator.parameters())
    teacher.eval()
    student.train()
    adapter.train()
    generator.train()

    cn = sample_noise(cfg.batch_size, generator.latent_dim, generator.num_classes,
                      rng=rng, device=param.device, dtype=param.dtype)
    with torch.no_grad():
        x = normalizer(generate(generator, cn))
        t_out = forward_with_features(teacher, x)
    s_out = forward_with_features(student, x)
    terms = student_terms(t_out.logits, s_out.logits, cn.y, cfg.hp)

    objective = terms["total"]
    if cfg.hp.gamma and not adapter.is_identity:
        # adapter sees detached student features so the student update stays unchanged
        pair = RepresentationPair(t_out.features, adapter_map(adapter, s_out.features.detach()),
                                  cn.y)
        terms["adapter_scl"] = scl_loss(pair, cfg.hp.tau, cfg.hp.scl_reduction)
        objective = objective + terms["adapter_scl"]
    else:
        terms["adapter_scl"] = objective.new_zeros(())

    record = _as_record(terms)
    _finite_check("min", record, step)
    optimizer.zero_grad(set_to_none=True)
    if objective.requires_grad:
        objective.backward()
        optimizer.step()
    return record


def max_stage_step(teacher: Classifier, student: Classifier, adapter: Adapter,
                   generator: ConditionalGenerator, snapshot: BNStatsSnapshot,
                   cfg: TrainConfig, optimizer: torch.optim.Optimizer, rng: torch.Generator,
                   normalizer: Optional[Callable] = None,
                   step: Optional[int] = None) -> Dict[str, float]:
    """One generator update on a fresh synthetic batch.

    Returns:
        Loss record {kl, r_l2, ikd, bns, scl, ce, total}

    Raises:
        DivergenceError: A component is not finite (no update is applied)
    """
    normalizer = normalizer or _identity
    param = next(generator.parameters())
    teacher.eval()
    student.eval()
    adapter.eval()
    generator.train()

    cn = sample_noise(cfg.batch_size, generator.latent_dim, generator.num_classes,
                      rng=rng, device=param.device, dtype=param.dtype)
    with frozen(teacher, student, adapter):
        x = normalizer(generate(generator, cn))
        with BNStatsRecorder(teacher) as recorder:
            t_out = forward_with_features(teacher, x)
        s_out = forward_with_features(student, x)
        pair = None
        if cfg.hp.gamma:
            pair = RepresentationPair(t_out.features, adapter_map(adapter, s_out.features), cn.y)
        terms = generator_terms(t_out.logits, s_out.logits, cn.y, pair,
                                snapshot, recorder.snapshot(), cfg.hp)
        record = _as_record(terms)
        _finite_check("max", record, step)
        optimizer.zero_grad(set_to_none=True)
        if terms["total"].requires_grad:
            terms["total"].backward()
            optimizer.step()
    return record


# ==================== DISTILLER ====================

class Distiller:
    """Owns the networks, optimizers, schedules and noise stream of one run."""

    def __init__(self, teacher: Classifier, snapshot: BNStatsSnapshot, cfg: TrainConfig,
                 student_spec: ClassifierSpec, generator_spec: GeneratorSpec,
                 adapter_hidden: Optional[Tuple[int, int]] = None, adapter_bypass: bool = True,
                 normalizer: Optional[PixelNormalizer] = None, device="cpu"):
        if len(snapshot) != len(teacher.norm_layers()):
            raise StructureError(
                f"snapshot has {len(snapshot)} layers, teacher has {len(teacher.norm_layers())}"
            )
        self.cfg = cfg
        self.device = torch.device(device)
        self.dtype = resolve_dtype(cfg.dtype)
        self.normalizer = normalizer

        # seeds parameter init, then the noise stream gets its own generator
        torch.manual_seed(cfg.seed)
        self.teacher = teacher.to(device=self.device, dtype=self.dtype).eval()
        self.snapshot = snapshot.to(self.device, self.dtype)
        self.student = build_classifier(student_spec).to(device=self.device, dtype=self.dtype)
        self.generator = build_generator(generator_spec).to(device=self.device, dtype=self.dtype)
        self.adapter = build_adapter(student_spec, teacher.spec, adapter_hidden,
                                     adapter_bypass).to(device=self.device, dtype=self.dtype)
        self.rng = torch.Generator().manual_seed(cfg.seed)

        self.student_optimizer = torch.optim.SGD(
            list(self.student.parameters()) + list(self.adapter.parameters()),
            lr=cfg.student_lr,
            momentum=cfg.student_momentum,
            weight_decay=cfg.student_weight_decay,
        )
        self.generator_optimizer = torch.optim.Adam(
            generator_parameters(self.generator), lr=cfg.gen_lr, betas=GEN_BETAS,
        )
        self.student_scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.student_optimizer,
            lambda iteration: student_lr_factor(
                iteration, cfg.epochs * cfg.iters_per_epoch,
                cfg.warmup_epochs * cfg.iters_per_epoch,
            ),
        )
        self.generator_scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.generator_optimizer,
            milestones=list(cfg.gen_decay_epochs),
            gamma=cfg.gen_decay_factor,
        )
        self.epoch = 0
        self.step = 0

    @property
    def lr_student(self) -> float:
        return self.student_optimizer.param_groups[0]["lr"]

    @property
    def lr_generator(self) -> float:
        return self.generator_optimizer.param_groups[0]["lr"]

    def min_step(self) -> Dict[str, float]:
        record = min_stage_step(self.teacher, self.student, self.adapter, self.generator,
                                self.cfg, self.student_optimizer, self.rng,
                                self.normalizer, self.step)
        self.step += 1
        return record

    def max_step(self) -> Dict[str, float]:
        record = max_stage_step(self.teacher, self.student, self.adapter, self.generator,
                                self.snapshot, self.cfg, self.generator_optimizer, self.rng,
                                self.normalizer, self.step)
        self.step += 1
        return record

    def run_iteration(self, epoch: int, iteration: int) -> List[Dict[str, Any]]:
        """k student steps then one generator step, as metric-log records."""
        records = []
        for stage in ["min"] * self.cfg.k_steps + ["max"]:
            started = time.perf_counter()
            step = self.step
            components = self.min_step() if stage == "min" else self.max_step()
            records.append({
                "stage": stage,
                "epoch": epoch,
                "iter": iteration,
                "step": step,
                "components": components,
                "lr_student": self.lr_student,
                "lr_generator": self.lr_generator,
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            })
        self.student_scheduler.step()
        return records

    def end_epoch(self) -> None:
        self.generator_scheduler.step()
        self.epoch += 1

    # ---------- persistence ----------

    def networks(self) -> Dict[str, nn.Module]:
        return {"student": self.student, "generator": self.generator, "adapter": self.adapter}

    def train_state(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "student_optimizer": self.student_optimizer.state_dict(),
            "generator_optimizer": self.generator_optimizer.state_dict(),
            "student_scheduler": self.student_scheduler.state_dict(),
            "generator_scheduler": self.generator_scheduler.state_dict(),
            "noise_rng": self.rng.get_state(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_train_state(self, state: Dict[str, Any]) -> None:
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.student_optimizer.load_state_dict(state["student_optimizer"])
        self.generator_optimizer.load_state_dict(state["generator_optimizer"])
        self.student_scheduler.load_state_dict(state["student_scheduler"])
        self.generator_scheduler.load_state_dict(state["generator_scheduler"])
        self.rng.set_state(state["noise_rng"])
        torch.set_rng_state(state["torch_rng"])

    def manifest(self) -> Dict[str, Any]:
        return {
            "kind": "distill",
            "specs": {
                "student": self.student.spec.model_dump(mode="json"),
                "generator": self.generator.spec.model_dump(mode="json"),
                "adapter": self.adapter.spec.model_dump(mode="json"),
                "teacher": self.teacher.spec.model_dump(mode="json"),
            },
            "normalization": None if self.normalizer is None else {
                "mean": list(self.normalizer.mean), "std": list(self.normalizer.std),
            },
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.cfg.seed,
            "dtype": self.cfg.dtype,
            "metrics": METRICS_FILE,
        }

    def save(self, directory: Path, with_train_state: bool = True) -> Path:
        return save_bundle(directory, self.networks(), self.manifest(),
                           train_state=self.train_state() if with_train_state else None)

    def load(self, directory: Path) -> None:
        bundle = CheckpointBundle(directory)
        for name, module in self.networks().items():
            bundle.load_into(name, module)
            module.to(device=self.device, dtype=self.dtype)
        self.load_train_state(bundle.train_state())


# ==================== TRAIN ====================

def train(teacher: Classifier, snapshot: BNStatsSnapshot, cfg: TrainConfig, out_dir: Path, *,
          student_spec: ClassifierSpec, generator_spec: GeneratorSpec,
          adapter_hidden: Optional[Tuple[int, int]] = None, adapter_bypass: bool = True,
          normalizer: Optional[PixelNormalizer] = None, device="cpu",
          on_epoch_end: Optional[Callable[[int, Distiller], Dict[str, Any]]] = None,
          resume: bool = False) -> DistillResult:
    """Run ``epochs x iters_per_epoch`` outer iterations and persist the results.

    Args:
        teacher: Pre-trained teacher (never updated)
        snapshot: The teacher's frozen BN statistics
        cfg: Loop settings
        out_dir: Run directory for metrics, samples and checkpoints
        student_spec: Architecture of the student to train
        generator_spec: Architecture of the generator to train
        adapter_hidden: Adapter hidden widths (default: geometric mean, teacher dim)
        adapter_bypass: Use an identity adapter when feature dims already match
        normalizer: Maps generator pixels into the classifiers' input space
        device: Torch device
        on_epoch_end: Called on eval epochs; its dict is merged into the eval record
        resume: Continue from ``out_dir/checkpoint`` when present

    Returns:
        Paths of the final student bundle, generator bundle and metrics log
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distiller = Distiller(teacher, snapshot, cfg, student_spec, generator_spec,
                          adapter_hidden, adapter_bypass, normalizer, device)
    metrics = MetricsLog(out_dir / METRICS_FILE)
    eval_log = MetricsLog(out_dir / EVAL_FILE)
    resume_dir = out_dir / RESUME_DIR

    if resume and (resume_dir / "manifest.json").exists():
        distiller.load(resume_dir)
        metrics.truncate(distiller.step)
        eval_log.truncate(distiller.step)
        logger.info("[DISTILL] Resuming at epoch %d (step %d)", distiller.epoch, distiller.step)
    else:
        if resume:
            logger.warning("[DISTILL] No checkpoint in %s, starting fresh", resume_dir)
        for log in (metrics, eval_log):
            if log.path.exists():
                log.path.unlink()

    classes = list(range(generator_spec.num_classes))
    progress = tqdm(range(distiller.epoch, cfg.epochs), desc="distill", unit="epoch",
                    initial=distiller.epoch, total=cfg.epochs)
    for epoch in progress:
        for iteration in range(cfg.iters_per_epoch):
            for record in distiller.run_iteration(epoch, iteration):
                metrics.append(record)
        last = epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.eval_every == 0 or last:
            result = {
                "epoch": epoch,
                "step": distiller.step - 1,
                "conditional_fidelity": conditional_fidelity(
                    distiller.teacher, distiller.generator, cfg.fidelity_per_class,
                    seed=cfg.seed, normalizer=normalizer,
                ),
            }
            export_grid(distiller.generator, classes, cfg.grid_samples_per_class,
                        out_dir / SAMPLES_DIR / f"samples_epoch{epoch + 1}.png", seed=cfg.seed)
            if on_epoch_end is not None:
                result.update(on_epoch_end(epoch, distiller) or {})
            eval_log.append(result)
            progress.set_postfix({k: round(v, 4) for k, v in result.items()
                                  if isinstance(v, float)})
            logger.info("[DISTILL] Epoch %d: %s", epoch + 1, result)
        distiller.end_epoch()
        distiller.save(resume_dir)

    student_dir = save_bundle(out_dir / STUDENT_DIR,
                              {"student": distiller.student, "adapter": distiller.adapter},
                              distiller.manifest())
    generator_dir = save_bundle(out_dir / GENERATOR_DIR, {"generator": distiller.generator},
                                distiller.manifest())
    return DistillResult(student_dir, generator_dir, metrics.path)
