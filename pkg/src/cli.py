"""Command-line entry points: pretrain, distill, eval, synthesize, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
import argparse
import json
import logging
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import torch
from pydantic import ValidationError

from src.data.datasets import load_dataset, make_loader
from src.data.pretrain import TeacherCheckpoint, load_teacher, pretrain_teacher
from src.distillation.ablation import (
    find_row,
    get_matrix,
    row_overrides,
    write_comparison,
)
from src.distillation.engine import GENERATOR_DIR, STUDENT_DIR, Distiller, train
from src.evaluation.export import class_samples, export_tensors, save_grid
from src.evaluation.metrics import (
    accuracy,
    build_extractor,
    fid,
    feature_stats,
    noise_images,
    per_class_fidelity,
    synthesize,
)
from src.models.generator import GeneratorSpec, build_generator
from src.models.nets import AdapterSpec, Adapter, ClassifierSpec, build_classifier
from src.utils.checkpoint import CheckpointBundle
from src.utils.config import (
    PROJECT_ROOT,
    RunConfig,
    apply_overrides,
    config_to_dict,
    dump_run_config,
    load_run_config,
    setup_logging,
    validate_run_config,
)
from src.utils.errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    LabelRangeError,
    check_label_range,
)
from src.utils.reports import EvaluationReport, read_report, write_report
from src.utils.run_tracker import FileRunTracker
from src.utils.seeding import configure_determinism, resolve_device, resolve_dtype, seed_everything

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

USAGE_ERRORS = (
    ConfigurationError,
    ValidationError,
    FileNotFoundError,
    DatasetError,
    CheckpointError,
    LabelRangeError,
)

EFFECTIVE_CONFIG = "effective_config_{command}.toml"
REPORT_FILE = "report.json"
EVAL_REPORT_FILE = "eval_report.json"
TEACHER_DIR = "teacher"
SYNTH_DIR = "synth"
FID_NOTICE = "no real dataset configured; FID skipped"


# ==================== SHARED ====================

def _run_id(command: str, cfg: RunConfig) -> str:
    return f"{command}-{cfg.output.name}".replace("/", "__")


@contextmanager
def tracked_run(cfg: RunConfig, command: str) -> Iterator[Path]:
    """Seed, dump this command's effective config, and record the run's lifecycle."""
    seed_everything(cfg.seed)
    if cfg.output.deterministic:
        configure_determinism(True)
    run_dir = cfg.output.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, run_dir / EFFECTIVE_CONFIG.format(command=command))

    tracker = FileRunTracker(Path(cfg.output.dir) / "runs")
    run_id = _run_id(command, cfg)
    tracker.start(run_id, command, {"run_dir": str(run_dir), "seed": cfg.seed})
    try:
        yield run_dir
    except BaseException as e:
        tracker.fail(run_id, f"{type(e).__name__}: {e}")
        raise
    tracker.complete(run_id, {"run_dir": str(run_dir)})


def _require_data(cfg: RunConfig, command: str):
    if cfg.data is None:
        raise ConfigurationError(f"{command} needs a [data] section")
    return cfg.data


def _test_loader(cfg: RunConfig):
    data = cfg.data
    if data is None or not (Path(data.root) / "test").is_dir():
        return None
    dataset = load_dataset(data.spec("test"), verify=data.verify)
    return make_loader(dataset, cfg.eval.batch_size)


def _load_teacher(cfg: RunConfig) -> TeacherCheckpoint:
    path = cfg.models.teacher_checkpoint
    if not path:
        raise ConfigurationError("models.teacher_checkpoint is required")
    loaded = load_teacher(Path(path), resolve_device(cfg.output.device),
                          resolve_dtype(cfg.schedule.dtype))
    if loaded.teacher.spec != cfg.models.teacher:
        raise ConfigurationError(
            f"teacher checkpoint spec {loaded.teacher.spec.model_dump()} differs from "
            f"models.teacher {cfg.models.teacher.model_dump()}"
        )
    return loaded


def evaluate_run(cfg: RunConfig, teacher: TeacherCheckpoint, student: Optional[torch.nn.Module],
                 generator) -> EvaluationReport:
    """Student/teacher accuracy, conditional fidelity and (with real data) FID."""
    loader = _test_loader(cfg)
    per_class = per_class_fidelity(teacher.teacher, generator, cfg.eval.fidelity_per_class,
                                   seed=cfg.seed, normalizer=teacher.normalizer,
                                   batch_size=cfg.eval.batch_size)
    fields: Dict[str, Any] = {
        "conditional_fidelity": sum(per_class.values()) / len(per_class),
        "per_class_fidelity": {str(c): v for c, v in per_class.items()},
        "n_samples": cfg.eval.fidelity_per_class * len(per_class),
        "extractor_id": cfg.eval.extractor,
        "seed": cfg.seed,
    }
    if loader is None:
        fields["fid_notice"] = FID_NOTICE
        logger.info("[EVAL] %s", FID_NOTICE)
        return EvaluationReport(**fields)

    if student is not None:
        fields["accuracy"] = accuracy(student, loader)
    fields["teacher_accuracy"] = accuracy(teacher.teacher, loader)

    extractor = build_extractor(cfg.eval.extractor, teacher.teacher)
    count = cfg.eval.fid_samples
    real_set = load_dataset(cfg.data.spec("test"), verify=False, subset=count, seed=cfg.seed)
    real = feature_stats(extractor, make_loader(real_set, cfg.eval.batch_size))
    fake_images = teacher.normalizer(synthesize(generator, count, cfg.seed))
    fake = feature_stats(extractor, fake_images, cfg.eval.batch_size)
    noise = teacher.normalizer(noise_images(count, generator.spec.output_shape, cfg.seed))
    fields["fid"] = fid(fake, real)
    fields["fid_noise"] = fid(feature_stats(extractor, noise, cfg.eval.batch_size), real)
    fields["n_samples"] = min(count, real.n)
    return EvaluationReport(**fields)


def _load_distilled(run_dir: Path, device, dtype):
    student_bundle = CheckpointBundle(run_dir / STUDENT_DIR)
    generator_bundle = CheckpointBundle(run_dir / GENERATOR_DIR)
    specs = student_bundle.manifest["specs"]
    student = build_classifier(ClassifierSpec.model_validate(specs["student"]))
    student_bundle.load_into("student", student)
    adapter = Adapter(AdapterSpec.model_validate(specs["adapter"]))
    student_bundle.load_into("adapter", adapter)
    generator = build_generator(
        GeneratorSpec.model_validate(generator_bundle.manifest["specs"]["generator"])
    )
    generator_bundle.load_into("generator", generator)
    return (student.to(device=device, dtype=dtype).eval(),
            generator.to(device=device, dtype=dtype).eval())


# ==================== COMMANDS ====================

def cmd_pretrain(cfg: RunConfig, args: argparse.Namespace) -> int:
    data = _require_data(cfg, "pretrain")
    with tracked_run(cfg, "pretrain") as run_dir:
        test_dir = Path(data.root) / "test"
        result = pretrain_teacher(
            cfg.models.teacher, data.spec("train"), cfg.schedule.pretrain_epochs,
            run_dir / TEACHER_DIR,
            test_data=data.spec("test") if test_dir.is_dir() else None,
            lr=cfg.schedule.pretrain_lr,
            momentum=cfg.schedule.student_momentum,
            weight_decay=cfg.schedule.student_weight_decay,
            batch_size=cfg.schedule.pretrain_batch_size,
            seed=cfg.seed,
            device=resolve_device(cfg.output.device),
            subset=data.subset,
            verify=data.verify,
        )
        report = {
            "accuracy": result.accuracy,
            "eval_split": "test" if test_dir.is_dir() else "train",
            "bn_layers": len(result.snapshot),
            "checkpoint": str(result.checkpoint),
            "epochs": cfg.schedule.pretrain_epochs,
            "seed": cfg.seed,
        }
        (run_dir / REPORT_FILE).write_text(json.dumps(report, indent=2))
    logger.info("[PRETRAIN] Teacher saved to %s (accuracy %.4f)",
                result.checkpoint, result.accuracy)
    return EXIT_OK


def run_distill(cfg: RunConfig, resume: bool = False) -> EvaluationReport:
    """Distill, then write the final evaluation report; shared by distill and ablate."""
    with tracked_run(cfg, "distill") as run_dir:
        teacher = _load_teacher(cfg)
        loader = _test_loader(cfg)

        def on_epoch_end(epoch: int, distiller: Distiller) -> Dict[str, Any]:
            if loader is None:
                return {}
            return {"accuracy": accuracy(distiller.student, loader)}

        result = train(
            teacher.teacher, teacher.snapshot, cfg.train_config(), run_dir,
            student_spec=cfg.models.student,
            generator_spec=cfg.generator,
            adapter_hidden=cfg.models.adapter_hidden,
            adapter_bypass=cfg.models.adapter_bypass,
            normalizer=teacher.normalizer,
            device=resolve_device(cfg.output.device),
            on_epoch_end=on_epoch_end,
            resume=resume,
        )
        device = next(teacher.teacher.parameters()).device
        student, generator = _load_distilled(run_dir, device, resolve_dtype(cfg.schedule.dtype))
        report = evaluate_run(cfg, teacher, student, generator)
        write_report(report, run_dir / REPORT_FILE)
    logger.info("[DISTILL] Done: metrics %s, report %s", result.metrics_log,
                run_dir / REPORT_FILE)
    return report


def cmd_distill(cfg: RunConfig, args: argparse.Namespace) -> int:
    run_distill(cfg, resume=args.resume)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    with tracked_run(cfg, "eval") as run_dir:
        teacher = _load_teacher(cfg)
        device = next(teacher.teacher.parameters()).device
        student, generator = _load_distilled(run_dir, device, resolve_dtype(cfg.schedule.dtype))
        report = evaluate_run(cfg, teacher, student, generator)
        write_report(report, run_dir / EVAL_REPORT_FILE)
    logger.info("[EVAL] Report written to %s", run_dir / EVAL_REPORT_FILE)
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig, args: argparse.Namespace) -> int:
    classes = args.classes if args.classes else list(range(cfg.generator.num_classes))
    check_label_range(torch.as_tensor(classes, dtype=torch.long), cfg.generator.num_classes)
    with tracked_run(cfg, "synthesize") as run_dir:
        if args.count <= 0:
            logger.warning("[SYNTH] count=%d: nothing to synthesize", args.count)
            return EXIT_OK
        bundle = CheckpointBundle(run_dir / GENERATOR_DIR)
        generator = build_generator(
            GeneratorSpec.model_validate(bundle.manifest["specs"]["generator"])
        )
        bundle.load_into("generator", generator)
        generator = generator.to(dtype=resolve_dtype(cfg.schedule.dtype)).eval()
        samples = class_samples(generator, classes, args.count, seed=cfg.seed)
        out_dir = run_dir / SYNTH_DIR
        export_tensors(samples, out_dir)
        save_grid([samples[int(c)] for c in classes], out_dir / "grid.png")
    logger.info("[SYNTH] %d samples for classes %s -> %s", args.count, classes, out_dir)
    return EXIT_OK


def _cell_config(cfg: RunConfig, matrix: str, row) -> RunConfig:
    data = config_to_dict(cfg)
    name = json.dumps(f"{cfg.output.name}/{matrix}/{row.name}")
    apply_overrides(data, row_overrides(row) + [f"output.name={name}"])
    return validate_run_config(data)


def _run_cell_subprocess(cell: RunConfig) -> int:
    config_path = dump_run_config(cell, cell.output.run_dir / "cell_config.toml")
    command = [sys.executable, "-m", "src.cli", "distill", "--config", str(config_path),
               "--resume"]
    logger.info("[ABLATE] Launching %s", " ".join(command))
    return subprocess.run(command, cwd=PROJECT_ROOT).returncode


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    rows = get_matrix(args.matrix)
    cells = [(row, _cell_config(cfg, args.matrix, row)) for row in rows]
    tracker = FileRunTracker(Path(cfg.output.dir) / "runs")

    with tracked_run(cfg, f"ablate-{args.matrix}") as run_dir:
        pending = []
        for row, cell in cells:
            if not tracker.is_completed(_run_id("distill", cell)):
                pending.append((row, cell))
            else:
                logger.info("[ABLATE] %s/%s already completed, skipping", args.matrix, row.name)

        if args.parallel > 1:
            with ThreadPoolExecutor(max_workers=args.parallel) as pool:
                codes = list(pool.map(_run_cell_subprocess, [cell for _, cell in pending]))
            for (row, _), code in zip(pending, codes):
                if code != EXIT_OK:
                    logger.error("[ABLATE] %s/%s exited with %d", args.matrix, row.name, code)
        else:
            for row, cell in pending:
                logger.info("[ABLATE] Running %s/%s", args.matrix, row.name)
                try:
                    run_distill(cell, resume=True)
                except Exception as e:
                    logger.error("[ABLATE] %s/%s failed: %s", args.matrix, row.name, e)

        results: List[Dict[str, Any]] = []
        for row, cell in cells:
            entry = {"matrix": args.matrix, "row": row.name,
                     "run_dir": str(cell.output.run_dir)}
            report_path = cell.output.run_dir / REPORT_FILE
            if tracker.is_completed(_run_id("distill", cell)) and report_path.exists():
                report = read_report(report_path)
                entry.update(status="completed", accuracy=report.accuracy,
                             teacher_accuracy=report.teacher_accuracy,
                             conditional_fidelity=report.conditional_fidelity, fid=report.fid)
            else:
                entry["status"] = "failed"
            results.append(entry)
        csv_path, _ = write_comparison(results, run_dir, stem=args.matrix)

    failed = [r["row"] for r in results if r["status"] != "completed"]
    logger.info("[ABLATE] Comparison table: %s", csv_path)
    if failed:
        logger.error("[ABLATE] Cells failed: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "synthesize": cmd_synthesize,
    "ablate": cmd_ablate,
}


# ==================== PARSING ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfkd",
                                     description="Data-free knowledge distillation toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="TOML run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, repeatable")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="output directory (output.dir)")
    parser.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels (slower)")
    parser.add_argument("--resume", action="store_true", help="distill: continue a run")
    parser.add_argument("--epochs", type=int,
                        help="pretrain: schedule.pretrain_epochs, distill: schedule.epochs")
    parser.add_argument("--ablation", metavar="ROW",
                        help="distill: apply an ablation row, e.g. kl-only")
    parser.add_argument("--classes", type=int, nargs="+", help="synthesize: class ids")
    parser.add_argument("--count", type=int, default=8, help="synthesize: samples per class")
    parser.add_argument("--matrix", default="loss-components",
                        help="ablate: matrix name, e.g. loss-components or hyperparams")
    parser.add_argument("--parallel", type=int, default=1,
                        help="ablate: cells run as this many concurrent processes")
    parser.add_argument("--log-level", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output.dir={json.dumps(str(args.out))}")
    if args.deterministic:
        overrides.append("output.deterministic=true")
    if args.epochs is not None:
        key = "schedule.pretrain_epochs" if args.command == "pretrain" else "schedule.epochs"
        overrides.append(f"{key}={args.epochs}")
    if args.ablation:
        overrides.extend(row_overrides(find_row(args.ablation)))
    return load_run_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except USAGE_ERRORS as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.debug("[ERROR] %s failed", args.command, exc_info=True)
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
