import pytest
import torch

from src.distillation.engine import (
    Distiller,
    TrainConfig,
    kl_only_baseline_toggle,
    min_stage_step,
    student_lr_factor,
    train,
)
from src.distillation.losses import HyperParams
from src.models.nets import BNStatsSnapshot, capture_bn_stats
from src.utils.errors import DivergenceError, StructureError
from src.utils.reports import MetricsLog


def small_config(**overrides) -> TrainConfig:
    settings = dict(k_steps=2, epochs=1, iters_per_epoch=1, batch_size=8, warmup_epochs=0,
                    eval_every=1, grid_samples_per_class=1, fidelity_per_class=2, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


def make_distiller(teacher, student_spec, generator_spec, cfg, **kwargs) -> Distiller:
    return Distiller(teacher, capture_bn_stats(teacher), cfg, student_spec, generator_spec,
                     **kwargs)


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# ==================== SCHEDULES ====================

@pytest.mark.parametrize("total, warmup", [(1, 0), (2, 0), (3, 5), (10, 2), (3000, 250)])
def test_student_lr_reaches_zero_after_the_last_iteration(total, warmup):
    assert student_lr_factor(total, total, warmup) <= 1e-8
    assert student_lr_factor(total - 1, total, warmup) > 0.0


def test_student_lr_warmup_then_decay():
    factors = [student_lr_factor(i, 20, 5) for i in range(21)]
    assert factors[:5] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])
    assert factors[5] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(factors[5:], factors[6:]))


def test_student_lr_anneals_within_a_single_epoch(teacher, student_spec, generator_spec):
    cfg = small_config(k_steps=1, epochs=1, iters_per_epoch=4)
    distiller = make_distiller(teacher, student_spec, generator_spec, cfg)
    seen = []
    for i in range(4):
        seen.append(distiller.run_iteration(0, i)[0]["lr_student"])
    assert seen[0] == pytest.approx(cfg.student_lr)
    assert all(a > b > 0.0 for a, b in zip(seen, seen[1:]))
    assert distiller.lr_student <= 1e-8


def test_generator_lr_decays_at_milestones(teacher, student_spec, generator_spec):
    cfg = small_config(epochs=4, gen_decay_epochs=(1, 3), gen_lr=1e-2)
    distiller = make_distiller(teacher, student_spec, generator_spec, cfg)
    seen = []
    for _ in range(4):
        seen.append(distiller.lr_generator)
        distiller.end_epoch()
    assert seen == pytest.approx([1e-2, 1e-3, 1e-3, 1e-4])


# ==================== CONFIG ====================

def test_kl_only_toggle_changes_only_three_weights():
    cfg = small_config(hp=HyperParams(alpha=3.0, beta=2.0, gamma=0.5, eta=0.4, tau=0.2))
    toggled = kl_only_baseline_toggle(cfg)
    before = cfg.model_dump()
    after = toggled.model_dump()
    diff = {k for k in before["hp"] if before["hp"][k] != after["hp"][k]}
    assert diff == {"alpha", "gamma", "eta"}
    assert (toggled.hp.alpha, toggled.hp.gamma, toggled.hp.eta) == (0.0, 0.0, 0.0)
    before.pop("hp")
    after.pop("hp")
    assert before == after


def test_gen_decay_epochs_are_sorted():
    assert TrainConfig(gen_decay_epochs=(15, 5)).gen_decay_epochs == (5, 15)


# ==================== STAGES ====================

def test_snapshot_must_match_teacher(teacher, student_spec, generator_spec):
    snapshot = capture_bn_stats(teacher)
    short = BNStatsSnapshot(snapshot.layers[:-1])
    with pytest.raises(StructureError):
        Distiller(teacher, short, small_config(), student_spec, generator_spec)


def test_min_stage_with_zero_lr_changes_nothing(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec,
                               small_config(student_lr=0.0))
    student = params_of(distiller.student)
    adapter = params_of(distiller.adapter)
    generator = params_of(distiller.generator)
    distiller.min_step()
    assert same(student, params_of(distiller.student))
    assert same(adapter, params_of(distiller.adapter))
    assert same(generator, params_of(distiller.generator))


def test_min_stage_updates_student_only(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config())
    teacher_before = params_of(distiller.teacher)
    student_before = params_of(distiller.student)
    generator_before = params_of(distiller.generator)
    record = distiller.min_step()
    assert set(record) == {"kl", "r_l2", "ikd", "ce", "total", "adapter_scl"}
    assert not same(student_before, params_of(distiller.student))
    assert same(teacher_before, params_of(distiller.teacher))
    assert same(generator_before, params_of(distiller.generator))


def test_min_stage_trains_the_adapter_on_the_contrast(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config())
    assert not distiller.adapter.is_identity
    before = params_of(distiller.adapter)
    record = distiller.min_step()
    assert record["adapter_scl"] != 0.0
    assert not same(before, params_of(distiller.adapter))


def test_max_stage_with_zero_lr_changes_nothing(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config(gen_lr=0.0))
    before = params_of(distiller.generator)
    distiller.max_step()
    assert same(before, params_of(distiller.generator))


def test_max_stage_freezes_teacher_and_student(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config())
    teacher_state = {k: v.clone() for k, v in distiller.teacher.state_dict().items()}
    student_state = {k: v.clone() for k, v in distiller.student.state_dict().items()}
    adapter_before = params_of(distiller.adapter)
    generator_before = params_of(distiller.generator)
    record = distiller.max_step()
    assert set(record) == {"kl", "r_l2", "ikd", "bns", "scl", "ce", "total"}
    for key, value in distiller.teacher.state_dict().items():
        assert torch.equal(value, teacher_state[key])
    for key, value in distiller.student.state_dict().items():
        assert torch.equal(value, student_state[key])
    assert same(adapter_before, params_of(distiller.adapter))
    assert not same(generator_before, params_of(distiller.generator))
    assert all(p.requires_grad for p in distiller.teacher.parameters())
    assert all(p.requires_grad for p in distiller.student.parameters())


def test_generator_total_is_negative_ikd_without_other_terms(teacher, student_spec,
                                                             generator_spec):
    cfg = small_config(hp=HyperParams(beta=0.0, gamma=0.0, eta=0.0))
    record = make_distiller(teacher, student_spec, generator_spec, cfg).max_step()
    assert record["total"] == pytest.approx(-record["ikd"])
    assert record["bns"] == record["scl"] == record["ce"] == 0.0


def test_kl_only_records_zero_extras(teacher, student_spec, generator_spec):
    cfg = kl_only_baseline_toggle(small_config())
    distiller = make_distiller(teacher, student_spec, generator_spec, cfg)
    student_record = distiller.min_step()
    generator_record = distiller.max_step()
    assert student_record["r_l2"] == student_record["ce"] == 0.0
    assert student_record["adapter_scl"] == 0.0
    assert generator_record["scl"] == generator_record["ce"] == 0.0
    assert generator_record["bns"] > 0.0


def test_divergence_is_raised_before_the_update(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config())
    before = params_of(distiller.student)
    with pytest.raises(DivergenceError) as info:
        min_stage_step(distiller.teacher, distiller.student, distiller.adapter,
                       distiller.generator, distiller.cfg, distiller.student_optimizer,
                       distiller.rng, normalizer=lambda x: x * float("nan"), step=7)
    assert info.value.stage == "min"
    assert info.value.step == 7
    assert "total" in info.value.components
    assert same(before, params_of(distiller.student))


# ==================== LOOP ====================

def test_iteration_runs_k_min_steps_then_one_max_step(teacher, student_spec, generator_spec):
    distiller = make_distiller(teacher, student_spec, generator_spec, small_config(k_steps=3))
    records = distiller.run_iteration(epoch=0, iteration=0)
    assert [r["stage"] for r in records] == ["min", "min", "min", "max"]
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert distiller.step == 4


def test_runs_are_deterministic_in_float64(teacher, student_spec, generator_spec):
    cfg = small_config(dtype="float64")
    records = []
    states = []
    for _ in range(2):
        distiller = make_distiller(teacher, student_spec, generator_spec, cfg)
        records.append([r["components"] for i in range(2)
                        for r in distiller.run_iteration(0, i)])
        states.append(params_of(distiller.student) + params_of(distiller.generator))
    assert records[0] == records[1]
    assert same(states[0], states[1])


def test_checkpoint_round_trip_continues_identically(tmp_path, teacher, student_spec,
                                                     generator_spec):
    cfg = small_config(dtype="float64")
    first = make_distiller(teacher, student_spec, generator_spec, cfg)
    first.run_iteration(0, 0)
    first.save(tmp_path / "ckpt")

    second = make_distiller(teacher, student_spec, generator_spec, cfg)
    second.load(tmp_path / "ckpt")
    assert second.step == first.step
    expected = [r["components"] for r in first.run_iteration(0, 1)]
    actual = [r["components"] for r in second.run_iteration(0, 1)]
    assert actual == expected


def test_train_writes_metrics_samples_and_bundles(tmp_path, teacher, student_spec,
                                                  generator_spec):
    cfg = small_config()
    seen = []

    def on_epoch_end(epoch, distiller):
        seen.append(epoch)
        return {"extra_metric": 1.0}

    result = train(teacher, capture_bn_stats(teacher), cfg, tmp_path / "run",
                   student_spec=student_spec, generator_spec=generator_spec,
                   on_epoch_end=on_epoch_end)
    records = MetricsLog(result.metrics_log).read()
    assert len(records) == cfg.epochs * cfg.steps_per_epoch == 3
    assert [r["stage"] for r in records] == ["min", "min", "max"]
    assert records[-1]["lr_student"] >= 0.0

    evals = MetricsLog(tmp_path / "run" / "eval.jsonl").read()
    assert len(evals) == 1
    assert 0.0 <= evals[0]["conditional_fidelity"] <= 1.0
    assert evals[0]["extra_metric"] == 1.0
    assert seen == [0]

    assert (tmp_path / "run" / "samples" / "samples_epoch1.png").exists()
    assert (result.student_checkpoint / "manifest.json").exists()
    assert (result.generator_checkpoint / "manifest.json").exists()


def test_train_resumes_from_checkpoint(tmp_path, teacher, student_spec, generator_spec):
    out = tmp_path / "run"
    snapshot = capture_bn_stats(teacher)
    train(teacher, snapshot, small_config(epochs=1), out,
          student_spec=student_spec, generator_spec=generator_spec)
    train(teacher, snapshot, small_config(epochs=2), out,
          student_spec=student_spec, generator_spec=generator_spec, resume=True)
    records = MetricsLog(out / "metrics.jsonl").read()
    assert [r["step"] for r in records] == list(range(6))
    assert [r["epoch"] for r in records] == [0, 0, 0, 1, 1, 1]


def test_fresh_train_replaces_old_logs(tmp_path, teacher, student_spec, generator_spec):
    out = tmp_path / "run"
    snapshot = capture_bn_stats(teacher)
    for _ in range(2):
        result = train(teacher, snapshot, small_config(), out,
                       student_spec=student_spec, generator_spec=generator_spec)
    assert len(MetricsLog(result.metrics_log)) == 3
