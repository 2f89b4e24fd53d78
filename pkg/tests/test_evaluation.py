import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from src.evaluation.export import class_samples, export_grid, export_tensors, to_uint8
from src.evaluation.metrics import (
    FeatureStats,
    FEATURE_EXTRACTORS,
    TeacherFeatureExtractor,
    accuracy,
    build_extractor,
    conditional_fidelity,
    feature_stats,
    fid,
    noise_images,
    per_class_fidelity,
    stats_from_features,
    synthesize,
)
from src.models.generator import build_generator
from src.utils.errors import (
    ConfigurationError,
    DimensionError,
    LabelRangeError,
    PreconditionError,
)


class ConstantClassifier(nn.Module):
    """Predicts ``label`` for every input."""

    def __init__(self, label: int, num_classes: int):
        super().__init__()
        logits = torch.zeros(num_classes)
        logits[label] = 1.0
        self.logits = nn.Parameter(logits)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def stats_1d(mu, var):
    return FeatureStats(mu=np.array([mu], dtype=np.float64),
                        sigma=np.array([[var]], dtype=np.float64), n=10)


# ==================== ACCURACY ====================

def test_constant_predictor_accuracy():
    labels = torch.arange(10).repeat(5)
    batches = [(torch.zeros(25, 1, 2, 2), labels[:25]), (torch.zeros(25, 1, 2, 2), labels[25:])]
    assert accuracy(ConstantClassifier(3, 10), batches) == pytest.approx(0.1)


def test_accuracy_needs_samples():
    with pytest.raises(PreconditionError):
        accuracy(ConstantClassifier(0, 2), [])


def test_accuracy_restores_training_flag(teacher):
    teacher.train()
    accuracy(teacher, [(torch.randn(4, 1, 8, 8), torch.zeros(4, dtype=torch.long))])
    assert teacher.training


# ==================== FID ====================

def test_fid_one_dimensional_values():
    assert fid(stats_1d(0.0, 1.0), stats_1d(1.0, 1.0)) == pytest.approx(1.0)
    # 1 + 4 - 2 * sqrt(4)
    assert fid(stats_1d(0.0, 1.0), stats_1d(0.0, 4.0)) == pytest.approx(1.0)


def test_fid_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = stats_from_features(rng.normal(size=(200, 5)))
    b = stats_from_features(rng.normal(loc=0.5, scale=2.0, size=(200, 5)))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-6)
    assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-6)
    assert fid(a, b) > 0.0


def test_fid_is_rotation_invariant():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 4))
    y = rng.normal(loc=1.0, size=(100, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5])
    rotation, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    plain = fid(stats_from_features(x), stats_from_features(y))
    rotated = fid(stats_from_features(x @ rotation), stats_from_features(y @ rotation))
    assert rotated == pytest.approx(plain, rel=1e-6)


def test_identical_samples_have_zero_covariance():
    stats = stats_from_features(np.ones((5, 3)))
    assert np.allclose(stats.sigma, 0.0)
    assert fid(stats, stats) == 0.0


def test_fid_dimension_mismatch():
    a = stats_from_features(np.random.default_rng(2).normal(size=(10, 3)))
    b = stats_from_features(np.random.default_rng(3).normal(size=(10, 4)))
    with pytest.raises(DimensionError):
        fid(a, b)


def test_stats_need_two_samples():
    with pytest.raises(PreconditionError):
        stats_from_features(np.zeros((1, 3)))


def test_feature_stats_accepts_tensors_and_batches(teacher):
    extractor = TeacherFeatureExtractor(teacher)
    images = torch.randn(12, 1, 8, 8)
    from_tensor = feature_stats(extractor, images, batch_size=5)
    batches = [(chunk, torch.zeros(len(chunk), dtype=torch.long)) for chunk in images.split(4)]
    from_batches = feature_stats(extractor, batches)
    assert from_tensor.n == from_batches.n == 12
    assert from_tensor.dim == 16
    assert np.allclose(from_tensor.mu, from_batches.mu, atol=1e-5)
    assert np.allclose(from_tensor.sigma, from_batches.sigma, atol=1e-5)


def test_extractor_registry(teacher):
    assert set(FEATURE_EXTRACTORS) == {"teacher-penultimate", "teacher-logits"}
    images = torch.randn(3, 1, 8, 8)
    assert build_extractor("teacher-penultimate", teacher)(images).shape == (3, 16)
    logits = build_extractor("teacher-logits", teacher)(images)
    assert torch.allclose(logits, teacher.eval()(images), atol=1e-6)
    with pytest.raises(ConfigurationError):
        build_extractor("inception", teacher)


def test_noise_images_are_seeded():
    a = noise_images(6, (1, 4, 4), seed=3)
    assert torch.equal(a, noise_images(6, (1, 4, 4), seed=3))
    assert float(a.min()) >= -1.0 and float(a.max()) <= 1.0


# ==================== SYNTHESIS AND FIDELITY ====================

def test_synthesize_is_seeded_and_keeps_mode(generator_spec):
    generator = build_generator(generator_spec)
    generator.train()
    a = synthesize(generator, 5, seed=1, batch_size=2)
    b = synthesize(generator, 5, seed=1, batch_size=2)
    assert a.shape == (5, 1, 8, 8)
    assert torch.equal(a, b)
    assert generator.training
    assert synthesize(generator, 0, seed=1).shape == (0, 1, 8, 8)


def test_fidelity_of_a_constant_teacher(generator_spec):
    generator = build_generator(generator_spec)
    teacher = ConstantClassifier(2, generator_spec.num_classes)
    per_class = per_class_fidelity(teacher, generator, n_per_class=3)
    assert per_class == {0: 0.0, 1: 0.0, 2: 1.0, 3: 0.0}
    assert conditional_fidelity(teacher, generator, n_per_class=3) == pytest.approx(0.25)


def test_fidelity_does_not_depend_on_class_order(teacher, generator_spec):
    generator = build_generator(generator_spec)
    forward = per_class_fidelity(teacher, generator, 4, seed=5, classes=[0, 1, 2, 3])
    shuffled = per_class_fidelity(teacher, generator, 4, seed=5, classes=[3, 1, 0, 2])
    assert forward == shuffled
    mean = sum(forward.values()) / len(forward)
    assert conditional_fidelity(teacher, generator, 4, seed=5) == pytest.approx(mean)


def test_fidelity_needs_samples(teacher, generator_spec):
    with pytest.raises(PreconditionError):
        per_class_fidelity(teacher, build_generator(generator_spec), 0)


# ==================== EXPORT ====================

def test_to_uint8_endpoints():
    pixels = to_uint8(torch.tensor([-1.0, 0.0, 1.0, 3.0]))
    assert pixels.tolist() == [0, 128, 255, 255]


def test_grid_is_deterministic_and_sized(tmp_path, generator_spec):
    generator = build_generator(generator_spec)
    first = export_grid(generator, [0, 1, 2, 3], 3, tmp_path / "a.png", seed=4)
    second = export_grid(generator, [0, 1, 2, 3], 3, tmp_path / "b.png", seed=4)
    assert first.read_bytes() == second.read_bytes()
    with Image.open(first) as image:
        assert image.mode == "L"
        # 3 tiles of 8 px plus 2 px padding on each side
        assert image.size == (3 * 10 + 2, 4 * 10 + 2)


def test_grid_rows_follow_class_seeds(generator_spec):
    generator = build_generator(generator_spec)
    together = class_samples(generator, [1, 2], 2, seed=0)
    alone = class_samples(generator, [2], 2, seed=0)
    assert torch.equal(together[2], alone[2])


def test_grid_rejects_unknown_classes(tmp_path, generator_spec):
    generator = build_generator(generator_spec)
    with pytest.raises(LabelRangeError):
        export_grid(generator, [0, 9], 2, tmp_path / "grid.png")
    with pytest.raises(ValueError):
        export_grid(generator, [], 2, tmp_path / "grid.png")


def test_export_tensors(tmp_path, generator_spec):
    samples = class_samples(build_generator(generator_spec), [0, 3], 2)
    paths = export_tensors(samples, tmp_path / "synth")
    assert sorted(p.name for p in paths.values()) == ["class_0.pt", "class_3.pt"]
    assert torch.equal(torch.load(paths[3]), samples[3])
