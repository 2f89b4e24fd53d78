import copy

import pytest
import torch
from pydantic import ValidationError

from src.models.nets import (
    AdapterSpec,
    BNStatsSnapshot,
    ClassifierSpec,
    PixelNormalizer,
    adapter_map,
    batch_bn_stats,
    build_adapter,
    build_classifier,
    capture_bn_stats,
    forward_with_features,
    frozen,
)
from src.utils.errors import (
    ConfigurationError,
    DimensionError,
    PreconditionError,
    StructureError,
)


@pytest.mark.parametrize("arch", ["cnn-small", "resnet-tiny"])
def test_forward_shapes(arch):
    spec = ClassifierSpec(arch_name=arch, num_classes=10, input_shape=(1, 28, 28),
                          feature_dim=128)
    model = build_classifier(spec)
    out = forward_with_features(model, torch.randn(4, 1, 28, 28))
    assert out.logits.shape == (4, 10)
    assert out.features.shape == (4, 128)


def test_features_feed_the_head(teacher):
    x = torch.randn(3, 1, 8, 8)
    out = forward_with_features(teacher, x)
    assert torch.allclose(teacher.head(out.features), out.logits)
    assert torch.allclose(teacher(x), out.logits)


def test_equal_specs_build_identical_structures(teacher_spec):
    a = build_classifier(teacher_spec)
    b = build_classifier(teacher_spec)
    assert [(k, v.shape) for k, v in a.state_dict().items()] == \
        [(k, v.shape) for k, v in b.state_dict().items()]


def test_unknown_arch_names_valid_set():
    spec = ClassifierSpec(arch_name="vgg-huge")
    with pytest.raises(ConfigurationError, match="cnn-small"):
        build_classifier(spec)


def test_spec_invariants():
    with pytest.raises(ValidationError):
        ClassifierSpec(num_classes=1)
    with pytest.raises(ValidationError):
        ClassifierSpec(input_shape=(1, 0, 28))
    with pytest.raises(ValidationError):
        ClassifierSpec(feature_dim=0)


def test_wrong_input_shape(teacher):
    with pytest.raises(DimensionError):
        forward_with_features(teacher, torch.randn(2, 3, 8, 8))


def test_snapshot_matches_running_stats(teacher):
    snapshot = capture_bn_stats(teacher)
    layers = teacher.norm_layers()
    assert len(snapshot) == len(layers)
    for stats, (name, bn) in zip(snapshot.layers, layers):
        assert stats.layer_id == name
        assert torch.equal(stats.mu, bn.running_mean)
        assert torch.equal(stats.sigma2, bn.running_var)
        assert bool((stats.sigma2 >= 0).all())


def test_snapshot_is_a_copy(teacher):
    snapshot = capture_bn_stats(teacher)
    before = snapshot.layers[0].mu.clone()
    teacher.train()
    with torch.no_grad():
        teacher(torch.randn(8, 1, 8, 8) + 3.0)
    assert torch.equal(snapshot.layers[0].mu, before)


def test_snapshot_order_is_stable(teacher_spec):
    a = capture_bn_stats(build_classifier(teacher_spec))
    b = capture_bn_stats(build_classifier(teacher_spec))
    assert a.layer_ids == b.layer_ids


def test_resnet_snapshot_covers_shortcut_norms():
    spec = ClassifierSpec(arch_name="resnet-tiny", num_classes=4, input_shape=(1, 8, 8),
                          feature_dim=16)
    model = build_classifier(spec)
    snapshot = capture_bn_stats(model)
    assert len(snapshot) == len(model.norm_layers())
    assert any("shortcut" in layer_id for layer_id in snapshot.layer_ids)


def test_snapshot_state_round_trip(teacher):
    snapshot = capture_bn_stats(teacher)
    restored = BNStatsSnapshot.from_state(snapshot.to_state())
    assert restored.layer_ids == snapshot.layer_ids
    for a, b in zip(restored.layers, snapshot.layers):
        assert torch.equal(a.mu, b.mu) and torch.equal(a.sigma2, b.sigma2)


def test_model_without_norm_layers():
    model = build_classifier(ClassifierSpec(input_shape=(1, 8, 8)))
    model.norm_layers = lambda: []
    with pytest.raises(StructureError):
        capture_bn_stats(model)


def test_batch_stats_are_biased_and_differentiable(teacher):
    x = torch.randn(6, 1, 8, 8, requires_grad=True)
    stats = batch_bn_stats(teacher, x)
    first = stats.layers[0]
    conv_out = teacher.blocks[0][0](x)
    assert torch.allclose(first.mu, conv_out.mean(dim=(0, 2, 3)), atol=1e-6)
    assert torch.allclose(first.sigma2, conv_out.var(dim=(0, 2, 3), correction=0), atol=1e-6)
    first.mu.sum().backward()
    assert x.grad is not None


def test_batch_stats_need_two_samples(teacher):
    with pytest.raises(PreconditionError):
        batch_bn_stats(teacher, torch.randn(1, 1, 8, 8))


def test_batch_stats_leave_running_stats_alone(teacher):
    before = capture_bn_stats(teacher)
    batch_bn_stats(teacher, torch.randn(4, 1, 8, 8))
    after = capture_bn_stats(teacher)
    for a, b in zip(before.layers, after.layers):
        assert torch.equal(a.mu, b.mu)


def test_batch_stats_ignore_order_and_duplication(teacher):
    torch.manual_seed(4)
    x = torch.randn(5, 1, 8, 8)
    base = batch_bn_stats(teacher, x)
    permuted = batch_bn_stats(teacher, x[torch.randperm(5)])
    doubled = batch_bn_stats(teacher, torch.cat([x, x]))
    for a, b, c in zip(base.layers, permuted.layers, doubled.layers):
        assert torch.allclose(a.mu, b.mu, atol=1e-5)
        assert torch.allclose(a.sigma2, b.sigma2, atol=1e-5)
        assert torch.allclose(a.mu, c.mu, atol=1e-5)
        assert torch.allclose(a.sigma2, c.sigma2, atol=1e-5)


def test_identical_images_have_zero_batch_variance(teacher):
    x = torch.randn(1, 1, 8, 8).expand(4, -1, -1, -1).contiguous()
    for layer in batch_bn_stats(teacher, x).layers:
        assert torch.allclose(layer.sigma2, torch.zeros_like(layer.sigma2), atol=1e-6)


def test_batch_stats_input_gradients_match_finite_differences(teacher):
    model = copy.deepcopy(teacher).double()
    torch.manual_seed(5)
    x = torch.randn(3, 1, 8, 8, dtype=torch.float64, requires_grad=True)

    def stats(images):
        snapshot = batch_bn_stats(model, images)
        return tuple(t for layer in snapshot.layers for t in (layer.mu, layer.sigma2))

    assert torch.autograd.gradcheck(stats, (x,), eps=1e-6, atol=1e-4, rtol=1e-3)


def test_frozen_restores_flags(teacher):
    with frozen(teacher, None):
        assert not any(p.requires_grad for p in teacher.parameters())
    assert all(p.requires_grad for p in teacher.parameters())


def test_pixel_normalizer_inverse():
    normalizer = PixelNormalizer((0.5, 0.4, 0.3), (0.2, 0.25, 0.3))
    x = torch.rand(2, 3, 4, 4) * 2 - 1
    assert torch.allclose(normalizer.inverse(normalizer(x)), x, atol=1e-6)


def test_pixel_normalizer_identity_stats():
    normalizer = PixelNormalizer((0.0,), (1.0,))
    x = torch.tensor([-1.0, 0.0, 1.0]).view(1, 1, 1, 3)
    assert torch.allclose(normalizer(x), torch.tensor([0.0, 0.5, 1.0]).view(1, 1, 1, 3))


def test_adapter_maps_to_teacher_dim(student_spec, teacher_spec):
    adapter = build_adapter(student_spec, teacher_spec)
    assert not adapter.is_identity
    assert adapter.spec.resolved_hidden() == (round((8 * 16) ** 0.5), 16)
    assert adapter_map(adapter, torch.randn(5, 8)).shape == (5, 16)


def test_adapter_bypass_when_dims_match(teacher_spec):
    adapter = build_adapter(teacher_spec, teacher_spec)
    assert adapter.is_identity
    x = torch.randn(3, 16)
    assert torch.equal(adapter_map(adapter, x), x)
    forced = build_adapter(teacher_spec, teacher_spec, bypass=False)
    assert not forced.is_identity


def test_adapter_rejects_wrong_width(student_spec, teacher_spec):
    adapter = build_adapter(student_spec, teacher_spec, hidden_dims=(4, 4))
    with pytest.raises(DimensionError):
        adapter_map(adapter, torch.randn(2, 16))


def test_adapter_spec_validation():
    with pytest.raises(ValidationError):
        AdapterSpec(in_dim=0, out_dim=4)
    with pytest.raises(ValidationError):
        AdapterSpec(in_dim=2, out_dim=4, hidden_dims=(0, 3))
