"""Teacher/student classifiers, BatchNorm statistics and the feature Adapter."""
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.utils.errors import (
    ConfigurationError,
    DimensionError,
    PreconditionError,
    StructureError,
)

BN_EPS = 1e-5
ARCHITECTURES = ("cnn-small", "resnet-tiny")


class ClassifierSpec(BaseModel):
    """Structure of a teacher or student classifier."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arch_name: str = "cnn-small"
    num_classes: int = Field(10, ge=2)
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    feature_dim: int = Field(128, ge=1)

    @field_validator("input_shape")
    @classmethod
    def _positive_shape(cls, value):
        if any(v < 1 for v in value):
            raise ValueError(f"input_shape entries must be >= 1, got {value}")
        return value


class ForwardResult(NamedTuple):
    logits: torch.Tensor
    features: torch.Tensor


@dataclass(frozen=True)
class LayerStats:
    layer_id: str
    mu: torch.Tensor
    sigma2: torch.Tensor


@dataclass(frozen=True)
class BNStatsSnapshot:
    """Per-layer (mean, variance) pairs in forward traversal order."""

    layers: Tuple[LayerStats, ...]

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def layer_ids(self) -> List[str]:
        return [layer.layer_id for layer in self.layers]

    def to_state(self) -> Dict[str, object]:
        """Plain-tensor form for ``torch.save``."""
        return {
            "layer_ids": self.layer_ids,
            "mu": [layer.mu.detach().cpu() for layer in self.layers],
            "sigma2": [layer.sigma2.detach().cpu() for layer in self.layers],
        }

    @staticmethod
    def from_state(state: Dict[str, object]) -> "BNStatsSnapshot":
        return BNStatsSnapshot(tuple(
            LayerStats(layer_id, mu, sigma2)
            for layer_id, mu, sigma2 in zip(state["layer_ids"], state["mu"], state["sigma2"])
        ))

    def to(self, device=None, dtype=None) -> "BNStatsSnapshot":
        return BNStatsSnapshot(tuple(
            LayerStats(layer.layer_id,
                       layer.mu.to(device=device, dtype=dtype),
                       layer.sigma2.to(device=device, dtype=dtype))
            for layer in self.layers
        ))


class PixelNormalizer:
    """Map [-1, 1] pixel-space images into a classifier's normalized input space."""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        if len(mean) != len(std):
            raise ConfigurationError(
                f"normalization mean/std lengths differ: {len(mean)} vs {len(std)}"
            )
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)

    def _view(self, values, x: torch.Tensor) -> torch.Tensor:
        return torch.tensor(values, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        pixels = (x + 1.0) / 2.0
        return (pixels - self._view(self.mean, x)) / self._view(self.std, x)

    def inverse(self, x: torch.Tensor) -> torch.Tensor:
        pixels = x * self._view(self.std, x) + self._view(self.mean, x)
        return pixels * 2.0 - 1.0


class Classifier(nn.Module):
    """Base class: ``extract_features`` gives penultimate features, ``head`` the logits."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extract_features(x))

    def norm_layers(self) -> List[Tuple[str, nn.BatchNorm2d]]:
        """Normalization layers in forward traversal order."""
        return [(name, m) for name, m in self.named_modules() if isinstance(m, nn.BatchNorm2d)]


class CnnSmall(Classifier):
    """Three conv blocks (conv, BN, ReLU, pool) and a linear head."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__(spec)
        channels, _, _ = spec.input_shape
        widths = (32, 64, spec.feature_dim)
        blocks = []
        in_ch = channels
        for i, width in enumerate(widths):
            layers = [
                nn.Conv2d(in_ch, width, 3, padding=1, bias=False),
                nn.BatchNorm2d(width, eps=BN_EPS),
                nn.ReLU(inplace=True),
            ]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            blocks.append(nn.Sequential(*layers))
            in_ch = width
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(spec.feature_dim, spec.num_classes)

    def extract_features(self, x):
        return torch.flatten(self.pool(self.blocks(x)), 1)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch, eps=BN_EPS)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, eps=BN_EPS)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch, eps=BN_EPS),
            )

    def forward(self, x):
        # shortcut runs last so hook order matches registration order
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetTiny(Classifier):
    """Stem plus three residual stages (16, 32, feature_dim channels)."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__(spec)
        channels, _, _ = spec.input_shape
        self.stem = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1, bias=False),
            nn.BatchNorm2d(16, eps=BN_EPS),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.Sequential(
            BasicBlock(16, 16, 1),
            BasicBlock(16, 32, 2),
            BasicBlock(32, spec.feature_dim, 2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(spec.feature_dim, spec.num_classes)

    def extract_features(self, x):
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)


_BUILDERS = {
    "cnn-small": CnnSmall,
    "resnet-tiny": ResNetTiny,
}


def build_classifier(spec: ClassifierSpec) -> Classifier:
    """Build a trainable classifier for ``spec``.

    Raises:
        ConfigurationError: Unknown ``arch_name``
    """
    if spec.arch_name not in _BUILDERS:
        raise ConfigurationError(
            f"unknown arch_name '{spec.arch_name}', valid: {', '.join(ARCHITECTURES)}"
        )
    return _BUILDERS[spec.arch_name](spec)


def _check_input(model: Classifier, x: torch.Tensor) -> None:
    expected = tuple(model.spec.input_shape)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(
            f"expected input of shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}"
        )


def forward_with_features(model: Classifier, x: torch.Tensor) -> ForwardResult:
    """Run ``model`` returning logits and the penultimate features feeding its head."""
    _check_input(model, x)
    features = model.extract_features(x)
    return ForwardResult(model.head(features), features)


def capture_bn_stats(model: Classifier) -> BNStatsSnapshot:
    """Freeze the running mean/variance of every normalization layer.

    Raises:
        StructureError: The model has no normalization layers
    """
    layers = model.norm_layers()
    if not layers:
        raise StructureError("model has no BatchNorm layers; BNS loss is undefined")
    return BNStatsSnapshot(tuple(
        LayerStats(name, bn.running_mean.detach().clone(), bn.running_var.detach().clone())
        for name, bn in layers
    ))


class BNStatsRecorder:
    """Forward hooks collecting the batch mean/variance entering each BN layer.

    The recorded statistics stay attached to the autograd graph so gradients
    reach the input images.
    """

    def __init__(self, model: Classifier):
        self.model = model
        self._stats: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}
        self._handles = []

    def _hook(self, name):
        def record(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, correction=0)
            self._stats[name] = (mean, var)
        return record

    def __enter__(self) -> "BNStatsRecorder":
        layers = self.model.norm_layers()
        if not layers:
            raise StructureError("model has no BatchNorm layers; BNS loss is undefined")
        self._order = [name for name, _ in layers]
        for name, bn in layers:
            self._handles.append(bn.register_forward_hook(self._hook(name)))
        return self

    def __exit__(self, *exc):
        for handle in self._handles:
            handle.remove()
        self._handles.clear()
        return False

    def snapshot(self) -> BNStatsSnapshot:
        missing = [name for name in self._order if name not in self._stats]
        if missing:
            raise StructureError(f"no statistics recorded for layers {missing}")
        return BNStatsSnapshot(tuple(
            LayerStats(name, *self._stats[name]) for name in self._order
        ))


def batch_bn_stats(model: Classifier, x: torch.Tensor) -> BNStatsSnapshot:
    """Differentiable per-layer statistics of ``x``'s activations.

    Raises:
        PreconditionError: Batch size below 2
    """
    if x.shape[0] < 2:
        raise PreconditionError(f"batch_bn_stats needs a batch of at least 2, got {x.shape[0]}")
    _check_input(model, x)
    with BNStatsRecorder(model) as recorder:
        model(x)
    return recorder.snapshot()


@contextmanager
def frozen(*modules: Optional[nn.Module]) -> Iterator[None]:
    """Disable ``requires_grad`` on every parameter for the duration of the block."""
    saved = []
    for module in modules:
        if module is None:
            continue
        for p in module.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


# ==================== ADAPTER ====================

class AdapterSpec(BaseModel):
    """Student -> teacher feature mapping."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    in_dim: int = Field(ge=1)
    out_dim: int = Field(ge=1)
    hidden_dims: Optional[Tuple[int, int]] = None
    bypass: bool = True

    @field_validator("hidden_dims")
    @classmethod
    def _positive_hidden(cls, value):
        if value is not None and any(v < 1 for v in value):
            raise ValueError(f"hidden_dims must be positive, got {value}")
        return value

    def resolved_hidden(self) -> Tuple[int, int]:
        if self.hidden_dims is not None:
            return tuple(self.hidden_dims)
        return (max(1, round(math.sqrt(self.in_dim * self.out_dim))), self.out_dim)


class Adapter(nn.Module):
    """Two-hidden-layer MLP, or a parameter-free identity when bypassed."""

    def __init__(self, spec: AdapterSpec):
        super().__init__()
        self.spec = spec
        self.in_dim = spec.in_dim
        self.out_dim = spec.out_dim
        if spec.bypass and spec.in_dim == spec.out_dim:
            self.net = nn.Identity()
        else:
            h1, h2 = spec.resolved_hidden()
            self.net = nn.Sequential(
                nn.Linear(spec.in_dim, h1),
                nn.ReLU(inplace=True),
                nn.Linear(h1, h2),
                nn.ReLU(inplace=True),
                nn.Linear(h2, spec.out_dim),
            )

    @property
    def is_identity(self) -> bool:
        return isinstance(self.net, nn.Identity)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


def build_adapter(student: ClassifierSpec, teacher: ClassifierSpec,
                  hidden_dims: Optional[Sequence[int]] = None, bypass: bool = True) -> Adapter:
    return Adapter(AdapterSpec(
        in_dim=student.feature_dim,
        out_dim=teacher.feature_dim,
        hidden_dims=tuple(hidden_dims) if hidden_dims else None,
        bypass=bypass,
    ))


def adapter_map(adapter: Adapter, features: torch.Tensor) -> torch.Tensor:
    """Map student features to the teacher's feature dimension.

    Raises:
        DimensionError: ``features`` last dimension differs from ``adapter.in_dim``
    """
    if features.shape[-1] != adapter.in_dim:
        raise DimensionError(
            f"adapter expects feature dim {adapter.in_dim}, got {features.shape[-1]}"
        )
    return adapter(features)
