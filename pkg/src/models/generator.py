"""Class-conditional generator with Categorical Feature Embedding (CFE) normalization."""
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.nets import BN_EPS
from src.utils.errors import DimensionError, PreconditionError, check_label_range

CFE_MODES = ("full_layer", "three_layer", "plain_bn")
LEAKY_SLOPE = 0.2


class GeneratorSpec(BaseModel):
    """Structure of the conditional generator."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    latent_dim: int = Field(100, ge=1)
    num_classes: int = Field(10, ge=2)
    output_shape: Tuple[int, int, int] = (1, 28, 28)
    base_channels: int = Field(64, ge=1)
    cfe_mode: Literal["full_layer", "three_layer", "plain_bn"] = "full_layer"

    @model_validator(mode="after")
    def _check_output_shape(self):
        channels, height, width = self.output_shape
        if channels < 1:
            raise ValueError(f"output channels must be >= 1, got {channels}")
        # the seed map must hold at least 2x2 values so a batch of 1 can normalize
        if height < 8 or width < 8 or height % 4 or width % 4:
            raise ValueError(
                f"output height/width must be >= 8 and divisible by 4, got {height}x{width}"
            )
        return self


@dataclass(frozen=True)
class ConditionedNoise:
    """Latent vectors ``z`` paired with class conditions ``y``."""

    z: torch.Tensor
    y: torch.Tensor

    def __len__(self) -> int:
        return self.z.shape[0]


def sample_noise(batch_size: int, latent_dim: int, num_classes: int,
                 rng: Optional[torch.Generator] = None,
                 labels: Optional[torch.Tensor] = None,
                 device=None, dtype=torch.float32) -> ConditionedNoise:
    """Draw z ~ N(0, 1) and y ~ U{0..N-1} (or use the given labels).

    Sampling happens on the CPU generator ``rng`` so the stream does not depend
    on the device.
    """
    z = torch.randn(batch_size, latent_dim, generator=rng, dtype=dtype)
    if labels is None:
        y = torch.randint(0, num_classes, (batch_size,), generator=rng)
    else:
        y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    return ConditionedNoise(z.to(device), y.to(device))


def cfe_forward(features: torch.Tensor, labels: torch.Tensor,
                weight: torch.Tensor, bias: torch.Tensor,
                batch_stats: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
                eps: float = BN_EPS) -> torch.Tensor:
    """Normalize per channel, then scale/shift with the rows of each sample's class.

    Args:
        features: Feature batch B x d x ...
        labels: Class id per sample, length B
        weight: Per-class scale table N x d
        bias: Per-class shift table N x d
        batch_stats: Optional (mean, var) per channel; computed from the batch
            (biased variance) when omitted
        eps: Variance floor

    Returns:
        Tensor shaped like ``features``
    """
    if features.dim() < 2 or labels.shape[0] != features.shape[0]:
        raise DimensionError(
            f"features {tuple(features.shape)} and labels {tuple(labels.shape)} disagree"
        )
    check_label_range(labels, weight.shape[0])
    broadcast = (1, -1) + (1,) * (features.dim() - 2)
    if batch_stats is None:
        dims = [0] + list(range(2, features.dim()))
        mean = features.mean(dim=dims)
        var = features.var(dim=dims, correction=0)
    else:
        mean, var = batch_stats
        if bool((var < 0).any()):
            raise PreconditionError("batch variance must be non-negative")
    normalized = (features - mean.view(broadcast)) / torch.sqrt(var.view(broadcast) + eps)
    sample_view = (features.shape[0], -1) + (1,) * (features.dim() - 2)
    return normalized * weight[labels].view(sample_view) + bias[labels].view(sample_view)


class CategoricalFeatureEmbedding(nn.Module):
    """BatchNorm whose scale and shift are looked up per class.

    Training mode normalizes with the batch statistics and updates running
    averages; evaluation mode uses the running averages.
    """

    def __init__(self, num_features: int, num_classes: int,
                 eps: float = BN_EPS, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.num_classes = num_classes
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_classes, num_features))
        self.bias = nn.Parameter(torch.zeros(num_classes, num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        check_label_range(y, self.num_classes)
        normalized = F.batch_norm(
            x, self.running_mean, self.running_var, None, None,
            self.training, self.momentum, self.eps,
        )
        sample_view = (x.shape[0], -1) + (1,) * (x.dim() - 2)
        return normalized * self.weight[y].view(sample_view) + self.bias[y].view(sample_view)


class PlainNorm(nn.BatchNorm2d):
    """Unconditional BatchNorm that accepts (and ignores) labels."""

    def forward(self, x: torch.Tensor, y: Optional[torch.Tensor] = None) -> torch.Tensor:
        return super().forward(x)


def _norm(conditional: bool, channels: int, num_classes: int) -> nn.Module:
    if conditional:
        return CategoricalFeatureEmbedding(channels, num_classes)
    return PlainNorm(channels, eps=BN_EPS)


class ConditionalGenerator(nn.Module):
    """FC seed -> [norm] -> up2x -> conv/norm/LReLU -> up2x -> conv/norm/LReLU -> conv/norm -> Tanh."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        channels, height, width = spec.output_shape
        base = spec.base_channels
        half = max(1, base // 2)
        n = spec.num_classes
        self.init_size = (height // 4, width // 4)

        inner = spec.cfe_mode in ("full_layer", "three_layer")
        outer = spec.cfe_mode == "full_layer"

        self.label_embedding = nn.Embedding(n, spec.latent_dim)
        self.fc = nn.Linear(2 * spec.latent_dim, base * self.init_size[0] * self.init_size[1])
        self.norm0 = _norm(inner, base, n)
        self.conv1 = nn.Conv2d(base, base, 3, stride=1, padding=1)
        self.norm1 = _norm(inner, base, n)
        self.conv2 = nn.Conv2d(base, half, 3, stride=1, padding=1)
        self.norm2 = _norm(inner, half, n)
        self.conv3 = nn.Conv2d(half, channels, 3, stride=1, padding=1)
        self.norm3 = _norm(outer, channels, n)

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = self.fc(torch.cat([z, self.label_embedding(y)], dim=1))
        h = h.view(z.shape[0], self.spec.base_channels, *self.init_size)
        h = self.norm0(h, y)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.norm1(self.conv1(h), y), LEAKY_SLOPE)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.norm2(self.conv2(h), y), LEAKY_SLOPE)
        return torch.tanh(self.norm3(self.conv3(h), y))

    def cfe_layers(self) -> List[CategoricalFeatureEmbedding]:
        return [m for m in self.modules() if isinstance(m, CategoricalFeatureEmbedding)]


def build_generator(spec: GeneratorSpec) -> ConditionalGenerator:
    return ConditionalGenerator(spec)


def generate(gen: ConditionalGenerator, cn: ConditionedNoise) -> torch.Tensor:
    """Synthesize a B x C x H x W batch in [-1, 1] for the given noise and labels."""
    if len(cn) < 1:
        raise PreconditionError("generate needs at least one sample")
    if cn.z.dim() != 2 or cn.z.shape[1] != gen.latent_dim:
        raise DimensionError(
            f"expected z of shape (B, {gen.latent_dim}), got {tuple(cn.z.shape)}"
        )
    if cn.y.shape != (cn.z.shape[0],):
        raise DimensionError(f"expected {cn.z.shape[0]} labels, got {tuple(cn.y.shape)}")
    check_label_range(cn.y, gen.num_classes)
    return gen(cn.z, cn.y)


def generator_parameters(gen: ConditionalGenerator) -> List[nn.Parameter]:
    """Every trainable tensor, CFE tables and the label embedding included."""
    return list(gen.parameters())
