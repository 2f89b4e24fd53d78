"""Accuracy, Frechet distance between feature Gaussians, and conditional fidelity."""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from src.models.generator import ConditionalGenerator, generate, sample_noise
from src.models.nets import Classifier, PixelNormalizer, forward_with_features
from src.utils.errors import ConfigurationError, DimensionError, PreconditionError

logger = logging.getLogger(__name__)

FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


@contextmanager
def eval_mode(*modules: nn.Module) -> Iterator[None]:
    """Switch modules to eval mode and restore their previous flags afterwards."""
    flags = [(m, m.training) for m in modules if m is not None]
    for module, _ in flags:
        module.eval()
    try:
        yield
    finally:
        for module, was_training in flags:
            module.train(was_training)


def _device_of(module: nn.Module) -> torch.device:
    param = next(module.parameters(), None)
    return param.device if param is not None else torch.device("cpu")


def _dtype_of(module: nn.Module) -> torch.dtype:
    param = next(module.parameters(), None)
    return param.dtype if param is not None else torch.float32


@torch.no_grad()
def accuracy(model: nn.Module, batches: Iterable[Tuple[torch.Tensor, torch.Tensor]]) -> float:
    """Top-1 accuracy over ``(images, labels)`` batches.

    Raises:
        PreconditionError: No samples
    """
    device, dtype = _device_of(model), _dtype_of(model)
    correct = 0
    total = 0
    with eval_mode(model):
        for images, labels in batches:
            logits = model(images.to(device=device, dtype=dtype))
            correct += int((logits.argmax(dim=1).cpu() == labels.cpu()).sum())
            total += int(labels.shape[0])
    if total == 0:
        raise PreconditionError("accuracy needs a non-empty dataset")
    return correct / total


# ==================== FID ====================

@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of a feature set: mean, unbiased covariance, sample count."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


class TeacherFeatureExtractor:
    """Penultimate features of a frozen classifier, used as the FID embedding."""

    extractor_id = "teacher-penultimate"

    def __init__(self, model: Classifier):
        self.model = model

    def _forward(self, images: torch.Tensor):
        x = images.to(device=_device_of(self.model), dtype=_dtype_of(self.model))
        return forward_with_features(self.model, x)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with eval_mode(self.model):
            return self._forward(images).features


class TeacherLogitExtractor(TeacherFeatureExtractor):
    """Pre-softmax logits of a frozen classifier (N-dimensional embedding)."""

    extractor_id = "teacher-logits"

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        with eval_mode(self.model):
            return self._forward(images).logits


FEATURE_EXTRACTORS = {
    cls.extractor_id: cls for cls in (TeacherFeatureExtractor, TeacherLogitExtractor)
}


def build_extractor(name: str, model: Classifier) -> TeacherFeatureExtractor:
    """Instantiate the registered extractor ``name`` around ``model``.

    Raises:
        ConfigurationError: Unknown extractor id
    """
    if name not in FEATURE_EXTRACTORS:
        raise ConfigurationError(
            f"unknown feature extractor {name!r}, choose from {sorted(FEATURE_EXTRACTORS)}"
        )
    return FEATURE_EXTRACTORS[name](model)


def stats_from_features(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of an n x D feature matrix.

    Raises:
        PreconditionError: Fewer than 2 rows
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise PreconditionError(
            f"feature_stats needs at least 2 samples, got shape {features.shape}"
        )
    n, dim = features.shape
    if n < dim + 1:
        logger.warning("[EVAL] %d samples for %d-dim features; covariance is rank deficient",
                       n, dim)
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False, ddof=1).reshape(dim, dim)
    sigma = (sigma + sigma.T) / 2.0
    return FeatureStats(mu=mu, sigma=sigma, n=n)


def feature_stats(extractor: FeatureExtractor,
                  images: Union[torch.Tensor, Iterable], batch_size: int = 256) -> FeatureStats:
    """Extract features of ``images`` (a tensor or an iterable of batches) and fit them.

    Iterable items may be tensors or ``(images, labels)`` pairs.
    """
    if isinstance(images, torch.Tensor):
        batches = images.split(batch_size)
    else:
        batches = images
    chunks = []
    for batch in batches:
        if isinstance(batch, (tuple, list)):
            batch = batch[0]
        chunks.append(extractor(batch).detach().cpu().double().numpy())
    if not chunks:
        raise PreconditionError("feature_stats needs at least 2 images, got 0")
    return stats_from_features(np.concatenate(chunks, axis=0))


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix with negative eigenvalues clamped to 0."""
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    root = np.sqrt(np.clip(eigenvalues, 0.0, None))
    return (eigenvectors * root) @ eigenvectors.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at 0.

    Tr((S_a S_b)^(1/2)) is taken as the trace of the root of the symmetric
    S_a^(1/2) S_b S_a^(1/2), which has the same eigenvalues.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    sqrt_a = psd_sqrt(a.sigma)
    middle = sqrt_a @ b.sigma @ sqrt_a
    eigenvalues = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(eigenvalues, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt
    return max(float(value), 0.0)


def noise_images(count: int, shape: Sequence[int], seed: int = 0) -> torch.Tensor:
    """Uniform [-1, 1] images, the FID reference point for synthetic samples."""
    rng = torch.Generator().manual_seed(seed)
    return torch.rand(count, *shape, generator=rng) * 2.0 - 1.0


@torch.no_grad()
def synthesize(generator: ConditionalGenerator, count: int, seed: int,
               labels: Optional[torch.Tensor] = None, batch_size: int = 256) -> torch.Tensor:
    """Pixel-space samples from the generator in eval mode, returned on the CPU."""
    rng = torch.Generator().manual_seed(seed)
    device, dtype = _device_of(generator), _dtype_of(generator)
    chunks = []
    with eval_mode(generator):
        produced = 0
        while produced < count:
            size = min(batch_size, count - produced)
            batch_labels = None if labels is None else labels[produced:produced + size]
            cn = sample_noise(size, generator.latent_dim, generator.num_classes, rng=rng,
                              labels=batch_labels, device=device, dtype=dtype)
            chunks.append(generate(generator, cn).cpu())
            produced += size
    if not chunks:
        return torch.empty(0, *generator.spec.output_shape)
    return torch.cat(chunks)


# ==================== CONDITIONAL FIDELITY ====================

@torch.no_grad()
def per_class_fidelity(teacher: Classifier, generator: ConditionalGenerator,
                       n_per_class: int, seed: int = 0,
                       normalizer: Optional[PixelNormalizer] = None,
                       classes: Optional[Sequence[int]] = None,
                       batch_size: int = 256) -> Dict[int, float]:
    """Fraction of each class's samples the teacher labels with their condition.

    Class ``c`` draws its noise from ``seed + c`` so results do not depend on
    the order the classes are listed in.
    """
    if n_per_class < 1:
        raise PreconditionError(f"n_per_class must be >= 1, got {n_per_class}")
    classes = range(generator.num_classes) if classes is None else classes
    results = {}
    with eval_mode(teacher):
        for class_id in classes:
            labels = torch.full((n_per_class,), int(class_id), dtype=torch.long)
            images = synthesize(generator, n_per_class, seed + int(class_id), labels, batch_size)
            hits = 0
            for chunk in images.split(batch_size):
                x = chunk.to(device=_device_of(teacher), dtype=_dtype_of(teacher))
                if normalizer is not None:
                    x = normalizer(x)
                hits += int((teacher(x).argmax(dim=1) == int(class_id)).sum())
            results[int(class_id)] = hits / n_per_class
    return results


def conditional_fidelity(teacher: Classifier, generator: ConditionalGenerator,
                         n_per_class: int, seed: int = 0,
                         normalizer: Optional[PixelNormalizer] = None,
                         batch_size: int = 256) -> float:
    """Class-balanced teacher agreement with the generator's condition labels."""
    per_class = per_class_fidelity(teacher, generator, n_per_class, seed, normalizer,
                                   batch_size=batch_size)
    return float(np.mean(list(per_class.values())))
