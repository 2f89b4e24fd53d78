"""Loss terms of conditional pseudo-supervised contrastive distillation.

BNS statistics matching, improved distillation (KL + log-L2), pseudo-supervised
cross-entropy, teacher/student-view contrast, and the student and generator
objectives built from them.
"""
from dataclasses import dataclass
from typing import Dict, Literal, Optional

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from src.models.nets import BNStatsSnapshot
from src.utils.errors import (
    DimensionError,
    PreconditionError,
    StructureError,
    check_label_range,
)


class HyperParams(BaseModel):
    """Scalar weights of the method.

    Args:
        alpha: Weight of the log-L2 logit regularizer inside IKD
        beta: Weight of the BNS loss in the generator objective
        gamma: Weight of the contrastive loss in the generator objective
        eta: Weight of the pseudo-supervised cross-entropy (both stages)
        tau: Contrastive temperature
        kl_weight: Weight of the KL term inside IKD (0 leaves log-L2 only)
        kd_temperature: Softening temperature of the KL term
        scl_reduction: How the objectives reduce the contrast over anchors
    """

    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    alpha: float = Field(5.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(0.7, ge=0)
    eta: float = Field(1.0, ge=0)
    tau: float = Field(0.1, gt=0)
    kl_weight: float = Field(1.0, ge=0)
    kd_temperature: float = Field(1.0, gt=0)
    scl_reduction: Literal["sum", "mean"] = "sum"


@dataclass(frozen=True)
class RepresentationPair:
    """Teacher-view anchors and adapter-mapped student views of one batch."""

    z_t: torch.Tensor
    z_s: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.z_t.dim() != 2 or self.z_t.shape != self.z_s.shape:
            raise DimensionError(
                f"teacher/student features must be equal B x D, got "
                f"{tuple(self.z_t.shape)} and {tuple(self.z_s.shape)}"
            )
        if self.labels.shape != (self.z_t.shape[0],):
            raise DimensionError(
                f"expected {self.z_t.shape[0]} labels, got {tuple(self.labels.shape)}"
            )


def _check_logits(t_logits: torch.Tensor, s_logits: torch.Tensor) -> None:
    if t_logits.shape != s_logits.shape or t_logits.dim() != 2:
        raise DimensionError(
            f"logit shapes must match as B x N, got {tuple(t_logits.shape)} "
            f"and {tuple(s_logits.shape)}"
        )


def bns_loss(snapshot: BNStatsSnapshot, batch: BNStatsSnapshot) -> torch.Tensor:
    """Sum over layers of ||mu - mu(x)||_2 + ||sigma2 - sigma2(x)||_2."""
    if snapshot.layer_ids != batch.layer_ids:
        raise StructureError(
            f"BN layer lists differ: {snapshot.layer_ids} vs {batch.layer_ids}"
        )
    total = None
    for frozen_layer, batch_layer in zip(snapshot.layers, batch.layers):
        if frozen_layer.mu.shape != batch_layer.mu.shape:
            raise StructureError(
                f"layer {frozen_layer.layer_id}: {tuple(frozen_layer.mu.shape)} channels "
                f"vs {tuple(batch_layer.mu.shape)}"
            )
        mu = frozen_layer.mu.to(batch_layer.mu)
        sigma2 = frozen_layer.sigma2.to(batch_layer.sigma2)
        term = (torch.linalg.vector_norm(mu - batch_layer.mu)
                + torch.linalg.vector_norm(sigma2 - batch_layer.sigma2))
        total = term if total is None else total + term
    return total


def kl_term(t_logits: torch.Tensor, s_logits: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    """Batch-mean KL(softmax(t / T) || softmax(s / T)), scaled by T^2."""
    _check_logits(t_logits, s_logits)
    t_log_prob = F.log_softmax(t_logits / temperature, dim=1)
    s_log_prob = F.log_softmax(s_logits / temperature, dim=1)
    kl = F.kl_div(s_log_prob, t_log_prob, reduction="batchmean", log_target=True)
    return kl * temperature ** 2


def r_l2_term(t_logits: torch.Tensor, s_logits: torch.Tensor) -> torch.Tensor:
    """Batch-mean log(1 + ||t_i - s_i||_2)."""
    _check_logits(t_logits, s_logits)
    return torch.log1p(torch.linalg.vector_norm(t_logits - s_logits, dim=1)).mean()


def ikd_loss(t_logits: torch.Tensor, s_logits: torch.Tensor, alpha: float,
             kl_weight: float = 1.0, temperature: float = 1.0) -> torch.Tensor:
    """KL term plus ``alpha`` times the log-L2 term."""
    return (kl_weight * kl_term(t_logits, s_logits, temperature)
            + alpha * r_l2_term(t_logits, s_logits))


def ce_stage_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy against the generator's condition labels."""
    check_label_range(y, logits.shape[1])
    return F.cross_entropy(logits, y)


def scl_loss(pair: RepresentationPair, tau: float,
             reduction: Literal["sum", "mean"] = "sum") -> torch.Tensor:
    """Teacher-anchored contrast over same-class student views.

    For anchor i, the positives are every student view sharing y_i (i itself
    included) and the denominator runs over the student views j != i. Rows
    are L2-normalized first.

    Raises:
        PreconditionError: Batch smaller than 2
    """
    batch_size = pair.z_t.shape[0]
    if batch_size < 2:
        raise PreconditionError(f"scl_loss needs a batch of at least 2, got {batch_size}")
    z_t = F.normalize(pair.z_t, dim=1)
    z_s = F.normalize(pair.z_s, dim=1)
    sim = z_t @ z_s.T / tau

    self_mask = torch.eye(batch_size, dtype=torch.bool, device=sim.device)
    log_denominator = torch.logsumexp(sim.masked_fill(self_mask, float("-inf")), dim=1,
                                      keepdim=True)
    log_prob = sim - log_denominator

    positives = (pair.labels.unsqueeze(0) == pair.labels.unsqueeze(1)).to(sim.dtype)
    per_anchor = -(positives * log_prob).sum(dim=1) / positives.sum(dim=1)
    if reduction == "mean":
        return per_anchor.mean()
    return per_anchor.sum()


# ==================== OBJECTIVES ====================

def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def student_terms(t_logits, s_logits, y, hp: HyperParams) -> Dict[str, torch.Tensor]:
    """Components of the student objective; ``total`` is the minimized value.

    A component whose weight is zero is not computed and reads as 0.
    """
    kl = kl_term(t_logits, s_logits, hp.kd_temperature) if hp.kl_weight else _zero(s_logits)
    r_l2 = r_l2_term(t_logits, s_logits) if hp.alpha else _zero(s_logits)
    ce = ce_stage_loss(s_logits, y) if hp.eta else _zero(s_logits)
    ikd = hp.kl_weight * kl + hp.alpha * r_l2
    return {
        "kl": kl,
        "r_l2": r_l2,
        "ikd": ikd,
        "ce": ce,
        "total": ikd + hp.eta * ce,
    }


def student_objective(t_logits, s_logits, y, hp: HyperParams) -> torch.Tensor:
    """IKD plus eta-weighted student cross-entropy."""
    return student_terms(t_logits, s_logits, y, hp)["total"]


def generator_terms(t_logits, s_logits, y, pair: Optional[RepresentationPair],
                    snapshot: BNStatsSnapshot, batch_stats: BNStatsSnapshot,
                    hp: HyperParams) -> Dict[str, torch.Tensor]:
    """Components of the generator objective; ``total`` is the minimized value.

    IKD and the contrast enter with a minus sign: the generator maximizes them.
    ``pair`` may be None when ``hp.gamma`` is zero.
    """
    _check_logits(t_logits, s_logits)
    kl = kl_term(t_logits, s_logits, hp.kd_temperature) if hp.kl_weight else _zero(t_logits)
    r_l2 = r_l2_term(t_logits, s_logits) if hp.alpha else _zero(t_logits)
    ikd = hp.kl_weight * kl + hp.alpha * r_l2
    bns = bns_loss(snapshot, batch_stats) if hp.beta else _zero(t_logits)
    if hp.gamma:
        if pair is None:
            raise PreconditionError("gamma > 0 needs teacher/student representations")
        scl = scl_loss(pair, hp.tau, hp.scl_reduction)
    else:
        scl = _zero(t_logits)
    ce = ce_stage_loss(t_logits, y) if hp.eta else _zero(t_logits)
    return {
        "kl": kl,
        "r_l2": r_l2,
        "ikd": ikd,
        "bns": bns,
        "scl": scl,
        "ce": ce,
        "total": -ikd + hp.beta * bns - hp.gamma * scl + hp.eta * ce,
    }


def generator_objective(t_logits, s_logits, y, pair, snapshot, batch_stats,
                        hp: HyperParams) -> torch.Tensor:
    return generator_terms(t_logits, s_logits, y, pair, snapshot, batch_stats, hp)["total"]
