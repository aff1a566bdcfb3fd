"""Dense-weight penalty, the composite training objective, and epoch schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from . import autodiff as ad
from .autodiff import Tensor

ALPHA_DECAYS = ("none", "linear", "cosine")
LR_KINDS = ("cosine", "constant")


@dataclass(frozen=True)
class RegularizerConfig:
    alpha: float = 1e-5
    lam: float = 1e-4
    alpha_decay: str = "none"
    # apply the l2 term to S3 latents too (the alternative is fp32 weights only)
    l2_on_s3_latents: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")
        if self.alpha_decay not in ALPHA_DECAYS:
            raise ValueError(f"alpha_decay must be one of {ALPHA_DECAYS}, got {self.alpha_decay!r}")


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    total_epochs: int = 10
    kind: str = "cosine"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.kind not in LR_KINDS:
            raise ValueError(f"lr schedule kind must be one of {LR_KINDS}")


def _check_epoch(epoch: int, total: int) -> None:
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")


def _cosine(epoch: int, total: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def alpha_at(cfg: RegularizerConfig, epoch: int, total_epochs: int) -> float:
    _check_epoch(epoch, total_epochs)
    if cfg.alpha_decay == "linear":
        return cfg.alpha * (1.0 - epoch / total_epochs)
    if cfg.alpha_decay == "cosine":
        return cfg.alpha * _cosine(epoch, total_epochs)
    return cfg.alpha


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    _check_epoch(epoch, schedule.total_epochs)
    if schedule.kind == "cosine":
        return schedule.initial_lr * _cosine(epoch, schedule.total_epochs)
    return schedule.initial_lr


def dense_weight_penalty(w_sparse: Tensor) -> Tensor:
    """Sum of max(-w, 0): penalizes sparsity latents that fall below zero."""
    return ad.sum(ad.relu(ad.scale(w_sparse, -1.0)))


def total_loss(
    task_loss: Tensor,
    all_latents: Iterable[Tensor],
    w_sparse_latents: Iterable[Tensor],
    cfg: RegularizerConfig,
    epoch: int = 0,
    total_epochs: int = 1,
) -> Tensor:
    """task_loss + lam * sum ||latent||^2 + alpha(epoch) * sum dense_weight_penalty(w_sparse)."""
    loss = task_loss
    if cfg.lam > 0:
        for lat in all_latents:
            loss = ad.add(loss, ad.scale(ad.sum_squares(lat), cfg.lam))
    alpha = alpha_at(cfg, epoch, total_epochs)
    if alpha > 0:
        for ws in w_sparse_latents:
            loss = ad.add(loss, ad.scale(dense_weight_penalty(ws), alpha))
    return loss

