"""Frozen-backbone classification: head, focal loss, freeze bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import Backbone, checksum, count_parameters, init_weights, stage_checksums
from .errors import ConfigError, FrozenBackboneError, ShapeError


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int = 768
    hidden_dim: int = 256
    out_dim: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ConfigError("head dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if min(self.alpha) <= 0:
                raise ConfigError("focal alpha entries must be positive")

    @classmethod
    def inverse_frequency(cls, counts: Sequence[int], gamma: float = 2.0) -> "FocalParams":
        """Alpha proportional to 1/count, normalized to mean 1; absent classes get the max weight."""
        # exact rationals so that balanced counts give weights of exactly 1
        inv = [Fraction(1, int(c)) if c > 0 else Fraction(0) for c in counts]
        top = max(inv)
        if top == 0:
            raise ConfigError("class counts are all zero")
        inv = [v if v > 0 else top for v in inv]
        mean = sum(inv) / len(inv)
        return cls(gamma, tuple(float(v / mean) for v in inv))


def focal_loss(
    logits: torch.Tensor,
    target: torch.Tensor | int,
    gamma: float = 2.0,
    alpha: Sequence[float] | torch.Tensor | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """``-alpha_t * (1 - p_t)**gamma * log(p_t)`` with ``p_t = softmax(logits)[target]``.

    Accepts a single logit vector with an integer target, or ``(N, C)`` logits
    with ``(N,)`` targets (averaged unless ``reduction="none"``).
    """
    logits = torch.as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device).reshape(-1)
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    if target.numel() != logits.shape[0]:
        raise ShapeError("targets", logits.shape[0], target.numel())
    if (target < 0).any() or (target >= logits.shape[1]).any():
        raise ValueError(f"target out of range [0, {logits.shape[1]})")
    logp_t = F.log_softmax(logits, dim=1).gather(1, target[:, None]).squeeze(1)
    p_t = logp_t.exp()
    loss = -((1 - p_t) ** gamma) * logp_t if gamma else -logp_t
    if alpha is not None:
        alpha = torch.as_tensor(alpha, dtype=logits.dtype, device=logits.device)
        loss = alpha[target] * loss
    if reduction == "none":
        return loss[0] if single else loss
    return loss.mean()


class ClassifierHead(nn.Module):
    """Linear -> ReLU -> Dropout -> Linear."""

    def __init__(self, spec: HeadSpec = HeadSpec()):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.in_dim, spec.hidden_dim)
        self.act = nn.ReLU()
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.fc2 = nn.Linear(spec.hidden_dim, spec.out_dim)
        init_weights(self)

    def hidden(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != self.spec.in_dim:
            raise ShapeError("head input", self.spec.in_dim, feature.shape[-1])
        return self.dropout(self.act(self.fc1(feature)))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.hidden(feature))


def classify(feature: torch.Tensor, head: ClassifierHead, mode: str = "eval") -> torch.Tensor:
    """Logits for ``feature`` with dropout active only in ``mode="train"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = head.training
    head.train(mode == "train")
    try:
        return head(feature)
    finally:
        head.train(was_training)


def freeze(backbone: Backbone) -> Backbone:
    """Exclude every backbone parameter from training and record checksums."""
    for p in backbone.parameters():
        p.requires_grad_(False)
        p.grad = None
    backbone.eval()
    if not getattr(backbone, "frozen", False):
        backbone.frozen = True
        backbone.frozen_checksum = checksum(backbone)
        backbone.frozen_stage_checksums = stage_checksums(backbone)
    return backbone


def is_frozen(backbone: Backbone) -> bool:
    return getattr(backbone, "frozen", False) and not any(
        p.requires_grad for p in backbone.parameters()
    )


def verify_frozen(backbone: Backbone) -> bool:
    """True when the backbone still matches the checksum taken at freeze time."""
    if not getattr(backbone, "frozen", False):
        raise FrozenBackboneError("backbone was never frozen")
    return checksum(backbone) == backbone.frozen_checksum


def unfreeze_final_stage(backbone: Backbone) -> list[nn.Parameter]:
    """Make the last stage and its norm trainable; returns those parameters."""
    if not getattr(backbone, "frozen", False):
        raise FrozenBackboneError("unfreeze_final_stage requires a frozen backbone")
    params = []
    for module in backbone.final_stage_modules():
        for p in module.parameters():
            p.requires_grad_(True)
            params.append(p)
    backbone.partially_unfrozen = True
    return params


def final_stage_parameter_count(backbone: Backbone) -> int:
    return sum(count_parameters(m) for m in backbone.final_stage_modules())


@torch.no_grad()
def extract_features(image: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Pooled final-stage feature from a frozen backbone, for one image or a batch."""
    if not is_frozen(backbone):
        raise FrozenBackboneError("extract_features requires a fully frozen backbone")
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    feats = backbone.forward_features(x)
    return feats[0] if single else feats


@dataclass
class HeadAudit:
    """Parameter audit used by parity checks."""

    head_params: int
    layer_shapes: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def of(cls, head: ClassifierHead) -> "HeadAudit":
        return cls(count_parameters(head), [tuple(p.shape) for p in head.parameters()])
