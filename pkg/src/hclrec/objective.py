"""Next-item loss, per-level InfoNCE and their weighted combination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .model import HiddenStates


@dataclass
class LossWeights:
    lambdas: tuple[float, ...] = (0.1, 0.075, 0.05)
    temperatures: tuple[float, ...] = (1.0, 1.5, 2.0)

    def __post_init__(self) -> None:
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.temperatures = tuple(float(x) for x in self.temperatures)
        if len(self.lambdas) != len(self.temperatures):
            raise ValueError("lambdas and temperatures must have one entry per level")
        if any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be non-negative")
        if any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")

    @property
    def levels(self) -> int:
        return len(self.lambdas)

    @classmethod
    def equal_step(cls, m: int, lam_top: float = 0.1, lam_step: float = 0.025,
                   tau_low: float = 1.0, tau_step: float = 0.5) -> "LossWeights":
        """Descending lambdas and ascending temperatures with constant gaps."""
        return cls(
            tuple(lam_top - i * lam_step for i in range(m)),
            tuple(tau_low + i * tau_step for i in range(m)),
        )


def next_item_loss(
    h: HiddenStates,
    targets: torch.Tensor,
    negatives: torch.Tensor,
    item_embedding: torch.Tensor,
) -> torch.Tensor:
    """Binary cross-entropy with one sampled negative per position.

    Positions whose target is padding (0) are excluded; the result is the mean
    over the remaining positions.
    """
    valid = targets > 0
    if not valid.any():
        return h.values.sum() * 0.0
    pos = (h.values * item_embedding[targets]).sum(-1)
    neg = (h.values * item_embedding[negatives]).sum(-1)
    per_position = -F.logsigmoid(pos) - F.logsigmoid(-neg)
    return per_position[valid].mean()


def similarity_matrix(z: torch.Tensor, kind: str = "dot") -> torch.Tensor:
    if kind == "cosine":
        z = F.normalize(z, dim=-1)
    elif kind != "dot":
        raise ValueError(f"unknown similarity {kind!r}")
    return z @ z.T


def info_nce(
    reps_a: torch.Tensor, reps_b: torch.Tensor, temperature: float, sim: str = "dot"
) -> torch.Tensor:
    """InfoNCE over 2B views with in-batch negatives.

    Every view is an anchor; its partner is the positive and all other views
    except itself are candidates.
    """
    if reps_a.shape != reps_b.shape or reps_a.dim() != 2:
        raise ValueError("representations must both be B x d")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = torch.cat([reps_a, reps_b], 0)
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite representation in contrastive loss")
    b = reps_a.shape[0]
    logits = similarity_matrix(z, sim) / temperature
    self_mask = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    partner = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(logits, partner)


def total_contrastive(per_level: Sequence[torch.Tensor | float], weights: LossWeights):
    if len(per_level) != weights.levels:
        raise ValueError(f"expected {weights.levels} level losses, got {len(per_level)}")
    total = 0.0
    for lam, loss in zip(weights.lambdas, per_level):
        total = total + lam * loss
    return total


def final_loss(l_sr, l_cl):
    return l_sr + l_cl
