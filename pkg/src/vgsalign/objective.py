"""Dot-product similarity and the all-negatives batch hinge loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class HingeConfig:
    beta: float = 0.2

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("margin beta must be non-negative")


def similarity(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(-1)


def hinge_loss(audio_emb: Tensor, image_emb: Tensor, cfg: HingeConfig = HingeConfig()) -> Tensor:
    """Mean margin violation over every ordered non-aligned pair in the batch.

    Row k of ``audio_emb`` and ``image_emb`` are aligned. For each ordered pair
    (q, r) with q != r, audio q is compared against image r and image q
    against audio r; the sum is divided by B * (B - 1).
    """
    B = audio_emb.shape[0]
    if B < 2:
        raise ValueError("batch too small for contrastive loss")
    if image_emb.shape != audio_emb.shape:
        raise ValueError("audio and image batches must have the same shape")
    S = audio_emb @ image_emb.T
    aligned = S.diagonal().unsqueeze(1)
    off_diag = ~torch.eye(B, dtype=torch.bool)
    audio_anchor = torch.clamp(S - aligned + cfg.beta, min=0.0)
    image_anchor = torch.clamp(S.T - aligned + cfg.beta, min=0.0)
    total = (audio_anchor + image_anchor)[off_diag].sum()
    return total / (B * (B - 1))
