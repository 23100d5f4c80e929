"""Hardest-in-batch triplet margin loss for descriptor learning."""
from __future__ import annotations

import torch

_EPS = 1e-12


def distance_matrix(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """``D[i, j] = sqrt(max(0, 2 - 2 <fa_i, fb_j>))`` for unit-norm rows.

    Exact zeros are returned as 0 with a zero (not NaN) gradient.
    """
    sq = (2.0 - 2.0 * fa @ fb.T).clamp_min(0.0)
    root = sq.clamp_min(_EPS).sqrt()
    return torch.where(sq > _EPS, root, torch.zeros_like(root))


def hardest_negatives(dist: torch.Tensor):
    """Per row, the smallest off-diagonal entry and its column (lowest index on ties)."""
    n = dist.shape[0]
    if n < 2:
        raise ValueError("hardest negative mining needs at least 2 rows")
    masked = dist + torch.diag(torch.full((n,), float("inf"), dtype=dist.dtype))
    # torch.min returns the first occurrence of the minimum
    values, idx = masked.min(dim=1)
    return idx, values


def triplet_margin_loss(delta_pos, delta_hard, margin: float = 0.5):
    return torch.clamp(margin + torch.as_tensor(delta_pos) - torch.as_tensor(delta_hard),
                       min=0.0)


def descriptor_loss(fa: torch.Tensor, fb: torch.Tensor, margin: float = 0.5) -> torch.Tensor:
    """Mean hinge ``max(0, margin + D_ii - min_{j != i} D_ij)`` over rows."""
    if fa.shape != fb.shape:
        raise ValueError(f"descriptor batch shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    dist = distance_matrix(fa, fb)
    _, hard = hardest_negatives(dist)
    return triplet_margin_loss(dist.diagonal(), hard, margin).mean()
