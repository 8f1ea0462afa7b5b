"""Image similarity, field regularization and the registration objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .field_geometry import DisplacementField, Image2D, ShapeError, warp_images

TV_EPS = 1e-8


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.1
    sequence_length: int = 25

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("regularization weight must be non-negative")
        if self.sequence_length < 1:
            raise ValueError("sequence length must be at least 1")


# tensor forms; images [B, 1, H, W], fields [B, 2, H, W]

def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {tuple(a.shape)} with {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def total_variation(disp: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    """Isotropic TV with forward differences, averaged over interior pixels."""
    if disp.shape[-1] < 2 or disp.shape[-2] < 2:
        raise ValueError("total variation needs at least a 2x2 field")
    dx = disp[..., :-1, 1:] - disp[..., :-1, :-1]
    dy = disp[..., 1:, :-1] - disp[..., :-1, :-1]
    # both displacement components share one norm
    sq = (dx ** 2).sum(-3) + (dy ** 2).sum(-3)
    return torch.sqrt(sq + eps).mean()


def sequence_loss(fixed: torch.Tensor, moving: torch.Tensor, fields: Sequence[torch.Tensor],
                  lam: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (total, image term, regularizer) for a list of cumulative fields."""
    if len(fields) == 0:
        raise ValueError("sequence objective needs at least one field")
    image_term = sum(mse(fixed, warp_images(moving, f)) for f in fields) / len(fields)
    reg = total_variation(fields[-1])
    return image_term + lam * reg, image_term, reg


# value-type forms

def _pair(a: Image2D, b: Image2D) -> None:
    if not a.grid.same_as(b.grid):
        raise ShapeError(f"grid mismatch: {a.grid.shape} vs {b.grid.shape}")


def mse_loss(a: Image2D, b: Image2D) -> torch.Tensor:
    _pair(a, b)
    return mse(a.values, b.values)


def tv_loss(field: DisplacementField, eps: float = TV_EPS) -> torch.Tensor:
    return total_variation(field.as_tensor(), eps)


def sequence_objective(fixed: Image2D, moving: Image2D, fields: Sequence[DisplacementField],
                       lam: float) -> torch.Tensor:
    if len(fields) == 0:
        raise ValueError("sequence objective needs at least one field")
    _pair(fixed, moving)
    for f in fields:
        if not f.grid.same_as(fixed.grid):
            raise ShapeError(f"field grid {f.grid.shape} does not match images {fixed.grid.shape}")
    batch = [f.as_batch().to(moving.values.dtype) for f in fields]
    return sequence_loss(fixed.as_batch(), moving.as_batch(), batch, lam)[0]


def classic_objective(fixed: Image2D, moving: Image2D, field: DisplacementField, lam: float) -> torch.Tensor:
    return sequence_objective(fixed, moving, [field], lam)
