"""Transformation models: dense, cubic B-spline on a control grid, and
sequences of rotated anisotropic Gaussian local deformations.

A local deformation is described by seven scalars, stored in this column
order wherever parameters are packed into a tensor or table::

    x, y, sigma_x, sigma_y, alpha, v_x, v_y

``sigma_x`` and ``sigma_y`` are the diagonal entries of the covariance before
rotation and are used as variances: the envelope is
``exp(-0.5 * d^T Sigma^-1 d)`` with ``Sigma = R(alpha) diag(sigma_x, sigma_y) R(alpha)^T``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import torch

from .field_geometry import DisplacementField, Grid2D, make_grid

PARAM_COLUMNS = ("x", "y", "sigma_x", "sigma_y", "alpha", "v_x", "v_y")
PARAMS_PER_STEP = len(PARAM_COLUMNS)


@dataclass(frozen=True)
class LocalDeformParams:
    x: float
    y: float
    sigma_x: float
    sigma_y: float
    alpha: float
    v_x: float
    v_y: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def weight(self) -> tuple[float, float]:
        return (self.v_x, self.v_y)

    def as_row(self) -> list[float]:
        return [self.x, self.y, self.sigma_x, self.sigma_y, self.alpha, self.v_x, self.v_y]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "LocalDeformParams":
        if len(row) != PARAMS_PER_STEP:
            raise ValueError(f"expected {PARAMS_PER_STEP} values, got {len(row)}")
        return cls(*(float(r) for r in row))

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.as_row(), dtype=dtype)

    def check(self, sigma_max: float = math.inf, rtol: float = 1e-6) -> None:
        """Raise ``ValueError`` if any range invariant is violated.

        Upper bounds allow a relative slack of ``rtol`` so values squashed in
        single precision (which may round one ulp past pi or sigma_max) pass.
        """
        hi = 1 + rtol
        if not (0 < self.sigma_x <= sigma_max * hi and 0 < self.sigma_y <= sigma_max * hi):
            raise ValueError(f"shape widths out of (0, {sigma_max}]: {self.sigma_x}, {self.sigma_y}")
        if not 0 <= self.alpha <= math.pi * hi:
            raise ValueError(f"rotation {self.alpha} outside [0, pi]")
        if not (-hi <= self.v_x <= hi and -hi <= self.v_y <= hi):
            raise ValueError(f"weight {self.weight} outside [-1, 1]^2")
        if not (-hi <= self.x <= hi and -hi <= self.y <= hi):
            raise ValueError(f"center {self.center} outside [-1, 1]^2")


def _rotation(alpha: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(alpha), torch.sin(alpha)
    return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)


def covariance(sigma_x, sigma_y, alpha) -> torch.Tensor:
    """``R(alpha) diag(sigma_x, sigma_y) R(alpha)^T``; accepts scalars or tensors."""
    sx, sy, a = (torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
                 for t in (sigma_x, sigma_y, alpha))
    if (sx <= 0).any() or (sy <= 0).any():
        raise ValueError("covariance widths must be positive")
    rot = _rotation(a)
    diag = torch.diag_embed(torch.stack([sx, sy], -1))
    return rot @ diag @ rot.transpose(-1, -2)


def gaussian_fields(params: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Local displacement fields for packed parameters.

    ``params`` is ``[B, 7]`` in :data:`PARAM_COLUMNS` order and ``coords`` the
    ``[2, H, W]`` grid. Returns ``[B, 2, H, W]``. The quadratic form is
    expanded through the rotated frame instead of inverting ``Sigma``, which
    keeps the gradient clean for all seven parameters.
    """
    x0, y0, sx, sy, alpha, vx, vy = (params[:, i, None, None] for i in range(PARAMS_PER_STEP))
    dx = coords[0][None] - x0
    dy = coords[1][None] - y0
    c, s = torch.cos(alpha), torch.sin(alpha)
    # coordinates in the frame of the principal axes: R^T d
    px = c * dx + s * dy
    py = -s * dx + c * dy
    envelope = torch.exp(-0.5 * (px * px / sx + py * py / sy))
    return torch.stack([vx * envelope, vy * envelope], 1)


def gaussian_local_field(params: LocalDeformParams, grid: Grid2D) -> DisplacementField:
    if params.sigma_x <= 0 or params.sigma_y <= 0:
        raise ValueError("shape widths must be positive")
    packed = torch.tensor([params.as_row()], dtype=grid.dtype)
    out = gaussian_fields(packed, grid.coords())
    return DisplacementField(grid, out[0, 0], out[0, 1])


def render_sequence(params_list: Iterable[LocalDeformParams], grid: Grid2D) -> DisplacementField:
    rows = [p.as_row() for p in params_list]
    if not rows:
        return DisplacementField.zeros(grid)
    out = gaussian_fields(torch.tensor(rows, dtype=grid.dtype), grid.coords()).sum(0)
    return DisplacementField(grid, out[0], out[1])


def render_packed(params: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sum of local fields for a ``[T, 7]`` parameter stack; ``[2, H, W]``."""
    if params.shape[0] == 0:
        return torch.zeros((2,) + tuple(coords.shape[1:]), dtype=coords.dtype)
    return gaussian_fields(params, coords).sum(0)


# ---------------------------------------------------------------------------
# dense model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseModel:
    theta: torch.Tensor  # [2, H, W]

    @classmethod
    def from_field(cls, field: DisplacementField) -> "DenseModel":
        return cls(field.as_tensor().clone())


def dense_field(model: DenseModel) -> DisplacementField:
    return DisplacementField.from_tensor(model.theta)


# ---------------------------------------------------------------------------
# cubic B-spline model
# ---------------------------------------------------------------------------

def cubic_bspline(t: torch.Tensor) -> torch.Tensor:
    """Centered uniform cubic B-spline, support (-2, 2)."""
    a = t.abs()
    inner = 2.0 / 3.0 - a ** 2 + 0.5 * a ** 3
    outer = (2.0 - a) ** 3 / 6.0
    return torch.where(a < 1, inner, torch.where(a < 2, outer, torch.zeros_like(a)))


def control_spacing(kernel_size: float) -> float:
    """Control point spacing in pixels for a kernel footprint in pixels."""
    return (kernel_size + 1) / 4.0


def control_grid_size(pixels: int, spacing: float) -> int:
    """Free control points needed along an axis so ``[0, pixels-1]`` is covered."""
    return int(math.ceil((pixels - 1) / spacing - 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class BSplineModel:
    """Control coefficients ``[2, ny, nx]`` at pixel positions ``k * spacing``.

    One extra ring of control points outside the free grid repeats the border
    coefficients, so the spline reproduces constants up to the image border.
    """

    control_points: torch.Tensor
    spacing: float
    image_shape: tuple[int, int]

    def __post_init__(self):
        ny, nx = self.control_points.shape[-2:]
        if ny < 4 or nx < 4:
            raise ValueError(f"control grid must be at least 4x4, got {ny}x{nx}")
        h, w = self.image_shape
        if (ny - 1) * self.spacing < h - 1 - 1e-9 or (nx - 1) * self.spacing < w - 1 - 1e-9:
            raise ValueError("control grid does not cover the image domain")

    @classmethod
    def zeros(cls, image_shape: tuple[int, int], kernel_size: float, dtype=torch.float32) -> "BSplineModel":
        spacing = control_spacing(kernel_size)
        ny = max(control_grid_size(image_shape[0], spacing), 4)
        nx = max(control_grid_size(image_shape[1], spacing), 4)
        return cls(torch.zeros(2, ny, nx, dtype=dtype), spacing, tuple(image_shape))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.control_points.shape[-2:])

    def control_positions(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized (x, y) coordinates of the free control points, each ``[n]``."""
        h, w = self.image_shape
        ny, nx = self.grid_shape
        px = torch.arange(nx, dtype=torch.float64) * self.spacing
        py = torch.arange(ny, dtype=torch.float64) * self.spacing
        return -1 + 2 * px / (w - 1), -1 + 2 * py / (h - 1)

    def num_parameters(self) -> int:
        return int(self.control_points.numel())


def bspline_basis(pixels: int, n_control: int, spacing: float, dtype=torch.float64) -> torch.Tensor:
    """``[pixels, n_control]`` weights with the phantom ring folded into the border columns."""
    pos = torch.arange(pixels, dtype=torch.float64)[:, None] / spacing
    knots = torch.arange(-1, n_control + 1, dtype=torch.float64)[None, :]
    full = cubic_bspline(pos - knots)
    basis = full[:, 1:-1].clone()
    basis[:, 0] += full[:, 0]
    basis[:, -1] += full[:, -1]
    return basis.to(dtype)


def bspline_dense(coeffs: torch.Tensor, spacing: float, image_shape: tuple[int, int]) -> torch.Tensor:
    """Evaluate ``[2, ny, nx]`` coefficients on an ``H x W`` pixel grid; ``[2, H, W]``."""
    h, w = image_shape
    by = bspline_basis(h, coeffs.shape[-2], spacing, coeffs.dtype)
    bx = bspline_basis(w, coeffs.shape[-1], spacing, coeffs.dtype)
    return by @ coeffs @ bx.T


def bspline_field(model: BSplineModel, grid: Grid2D) -> DisplacementField:
    if grid.shape != tuple(model.image_shape):
        raise ValueError(f"model built for {model.image_shape}, grid is {grid.shape}")
    dense = bspline_dense(model.control_points.to(grid.dtype), model.spacing, grid.shape)
    return DisplacementField(grid, dense[0], dense[1])


# ---------------------------------------------------------------------------
# compact representation: parameter table
# ---------------------------------------------------------------------------

def save_params_table(path: Union[str, Path], params: Sequence[LocalDeformParams]) -> None:
    rows = np.array([p.as_row() for p in params], dtype=np.float64).reshape(-1, PARAMS_PER_STEP)
    np.savetxt(path, rows, fmt="%.9g", delimiter="\t", header="\t".join(PARAM_COLUMNS))


def load_params_table(path: Union[str, Path]) -> list[LocalDeformParams]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # a header-only table is a valid empty sequence
        rows = np.loadtxt(path, dtype=np.float64, delimiter="\t", ndmin=2)
    if rows.size and rows.shape[1] != PARAMS_PER_STEP:
        raise ValueError(f"{path}: expected {PARAMS_PER_STEP} columns, found {rows.shape[1]}")
    return [LocalDeformParams.from_row(r) for r in rows.reshape(-1, PARAMS_PER_STEP)]


def field_from_params_table(path: Union[str, Path], height: int, width: int) -> DisplacementField:
    return render_sequence(load_params_table(path), make_grid(height, width))
