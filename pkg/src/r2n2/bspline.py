"""Multi-resolution cubic B-spline registration, the optimization baseline."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .deform_models import PARAMS_PER_STEP, BSplineModel, LocalDeformParams, bspline_dense
from .field_geometry import DisplacementField, Image2D, ShapeError, sample_at_points, warp_images
from .objectives import classic_objective, mse, total_variation


@dataclass(frozen=True)
class BaselineConfig:
    resolutions: tuple[int, ...] = (64, 128, 256)
    kernel_sizes: tuple[float, ...] = (7, 21, 57)
    iterations_per_level: int = 250
    learning_rate: float = 1e-3
    lam: float = 0.01
    amsgrad: bool = True

    def __post_init__(self):
        if len(self.resolutions) != len(self.kernel_sizes) or not self.resolutions:
            raise ValueError("resolutions and kernel_sizes must be non-empty and of equal length")
        if min(self.resolutions) < 4 or min(self.kernel_sizes) <= 0:
            raise ValueError("resolutions and kernel sizes must be positive")
        if self.iterations_per_level < 0 or self.learning_rate <= 0 or self.lam < 0:
            raise ValueError("invalid optimizer settings")

    @classmethod
    def scaled(cls, finest: int = 64, iterations_per_level: int = 100, **kw) -> "BaselineConfig":
        """Three levels ending at ``finest`` with kernels keeping the default's relative spacing."""
        res = (finest // 4, finest // 2, finest)
        return cls(resolutions=res, kernel_sizes=(3, 7, 15), iterations_per_level=iterations_per_level, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        for k in ("resolutions", "kernel_sizes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class BaselineDiagnostics:
    level_losses: list[list[float]] = field(default_factory=list)
    level_initial_losses: list[float] = field(default_factory=list)
    parameter_count: int = 0
    control_grid: tuple[int, int] = (0, 0)
    objective: float = float("nan")
    seconds: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control_grid"] = list(self.control_grid)
        return d


class BaselineDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: BaselineDiagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def downsample(image: torch.Tensor, size: int) -> torch.Tensor:
    """Area-average ``[B, C, H, W]`` to ``size x size``."""
    if image.shape[-1] == size and image.shape[-2] == size:
        return image
    return F.interpolate(image, size=(size, size), mode="area")


def _warm_start(prev_dense: torch.Tensor, model: BSplineModel) -> torch.Tensor:
    """Coefficients for ``model`` sampled bilinearly from a coarser dense field."""
    cx, cy = model.control_positions()
    ny, nx = model.grid_shape
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    pts = torch.stack([xx.reshape(-1), yy.reshape(-1)], 1).clamp(-1, 1)
    vals = sample_at_points(prev_dense, pts)
    return vals.T.reshape(2, ny, nx).to(prev_dense.dtype)


def register_bspline(fixed: Image2D, moving: Image2D, config: BaselineConfig = BaselineConfig(),
                     keep_model: bool = False):
    """Coarse-to-fine B-spline registration of ``moving`` onto ``fixed``.

    Returns ``(field, diagnostics)`` with the dense field at the finest level;
    with ``keep_model`` the finest :class:`BSplineModel` is appended.
    """
    if not fixed.grid.same_as(moving.grid):
        raise ShapeError(f"grid mismatch: {fixed.grid.shape} vs {moving.grid.shape}")
    finest = config.resolutions[-1]
    if fixed.grid.shape != (finest, finest):
        raise ShapeError(f"baseline expects {finest}x{finest} images, got {fixed.grid.shape}")

    t0 = time.perf_counter()
    diag = BaselineDiagnostics()
    dtype = fixed.values.dtype
    f_full, m_full = fixed.as_batch(), moving.as_batch()
    dense = None
    model = None
    for res, ksize in zip(config.resolutions, config.kernel_sizes):
        f_l, m_l = downsample(f_full, res), downsample(m_full, res)
        model = BSplineModel.zeros((res, res), ksize, dtype)
        coeffs = model.control_points if dense is None else _warm_start(dense, model)
        coeffs = coeffs.clone().requires_grad_(True)
        opt = torch.optim.Adam([coeffs], lr=config.learning_rate, amsgrad=config.amsgrad)
        losses = []

        def objective():
            d = bspline_dense(coeffs, model.spacing, (res, res))[None]
            return mse(f_l, warp_images(m_l, d)) + config.lam * total_variation(d)

        with torch.no_grad():
            diag.level_initial_losses.append(float(objective()))
        for _ in range(config.iterations_per_level):
            opt.zero_grad(set_to_none=True)
            loss = objective()
            if not torch.isfinite(loss):
                diag.level_losses.append(losses)
                raise BaselineDiverged(f"non-finite loss at resolution {res}", diag)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        diag.level_losses.append(losses)
        with torch.no_grad():
            dense = bspline_dense(coeffs.detach(), model.spacing, (res, res))
        model = BSplineModel(coeffs.detach(), model.spacing, (res, res))

    grid = fixed.grid
    result = DisplacementField(grid, dense[0].to(dtype), dense[1].to(dtype))
    with torch.no_grad():
        diag.objective = float(classic_objective(fixed, moving, result, config.lam))
    diag.parameter_count = model.num_parameters()
    diag.control_grid = model.grid_shape
    diag.seconds = time.perf_counter() - t0
    if keep_model:
        return result, diag, model
    return result, diag


def count_transform_params(model: Union[BSplineModel, Sequence[LocalDeformParams], torch.Tensor, int]) -> int:
    """Scalars needed to describe a final transformation.

    B-spline: two coefficients per free control point. Sequence of local
    deformations (a list, a ``[T, 7]`` tensor, or just ``T``): seven per step.
    """
    if isinstance(model, BSplineModel):
        return model.num_parameters()
    if isinstance(model, int):
        if model < 0:
            raise ValueError("sequence length must be non-negative")
        return PARAMS_PER_STEP * model
    if torch.is_tensor(model):
        return PARAMS_PER_STEP * int(model.reshape(-1, PARAMS_PER_STEP).shape[0])
    return PARAMS_PER_STEP * len(model)


def bspline_param_count(resolution: int, kernel_size: float) -> int:
    """Parameter count of the B-spline model a level of ``resolution`` px would use."""
    return BSplineModel.zeros((resolution, resolution), kernel_size).num_parameters()
