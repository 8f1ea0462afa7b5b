"""Pixel grids, images, displacement fields and the bilinear spatial transformer.

All coordinates live on the normalized domain [-1, 1]^2; the first and last
pixel centers sit exactly on the domain border. Displacements use the same
normalized units, so ``x + f(x)`` is again a normalized coordinate.

Batched tensor layouts used throughout the package:

* images ``[B, 1, H, W]``
* displacement fields ``[B, 2, H, W]`` with channel 0 = x (columns) and
  channel 1 = y (rows)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operands live on different grids or have incompatible shapes."""


@dataclass(frozen=True, eq=False)
class Grid2D:
    height: int
    width: int
    coords_x: torch.Tensor
    coords_y: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def dtype(self) -> torch.dtype:
        return self.coords_x.dtype

    def same_as(self, other: "Grid2D") -> bool:
        return self.shape == other.shape

    def spacing(self) -> tuple[float, float]:
        """Coordinate step between neighbouring pixels along (x, y)."""
        return 2.0 / (self.width - 1), 2.0 / (self.height - 1)

    def coords(self) -> torch.Tensor:
        """Stacked ``[2, H, W]`` coordinate tensor (x first)."""
        return torch.stack([self.coords_x, self.coords_y])


def make_grid(height: int, width: int, dtype: torch.dtype = torch.float32) -> Grid2D:
    if height < 2 or width < 2:
        raise ValueError(f"grid needs at least 2x2 pixels, got {height}x{width}")
    xs = torch.linspace(-1.0, 1.0, width, dtype=torch.float64)
    ys = torch.linspace(-1.0, 1.0, height, dtype=torch.float64)
    # linspace may miss the far endpoint by an ulp; pin both ends exactly
    xs[0], xs[-1] = -1.0, 1.0
    ys[0], ys[-1] = -1.0, 1.0
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    return Grid2D(height, width, cx.to(dtype).contiguous(), cy.to(dtype).contiguous())


def coordinate_tensor(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``[2, H, W]`` normalized coordinates, the tensor form of :func:`make_grid`."""
    return make_grid(height, width, dtype).coords().to(device)


@dataclass(frozen=True, eq=False)
class Image2D:
    grid: Grid2D
    values: torch.Tensor

    def __post_init__(self):
        if tuple(self.values.shape) != self.grid.shape:
            raise ShapeError(f"image values {tuple(self.values.shape)} do not match grid {self.grid.shape}")
        if not torch.isfinite(self.values).all():
            raise ValueError("image values must be finite")

    @classmethod
    def from_array(cls, values, dtype: torch.dtype = torch.float32) -> "Image2D":
        values = torch.as_tensor(np.asarray(values), dtype=dtype)
        return cls(make_grid(values.shape[0], values.shape[1], dtype), values)

    def as_batch(self) -> torch.Tensor:
        return self.values[None, None]

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


@dataclass(frozen=True, eq=False)
class DisplacementField:
    grid: Grid2D
    u: torch.Tensor
    v: torch.Tensor

    def __post_init__(self):
        for name, comp in (("u", self.u), ("v", self.v)):
            if tuple(comp.shape) != self.grid.shape:
                raise ShapeError(f"field component {name} {tuple(comp.shape)} does not match grid {self.grid.shape}")
        if not (torch.isfinite(self.u).all() and torch.isfinite(self.v).all()):
            raise ValueError("displacement field must be finite")

    @classmethod
    def zeros(cls, grid: Grid2D) -> "DisplacementField":
        z = torch.zeros(grid.shape, dtype=grid.dtype)
        return cls(grid, z, z.clone())

    @classmethod
    def from_tensor(cls, disp: torch.Tensor, grid: Optional[Grid2D] = None) -> "DisplacementField":
        """Build from a ``[2, H, W]`` (or ``[1, 2, H, W]``) tensor."""
        if disp.dim() == 4:
            disp = disp[0]
        if grid is None:
            grid = make_grid(disp.shape[-2], disp.shape[-1], disp.dtype)
        return cls(grid, disp[0], disp[1])

    def as_tensor(self) -> torch.Tensor:
        return torch.stack([self.u, self.v])

    def as_batch(self) -> torch.Tensor:
        return self.as_tensor()[None]

    def magnitude(self) -> torch.Tensor:
        return torch.sqrt(self.u ** 2 + self.v ** 2)


# ---------------------------------------------------------------------------
# tensor-level operations (batched, differentiable)
# ---------------------------------------------------------------------------

def sampling_grid(disp: torch.Tensor) -> torch.Tensor:
    """Convert a ``[B, 2, H, W]`` displacement into absolute sample positions ``[B, H, W, 2]``."""
    b, _, h, w = disp.shape
    base = coordinate_tensor(h, w, disp.dtype, disp.device)
    return (base[None] + disp).permute(0, 2, 3, 1)


def warp_images(images: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Bilinear ``M(x + f(x))`` with border clamping; ``images`` ``[B, C, H, W]``."""
    if images.shape[0] != disp.shape[0] or images.shape[-2:] != disp.shape[-2:]:
        raise ShapeError(f"cannot warp images {tuple(images.shape)} with field {tuple(disp.shape)}")
    return F.grid_sample(images, sampling_grid(disp), mode="bilinear",
                         padding_mode="border", align_corners=True)


def sample_at_points(data: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``data`` ``[C, H, W]`` at normalized ``points`` ``[N, 2]``; returns ``[N, C]``."""
    pts = points.to(data.dtype).view(1, 1, -1, 2)
    out = F.grid_sample(data[None], pts, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0, :, 0, :].T


# ---------------------------------------------------------------------------
# public value-type operations
# ---------------------------------------------------------------------------

def _check_same_grid(a: Grid2D, b: Grid2D) -> None:
    if not a.same_as(b):
        raise ShapeError(f"grid mismatch: {a.shape} vs {b.shape}")


def warp(image: Image2D, field: DisplacementField) -> Image2D:
    _check_same_grid(image.grid, field.grid)
    out = warp_images(image.as_batch(), field.as_batch().to(image.values.dtype))
    return Image2D(image.grid, out[0, 0])


def accumulate(prev: DisplacementField, local: DisplacementField) -> DisplacementField:
    _check_same_grid(prev.grid, local.grid)
    return DisplacementField(prev.grid, prev.u + local.u, prev.v + local.v)


def sample_field(field: DisplacementField, points) -> torch.Tensor:
    """Displacement at normalized ``points`` ``[N, 2]`` as ``[N, 2]``."""
    points = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points)
    return sample_at_points(field.as_tensor(), points)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def finite_diff_gradient_check(
    op: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-4,
    threshold: float = 1e-3,
    indices: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element takes part. Each entry's error is measured relative to
    ``max(|analytic|, |numeric|, 1e-3 * max|numeric|)``, which keeps entries
    with vanishing gradient from dominating. Entries above ``threshold`` are
    logged (likely kinks of a piecewise-linear op) rather than raised.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x.detach().clone()
    gen = torch.Generator().manual_seed(seed)
    probe = None

    def scalar(t: torch.Tensor) -> torch.Tensor:
        nonlocal probe
        out = op(t)
        if out.dim() == 0:
            return out
        if probe is None:
            probe = torch.randn(out.shape, generator=gen, dtype=torch.float64).to(out.dtype)
        return (out * probe).sum()

    xg = x.clone().requires_grad_(True)
    val = scalar(xg)
    if not val.requires_grad:
        analytic = torch.zeros_like(x)
    else:
        (analytic,) = torch.autograd.grad(val, xg, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(x)

    flat = x.reshape(-1)
    idx = range(flat.numel()) if indices is None else indices
    idx = list(idx)
    a = analytic.reshape(-1)[idx].double()
    numeric = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(idx):
            xp = flat.clone(); xp[i] += eps
            xm = flat.clone(); xm[i] -= eps
            numeric[k] = (scalar(xp.view_as(x)).double() - scalar(xm.view_as(x)).double()) / (2 * eps)

    floor = max(1e-3 * float(numeric.abs().max()) if len(idx) else 0.0, 1e-12)
    denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(floor, dtype=torch.float64))
    rel = (a - numeric).abs() / denom
    if len(idx) == 0:
        return 0.0
    bad = [idx[k] for k in torch.nonzero(rel > threshold).flatten().tolist()]
    if bad:
        logger.warning("gradient mismatch above %.1e at %d entries (first: %s)", threshold, len(bad), bad[:5])
    return float(rel.max())


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

FIELD_MAGIC = b"R2NF"


def save_field(path, field: DisplacementField) -> None:
    """Write the little-endian ``R2NF`` container: magic, u32 H, u32 W, float32 u, float32 v."""
    h, w = field.grid.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(field.u.detach().cpu().numpy().astype("<f4").tobytes())
        fh.write(field.v.detach().cpu().numpy().astype("<f4").tobytes())


def load_field(path) -> DisplacementField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not an R2NF displacement field")
    h, w = (int(n) for n in np.frombuffer(blob, dtype="<u4", count=2, offset=4))
    n = h * w
    if len(blob) != 12 + 8 * n:
        raise ValueError(f"{path}: truncated field, expected {12 + 8 * n} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=2 * n, offset=12).astype(np.float32)
    grid = make_grid(h, w)
    return DisplacementField(grid, torch.from_numpy(data[:n].reshape(h, w).copy()),
                             torch.from_numpy(data[n:].reshape(h, w).copy()))


def load_image(path) -> Image2D:
    """Read an 8- or 16-bit grayscale PGM/PNG, scaled linearly to [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode in ("RGB", "RGBA", "P", "LA"):
            raise ValueError(f"{path}: expected a single-channel grayscale image, got mode {mode}")
        arr = np.asarray(im)
    if mode in ("L", "1"):
        scale = 255.0
    elif mode.startswith("I"):
        scale = 65535.0
    else:
        raise ValueError(f"{path}: unsupported image mode {mode}")
    return Image2D.from_array(arr.astype(np.float64) / scale)


def save_image(path, image: Image2D, bits: int = 16) -> None:
    """Write ``image`` clipped to [0, 1] as 8- or 16-bit grayscale (format from the suffix)."""
    from PIL import Image

    vals = np.clip(image.numpy().astype(np.float64), 0.0, 1.0)
    if bits == 8:
        arr = np.round(vals * 255.0).astype(np.uint8)
    elif bits == 16:
        arr = np.round(vals * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    Image.fromarray(arr).save(path)
