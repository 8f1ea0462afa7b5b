"""Synthetic ground-truth cases and loading of user-supplied image series.

Convention for the ground-truth field ``t`` of a case: it is the registration
answer, i.e. ``warp(moving, t) ~= fixed`` and a fixed-image landmark ``p``
corresponds to ``p + t(p)`` in the moving image. The moving image is rendered
analytically through the inverse displacement, so no resampling blur enters
the pair.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .deform_models import gaussian_fields
from .field_geometry import DisplacementField, Image2D, load_image, make_grid

DEFAULT_LANDMARKS = 20
DEFAULT_BLOBS = 24


@dataclass(frozen=True, eq=False)
class SyntheticCase:
    fixed: Image2D
    moving: Image2D
    truth_field: DisplacementField
    landmarks_fixed: np.ndarray   # [N, 2] normalized (x, y)
    landmarks_moving: np.ndarray
    seed: int
    truth_params: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))

    @property
    def resolution(self) -> int:
        return self.fixed.grid.width


@dataclass(frozen=True)
class _Texture:
    """Smooth blobs over a curved high-contrast horizontal interface."""

    interface_y: float
    interface_amp: float
    interface_freq: float
    interface_phase: float
    interface_width: float
    blob_centers: np.ndarray
    blob_widths: np.ndarray
    blob_amps: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, n_blobs: int) -> "_Texture":
        return cls(
            interface_y=rng.uniform(-0.3, 0.3),
            interface_amp=rng.uniform(0.05, 0.2),
            interface_freq=rng.uniform(0.5, 1.5),
            interface_phase=rng.uniform(0, 2 * math.pi),
            interface_width=rng.uniform(0.02, 0.04),
            blob_centers=rng.uniform(-0.9, 0.9, size=(n_blobs, 2)),
            blob_widths=rng.uniform(0.06, 0.14, size=n_blobs),
            blob_amps=rng.uniform(0.2, 0.4, size=n_blobs) * rng.choice([-1.0, 1.0], size=n_blobs),
        )

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        edge = self.interface_y + self.interface_amp * np.sin(math.pi * self.interface_freq * x + self.interface_phase)
        # dark region above the interface, bright tissue below
        val = 0.25 + 0.45 / (1.0 + np.exp(-(y - edge) / self.interface_width))
        for (cx, cy), w, a in zip(self.blob_centers, self.blob_widths, self.blob_amps):
            val = val + a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
        return np.clip(val, 0.0, 1.0)


def _random_deformation(rng: np.random.Generator, n_bumps: int) -> np.ndarray:
    """Packed ``[n, 7]`` Gaussian local deformations with unit-scale weights."""
    rows = []
    for _ in range(n_bumps):
        angle = rng.uniform(0, 2 * math.pi)
        mag = rng.uniform(0.5, 1.0)
        rows.append([
            rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
            rng.uniform(0.03, 0.15), rng.uniform(0.03, 0.15),
            rng.uniform(0, math.pi),
            mag * math.cos(angle), mag * math.sin(angle),
        ])
    return np.array(rows, dtype=np.float64)


def _eval_deformation(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Displacement ``[2, ...]`` of summed local deformations at arbitrary points."""
    coords = torch.from_numpy(np.stack([x, y]).reshape(2, 1, -1))
    out = gaussian_fields(torch.from_numpy(params), coords).sum(0)
    return out.numpy().reshape((2,) + x.shape)


def _inverse_displacement(params: np.ndarray, x: np.ndarray, y: np.ndarray, iters: int = 60) -> np.ndarray:
    """``w`` with ``w(y) = -t(y + w(y))``, so ``(id + t) o (id + w) = id`` on the samples."""
    w = np.zeros((2,) + x.shape)
    for _ in range(iters):
        w = -_eval_deformation(params, x + w[0], y + w[1])
    return w


def _pick_landmarks(img: np.ndarray, coords_x: np.ndarray, coords_y: np.ndarray,
                    rng: np.random.Generator, count: int, margin: float = 0.8) -> np.ndarray:
    gy, gx = np.gradient(img)
    grad = np.hypot(gx, gy)
    inside = (np.abs(coords_x) <= margin) & (np.abs(coords_y) <= margin)
    cand = np.flatnonzero(inside.ravel())
    if cand.size == 0:
        raise ValueError("no interior pixels to place landmarks")
    g = grad.ravel()[cand]
    # strongest quarter of the interior gradients
    keep = cand[g >= np.quantile(g, 0.75)] if np.ptp(g) > 0 else cand
    chosen = rng.choice(keep, size=min(count, keep.size), replace=False)
    chosen.sort()
    return np.stack([coords_x.ravel()[chosen], coords_y.ravel()[chosen]], 1)


def generate_case(resolution: int = 64, deform_scale: float = 0.08, n_blobs: int = DEFAULT_BLOBS, seed: int = 0,
                  n_landmarks: int = DEFAULT_LANDMARKS, n_bumps: int = 4) -> SyntheticCase:
    """Procedural image pair with a known smooth deformation of peak magnitude ``deform_scale``."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    if deform_scale < 0:
        raise ValueError("deform_scale must be non-negative")
    rng = np.random.default_rng(seed)
    texture = _Texture.random(rng, n_blobs)
    bumps = _random_deformation(rng, n_bumps)

    grid64 = make_grid(resolution, resolution, torch.float64)
    cx, cy = grid64.coords_x.numpy(), grid64.coords_y.numpy()
    truth = _eval_deformation(bumps, cx, cy)
    peak = float(np.sqrt((truth ** 2).sum(0)).max())
    scale = deform_scale / peak if peak > 0 else 0.0
    bumps[:, 5:] *= scale
    truth = _eval_deformation(bumps, cx, cy) if scale > 0 else np.zeros_like(truth)

    fixed = texture(cx, cy)
    if scale > 0:
        w = _inverse_displacement(bumps, cx, cy)
        moving = texture(cx + w[0], cy + w[1])
    else:
        moving = fixed.copy()

    lm_fixed = _pick_landmarks(fixed, cx, cy, rng, n_landmarks)
    lm_disp = _eval_deformation(bumps, lm_fixed[:, 0], lm_fixed[:, 1]).T if scale > 0 else np.zeros_like(lm_fixed)
    lm_moving = lm_fixed + lm_disp

    grid = make_grid(resolution, resolution)
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return SyntheticCase(
        fixed=Image2D(grid, to_t(fixed)),
        moving=Image2D(grid, to_t(moving)),
        truth_field=DisplacementField(grid, to_t(truth[0]), to_t(truth[1])),
        landmarks_fixed=lm_fixed,
        landmarks_moving=lm_moving,
        seed=seed,
        truth_params=bumps,
    )


class SyntheticPairs:
    """Indexable, lazily generated pool of synthetic cases (``seed_base + i``)."""

    def __init__(self, count: int, resolution: int = 64, deform_scale: float = 0.08,
                 seed_base: int = 0, **kw):
        if count < 1:
            raise ValueError("need at least one case")
        self.count = count
        self.resolution = resolution
        self.deform_scale = deform_scale
        self.seed_base = seed_base
        self.kw = kw

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> SyntheticCase:
        if not 0 <= i < self.count:
            raise IndexError(i)
        return generate_case(self.resolution, self.deform_scale, seed=self.seed_base + i, **self.kw)


# ---------------------------------------------------------------------------
# landmarks and series
# ---------------------------------------------------------------------------

def pixel_to_normalized(points: np.ndarray, height: int, width: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([-1 + 2 * pts[:, 0] / (width - 1), -1 + 2 * pts[:, 1] / (height - 1)], 1)


def normalized_to_pixel(points: np.ndarray, height: int, width: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([(pts[:, 0] + 1) * (width - 1) / 2, (pts[:, 1] + 1) * (height - 1) / 2], 1)


def load_landmarks(path, height: int, width: int) -> np.ndarray:
    """Read an ``x,y`` pixel-coordinate CSV (optional header) into normalized coordinates."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(rec[0]), float(rec[1])])
            except ValueError:
                if rows:
                    raise ValueError(f"{path}: malformed landmark row {rec}")
                continue  # header
    return pixel_to_normalized(np.array(rows).reshape(-1, 2), height, width)


def save_landmarks(path, points: np.ndarray, height: int, width: int) -> None:
    px = normalized_to_pixel(points, height, width)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y"])
        for x, y in px:
            writer.writerow([f"{x:.6f}", f"{y:.6f}"])


class SeriesValidationError(ValueError):
    pass


@dataclass
class SeriesManifest:
    images: list[Path]
    reference: int
    landmarks: Optional[list[Path]] = None

    def pairs(self) -> list[tuple[int, int]]:
        """``(reference, i)`` for every non-reference image."""
        return [(self.reference, i) for i in range(len(self.images)) if i != self.reference]


def load_series(manifest_path):
    """Validate a series manifest and load its images.

    The manifest is JSON::

        {"images": ["t00.png", ...], "reference": 10, "landmarks": ["t00.csv", ...]}

    Paths are relative to the manifest. Returns ``(manifest, images, landmarks)``
    where ``landmarks`` is ``None`` or one ``[N, 2]`` normalized array per image.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    listing = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    names = listing.get("images") or []
    if not names:
        raise SeriesValidationError(f"{manifest_path}: no images listed")
    paths = [base / p for p in names]
    ref = int(listing.get("reference", 0))
    if not 0 <= ref < len(paths):
        raise SeriesValidationError(f"{manifest_path}: reference index {ref} out of range")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"image not found: {p}")
    images = [load_image(p) for p in paths]
    shapes = {im.grid.shape for im in images}
    if len(shapes) != 1:
        raise SeriesValidationError(f"{manifest_path}: images differ in resolution {sorted(shapes)}")

    lm_paths = None
    landmarks = None
    if listing.get("landmarks"):
        lm_paths = [base / p for p in listing["landmarks"]]
        if len(lm_paths) != len(paths):
            raise SeriesValidationError(
                f"{manifest_path}: {len(lm_paths)} landmark files for {len(paths)} images")
        h, w = images[0].grid.shape
        landmarks = []
        for p in lm_paths:
            if not p.is_file():
                raise FileNotFoundError(f"landmark file not found: {p}")
            landmarks.append(load_landmarks(p, h, w))
        counts = {len(lm) for lm in landmarks}
        if len(counts) != 1:
            raise SeriesValidationError(f"{manifest_path}: landmark row counts differ {sorted(counts)}")
    return SeriesManifest(paths, ref, lm_paths), images, landmarks
