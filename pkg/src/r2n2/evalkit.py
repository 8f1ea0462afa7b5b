"""Evaluation harness: landmark TRE, transformation compactness and runtime
of network inference against B-spline optimization."""
from __future__ import annotations

import csv
import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .bspline import BaselineConfig, count_transform_params, register_bspline
from .field_geometry import DisplacementField, sample_field
from .network import R2N2

REPORT_VERSION = 1
SNAPSHOT_STEPS = (2, 4, 8, 25)


class EvaluationError(ValueError):
    pass


def tre(landmarks_fixed, landmarks_moving, field: DisplacementField, rms: bool = False) -> tuple[float, float]:
    """Mean (or RMS) and max landmark distance after mapping fixed points through ``field``.

    Units follow the inputs (normalized coordinates).
    """
    fixed_pts = np.asarray(landmarks_fixed, dtype=np.float64).reshape(-1, 2)
    moving_pts = np.asarray(landmarks_moving, dtype=np.float64).reshape(-1, 2)
    if len(fixed_pts) == 0:
        raise ValueError("tre needs at least one landmark")
    if fixed_pts.shape != moving_pts.shape:
        raise ValueError(f"landmark sets differ in size: {fixed_pts.shape} vs {moving_pts.shape}")
    disp = sample_field(field, torch.from_numpy(fixed_pts)).detach().double().numpy()
    err = np.linalg.norm(fixed_pts + disp - moving_pts, axis=1)
    mean = float(np.sqrt(np.mean(err ** 2))) if rms else float(err.mean())
    return mean, float(err.max())


def _pixels_per_unit(resolution: int) -> float:
    return (resolution - 1) / 2.0


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CaseResult:
    name: str
    n_landmarks: int
    tre_before: float
    tre_before_max: float
    tre_r2n2: float
    tre_r2n2_max: float
    tre_bspline: float
    tre_bspline_max: float
    seconds_r2n2: float
    seconds_bspline: float
    pixels_per_unit: float

    def in_pixels(self, key: str) -> float:
        return getattr(self, key) * self.pixels_per_unit


@dataclass
class EvalReport:
    cases: list[CaseResult]
    params_sequence: int
    params_bspline: int
    steps: int
    resolution: int
    digests: dict = field(default_factory=dict)
    pixel_spacing_mm: Optional[float] = None
    version: int = REPORT_VERSION

    @property
    def param_ratio(self) -> float:
        return self.params_sequence / self.params_bspline

    def mean(self, key: str, pixels: bool = False) -> float:
        vals = [c.in_pixels(key) if pixels else getattr(c, key) for c in self.cases]
        return float(np.mean(vals)) if vals else float("nan")

    def max(self, key: str, pixels: bool = False) -> float:
        vals = [c.in_pixels(key) if pixels else getattr(c, key) for c in self.cases]
        return float(np.max(vals)) if vals else float("nan")

    def median_seconds(self, method: str) -> float:
        vals = [getattr(c, f"seconds_{method}") for c in self.cases]
        return float(statistics.median(vals)) if vals else float("nan")

    @property
    def speedup(self) -> float:
        return self.median_seconds("bspline") / self.median_seconds("r2n2")

    def summary(self) -> dict:
        out = {
            "cases": len(self.cases),
            "tre_before_px": self.mean("tre_before", True),
            "tre_r2n2_px": self.mean("tre_r2n2", True),
            "tre_bspline_px": self.mean("tre_bspline", True),
            "tre_r2n2_max_px": self.max("tre_r2n2_max", True),
            "tre_bspline_max_px": self.max("tre_bspline_max", True),
            "params_sequence": self.params_sequence,
            "params_bspline": self.params_bspline,
            "param_ratio": self.param_ratio,
            "median_seconds_r2n2": self.median_seconds("r2n2"),
            "median_seconds_bspline": self.median_seconds("bspline"),
            "speedup": self.speedup if self.cases else float("nan"),
        }
        if self.pixel_spacing_mm:
            for k in ("tre_before", "tre_r2n2", "tre_bspline"):
                out[f"{k}_mm"] = out[f"{k}_px"] * self.pixel_spacing_mm
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "summary"}
        d["cases"] = [CaseResult(**c) for c in d["cases"]]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path) -> None:
        cols = ["name", "n_landmarks", "tre_before", "tre_before_max", "tre_r2n2", "tre_r2n2_max",
                "tre_bspline", "tre_bspline_max", "seconds_r2n2", "seconds_bspline"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols + [c + "_px" for c in cols[2:8]])
            for c in self.cases:
                row = [getattr(c, k) for k in cols]
                w.writerow(row + [c.in_pixels(k) for k in cols[2:8]])


@dataclass
class EvalCase:
    """Minimal view of a pair to evaluate (synthetic or loaded from disk)."""

    name: str
    fixed: object
    moving: object
    landmarks_fixed: np.ndarray
    landmarks_moving: np.ndarray


def as_eval_case(case, name: Optional[str] = None) -> EvalCase:
    if isinstance(case, EvalCase):
        return case
    label = name or f"seed{getattr(case, 'seed', 0)}"
    return EvalCase(label, case.fixed, case.moving, case.landmarks_fixed, case.landmarks_moving)


def _median_time(fn, repeats: int, warmup: int = 1):
    result = None
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, float(statistics.median(times)) if times else float("nan")


def r2n2_register(net: R2N2, fixed, moving, steps: int):
    """Inference only; returns (cumulative fields list ``[1,2,H,W]``, params ``[T, 7]``)."""
    with torch.no_grad():
        dtype = next(net.parameters()).dtype
        fields, params = net.unroll(fixed.as_batch().to(dtype), moving.as_batch().to(dtype), steps)
    return fields, params[0]


def compare_methods(cases: Sequence, net: R2N2, baseline: BaselineConfig, steps: int = 25,
                    timing_repeats: int = 5, warmup: int = 1, pixel_spacing_mm: Optional[float] = None,
                    out_dir=None, snapshot_steps: Sequence[int] = SNAPSHOT_STEPS,
                    train_config: Optional[dict] = None) -> EvalReport:
    """Register every case with both methods and collect TRE, timings and parameter counts.

    With ``out_dir`` the report (JSON + per-case CSV) and figures are written there.
    """
    cases = [as_eval_case(c) for c in cases]
    if not cases:
        raise EvaluationError("no cases to evaluate")
    res = net.config.input_resolution
    for c in cases:
        if c.fixed.grid.shape != (res, res):
            raise EvaluationError(
                f"case {c.name} is {c.fixed.grid.shape}, checkpoint expects {res}x{res}")
    if baseline.resolutions[-1] != res:
        raise EvaluationError(f"baseline finest level {baseline.resolutions[-1]} != {res}")
    net.eval()

    results, first_fields = [], None
    bs_params = None
    for c in cases:
        (fields, params), t_net = _median_time(lambda: r2n2_register(net, c.fixed, c.moving, steps),
                                               timing_repeats, warmup)
        (bs_field, bs_diag), t_bs = _median_time(lambda: register_bspline(c.fixed, c.moving, baseline),
                                                 timing_repeats, min(warmup, 1) if timing_repeats > 1 else 0)
        net_field = DisplacementField.from_tensor(fields[-1][0].float())
        zero = DisplacementField.zeros(c.fixed.grid)
        pre = tre(c.landmarks_fixed, c.landmarks_moving, zero)
        post_net = tre(c.landmarks_fixed, c.landmarks_moving, net_field)
        post_bs = tre(c.landmarks_fixed, c.landmarks_moving, bs_field)
        results.append(CaseResult(c.name, len(c.landmarks_fixed), *pre, *post_net, *post_bs,
                                  t_net, t_bs, _pixels_per_unit(res)))
        bs_params = bs_diag.parameter_count
        if first_fields is None:
            first_fields = (c, fields, params, bs_field)

    report = EvalReport(
        cases=results,
        params_sequence=count_transform_params(steps),
        params_bspline=bs_params,
        steps=steps,
        resolution=res,
        digests={"net": config_digest(net.config.to_dict()), "baseline": config_digest(baseline.to_dict()),
                 **({"train": config_digest(train_config)} if train_config else {})},
        pixel_spacing_mm=pixel_spacing_mm,
    )
    if out_dir is not None:
        write_outputs(report, out_dir, first_fields, snapshot_steps)
    return report


def write_outputs(report: EvalReport, out_dir, first_fields=None, snapshot_steps=SNAPSHOT_STEPS) -> None:
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    report.write_csv(out / "cases.csv")
    plotting.plot_tre_bars(report, out / "tre.png")
    if first_fields is not None:
        case, fields, params, bs_field = first_fields
        steps = [t for t in snapshot_steps if 1 <= t <= len(fields)] or [len(fields)]
        snaps = {t: DisplacementField.from_tensor(fields[t - 1][0].float()) for t in steps}
        plotting.plot_displacement_snapshots(case.fixed, snaps, out / "displacement_steps.png",
                                             params=params[: max(steps)].numpy())
        plotting.plot_field_comparison(case.fixed, snaps[max(snaps)], bs_field, out / "fields.png")
