"""Command line: ``r2n2 {synth,train,register,eval}``.

Settings resolve as command-line flag > JSON config file > built-in default,
and every run writes the resolved settings to ``config.resolved.json`` in its
output directory. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import datakit, evalkit, plotting
from .bspline import BaselineConfig, register_bspline
from .deform_models import LocalDeformParams, save_params_table
from .field_geometry import DisplacementField, load_image, save_field, save_image, warp
from .network import R2N2, NetConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainerState, TrainingDiverged, train_epoch

logger = logging.getLogger("r2n2")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.pt"
METRICS_NAME = "metrics.jsonl"
RESOLVED_NAME = "config.resolved.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _defaults_of(cls) -> dict:
    return {f.name: (list(f.default) if isinstance(f.default, tuple) else f.default) for f in fields(cls)}


DEFAULTS = {
    "synth": {"resolution": 64, "count": 20, "deform_scale": 0.08, "seed": 0, "n_blobs": datakit.DEFAULT_BLOBS,
              "n_landmarks": datakit.DEFAULT_LANDMARKS, "out_dir": None},
    "train": {
        "out_dir": None,
        "seed": 0,
        "net": {**_defaults_of(NetConfig), "toy": True, "toy_divisor": 16, "input_resolution": 64},
        "train": _defaults_of(TrainConfig),
        "data": {"kind": "synthetic", "deform_scale": 0.08, "pool": 100000,
                 "seed_base": 1_000_000, "manifest": None},
    },
    "register": {"fixed": None, "moving": None, "method": "r2n2", "checkpoint": None, "steps": None,
                 "out_dir": None, "baseline": None},
    "eval": {"cases": None, "checkpoint": None, "out_dir": None, "steps": None, "timing_repeats": 5,
             "pixel_spacing_mm": None, "baseline": None},
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Overlay ``update`` on ``base``; unknown keys are a usage error."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise UsageError(f"unknown config key: {prefix}{k}")
        if isinstance(out[k], dict) and k != "baseline":
            if not isinstance(v, dict):
                raise UsageError(f"config key {prefix}{k} must be a mapping")
            out[k] = _merge(out[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(command: str, config_path: Optional[str], overrides: dict) -> dict:
    cfg = DEFAULTS[command]
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})")
        cfg = _merge(cfg, from_file)
    nested: dict = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return _merge(cfg, nested)


def _write_resolved(out_dir: Path, cfg: dict) -> None:
    (out_dir / RESOLVED_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out_dir"):
        raise UsageError("an output directory is required (--out or out_dir in the config)")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _net_config(section: dict) -> NetConfig:
    section = dict(section)
    toy = section.pop("toy")
    divisor = section.pop("toy_divisor")
    if toy:
        return NetConfig.toy(section["input_resolution"], divisor,
                             sigma_max=section["sigma_max"], stem_kernel=section["stem_kernel"],
                             residual_blocks=section["residual_blocks"])
    return NetConfig.from_dict(section)


def _train_config(section: dict, seed: int) -> TrainConfig:
    section = dict(section)
    section["seed"] = seed
    return TrainConfig(**section)


def _baseline_for(resolution: int, override: Optional[dict]) -> BaselineConfig:
    if override:
        return BaselineConfig.from_dict(override)
    if resolution == BaselineConfig().resolutions[-1]:
        return BaselineConfig()
    if resolution % 4:
        raise UsageError(f"no default baseline for {resolution}px images; pass a baseline config")
    return BaselineConfig.scaled(resolution)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def write_case(case_dir: Path, case: datakit.SyntheticCase) -> None:
    case_dir.mkdir(parents=True, exist_ok=True)
    h, w = case.fixed.grid.shape
    save_image(case_dir / "fixed.png", case.fixed)
    save_image(case_dir / "moving.png", case.moving)
    save_field(case_dir / "truth.r2nf", case.truth_field)
    datakit.save_landmarks(case_dir / "landmarks_fixed.csv", case.landmarks_fixed, h, w)
    datakit.save_landmarks(case_dir / "landmarks_moving.csv", case.landmarks_moving, h, w)
    save_params_table(case_dir / "truth_params.tsv",
                      [LocalDeformParams.from_row(r) for r in case.truth_params])


def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    count = int(cfg["count"])
    if count < 0:
        raise UsageError("count must be non-negative")
    rng = np.random.default_rng(cfg["seed"])
    seeds = [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=count)]
    names = []
    for i, seed in enumerate(seeds):
        case = datakit.generate_case(cfg["resolution"], cfg["deform_scale"], cfg["n_blobs"], seed,
                                     n_landmarks=cfg["n_landmarks"])
        name = f"case_{i:03d}"
        write_case(out / name, case)
        names.append({"name": name, "seed": seed})
    manifest = {"kind": "synthetic-cases", "resolution": cfg["resolution"],
                "deform_scale": cfg["deform_scale"], "seed": cfg["seed"], "cases": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_resolved(out, cfg)
    logger.info("wrote %d cases to %s", count, out)
    return EXIT_OK


def load_cases(path) -> list[evalkit.EvalCase]:
    """Evaluation cases from a synth output directory/manifest or a series manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    listing = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    if listing.get("kind") == "synthetic-cases":
        cases = []
        for entry in listing["cases"]:
            d = base / entry["name"]
            fixed, moving = load_image(d / "fixed.png"), load_image(d / "moving.png")
            h, w = fixed.grid.shape
            cases.append(evalkit.EvalCase(entry["name"], fixed, moving,
                                          datakit.load_landmarks(d / "landmarks_fixed.csv", h, w),
                                          datakit.load_landmarks(d / "landmarks_moving.csv", h, w)))
        return cases
    manifest, images, landmarks = datakit.load_series(manifest_path)
    if landmarks is None:
        raise datakit.SeriesValidationError(f"{manifest_path}: evaluation needs landmark files")
    return [evalkit.EvalCase(manifest.images[i].stem, images[r], images[i], landmarks[r], landmarks[i])
            for r, i in manifest.pairs()]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _training_data(data: dict, resolution: int):
    if data["kind"] == "synthetic":
        return datakit.SyntheticPairs(int(data["pool"]), resolution, data["deform_scale"],
                                      seed_base=int(data["seed_base"]))
    if data["kind"] == "series":
        if not data.get("manifest"):
            raise UsageError("series training data needs data.manifest")
        manifest, images, _ = datakit.load_series(data["manifest"])
        pairs = [(images[r], images[i]) for r, i in manifest.pairs()]
        if not pairs:
            raise datakit.SeriesValidationError("series has no image pairs to train on")
        if images[0].grid.shape != (resolution, resolution):
            raise datakit.SeriesValidationError(
                f"series images are {images[0].grid.shape}, network expects {resolution}px")
        return pairs
    raise UsageError(f"unknown data.kind {data['kind']!r}")


def _truncate_metrics(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iteration"] <= iteration]
    path.write_text("".join(ln + "\n" for ln in keep))


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    net_cfg = _net_config(cfg["net"])
    train_cfg = _train_config(cfg["train"], cfg["seed"])
    torch.manual_seed(cfg["seed"])
    dataset = _training_data(cfg["data"], net_cfg.input_resolution)
    _write_resolved(out, cfg)

    ckpt = out / CHECKPOINT_NAME
    metrics_path = out / METRICS_NAME
    if ckpt.exists():
        net, payload = load_checkpoint(ckpt)
        if net.config != net_cfg:
            raise UsageError(f"{ckpt} was trained with a different network config")
        state = TrainerState.fresh(net, train_cfg)
        state.restore(payload["trainer"])
        _truncate_metrics(metrics_path, state.iteration)
        logger.info("resuming from iteration %d", state.iteration)
    else:
        net = R2N2(net_cfg)
        state = TrainerState.fresh(net, train_cfg)
        metrics_path.unlink(missing_ok=True)
        if train_cfg.iterations == 0:
            save_checkpoint(ckpt, net, trainer=state.to_payload(), train_config=asdict(train_cfg))

    try:
        train_epoch(net, dataset, train_cfg, state, metrics_path=metrics_path, checkpoint_path=ckpt)
    except TrainingDiverged as exc:
        (out / "diverged.json").write_text(json.dumps(exc.snapshot, indent=2) + "\n")
        logger.error("%s; diagnostics in %s", exc, out / "diverged.json")
        return EXIT_RUNTIME
    if not ckpt.exists() or load_checkpoint(ckpt)[1]["trainer"]["iteration"] != state.iteration:
        save_checkpoint(ckpt, net, trainer=state.to_payload(), train_config=asdict(train_cfg))
    rows = [json.loads(ln) for ln in metrics_path.read_text().splitlines() if ln] if metrics_path.exists() else []
    if rows:
        plotting.plot_training_curve(rows, out / "training.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def cmd_register(cfg: dict) -> int:
    if not cfg["fixed"] or not cfg["moving"]:
        raise UsageError("register needs --fixed and --moving")
    if cfg["method"] not in ("r2n2", "bspline"):
        raise UsageError(f"unknown method {cfg['method']!r}")
    if cfg["method"] == "r2n2" and not cfg["checkpoint"]:
        raise UsageError("method r2n2 needs --checkpoint")
    out = _out_dir(cfg)
    fixed, moving = load_image(cfg["fixed"]), load_image(cfg["moving"])
    if fixed.grid.shape != moving.grid.shape:
        raise datakit.SeriesValidationError(f"fixed {fixed.grid.shape} and moving {moving.grid.shape} differ")
    _write_resolved(out, cfg)

    diagnostics: dict = {"method": cfg["method"]}
    if cfg["method"] == "r2n2":
        net, payload = load_checkpoint(cfg["checkpoint"])
        steps = int(cfg["steps"] or payload.get("train_config", {}).get("steps", TrainConfig().steps))
        if fixed.grid.shape != (net.config.input_resolution,) * 2:
            raise datakit.SeriesValidationError(
                f"images are {fixed.grid.shape}, checkpoint expects {net.config.input_resolution}px")
        fields_, params = evalkit.r2n2_register(net, fixed, moving, steps)
        field = DisplacementField.from_tensor(fields_[-1][0].float())
        rows = [LocalDeformParams.from_row(r) for r in params.tolist()]
        save_params_table(out / "params.tsv", rows)
        diagnostics.update(steps=steps, parameter_count=7 * steps)
    else:
        baseline = _baseline_for(fixed.grid.width, cfg["baseline"])
        field, diag = register_bspline(fixed, moving, baseline)
        diagnostics.update(diag.to_dict(), baseline=baseline.to_dict())
        diagnostics.pop("seconds", None)
    warped = warp(moving, field)
    save_field(out / "field.r2nf", field)
    save_image(out / "warped.png", warped)
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2) + "\n")
    plotting.plot_registration(fixed, moving, warped, field, out / "registration.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(cfg: dict) -> int:
    if not cfg["cases"]:
        raise UsageError("eval needs --cases (synth directory or series manifest)")
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    out = _out_dir(cfg)
    cases = load_cases(cfg["cases"])
    net, payload = load_checkpoint(cfg["checkpoint"])
    steps = int(cfg["steps"] or payload.get("train_config", {}).get("steps", TrainConfig().steps))
    baseline = _baseline_for(net.config.input_resolution, cfg["baseline"])
    _write_resolved(out, cfg)
    report = evalkit.compare_methods(cases, net, baseline, steps=steps,
                                     timing_repeats=int(cfg["timing_repeats"]),
                                     pixel_spacing_mm=cfg["pixel_spacing_mm"], out_dir=out,
                                     train_config=payload.get("train_config"))
    s = report.summary()
    print(f"cases={s['cases']} tre_before={s['tre_before_px']:.3f}px r2n2={s['tre_r2n2_px']:.3f}px "
          f"bspline={s['tre_bspline_px']:.3f}px params={s['params_sequence']}/{s['params_bspline']} "
          f"({100 * s['param_ratio']:.1f}%) speedup={s['speedup']:.1f}x")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="r2n2", description="Sequence-based deformable registration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic cases with ground truth")
    s.add_argument("--config")
    s.add_argument("--resolution", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--deform-scale", type=float, help="peak displacement, normalized units (default 0.08)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", dest="out_dir")

    t = sub.add_parser("train", help="train the recurrent registration network")
    t.add_argument("--config")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="total iterations (default 2000)")
    t.add_argument("--lr", type=float, dest="learning_rate", help="Adam learning rate (default 1e-4)")
    t.add_argument("--steps", type=int, help="sequence length T (default 25)")
    t.add_argument("--lam", type=float, help="TV weight (default 0.1)")
    t.add_argument("--sigma-max", type=float, help="largest local shape (default 0.3)")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resolution", type=int, help="network input resolution")
    t.add_argument("--no-noise", action="store_true", help="disable multiplicative noise")
    t.add_argument("--dropconnect", type=float, dest="dropconnect_rate")
    t.add_argument("--full", action="store_true", help="full-size channels instead of the toy network")

    r = sub.add_parser("register", help="register one image pair")
    r.add_argument("--config")
    r.add_argument("--fixed")
    r.add_argument("--moving")
    r.add_argument("--method", choices=["r2n2", "bspline"])
    r.add_argument("--checkpoint")
    r.add_argument("--steps", type=int)
    r.add_argument("--out", dest="out_dir")

    e = sub.add_parser("eval", help="compare R2N2 and B-spline on cases with landmarks")
    e.add_argument("--config")
    e.add_argument("--cases")
    e.add_argument("--checkpoint")
    e.add_argument("--steps", type=int)
    e.add_argument("--repeats", type=int, dest="timing_repeats")
    e.add_argument("--pixel-spacing-mm", type=float)
    e.add_argument("--out", dest="out_dir")
    return p


def _overrides(args) -> dict:
    d = vars(args)
    if args.command == "train":
        o = {"out_dir": d["out_dir"], "seed": d["seed"]}
        for k in ("iterations", "learning_rate", "steps", "lam", "batch_size", "dropconnect_rate"):
            o[f"train.{k}"] = d[k]
        o["train.noise"] = False if args.no_noise else None
        o["net.sigma_max"] = d["sigma_max"]
        o["net.toy"] = False if args.full else None
        o["net.input_resolution"] = d["resolution"]
        return o
    skip = {"command", "config", "verbose"}
    return {k: v for k, v in d.items() if k not in skip}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "register": cmd_register, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"r2n2 {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"r2n2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
