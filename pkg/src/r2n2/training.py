"""Unsupervised training: unroll the recurrence, score every intermediate
warp, regularize the final field, step Adam (AMSGrad)."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .deform_models import LocalDeformParams
from .field_geometry import DisplacementField, Image2D
from .network import R2N2, save_checkpoint
from .objectives import sequence_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    amsgrad: bool = True
    steps: int = 25
    lam: float = 0.1
    noise_mean: float = 1.0
    noise_std: float = math.sqrt(0.5) / 0.5
    noise: bool = True
    dropconnect_rate: float = 0.1
    iterations: int = 2000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 100
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps (sequence length) must be at least 1")
        if not 0 <= self.dropconnect_rate < 1:
            raise ValueError("dropconnect_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    @property
    def regularized(self) -> bool:
        return self.noise or self.dropconnect_rate > 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def apply_multiplicative_noise(values: torch.Tensor, generator: Optional[torch.Generator] = None,
                               mean: float = 1.0, std: float = math.sqrt(0.5) / 0.5,
                               enabled: bool = True) -> torch.Tensor:
    """``values * N(mean, std)`` elementwise; identity when disabled."""
    if not enabled:
        return values
    eps = torch.randn(values.shape, generator=generator, dtype=values.dtype, device=values.device)
    return values * (mean + std * eps)


class StochasticRegularizer:
    """Training-time multiplicative noise and dropconnect handed to the network."""

    def __init__(self, config: TrainConfig, generator: torch.Generator):
        self.config = config
        self.generator = generator

    def noise(self, t: torch.Tensor) -> torch.Tensor:
        c = self.config
        return apply_multiplicative_noise(t, self.generator, c.noise_mean, c.noise_std, c.noise)

    def dropconnect(self, w: torch.Tensor) -> torch.Tensor:
        p = self.config.dropconnect_rate
        if p <= 0:
            return w
        keep = torch.rand(w.shape, generator=self.generator, dtype=w.dtype, device=w.device) >= p
        return w * keep / (1 - p)


def unroll(net: R2N2, fixed: Image2D, moving: Image2D, steps: int):
    """Cumulative fields ``f_1..f_T`` and the emitted local parameters for one pair."""
    fields, packed = net.unroll(fixed.as_batch(), moving.as_batch(), steps)
    grid = fixed.grid
    return ([DisplacementField(grid, f[0, 0], f[0, 1]) for f in fields],
            [LocalDeformParams.from_row(r) for r in packed[0].tolist()])


def _pair(item) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(item, "fixed"):
        return item.fixed.values, item.moving.values
    fixed, moving = item
    return (fixed.values if isinstance(fixed, Image2D) else torch.as_tensor(fixed),
            moving.values if isinstance(moving, Image2D) else torch.as_tensor(moving))


@dataclass
class TrainMetrics:
    iterations: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    image_loss: list[float] = field(default_factory=list)
    tv_loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def record(self, it, loss, img, tv, gn, sec) -> dict:
        rec = {"iteration": it, "loss": loss, "image_loss": img, "tv_loss": tv,
               "grad_norm": gn, "seconds": sec}
        for k, v in rec.items():
            getattr(self, k if k != "iteration" else "iterations").append(v)
        return rec


@dataclass
class TrainerState:
    """Everything needed to resume: counters and both random streams."""

    iteration: int
    data_rng: np.random.Generator
    torch_gen: torch.Generator
    optimizer: torch.optim.Optimizer

    @classmethod
    def fresh(cls, net: R2N2, config: TrainConfig) -> "TrainerState":
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        gen = torch.Generator().manual_seed(int(seeds[1].generate_state(1)[0]))
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, amsgrad=config.amsgrad)
        return cls(0, np.random.default_rng(seeds[0]), gen, opt)

    def to_payload(self) -> dict:
        return {"iteration": self.iteration,
                "data_rng": self.data_rng.bit_generator.state,
                "torch_gen": self.torch_gen.get_state(),
                "optimizer": self.optimizer.state_dict()}

    def restore(self, payload: dict) -> None:
        self.iteration = int(payload["iteration"])
        self.data_rng.bit_generator.state = payload["data_rng"]
        self.torch_gen.set_state(payload["torch_gen"])
        self.optimizer.load_state_dict(payload["optimizer"])


def train_epoch(net: R2N2, dataset: Sequence, config: TrainConfig,
                state: Optional[TrainerState] = None,
                metrics_path: Optional[Path] = None,
                checkpoint_path: Optional[Path] = None) -> TrainMetrics:
    """Train until ``state.iteration == config.iterations``.

    Pairs are drawn uniformly at random from ``dataset`` (items are
    ``SyntheticCase``-like or ``(fixed, moving)`` tuples). One JSON record per
    iteration goes to ``metrics_path`` (appended, so resumed runs continue the
    stream); checkpoints carry the resume state.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = state or TrainerState.fresh(net, config)
    net.train()
    net.perturb = StochasticRegularizer(config, state.torch_gen) if config.regularized else None
    metrics = TrainMetrics()
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        while state.iteration < config.iterations:
            t0 = time.perf_counter()
            picks = state.data_rng.integers(0, len(dataset), size=config.batch_size)
            pairs = [_pair(dataset[int(i)]) for i in picks]
            fixed = torch.stack([p[0] for p in pairs])[:, None].to(next(net.parameters()).dtype)
            moving = torch.stack([p[1] for p in pairs])[:, None].to(fixed.dtype)

            fields, _ = net.unroll(fixed, moving, config.steps)
            loss, img, tv = sequence_loss(fixed, moving, fields, config.lam)
            if not torch.isfinite(loss):
                snap = {"iteration": state.iteration, "loss": loss.item(),
                        "image_loss": img.item(), "tv_loss": tv.item(),
                        "last_losses": metrics.loss[-10:]}
                raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}", snap)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            gn = torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            if not torch.isfinite(gn):
                raise TrainingDiverged(f"non-finite gradient at iteration {state.iteration}",
                                       {"iteration": state.iteration, "loss": float(loss)})
            state.optimizer.step()
            state.iteration += 1

            rec = metrics.record(state.iteration, loss.item(), img.item(), tv.item(), gn.item(),
                                 time.perf_counter() - t0)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if checkpoint_path and config.checkpoint_every and (
                    state.iteration % config.checkpoint_every == 0 or state.iteration == config.iterations):
                save_checkpoint(checkpoint_path, net, trainer=state.to_payload(),
                                train_config=asdict(config))
            if state.iteration % 50 == 0:
                logger.info("iter %d loss %.5f (img %.5f tv %.5f) |g| %.3f",
                            state.iteration, rec["loss"], rec["image_loss"], rec["tv_loss"], rec["grad_norm"])
    finally:
        if sink:
            sink.close()
        net.perturb = None
        net.eval()
    return metrics
