"""Recurrent registration network.

Per step the network sees ``(coord_x, coord_y, F, M o f_{t-1})`` and emits the
seven parameters of the next Gaussian local deformation. The encoder has
three levels, each a strided convolution followed by a gated recurrent
registration unit (residual stack + convolutional GRU). Every level feeds a
position network; the deepest features feed the parameter network.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform_models import LocalDeformParams, gaussian_fields
from .field_geometry import DisplacementField, Image2D, ShapeError, coordinate_tensor, warp_images

CHECKPOINT_FORMAT = "r2n2-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_resolution: int = 256
    level_channels: tuple[int, int, int] = (64, 128, 256)
    head_channels: int = 512
    sigma_max: float = 0.3
    stem_kernel: int = 7
    residual_blocks: int = 3

    def __post_init__(self):
        if self.input_resolution % 8:
            raise ValueError("input resolution must be divisible by 8")
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if len(self.level_channels) != 3:
            raise ValueError("exactly three encoder levels are supported")
        if self.head_channels % 2:
            raise ValueError("head channels must be even (split in halves)")

    @classmethod
    def toy(cls, input_resolution: int = 64, divisor: int = 8, **kw) -> "NetConfig":
        """Desk-scale variant: same topology, channel counts divided by ``divisor``."""
        base = cls()
        chans = tuple(max(c // divisor, 2) for c in base.level_channels)
        head = max(base.head_channels // divisor, 4)
        return cls(input_resolution=input_resolution, level_channels=chans,
                   head_channels=head + head % 2, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_channels"] = list(self.level_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "level_channels" in d:
            d["level_channels"] = tuple(d["level_channels"])
        return cls(**d)


# ---------------------------------------------------------------------------
# spatial softmax and position estimates
# ---------------------------------------------------------------------------

def spatial_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over all pixels of each channel; ``[..., H, W]`` in and out."""
    shape = logits.shape
    flat = logits.reshape(*shape[:-2], -1)
    return torch.softmax(flat, dim=-1).reshape(shape)


def soft_position(prob: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Expected coordinate under ``prob`` ``[B, H, W]``; returns ``[B, 2]`` as (x, y)."""
    return torch.einsum("bhw,chw->bc", prob, coords.to(prob.dtype))


def position_certainty(p_left: torch.Tensor, p_right: torch.Tensor) -> torch.Tensor:
    """``2 - sum |p_left - p_right|`` over the spatial axes."""
    return 2.0 - (p_left - p_right).abs().sum(dim=(-2, -1))


def fuse_positions(positions: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Certainty-weighted mean of per-level positions.

    ``positions`` ``[B, L, 2]``, ``weights`` ``[B, L]``. Rows whose weights sum
    to zero fall back to the plain mean over levels.
    """
    total = weights.sum(-1, keepdim=True)
    ok = total > 0
    safe = torch.where(ok, total, torch.ones_like(total))
    weighted = (positions * weights[..., None]).sum(-2) / safe
    return torch.where(ok, weighted, positions.mean(-2))


def squash_params(raw: torch.Tensor, position: torch.Tensor, sigma_max: float) -> torch.Tensor:
    """Map unbounded head outputs ``[B, 5]`` and centers ``[B, 2]`` to packed ``[B, 7]`` parameters."""
    c1, c2, c3, c4, c5 = raw.unbind(-1)
    # floor keeps the envelope finite once the logistic underflows
    tiny = 1e-6 * sigma_max
    sx = (torch.sigmoid(c1) * sigma_max).clamp_min(tiny)
    sy = (torch.sigmoid(c2) * sigma_max).clamp_min(tiny)
    vx, vy = torch.tanh(c3), torch.tanh(c4)
    alpha = torch.sigmoid(c5) * math.pi
    return torch.stack([position[:, 0], position[:, 1], sx, sy, alpha, vx, vy], -1)


def assemble_input(fixed: torch.Tensor, moving_warped: torch.Tensor) -> torch.Tensor:
    """Stack ``(coord_x, coord_y, F, M o f)`` into ``[B, 4, H, W]``."""
    if fixed.shape != moving_warped.shape:
        raise ShapeError(f"fixed {tuple(fixed.shape)} and moving {tuple(moving_warped.shape)} differ")
    b, _, h, w = fixed.shape
    coords = coordinate_tensor(h, w, fixed.dtype, fixed.device)[None].expand(b, -1, -1, -1)
    return torch.cat([coords, fixed, moving_warped], 1)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class _Identity:
    """Stand-in perturbation used outside training."""

    def noise(self, t: torch.Tensor) -> torch.Tensor:
        return t

    def dropconnect(self, w: torch.Tensor) -> torch.Tensor:
        return w


_IDENTITY = _Identity()


class ConvGRU(nn.Module):
    """Convolutional GRU whose reset gate stays inside the recurrent convolution.

    For output channel ``j`` the proposal convolves ``r_j * h_{t-1}`` (all state
    channels scaled by the same output-specific reset map), realized as a
    grouped convolution over a ``J*J`` channel stack.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        self.input_gates = nn.Conv2d(in_channels, 2 * hidden_channels, kernel_size, padding=pad)
        self.input_proposal = nn.Conv2d(in_channels, hidden_channels, kernel_size, padding=pad)
        self.state_gates = nn.Conv2d(hidden_channels, 2 * hidden_channels, kernel_size, padding=pad, bias=False)
        self.state_proposal = nn.Parameter(
            torch.empty(hidden_channels, hidden_channels, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.state_proposal, a=math.sqrt(5))

    def forward(self, x: torch.Tensor, h_prev: torch.Tensor, perturb=_IDENTITY) -> torch.Tensor:
        if x.shape[-2:] != h_prev.shape[-2:] or h_prev.shape[1] != self.hidden_channels:
            raise ShapeError(f"input {tuple(x.shape)} incompatible with state {tuple(h_prev.shape)}")
        j = self.hidden_channels
        pad = self.kernel_size // 2
        gx = self.input_gates(x)
        gh = F.conv2d(h_prev, perturb.dropconnect(self.state_gates.weight), padding=pad)
        r = torch.sigmoid(gx[:, :j] + gh[:, :j])
        z = torch.sigmoid(gx[:, j:] + gh[:, j:])

        w_in = perturb.noise(self.input_proposal.weight)
        w_state = perturb.noise(perturb.dropconnect(self.state_proposal))
        b, _, hh, ww = h_prev.shape
        stacked = (r[:, :, None] * h_prev[:, None]).reshape(b, j * j, hh, ww)
        proposal = torch.tanh(F.conv2d(x, w_in, self.input_proposal.bias, padding=pad)
                              + F.conv2d(stacked, w_state, padding=pad, groups=j))
        return (1 - z) * h_prev + z * proposal


def conv_gru_step(x: torch.Tensor, h_prev: torch.Tensor, cell: ConvGRU) -> torch.Tensor:
    return cell(x, h_prev)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return torch.tanh(self.conv2(torch.tanh(self.conv1(x))) + x)


class GR2U(nn.Module):
    """Residual stack, C-GRU, skip from the residual output, tanh."""

    def __init__(self, channels: int, n_blocks: int = 3):
        super().__init__()
        self.residual = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])
        self.cell = ConvGRU(channels, channels)

    def forward(self, x, h_prev, perturb=_IDENTITY):
        res = self.residual(x)
        h = self.cell(res, h_prev, perturb)
        return torch.tanh(res + perturb.noise(h)), h


class PositionNetwork(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.left = nn.Conv2d(channels, 1, 1)
        self.right = nn.Conv2d(channels, 1, 1)

    def forward(self, feats: torch.Tensor):
        """Return ``(position [B, 2], certainty [B])``."""
        h, w = feats.shape[-2:]
        coords = coordinate_tensor(h, w, feats.dtype, feats.device)
        p_left = spatial_softmax(self.left(feats)[:, 0])
        p_right = spatial_softmax(self.right(feats)[:, 0])
        return soft_position(p_left, coords), position_certainty(p_left, p_right)


class ParameterNetwork(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        half = channels // 2
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.value_conv = nn.Conv2d(half, half, 3, padding=1)
        self.fc_hidden = nn.Linear(half, channels)
        self.fc_out = nn.Linear(channels, 5)

    def pooled(self, feats: torch.Tensor) -> torch.Tensor:
        """Softmax-weighted spatial sum of the value half; ``[B, C/2]``."""
        y = torch.tanh(self.conv(feats))
        half = y.shape[1] // 2
        values = torch.tanh(self.value_conv(y[:, :half]))
        attention = spatial_softmax(y[:, half:])
        return (values * attention).sum(dim=(-2, -1))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc_out(torch.tanh(self.fc_hidden(self.pooled(feats))))


def parameter_network(feats: torch.Tensor, head: ParameterNetwork) -> torch.Tensor:
    return head(feats)


# ---------------------------------------------------------------------------
# full network and recurrent state
# ---------------------------------------------------------------------------

@dataclass
class R2N2State:
    """Hidden maps of the three recurrent units plus the accumulated field ``[B, 2, H, W]``."""

    hidden: Optional[tuple[torch.Tensor, ...]]
    field: torch.Tensor
    step: int = 0

    @classmethod
    def initial(cls, batch: int, height: int, width: int, dtype=torch.float32, device=None) -> "R2N2State":
        return cls(None, torch.zeros(batch, 2, height, width, dtype=dtype, device=device), 0)

    def displacement(self, index: int = 0) -> DisplacementField:
        return DisplacementField.from_tensor(self.field[index].detach())


@dataclass
class StepOutput:
    params: torch.Tensor           # [B, 7]
    raw: torch.Tensor              # [B, 5]
    level_positions: torch.Tensor  # [B, 3, 2]
    level_weights: torch.Tensor    # [B, 3]
    local_field: torch.Tensor      # [B, 2, H, W]


class R2N2(nn.Module):
    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.level_channels
        k = config.stem_kernel
        self.down = nn.ModuleList([
            nn.Conv2d(4, c1, k, stride=2, padding=k // 2),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
        ])
        self.units = nn.ModuleList([GR2U(c, config.residual_blocks) for c in (c1, c2, c3)])
        self.positions = nn.ModuleList([PositionNetwork(c) for c in (c1, c2, c3)])
        self.to_head = nn.Conv2d(c3, config.head_channels, 1)
        self.head = ParameterNetwork(config.head_channels)
        self.reset_parameters()
        self.perturb = None

    def reset_parameters(self):
        """Glorot init with the tanh gain and zero biases.

        PyTorch's default conv init shrinks activations by about 1/sqrt(3) per
        layer; through this many tanh layers the outputs end up independent of
        the images. The output layer gets a small gain so early steps start
        close to the identity transform.
        """
        gain = nn.init.calculate_gain("tanh")
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.xavier_uniform_(m.weight, gain=gain)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, ConvGRU):
                nn.init.xavier_uniform_(m.state_proposal, gain=gain)
        with torch.no_grad():
            self.head.fc_out.weight.mul_(0.1)

    def _perturbation(self):
        return self.perturb if (self.training and self.perturb is not None) else _IDENTITY

    def initial_hidden(self, batch: int, height: int, width: int, dtype, device) -> tuple[torch.Tensor, ...]:
        hidden = []
        for c in self.config.level_channels:
            height, width = (height + 1) // 2, (width + 1) // 2
            hidden.append(torch.zeros(batch, c, height, width, dtype=dtype, device=device))
        return tuple(hidden)

    def forward(self, fixed: torch.Tensor, moving_warped: torch.Tensor,
                hidden: Optional[tuple[torch.Tensor, ...]] = None):
        """One network evaluation; returns ``(raw [B,5], fused position [B,2], new hidden, extras)``."""
        x = assemble_input(fixed, moving_warped)
        b, _, h, w = x.shape
        if hidden is None:
            hidden = self.initial_hidden(b, h, w, x.dtype, x.device)
        perturb = self._perturbation()
        new_hidden, positions, weights = [], [], []
        for down, unit, pos_net, h_prev in zip(self.down, self.units, self.positions, hidden):
            x = torch.tanh(down(x))
            x, h_new = unit(x, h_prev, perturb)
            new_hidden.append(h_new)
            p, wgt = pos_net(x)
            positions.append(p)
            weights.append(wgt)
        positions = torch.stack(positions, 1)
        weights = torch.stack(weights, 1)
        raw = self.head(torch.tanh(self.to_head(x)))
        return raw, fuse_positions(positions, weights), tuple(new_hidden), (positions, weights)

    def step(self, fixed: torch.Tensor, moving: torch.Tensor, state: R2N2State):
        """Warp ``moving`` by the accumulated field, emit the next local deformation, advance."""
        if fixed.shape[-1] != self.config.input_resolution or fixed.shape[-2] != self.config.input_resolution:
            raise ShapeError(f"network expects {self.config.input_resolution}px inputs, got {tuple(fixed.shape[-2:])}")
        warped = moving if state.step == 0 else warp_images(moving, state.field)
        raw, pos, hidden, (lvl_pos, lvl_w) = self(fixed, warped, state.hidden)
        params = squash_params(raw, pos, self.config.sigma_max)
        h, w = fixed.shape[-2:]
        local = gaussian_fields(params, coordinate_tensor(h, w, fixed.dtype, fixed.device))
        out = StepOutput(params, raw, lvl_pos, lvl_w, local)
        return out, R2N2State(hidden, state.field + local, state.step + 1)

    def unroll(self, fixed: torch.Tensor, moving: torch.Tensor, steps: int):
        """Run ``steps`` recurrences; returns (cumulative fields, packed params ``[B, T, 7]``)."""
        if steps < 1:
            raise ValueError("need at least one step")
        b, _, h, w = fixed.shape
        state = R2N2State.initial(b, h, w, fixed.dtype, fixed.device)
        fields, params = [], []
        for _ in range(steps):
            out, state = self.step(fixed, moving, state)
            fields.append(state.field)
            params.append(out.params)
        return fields, torch.stack(params, 1)


def r2n2_step(net: R2N2, fixed: Image2D, moving: Image2D, state: Optional[R2N2State] = None):
    """Single-pair convenience wrapper around :meth:`R2N2.step`."""
    if state is None:
        state = R2N2State.initial(1, *fixed.grid.shape, dtype=fixed.values.dtype)
    out, state = net.step(fixed.as_batch(), moving.as_batch(), state)
    return LocalDeformParams.from_row(out.params[0].tolist()), state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], net: R2N2, **extra) -> None:
    """Persist weights and config; ``extra`` entries (optimizer state, counters) ride along."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": net.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in net.state_dict().items()},
    }
    payload.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path], dtype=torch.float32) -> tuple[R2N2, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an R2N2 checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    net = R2N2(NetConfig.from_dict(payload["net_config"])).to(dtype)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload
