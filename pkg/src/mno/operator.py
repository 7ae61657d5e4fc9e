"""Lift-iterate-project operator stack with a swappable grid mixer.

A model maps an input grid field a(x) to an output field u(x): a pointwise
lift to width d_v, L layers of sigma(W v + Mixer(v)) with optional residual,
and a pointwise projection. The mixer is one of: bidirectional S6 scan,
bidirectional Cross-S6 scan conditioned on the lifted input, softmax
attention, or Galerkin attention. Lift and projection are strictly
pointwise, so the same parameters run at any grid resolution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .mixers import (
    CrossS6Block,
    GalerkinAttention,
    MergeReduction,
    S6Block,
    ScanLayout,
    SoftmaxAttention,
    TraversalPath,
    scan_expand,
    scan_merge,
)

__all__ = [
    "MixerKind",
    "RolloutMode",
    "Precision",
    "ModelConfig",
    "OperatorLayer",
    "OperatorModel",
    "build_model",
    "rollout",
]


class MixerKind(enum.Enum):
    MAMBA_BIDIRECTIONAL = "mamba_bidirectional"
    CROSS_MAMBA_BIDIRECTIONAL = "cross_mamba_bidirectional"
    SOFTMAX_ATTENTION = "softmax_attention"
    GALERKIN_ATTENTION = "galerkin_attention"


class RolloutMode(enum.Enum):
    SINGLE_STEP_AUTOREGRESSIVE = "single_step_autoregressive"
    ONE_SHOT = "one_shot"


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"


@dataclass
class ModelConfig:
    d_a: int = 1
    d_u: int = 1
    d_v: int = 32
    depth: int = 3
    mixer_kind: MixerKind = MixerKind.MAMBA_BIDIRECTIONAL
    coord_dim: int = 2
    rollout: RolloutMode = RolloutMode.ONE_SHOT
    input_window: int = 10
    precision: Precision = Precision.F32
    n_state: int = 16
    expand: int = 2
    use_residual: bool = True
    scan_axis: str = "row"  # preset axis for the two bidirectional paths
    q: float = 0.5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.coord_dim not in (0, 2):
            raise ValueError("coord_dim must be 0 or 2")
        if isinstance(self.mixer_kind, str):
            self.mixer_kind = MixerKind(self.mixer_kind)
        if isinstance(self.rollout, str):
            self.rollout = RolloutMode(self.rollout)
        if isinstance(self.precision, str):
            self.precision = Precision(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("mixer_kind", "rollout", "precision"):
            d[key] = d[key].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PointwiseMLP(nn.Module):
    """Two-layer MLP applied independently at every grid cell."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class GridMixer(nn.Module):
    """Routes a grid field through one mixer kind.

    SSM kinds unfold the grid along two opposite traversal paths, run one
    block per path, and merge by mean; attention kinds flatten to a single
    row-major sequence.
    """

    def __init__(self, kind: MixerKind, cfg: ModelConfig):
        super().__init__()
        self.kind = kind
        self.paths = [TraversalPath(cfg.scan_axis, False),
                      TraversalPath(cfg.scan_axis, True)]
        if kind is MixerKind.MAMBA_BIDIRECTIONAL:
            self.blocks = nn.ModuleList(
                [S6Block(cfg.d_v, cfg.expand, cfg.n_state) for _ in self.paths])
        elif kind is MixerKind.CROSS_MAMBA_BIDIRECTIONAL:
            self.blocks = nn.ModuleList(
                [CrossS6Block(cfg.d_v, cfg.expand, cfg.n_state, q=cfg.q)
                 for _ in self.paths])
        elif kind is MixerKind.SOFTMAX_ATTENTION:
            self.attn = SoftmaxAttention(cfg.d_v)
        elif kind is MixerKind.GALERKIN_ATTENTION:
            self.attn = GalerkinAttention(cfg.d_v)
        else:
            raise ValueError(f"unknown mixer kind {kind!r}")

    def layout(self, height: int, width: int) -> ScanLayout:
        return ScanLayout(height, width, list(self.paths), MergeReduction.MEAN)

    def forward(self, v: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        # v: (B, H, W, d_v)
        b, h, w, c = v.shape
        if self.kind in (MixerKind.SOFTMAX_ATTENTION, MixerKind.GALERKIN_ATTENTION):
            seq = v.reshape(b, h * w, c)
            return self.attn(seq).reshape(b, h, w, c)
        layout = self.layout(h, w)
        seqs = scan_expand(v, layout)
        if self.kind is MixerKind.CROSS_MAMBA_BIDIRECTIONAL:
            if cond is None:
                raise ValueError("cross mixer requires a conditioning field")
            cond_seqs = scan_expand(cond, layout)
            mixed = [blk(s, cs) for blk, s, cs in zip(self.blocks, seqs, cond_seqs)]
        else:
            mixed = [blk(s) for blk, s in zip(self.blocks, seqs)]
        return scan_merge(mixed, layout)


class OperatorLayer(nn.Module):
    """One iterative update v -> sigma(W v + Mixer(v)), optionally residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w_local = nn.Linear(cfg.d_v, cfg.d_v, bias=False)
        self.mixer = GridMixer(cfg.mixer_kind, cfg)
        self.activation: nn.Module = nn.GELU()
        self.uses_residual = cfg.use_residual

    def forward(self, v: torch.Tensor, cond: torch.Tensor | None = None,
                taps: list | None = None) -> torch.Tensor:
        mixed = self.mixer(v, cond)
        if taps is not None:
            taps.append(("operator", mixed.detach()))
        out = self.activation(self.w_local(v) + mixed)
        if self.uses_residual:
            out = v + out
        if taps is not None:
            taps.append(("mlp", out.detach()))
        return out


class OperatorModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.lift = PointwiseMLP(config.d_a + config.coord_dim, config.d_v, config.d_v)
        self.layers = nn.ModuleList(
            [OperatorLayer(config) for _ in range(config.depth)])
        self.proj = PointwiseMLP(config.d_v, config.d_v, config.d_u)
        if config.precision is Precision.F64:
            self.double()

    def _coords(self, height: int, width: int, like: torch.Tensor) -> torch.Tensor:
        ys = torch.linspace(0.0, 1.0, height, dtype=like.dtype, device=like.device)
        xs = torch.linspace(0.0, 1.0, width, dtype=like.dtype, device=like.device)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx, gy], dim=-1)

    def forward(self, a: torch.Tensor, taps: list | None = None) -> torch.Tensor:
        """a: (B, H, W, d_a) or (H, W, d_a) -> prediction with d_u channels."""
        squeeze = a.dim() == 3
        if squeeze:
            a = a.unsqueeze(0)
        b, h, w, c = a.shape
        if c != self.config.d_a:
            raise ValueError(f"expected {self.config.d_a} input channels, got {c}")
        if self.config.coord_dim == 2:
            coords = self._coords(h, w, a).expand(b, h, w, 2)
            a = torch.cat([a, coords], dim=-1)
        v = self.lift(a)
        cond = v if self.config.mixer_kind is MixerKind.CROSS_MAMBA_BIDIRECTIONAL else None
        for layer in self.layers:
            v = layer(v, cond, taps)
        u = self.proj(v)
        return u.squeeze(0) if squeeze else u


def build_model(config: ModelConfig, seed: int) -> OperatorModel:
    """Deterministically initialized model: same (config, seed) gives
    bit-identical parameters."""
    torch.manual_seed(seed)
    return OperatorModel(config)


def rollout(model: OperatorModel, history: torch.Tensor,
            n_future: int = 91) -> torch.Tensor:
    """Continue a trajectory from its first frames.

    history: (window, H, W, C) with window = config.input_window.
    Returns (n_future, H, W, C). One-shot mode emits all frames from one
    forward pass (stacked channels); autoregressive mode predicts one frame
    at a time from a sliding window.
    """
    cfg = model.config
    window = cfg.input_window
    if history.shape[0] != window:
        raise ValueError(f"history must have {window} frames, got {history.shape[0]}")
    w_frames, h, w, c = history.shape
    stack = history.permute(1, 2, 0, 3).reshape(h, w, w_frames * c)
    if cfg.rollout is RolloutMode.ONE_SHOT:
        if cfg.d_u != n_future * c:
            raise ValueError("one-shot model output width must be n_future * components")
        out = model(stack)
        return out.reshape(h, w, n_future, c).permute(2, 0, 1, 3)
    # autoregressive: model maps a window to the next single frame
    if cfg.d_u != c:
        raise ValueError("autoregressive model must predict one frame of components")
    frames = [history[i] for i in range(window)]
    preds = []
    for _ in range(n_future):
        cur = torch.stack(frames[-window:], dim=0)
        inp = cur.permute(1, 2, 0, 3).reshape(h, w, window * c)
        nxt = model(inp)
        frames.append(nxt)
        preds.append(nxt)
    return torch.stack(preds, dim=0).reshape(n_future, h, w, c)
