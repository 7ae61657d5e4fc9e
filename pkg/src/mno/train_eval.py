"""Losses, optimizer, training loop, evaluation metrics, and Fourier
feature-map diagnostics.

Metrics follow the per-sample-then-mean convention: each sample's error is
computed over all its grid cells and channels, then averaged across samples.
The spectrum profile samples the 2D DFT amplitude of a feature map along the
half-diagonal from the zero frequency to (pi, pi) and summarizes each map by
the boundary-minus-center log-amplitude difference.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .operator import OperatorModel

__all__ = [
    "metric_rmse",
    "metric_nrmse",
    "metric_rl2",
    "MetricsReport",
    "evaluate_metrics",
    "Adam",
    "TrainConfig",
    "FitResult",
    "TrainingDiverged",
    "rl2_loss",
    "fit",
    "gradient_check",
    "SpectrumProfile",
    "spectrum_profile",
    "depth_profile",
]

LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def metric_rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def metric_nrmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.sqrt(np.mean(t ** 2))
    if denom == 0.0:
        raise ValueError("nRMSE undefined for identically zero target")
    return float(np.sqrt(np.mean((p - t) ** 2)) / denom)


def metric_rl2(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.linalg.norm(t.ravel())
    if denom == 0.0:
        raise ValueError("relative L2 undefined for identically zero target")
    return float(np.linalg.norm((p - t).ravel()) / denom)


@dataclass
class MetricsReport:
    task: str
    config_hash: str
    rmse: list[float]
    nrmse: list[float]
    rl2: list[float]

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def mean_nrmse(self) -> float:
        return float(np.mean(self.nrmse))

    @property
    def mean_rl2(self) -> float:
        return float(np.mean(self.rl2))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["sample", "rmse", "nrmse", "rl2"])
        for i, (a, b, c) in enumerate(zip(self.rmse, self.nrmse, self.rl2)):
            wr.writerow([i, repr(a), repr(b), repr(c)])
        wr.writerow(["mean", repr(self.mean_rmse), repr(self.mean_nrmse),
                     repr(self.mean_rl2)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task,
            "config_hash": self.config_hash,
            "mean": {"rmse": self.mean_rmse, "nrmse": self.mean_nrmse,
                     "rl2": self.mean_rl2},
            "per_sample": {"rmse": self.rmse, "nrmse": self.nrmse, "rl2": self.rl2},
        }, sort_keys=True, separators=(",", ":"))


def evaluate_metrics(preds, truths, task: str = "", config_hash: str = "") -> MetricsReport:
    """Per-sample metrics over aligned lists/arrays of predictions and targets."""
    if len(preds) != len(truths):
        raise ValueError("prediction/target count mismatch")
    rmse, nrmse, rl2 = [], [], []
    for p, t in zip(preds, truths):
        rmse.append(metric_rmse(p, t))
        nrmse.append(metric_nrmse(p, t))
        rl2.append(metric_rl2(p, t))
    return MetricsReport(task=task, config_hash=config_hash,
                         rmse=rmse, nrmse=nrmse, rl2=rl2)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class Adam:
    """Bias-corrected adaptive-moment optimizer over torch parameters."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not torch.all(torch.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in parameter {i}", t)
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[i].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            self.v[i].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.add_(-lr * m_hat / (torch.sqrt(v_hat) + self.eps))

    @torch.no_grad()
    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def rl2_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch of ||p - t|| / ||t||."""
    b = pred.shape[0]
    diff = (pred - target).reshape(b, -1)
    ref = target.reshape(b, -1)
    return (diff.norm(dim=1) / ref.norm(dim=1)).mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    warmup_steps: int = 100
    loss: str = "rl2"  # "rl2" | "mse"
    checkpoint_every: int = 500
    schedule: str = "constant"  # "constant" | "cosine" (decay to zero)
    target_loss: float | None = None  # stop early once the batch loss reaches this

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.loss not in ("rl2", "mse"):
            raise ValueError("loss must be 'rl2' or 'mse'")


@dataclass
class FitResult:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    final_train_rl2: float = float("nan")


def fit(model: OperatorModel, inputs: torch.Tensor, targets: torch.Tensor,
        cfg: TrainConfig, checkpoint_fn=None) -> FitResult:
    """Minibatch training with relative-L2 loss by default.

    inputs: (N, H, W, d_a); targets: (N, H, W, d_u). Batch order is drawn
    from a generator seeded by cfg.seed, so identical (seed, config, data)
    reproduce the loss curve bit for bit. checkpoint_fn(step) is called every
    cfg.checkpoint_every steps and after the final step.
    """
    n = inputs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    loss_fn = rl2_loss if cfg.loss == "rl2" else mse_loss
    opt = Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas),
               weight_decay=cfg.weight_decay)
    result = FitResult()
    order = np.array([], dtype=np.int64)
    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        xb = inputs[batch]
        yb = targets[batch]
        pred = model(xb)
        loss = loss_fn(pred, yb)
        if not torch.isfinite(loss):
            raise TrainingDiverged("loss is non-finite", step)
        opt.zero_grad()
        loss.backward()
        warm = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else 1.0
        if cfg.schedule == "cosine":
            warm *= 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        opt.step(lr=cfg.lr * warm)
        result.loss_curve.append((step, float(loss.item())))
        if checkpoint_fn and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            checkpoint_fn(step)
        if cfg.target_loss is not None and float(loss.item()) <= cfg.target_loss:
            if checkpoint_fn:
                checkpoint_fn(step)
            break
    with torch.no_grad():
        # evaluate in slices: one forward over the whole set can exceed
        # memory for large sample counts
        ratios = []
        for i in range(0, n, 32):
            preds = model(inputs[i:i + 32])
            diff = (preds - targets[i:i + 32]).reshape(preds.shape[0], -1)
            ref = targets[i:i + 32].reshape(preds.shape[0], -1)
            ratios.append(diff.norm(dim=1) / ref.norm(dim=1))
        result.final_train_rl2 = float(torch.cat(ratios).mean().item())
    return result


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def gradient_check(loss_fn, params: list[torch.Tensor], tolerance: float = 1e-4,
                   step: float = 1e-5) -> dict:
    """Compare reverse-mode gradients of loss_fn() against central finite
    differences over every element of every parameter (64-bit only).

    Returns {"max_rel_error", "passed", "per_param"}; relative error is
    per-tensor: max|ad - fd| / (max|fd| + tiny).
    """
    n_total = sum(p.numel() for p in params)
    if n_total > 10_000:
        raise ValueError("gradient_check is limited to <= 1e4 parameters")
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient_check requires float64 parameters")

    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    per_param = []
    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            fd = torch.zeros_like(p)
            flat = p.reshape(-1)
            fd_flat = fd.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = float(loss_fn())
                flat[j] = orig - step
                dn = float(loss_fn())
                flat[j] = orig
                fd_flat[j] = (up - dn) / (2.0 * step)
            ad = torch.zeros_like(p) if g is None else g
            scale = float(fd.abs().max()) + 1e-12
            rel = float((ad - fd).abs().max()) / scale
            per_param.append(rel)
            max_rel = max(max_rel, rel)
    return {"max_rel_error": max_rel, "passed": max_rel <= tolerance,
            "per_param": per_param}


def model_gradient_check(model: OperatorModel, a: torch.Tensor,
                         tolerance: float = 1e-4) -> dict:
    """Finite-difference check of the full stack against a scalar quadratic
    loss of the prediction."""
    params = [p for p in model.parameters() if p.requires_grad]

    def loss_fn():
        return (model(a) ** 2).mean()

    return gradient_check(loss_fn, params, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Spectral diagnostics
# ---------------------------------------------------------------------------

@dataclass
class SpectrumProfile:
    """Half-diagonal DFT amplitude profiles for a stack of feature maps."""

    frequencies: np.ndarray          # (K,) in [0, pi]
    log_amplitude: np.ndarray        # (n_maps, K)
    delta_log_amplitude: np.ndarray  # (n_maps,), value at pi minus value at 0


def _half_diagonal_log_amplitude(fmap: np.ndarray) -> np.ndarray:
    """fmap: (H, W, C) square map -> (H//2 + 1,) log amplitude along the
    diagonal from (0,0) to (pi,pi), channel-averaged, unitary DFT."""
    h, w = fmap.shape[0], fmap.shape[1]
    if h != w:
        raise ValueError("spectrum profile requires square feature maps")
    spec = np.fft.fft2(fmap, axes=(0, 1), norm="ortho")
    amp = np.mean(np.abs(spec), axis=-1)
    k = np.arange(h // 2 + 1)
    return np.log(np.maximum(amp[k, k], LOG_FLOOR))


def spectrum_profile(feature_maps) -> SpectrumProfile:
    """feature_maps: one (H, W, C) array or a list of them (per layer)."""
    if isinstance(feature_maps, np.ndarray) and feature_maps.ndim == 3:
        feature_maps = [feature_maps]
    rows = [_half_diagonal_log_amplitude(np.asarray(m, dtype=np.float64))
            for m in feature_maps]
    n_freq = len(rows[0])
    freqs = np.linspace(0.0, np.pi, n_freq)
    log_amp = np.stack(rows)
    return SpectrumProfile(frequencies=freqs, log_amplitude=log_amp,
                           delta_log_amplitude=log_amp[:, -1] - log_amp[:, 0])


def spectrum_parseval_gap(fmap: np.ndarray) -> float:
    """Relative gap between grid-sum of squares and total squared DFT
    amplitude (zero for a unitary transform, up to rounding)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    spec = np.fft.fft2(fmap, axes=(0, 1), norm="ortho")
    a = float(np.sum(fmap ** 2))
    b = float(np.sum(np.abs(spec) ** 2))
    return abs(a - b) / max(a, 1e-300)


def depth_profile(model: OperatorModel, a: torch.Tensor):
    """Per-layer boundary-minus-center log-amplitude values.

    Returns a list of (normalized_depth, tag, delta) with two taps per layer:
    the mixer output ("operator") and the post-activation output ("mlp").
    """
    taps: list = []
    with torch.no_grad():
        model(a, taps=taps)
    out = []
    n = len(taps)
    for i, (tag, grid) in enumerate(taps):
        g = grid[0] if grid.dim() == 4 else grid
        prof = spectrum_profile(g.double().numpy())
        out.append(((i + 1) / n, tag, float(prof.delta_log_amplitude[0])))
    return out


def spectrum_to_csv(profile: SpectrumProfile) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["map_index", "frequency", "log_amplitude"])
    for i in range(profile.log_amplitude.shape[0]):
        for f, v in zip(profile.frequencies, profile.log_amplitude[i]):
            wr.writerow([i, repr(float(f)), repr(float(v))])
    return buf.getvalue()


def loss_curve_to_csv(curve: list[tuple[int, float]]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["step", "loss"])
    for s, v in curve:
        wr.writerow([s, repr(v)])
    return buf.getvalue()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
