"""Synthetic PDE dataset generation.

Three families, each with a reference numerical solver:
  - Darcy flow on (0,1)^2: thresholded Gaussian-random-field coefficient,
    5-point finite differences with harmonic-mean face coefficients, CG solve.
  - Shallow water dam break on [-2.5,2.5]^2: first-order finite volumes with
    Rusanov fluxes and CFL-limited substepping.
  - Diffusion-reaction (FitzHugh-Nagumo type) on [-1,1]^2: explicit stepping
    with stability substepping and no-flux boundaries.

Datasets are serialized in the MNOD container (see write_sampleset) with a
canonical-JSON split manifest sidecar. Generation is a pure function of
(config, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "GridField",
    "DarcyConfig",
    "SWEConfig",
    "DRConfig",
    "SampleSet",
    "SolverError",
    "DatasetFormatError",
    "gen_darcy_coefficient",
    "solve_darcy",
    "solve_darcy_rhs",
    "simulate_shallow_water",
    "simulate_diffusion_reaction",
    "build_sampleset",
    "write_sampleset",
    "read_sampleset",
    "SOLVER_VERSION",
]

SOLVER_VERSION = "1.0"
MAGIC = b"MNOD"
FORMAT_VERSION = 1

GRAVITY = 9.81


class SolverError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class GridField:
    """Scalar/vector field on a uniform grid with physical extent metadata.

    data: (H, W, C); extent: ((x0, x1), (y0, y1)); dt: spacing of stacked
    temporal channels, if any.
    """

    data: np.ndarray
    extent: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0))
    dt: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.shape[0] < 4 or self.data.shape[1] < 4:
            raise ValueError("grid must be at least 4x4")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data must be finite")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DarcyConfig:
    grid: int = 32
    beta: float = 1.0
    field_values: tuple[float, float] = (3.0, 12.0)
    correlation: float = 0.1
    seed: int = 0

    def __post_init__(self):
        low, high = self.field_values
        if low <= 0 or high <= 0:
            raise ValueError("field_values must be positive (ellipticity)")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")


@dataclass
class SWEConfig:
    grid: int = 32
    t_end: float = 1.0
    n_frames: int = 101
    g_r: float = GRAVITY
    r_range: tuple[float, float] = (0.3, 0.7)
    cfl: float = 0.45
    boundary: str = "outflow"  # "outflow" | "reflective"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.cfl <= 0.9:
            raise ValueError("cfl must be in (0, 0.9]")
        if self.boundary not in ("outflow", "reflective"):
            raise ValueError("boundary must be 'outflow' or 'reflective'")


@dataclass
class DRConfig:
    grid: int = 32
    t_end: float = 5.0
    n_frames: int = 101
    d_u: float = 1e-3
    d_v: float = 5e-3
    k: float = 5e-3
    safety: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.safety <= 1:
            raise ValueError("safety must be in (0, 1]")


@dataclass
class SampleSet:
    """Input/target field pairs with split manifest and provenance."""

    samples: list[tuple[GridField, GridField]]
    split: dict = field(default_factory=lambda: {"train": [], "test": []})
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(self.split["train"] + self.split["test"])
        if ids != list(range(len(self.samples))):
            raise ValueError("split indices must be disjoint and exhaustive")


# ---------------------------------------------------------------------------
# Darcy flow
# ---------------------------------------------------------------------------

def _grf(n: int, correlation: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian random field via spectral filtering of white noise."""
    noise = rng.standard_normal((n, n))
    kx = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    k2 = kx[:, None] ** 2 + kx[None, :] ** 2
    filt = np.exp(-0.5 * (correlation ** 2) * k2)
    filt[0, 0] = 0.0  # remove the mean mode
    fld = np.fft.ifft2(np.fft.fft2(noise) * filt).real
    return fld / fld.std()


def gen_darcy_coefficient(cfg: DarcyConfig, seed: int | None = None) -> GridField:
    """Two-valued diffusion coefficient: GRF thresholded at zero
    (>= 0 maps to the high value)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    fld = _grf(cfg.grid, cfg.correlation, rng)
    low, high = cfg.field_values
    a = np.where(fld >= 0.0, high, low)
    return GridField(a, extent=((0.0, 1.0), (0.0, 1.0)))


def _assemble_darcy(a: np.ndarray) -> tuple[sp.csr_matrix, float]:
    """5-point FD operator for -div(a grad u) on the interior of a node grid
    with zero Dirichlet boundary; harmonic-mean face coefficients."""
    n = a.shape[0]
    h = 1.0 / (n - 1)

    def harm(x, y):
        return 2.0 * x * y / (x + y)

    m = n - 2  # interior nodes per axis
    idx = np.arange(m * m).reshape(m, m)
    rows, cols, vals = [], [], []

    ax_e = harm(a[1:-1, 1:-1], a[1:-1, 2:])   # east faces
    ax_w = harm(a[1:-1, 1:-1], a[1:-1, :-2])  # west
    ay_s = harm(a[1:-1, 1:-1], a[2:, 1:-1])   # south (i+1)
    ay_n = harm(a[1:-1, 1:-1], a[:-2, 1:-1])  # north (i-1)

    diag = (ax_e + ax_w + ay_s + ay_n) / h ** 2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())

    def off(coef, r_sl, c_sl):
        rows.append(idx[r_sl].ravel())
        cols.append(idx[c_sl].ravel())
        vals.append(-(coef / h ** 2).ravel())

    off(ax_e[:, :-1], np.s_[:, :-1], np.s_[:, 1:])
    off(ax_w[:, 1:], np.s_[:, 1:], np.s_[:, :-1])
    off(ay_s[:-1, :], np.s_[:-1, :], np.s_[1:, :])
    off(ay_n[1:, :], np.s_[1:, :], np.s_[:-1, :])

    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * m, m * m))
    return mat, h


def solve_darcy_rhs(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Solve -div(a grad u) = f with u = 0 on the boundary. a, f are node
    values on the n x n grid over (0,1)^2; returns u on the same grid."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("diffusion coefficient must be strictly positive")
    n = a.shape[0]
    mat, _ = _assemble_darcy(a)
    rhs = np.asarray(f, dtype=np.float64)[1:-1, 1:-1].ravel()
    maxiter = 10 * n * n
    u_int, info = spla.cg(mat, rhs, rtol=1e-8, atol=0.0, maxiter=maxiter)
    if info != 0:
        res = np.linalg.norm(mat @ u_int - rhs) / max(np.linalg.norm(rhs), 1e-300)
        raise SolverError(f"CG failed to converge in {maxiter} iterations "
                          f"(relative residual {res:.3e})")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = u_int.reshape(n - 2, n - 2)
    return u


def solve_darcy(a: GridField, beta: float) -> GridField:
    """Steady Darcy pressure for constant forcing f = beta."""
    av = a.data[:, :, 0]
    if beta == 0.0:
        return GridField(np.zeros_like(av), extent=a.extent)
    f = np.full_like(av, float(beta))
    return GridField(solve_darcy_rhs(av, f), extent=a.extent)


# ---------------------------------------------------------------------------
# Shallow water
# ---------------------------------------------------------------------------

def _swe_ghost(q: np.ndarray, boundary: str) -> np.ndarray:
    """Pad (3, H, W) state with one ghost cell per side."""
    g = np.pad(q, ((0, 0), (1, 1), (1, 1)), mode="edge")
    if boundary == "reflective":
        # mirror the normal momentum: hu at x boundaries (columns),
        # hv at y boundaries (rows)
        g[1, :, 0] = -g[1, :, 1]
        g[1, :, -1] = -g[1, :, -2]
        g[2, 0, :] = -g[2, 1, :]
        g[2, -1, :] = -g[2, -2, :]
    return g


def _rusanov_flux(hl, hnl, htl, hr, hnr, htr, g):
    """Rusanov flux normal to a face. hn is the normal momentum, ht the
    tangential momentum. Returns (F_h, F_hn, F_ht)."""
    unl, unr = hnl / hl, hnr / hr
    cl, cr = np.sqrt(g * hl), np.sqrt(g * hr)
    s = np.maximum(np.abs(unl) + cl, np.abs(unr) + cr)
    fl = (hnl, hnl * unl + 0.5 * g * hl ** 2, htl * unl)
    fr = (hnr, hnr * unr + 0.5 * g * hr ** 2, htr * unr)
    return (0.5 * (fl[0] + fr[0]) - 0.5 * s * (hr - hl),
            0.5 * (fl[1] + fr[1]) - 0.5 * s * (hnr - hnl),
            0.5 * (fl[2] + fr[2]) - 0.5 * s * (htr - htl))


def _swe_step(q: np.ndarray, dx: float, dt: float, g: float, boundary: str) -> np.ndarray:
    """One forward-Euler finite-volume step of the (h, hu, hv) state."""
    gq = _swe_ghost(q, boundary)
    h, hu, hv = gq[0], gq[1], gq[2]

    # x-direction faces (axis=1 of the array is x)
    fx = _rusanov_flux(h[1:-1, :-1], hu[1:-1, :-1], hv[1:-1, :-1],
                       h[1:-1, 1:], hu[1:-1, 1:], hv[1:-1, 1:], g)
    # y-direction faces: normal momentum is hv
    fy = _rusanov_flux(h[:-1, 1:-1], hv[:-1, 1:-1], hu[:-1, 1:-1],
                       h[1:, 1:-1], hv[1:, 1:-1], hu[1:, 1:-1], g)

    out = q.copy()
    for comp, (fxa, fyi) in enumerate(((fx[0], fy[0]), (fx[1], fy[2]), (fx[2], fy[1]))):
        out[comp] -= dt / dx * (fxa[:, 1:] - fxa[:, :-1])
        out[comp] -= dt / dx * (fyi[1:, :] - fyi[:-1, :])
    return out


def _swe_max_speed(q: np.ndarray, g: float) -> float:
    h, hu, hv = q
    c = np.sqrt(g * h)
    return float(np.max(np.maximum(np.abs(hu / h), np.abs(hv / h)) + c))


def simulate_shallow_water(cfg: SWEConfig, seed: int | None = None,
                           r: float | None = None,
                           h_init: np.ndarray | None = None) -> np.ndarray:
    """Radial dam break on [-2.5, 2.5]^2 with flat bathymetry.

    Returns (n_frames, H, W, 3) with components (h, hu, hv) at uniform frame
    times over [0, t_end]. r overrides the random dam radius; h_init
    overrides the initial depth field entirely.
    """
    n = cfg.grid
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if r is None:
        r = rng.uniform(*cfg.r_range)
    dx = 5.0 / n
    xc = -2.5 + (np.arange(n) + 0.5) * dx
    gx, gy = np.meshgrid(xc, xc, indexing="xy")
    if h_init is None:
        h0 = np.where(np.sqrt(gx ** 2 + gy ** 2) < r, 2.0, 1.0)
    else:
        h0 = np.asarray(h_init, dtype=np.float64)
    q = np.stack([h0, np.zeros_like(h0), np.zeros_like(h0)])

    frame_times = np.linspace(0.0, cfg.t_end, cfg.n_frames)
    frames = np.empty((cfg.n_frames, n, n, 3))
    frames[0] = np.moveaxis(q, 0, -1)
    t = 0.0
    for k in range(1, cfg.n_frames):
        t_next = frame_times[k]
        while t < t_next - 1e-14:
            dt = min(cfg.cfl * dx / _swe_max_speed(q, cfg.g_r), t_next - t)
            q = _swe_step(q, dx, dt, cfg.g_r, cfg.boundary)
            if np.any(q[0] <= 0.0):
                raise SolverError(f"water depth became non-positive at t={t + dt:.5f}")
            t += dt
        frames[k] = np.moveaxis(q, 0, -1)
    return frames


# ---------------------------------------------------------------------------
# Diffusion-reaction
# ---------------------------------------------------------------------------

def _laplacian_noflux(u: np.ndarray, dx: float) -> np.ndarray:
    g = np.pad(u, 1, mode="edge")
    return (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
            - 4.0 * u) / dx ** 2


def _bandlimited_noise(n: int, rng: np.random.Generator,
                       cutoff: int = 8, amplitude: float = 0.5) -> np.ndarray:
    """Smooth random field from low-wavenumber Fourier modes, scaled to the
    given max amplitude."""
    coeff = np.zeros((n, n), dtype=np.complex128)
    freqs = np.fft.fftfreq(n, d=1.0 / n)
    keep = np.abs(freqs) <= cutoff
    mask = keep[:, None] & keep[None, :]
    coeff[mask] = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    fld = np.fft.ifft2(coeff).real
    m = np.max(np.abs(fld))
    return fld * (amplitude / m) if m > 0 else fld


def simulate_diffusion_reaction(cfg: DRConfig, seed: int | None = None,
                                init: tuple[np.ndarray, np.ndarray] | None = None,
                                with_reactions: bool = True) -> np.ndarray:
    """Activator/inhibitor dynamics on [-1, 1]^2 with no-flux boundaries.

    du/dt = d_u lap(u) + (u - u^3 - k - v), dv/dt = d_v lap(v) + (u - v).
    Explicit stepping with dt <= safety * dx^2 / (4 max(d_u, d_v)).
    Returns (n_frames, H, W, 2).
    """
    n = cfg.grid
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dx = 2.0 / n
    if init is None:
        u = _bandlimited_noise(n, rng)
        v = _bandlimited_noise(n, rng)
    else:
        u = np.array(init[0], dtype=np.float64)
        v = np.array(init[1], dtype=np.float64)

    dt_stable = cfg.safety * dx ** 2 / (4.0 * max(cfg.d_u, cfg.d_v))
    frame_times = np.linspace(0.0, cfg.t_end, cfg.n_frames)
    frames = np.empty((cfg.n_frames, n, n, 2))
    frames[0, :, :, 0], frames[0, :, :, 1] = u, v
    t = 0.0
    for k in range(1, cfg.n_frames):
        t_next = frame_times[k]
        while t < t_next - 1e-14:
            dt = min(dt_stable, t_next - t)
            du = cfg.d_u * _laplacian_noflux(u, dx)
            dv = cfg.d_v * _laplacian_noflux(v, dx)
            if with_reactions:
                du = du + (u - u ** 3 - cfg.k - v)
                dv = dv + (u - v)
            u = u + dt * du
            v = v + dt * dv
            t += dt
            if np.max(np.abs(u)) > 10.0 or np.max(np.abs(v)) > 10.0:
                raise SolverError(
                    f"solution blew up at t={t:.5f}; explicit step bound "
                    f"dt <= dx^2/(4 max(d_u, d_v)) = {dx ** 2 / (4 * max(cfg.d_u, cfg.d_v)):.3e} "
                    f"was dt={dt:.3e}")
        frames[k, :, :, 0], frames[k, :, :, 1] = u, v
    return frames


# ---------------------------------------------------------------------------
# Sample sets
# ---------------------------------------------------------------------------

def _sample_seed(base_seed: int, i: int) -> int:
    ss = np.random.SeedSequence([base_seed, i])
    return int(ss.generate_state(1)[0])


def _frames_to_channels(frames: np.ndarray) -> np.ndarray:
    """(F, H, W, C) -> (H, W, F*C), frame-major channel order."""
    f, h, w, c = frames.shape
    return frames.transpose(1, 2, 0, 3).reshape(h, w, f * c)


def generate_sample(task: str, cfg, sample_seed: int) -> tuple[GridField, GridField]:
    """One (input, target) pair; pure in (task, cfg, sample_seed)."""
    if task == "darcy":
        a = gen_darcy_coefficient(cfg, seed=sample_seed)
        u = solve_darcy(a, cfg.beta)
        inp = np.concatenate(
            [a.data, np.full_like(a.data, cfg.beta)], axis=-1)
        return (GridField(inp.astype(np.float32), extent=a.extent),
                GridField(u.data.astype(np.float32), extent=a.extent))
    if task == "sw2d":
        traj = simulate_shallow_water(cfg, seed=sample_seed)[:, :, :, :1]  # h only
        ext = ((-2.5, 2.5), (-2.5, 2.5))
    elif task == "dr2d":
        traj = simulate_diffusion_reaction(cfg, seed=sample_seed)
        ext = ((-1.0, 1.0), (-1.0, 1.0))
    else:
        raise ValueError(f"unknown task {task!r}")
    dt = cfg.t_end / (cfg.n_frames - 1)
    inp = _frames_to_channels(traj[:10]).astype(np.float32)
    tgt = _frames_to_channels(traj[10:]).astype(np.float32)
    return (GridField(inp, extent=ext, dt=dt), GridField(tgt, extent=ext, dt=dt))


def build_sampleset(task: str, n_train: int, n_test: int, cfg,
                    seed: int | None = None) -> SampleSet:
    """Generate n_train + n_test samples with disjoint split and recorded
    per-sample seeds."""
    if n_train < 1 or n_test < 1:
        raise ValueError("counts must be >= 1")
    base_seed = cfg.seed if seed is None else seed
    total = n_train + n_test
    seeds = [_sample_seed(base_seed, i) for i in range(total)]
    samples = [generate_sample(task, cfg, s) for s in seeds]
    split = {"train": list(range(n_train)), "test": list(range(n_train, total))}
    provenance = {
        "task": task,
        "config": asdict(cfg),
        "seed": base_seed,
        "sample_seeds": seeds,
        "solver_version": SOLVER_VERSION,
    }
    return SampleSet(samples=samples, split=split, provenance=provenance)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(fh, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def write_sampleset(sset: SampleSet, path):
    """MNOD container: magic, u16 version, length-prefixed canonical-JSON
    provenance, then per-sample records. The split manifest goes to a
    canonical-JSON sidecar at <path>.split.json."""
    meta = dict(sset.provenance)
    meta["n_samples"] = len(sset.samples)
    fields_meta = []
    for inp, tgt in sset.samples:
        fields_meta.append({"extent": inp.extent, "dt": inp.dt})
    meta["field_meta"] = fields_meta
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        blob = _canonical_json(meta)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i, (inp, tgt) in enumerate(sset.samples):
            fh.write(struct.pack("<I", i))
            _write_tensor(fh, inp.data)
            _write_tensor(fh, tgt.data)
    with open(f"{path}.split.json", "wb") as fh:
        fh.write(_canonical_json(sset.split))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError("truncated dataset file", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n_el = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(4 * n_el), dtype="<f4").reshape(dims).copy()


def read_sampleset(path) -> SampleSet:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MAGIC:
        raise DatasetFormatError("bad dataset magic", 0)
    version = rd.u16()
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    meta = json.loads(rd.take(rd.u32()).decode("utf-8"))
    n_samples = meta.pop("n_samples")
    fields_meta = meta.pop("field_meta")
    samples = []
    for i in range(n_samples):
        sid = rd.u32()
        if sid != i:
            raise DatasetFormatError(f"sample id mismatch ({sid} != {i})", rd.pos - 4)
        fm = fields_meta[i]
        ext = tuple(tuple(e) for e in fm["extent"])
        inp = GridField(rd.tensor(), extent=ext, dt=fm["dt"])
        tgt = GridField(rd.tensor(), extent=ext, dt=fm["dt"])
        samples.append((inp, tgt))
    with open(f"{path}.split.json", "rb") as fh:
        split = json.loads(fh.read().decode("utf-8"))
    return SampleSet(samples=samples, split=split, provenance=meta)
