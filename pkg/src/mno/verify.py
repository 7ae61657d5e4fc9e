"""Self-contained property suites behind the `verify` CLI command.

Each property re-derives its expected values from an independent route
(closed forms, naive oracles, conservation laws) and returns a pass/fail
verdict; the command exits nonzero iff any property fails.
"""

from __future__ import annotations

import numpy as np
import torch

from . import mixers, pde_data, ssm_core, train_eval

__all__ = ["run_all", "PROPERTIES"]


def _rand_scan_inputs(rng, t_len, n, d):
    return ssm_core.SelectiveScanInputs(
        u=rng.standard_normal((t_len, d)),
        delta=rng.uniform(0.01, 0.2, (t_len, d)),
        b_t=rng.standard_normal((t_len, n)),
        c_t=rng.standard_normal((t_len, n)),
        h0=rng.standard_normal((n, d)),
    )


def _rand_ssm(rng, n, d):
    return ssm_core.ContinuousSsm(
        a_diag=-rng.uniform(0.1, 4.0, n),
        b=rng.standard_normal((n, d)),
        c=rng.standard_normal((d, n)),
        d=rng.standard_normal(d),
    )


def prop_zoh_euler_second_order():
    """ZOH-Euler discrepancy shrinks at second order in the step size."""
    deltas = np.array([0.1, 0.05, 0.025, 0.0125])
    a_values = np.array([-0.1, -0.5, -1.0, -2.0, -4.0])
    ssm = ssm_core.ContinuousSsm(a_diag=a_values, b=np.ones((5, 1)),
                                 c=np.ones((1, 5)), d=np.zeros(1))
    gaps_a, gaps_b = [], []
    for dl in deltas:
        z = ssm_core.discretize_zoh(ssm, dl)
        e = ssm_core.discretize_euler(ssm, dl)
        gaps_a.append(np.max(np.abs(z.a_bar - e.a_bar)))
        gaps_b.append(np.max(np.abs(z.b_bar - e.b_bar)))
    slope_a = np.polyfit(np.log(deltas), np.log(gaps_a), 1)[0]
    slope_b = np.polyfit(np.log(deltas), np.log(gaps_b), 1)[0]
    ok = slope_a >= 1.9 and slope_b >= 1.9
    return ok, f"log-log slopes a_bar={slope_a:.3f}, b_bar={slope_b:.3f}"


def prop_scan_form_equivalence():
    """Recurrent scan and the non-recurrent weighted-sum form agree on h_T."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t_len = int(rng.integers(2, 65))
        n = int(rng.integers(1, 17))
        d = int(rng.integers(1, 5))
        ssm = _rand_ssm(rng, n, d)
        inputs = _rand_scan_inputs(rng, t_len, n, d)
        _, h_scan = ssm_core.selective_scan(inputs, ssm,
                                            ssm_core.Scheme.SIMPLIFIED_ZOH)
        h_attn = ssm_core.attention_form_scan(inputs, ssm)
        rel = np.max(np.abs(h_scan - h_attn)) / max(np.max(np.abs(h_scan)), 1e-300)
        worst = max(worst, rel)
    return worst <= 1e-10, f"max relative difference {worst:.3e}"


def prop_scan_lti_convolution():
    """Constant selective parameters reduce the scan to a causal convolution."""
    rng = np.random.default_rng(1)
    t_len, n, d = 32, 4, 2
    ssm = _rand_ssm(rng, n, d)
    delta0 = rng.uniform(0.05, 0.2, d)
    b0 = rng.standard_normal(n)
    c0 = rng.standard_normal(n)
    u = rng.standard_normal((t_len, d))
    inputs = ssm_core.SelectiveScanInputs(
        u=u, delta=np.tile(delta0, (t_len, 1)),
        b_t=np.tile(b0, (t_len, 1)), c_t=np.tile(c0, (t_len, 1)))
    y, _ = ssm_core.selective_scan(inputs, ssm, ssm_core.Scheme.ZOH)
    # materialize the LTI kernel per channel: k_j[d] = sum_n c0_n a_bar[d,n]^j b_bar[d,n]
    xa = np.outer(delta0, ssm.a_diag)  # (D, N)
    a_bar = np.exp(xa)
    b_bar = np.expm1(xa) / xa * delta0[:, None] * b0[None, :]
    y_conv = np.zeros_like(y)
    for t in range(t_len):
        for j in range(t + 1):
            k_j = (a_bar ** j * b_bar) @ c0  # (D,)
            y_conv[t] += k_j * u[t - j]
        y_conv[t] += ssm.d * u[t]
    rel = np.max(np.abs(y - y_conv)) / np.max(np.abs(y))
    return rel <= 1e-12, f"max relative gap {rel:.3e}"


def prop_scan_linearity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        x1 = rng.standard_normal(8)
        x2 = rng.standard_normal(8)
        v = ssm_core.linearity_check(float(rng.uniform(0.01, 0.5)),
                                     -rng.uniform(0.1, 4, 8), x1, x2,
                                     float(rng.standard_normal()))
        scale = max(np.max(np.abs(x1)), np.max(np.abs(x2)), 1.0)
        worst = max(worst, v / scale)
    return worst <= 1e-13, f"max relative violation {worst:.3e}"


def prop_scan_zero_input():
    rng = np.random.default_rng(3)
    n, d, t_len = 4, 3, 16
    ssm = _rand_ssm(rng, n, d)
    inputs = ssm_core.SelectiveScanInputs(
        u=np.zeros((t_len, d)), delta=np.full((t_len, d), 0.1),
        b_t=rng.standard_normal((t_len, n)), c_t=rng.standard_normal((t_len, n)))
    y, h = ssm_core.selective_scan(inputs, ssm)
    ok = np.all(y == 0.0) and np.all(h == 0.0)
    return bool(ok), "zero input with zero h0 gives identically zero output"


def prop_softmax_rows():
    torch.manual_seed(0)
    attn = mixers.SoftmaxAttention(6).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    with torch.no_grad():
        w = attn.attention_weights(x)
    gap = float((w.sum(dim=-1) - 1.0).abs().max())
    return gap <= 1e-12, f"row-sum deviation {gap:.3e}"


def prop_galerkin_oracle():
    torch.manual_seed(1)
    attn = mixers.GalerkinAttention(6, d_k=4, d_v=5).double()
    x = torch.randn(8, 6, dtype=torch.float64)
    out = attn(x)
    with torch.no_grad():
        q = attn.w_q(x)
        k = mixers.layer_norm(attn.w_k(x))
        v = mixers.layer_norm(attn.w_v(x))
        naive = attn.w_o((q @ (k.t() @ v)) / 8.0)
    rel = float((out.detach() - naive).abs().max() / naive.abs().max())
    return rel <= 1e-12, f"max relative gap {rel:.3e}"


def prop_galerkin_linear_cost():
    torch.manual_seed(2)
    attn = mixers.GalerkinAttention(6, d_k=4, d_v=4)
    flops = {}
    for length in (16, 32):
        x = torch.randn(length, 6)
        with mixers.FlopCounter() as fc:
            attn(x)
        flops[length] = fc.flops / length
    ok = flops[16] == flops[32]
    return ok, f"per-token flops at L=16: {flops[16]:.0f}, L=32: {flops[32]:.0f}"


def prop_cross_s6_degeneracy():
    torch.manual_seed(3)
    cross = mixers.CrossS6Block(4, expand=2, n_state=4, q=0.0).double()
    plain = mixers.S6Block(4, expand=2, n_state=4).double()
    with torch.no_grad():
        for name in ("w_in", "w_b", "w_c", "w_delta", "w_out", "gate"):
            getattr(plain, name).weight.copy_(getattr(cross, name).weight)
        plain.w_delta.bias.copy_(cross.w_delta.bias)
        plain.a_diag.copy_(cross.a_diag)
        plain.d_skip.copy_(cross.d_skip)
    x = torch.randn(2, 12, 4, dtype=torch.float64)
    xp = torch.randn(2, 12, 4, dtype=torch.float64)
    with torch.no_grad():
        same = torch.equal(cross(x, xp), plain(x))
    return same, "q=0 cross block output is identical to the plain S6 block"


def prop_scan_roundtrip():
    rng = np.random.default_rng(4)
    torch.manual_seed(4)
    for _ in range(50):
        h = int(rng.integers(2, 65))
        w = int(rng.integers(2, 65))
        grid = torch.randn(h, w, 3)
        layout = mixers.ScanLayout(h, w)
        back = mixers.scan_merge(mixers.scan_expand(grid, layout), layout)
        if not torch.equal(back, grid):
            return False, f"round trip not exact on {h}x{w}"
    return True, "merge(expand(x)) exact on 50 random grids up to 64x64"


def prop_block_gradients(corrupt_adjoint: bool = False):
    """Finite-difference gradient checks of every mixer block (small inputs)."""
    torch.manual_seed(5)
    results = []
    x = torch.randn(6, 4, dtype=torch.float64)
    xp = torch.randn(6, 4, dtype=torch.float64)
    blocks = {
        "softmax": (mixers.SoftmaxAttention(4, 3, 3).double(), lambda m: m(x)),
        "galerkin": (mixers.GalerkinAttention(4, 3, 3).double(), lambda m: m(x)),
        "s6": (mixers.S6Block(4, 2, 3).double(), lambda m: m(x)),
        "cross_s6": (mixers.CrossS6Block(4, 2, 3).double(), lambda m: m(x, xp)),
    }
    for name, (block, run) in blocks.items():
        params = [p for p in block.parameters() if p.requires_grad]

        def loss_fn(block=block, run=run):
            out = run(block)
            if corrupt_adjoint:
                out = _CorruptGrad.apply(out)
            return (out ** 2).mean()

        rep = train_eval.gradient_check(loss_fn, params, tolerance=1e-4)
        results.append((name, rep["passed"], rep["max_rel_error"]))
    ok = all(p for _, p, _ in results)
    detail = ", ".join(f"{n}: {e:.2e}" for n, _, e in results)
    return ok, f"max relative errors {detail}"


class _CorruptGrad(torch.autograd.Function):
    """Identity forward with a deliberately wrong backward (negative control)."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 1.5 * g + 0.01


def prop_darcy_convergence():
    errs = []
    grids = [17, 33, 65]
    for n in grids:
        xs = np.linspace(0, 1, n)
        gx, gy = np.meshgrid(xs, xs, indexing="xy")
        f = 2 * np.pi ** 2 * np.sin(np.pi * gx) * np.sin(np.pi * gy)
        u = pde_data.solve_darcy_rhs(np.ones((n, n)), f)
        exact = np.sin(np.pi * gx) * np.sin(np.pi * gy)
        errs.append(np.max(np.abs(u - exact)))
    hs = [1.0 / (n - 1) for n in grids]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    return 1.8 <= slope <= 2.2, f"max-error convergence order {slope:.3f}"


def prop_swe_conservation():
    cfg = pde_data.SWEConfig(grid=32, n_frames=2, t_end=0.25, boundary="reflective")
    n = cfg.grid
    # flat lake is exactly stationary
    flat = pde_data.simulate_shallow_water(cfg, seed=0, h_init=np.ones((n, n)))
    stationary = np.all(flat[-1, :, :, 0] == 1.0) and np.all(flat[-1, :, :, 1:] == 0.0)
    # dam break conserves mass with closed boundaries
    traj = pde_data.simulate_shallow_water(cfg, seed=0, r=0.5)
    m0 = traj[0, :, :, 0].sum()
    drift = abs(traj[-1, :, :, 0].sum() - m0) / m0
    ok = stationary and drift <= 1e-10
    return ok, f"flat lake stationary={stationary}, mass drift {drift:.3e}"


def prop_swe_rotation_symmetry():
    cfg = pde_data.SWEConfig(grid=64, n_frames=11, t_end=0.5)
    traj = pde_data.simulate_shallow_water(cfg, seed=0, r=0.5)
    h = traj[-1, :, :, 0]
    gap = np.max(np.abs(h - np.rot90(h)))
    return gap <= 1e-6, f"90-degree rotation gap {gap:.3e}"


def prop_dr_fixed_point():
    cfg = pde_data.DRConfig(grid=32)
    u_star = -np.cbrt(cfg.k)
    n = cfg.grid
    init = (np.full((n, n), u_star), np.full((n, n), u_star))
    traj = pde_data.simulate_diffusion_reaction(cfg, seed=0, init=init)
    drift = np.max(np.abs(traj[-1] - u_star))
    return drift <= 1e-6, f"fixed-point drift {drift:.3e}"


def prop_dr_mean_conservation():
    cfg = pde_data.DRConfig(grid=32, t_end=1.0, n_frames=21)
    traj = pde_data.simulate_diffusion_reaction(cfg, seed=1, with_reactions=False)
    m0 = traj[0, :, :, 0].mean()
    drift = abs(traj[-1, :, :, 0].mean() - m0) / abs(m0)
    return drift <= 1e-10, f"mean drift {drift:.3e} (no-flux diffusion)"


def prop_metrics_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        p = rng.standard_normal((5, 7))
        t = rng.standard_normal((5, 7)) + 0.5
        # independent formulations
        rmse_o = float(np.sqrt(np.sum((p - t) ** 2) / p.size))
        nrmse_o = rmse_o / float(np.sqrt(np.sum(t ** 2) / t.size))
        rl2_o = float(np.sqrt(np.sum((p - t) ** 2)) / np.sqrt(np.sum(t ** 2)))
        worst = max(worst,
                    abs(train_eval.metric_rmse(p, t) - rmse_o),
                    abs(train_eval.metric_nrmse(p, t) - nrmse_o),
                    abs(train_eval.metric_rl2(p, t) - rl2_o))
    # homogeneity
    p = rng.standard_normal((4, 4))
    t = rng.standard_normal((4, 4)) + 1.0
    c = 3.7
    hom = (abs(train_eval.metric_rl2(c * p, c * t) - train_eval.metric_rl2(p, t))
           + abs(train_eval.metric_nrmse(c * p, c * t) - train_eval.metric_nrmse(p, t))
           + abs(train_eval.metric_rmse(c * p, c * t) - c * train_eval.metric_rmse(p, t)))
    ok = worst <= 1e-12 and hom <= 1e-12
    return ok, f"oracle gap {worst:.3e}, homogeneity gap {hom:.3e}"


def prop_adam_first_step():
    theta = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = train_eval.Adam([theta], lr=0.1)
    loss = 0.5 * theta ** 2
    loss.backward()
    opt.step()
    gap = abs(float(theta.detach()) - 0.9)
    return gap <= 1e-8, f"first-step magnitude gap {gap:.3e}"


def prop_spectrum_diagnostics():
    rng = np.random.default_rng(7)
    parseval = train_eval.spectrum_parseval_gap(rng.standard_normal((32, 32, 2)))
    const = train_eval.spectrum_profile(np.ones((32, 32, 1)))
    checker = np.indices((32, 32)).sum(axis=0) % 2
    check = train_eval.spectrum_profile((2.0 * checker - 1.0)[:, :, None])
    deltas = [train_eval.spectrum_profile(
        rng.standard_normal((32, 32, 8))).delta_log_amplitude[0]
        for _ in range(64)]
    noise = float(np.mean(deltas))
    ok = (parseval <= 1e-10 and const.delta_log_amplitude[0] < 0
          and check.delta_log_amplitude[0] > 0 and abs(noise) <= 0.15)
    return ok, (f"parseval {parseval:.2e}, const delta {const.delta_log_amplitude[0]:.1f}, "
                f"checker delta {check.delta_log_amplitude[0]:.1f}, noise mean {noise:.3f}")


PROPERTIES = [
    ("zoh_euler_second_order", prop_zoh_euler_second_order),
    ("scan_form_equivalence", prop_scan_form_equivalence),
    ("scan_lti_convolution", prop_scan_lti_convolution),
    ("scan_linearity", prop_scan_linearity),
    ("scan_zero_input", prop_scan_zero_input),
    ("softmax_rows_sum_to_one", prop_softmax_rows),
    ("galerkin_dense_oracle", prop_galerkin_oracle),
    ("galerkin_linear_cost", prop_galerkin_linear_cost),
    ("cross_s6_q0_degeneracy", prop_cross_s6_degeneracy),
    ("scan_roundtrip_identity", prop_scan_roundtrip),
    ("gradient_check", prop_block_gradients),
    ("darcy_convergence_order", prop_darcy_convergence),
    ("swe_conservation", prop_swe_conservation),
    ("swe_rotation_symmetry", prop_swe_rotation_symmetry),
    ("dr_fixed_point", prop_dr_fixed_point),
    ("dr_mean_conservation", prop_dr_mean_conservation),
    ("metrics_oracle", prop_metrics_oracle),
    ("adam_first_step", prop_adam_first_step),
    ("spectrum_diagnostics", prop_spectrum_diagnostics),
]


def run_all(corrupt_adjoint: bool = False) -> list[dict]:
    """Execute every property; returns one verdict dict per property."""
    out = []
    for name, fn in PROPERTIES:
        if name == "gradient_check":
            passed, detail = fn(corrupt_adjoint=corrupt_adjoint)
        else:
            passed, detail = fn()
        out.append({"property": name, "passed": bool(passed), "detail": detail})
    return out
