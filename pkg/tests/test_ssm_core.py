"""Discretization rules, the selective scan, and its attention-form rewrite."""

import decimal

import numpy as np
import pytest

from mno.ssm_core import (
    ContinuousSsm,
    Scheme,
    SelectiveScanInputs,
    attention_form_scan,
    discretize,
    discretize_euler,
    discretize_zoh,
    linearity_check,
    selective_scan,
)


def scalar_ssm(a=-1.0, b=1.0, c=1.0, d=0.0):
    return ContinuousSsm(a_diag=[a], b=[[b]], c=[[c]], d=[d])


def dec_exp(x: float, prec: int = 50) -> float:
    """Extended-precision exponential, independent of numpy."""
    with decimal.localcontext() as ctx:
        ctx.prec = prec
        return float(decimal.Decimal(repr(x)).exp())


class TestDiscretizeZoh:
    def test_hand_values(self):
        # a=-1, b=1, delta=0.1: a_bar = e^{-0.1}, b_bar = (e^{-0.1}-1)/(-1)
        disc = discretize_zoh(scalar_ssm(), 0.1)
        e = dec_exp(-0.1)
        assert disc.a_bar.reshape(()) == pytest.approx(e, rel=1e-12)
        assert disc.b_bar.reshape(()) == pytest.approx((e - 1.0) / (-1.0), rel=1e-12)
        assert disc.a_bar.reshape(()) == pytest.approx(0.9048374, abs=1e-7)
        assert disc.b_bar.reshape(()) == pytest.approx(0.0951626, abs=1e-7)

    def test_delta_to_zero_limit(self):
        disc = discretize_zoh(scalar_ssm(), 1e-12)
        assert disc.a_bar.reshape(()) == pytest.approx(1.0, abs=1e-11)
        assert disc.b_bar.reshape(()) == pytest.approx(1e-12, rel=1e-6)

    def test_series_limit_branch(self):
        # |delta * a| below the cancellation threshold: b_bar = delta * b
        disc = discretize_zoh(scalar_ssm(a=-1e-12, b=2.0), 0.5)
        assert disc.a_bar.reshape(()) == pytest.approx(1.0, abs=1e-12)
        assert disc.b_bar.reshape(()) == pytest.approx(1.0, rel=1e-12)

    def test_a_bar_in_unit_interval(self):
        for a in (-0.1, -1.0, -4.0):
            for delta in (0.01, 0.1, 1.0):
                disc = discretize_zoh(scalar_ssm(a=a), delta)
                assert 0.0 < float(disc.a_bar.reshape(())) < 1.0

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            discretize_zoh(scalar_ssm(), 0.0)
        with pytest.raises(ValueError):
            discretize_zoh(scalar_ssm(), -0.1)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            discretize_zoh(scalar_ssm(), float("nan"))
        with pytest.raises(ValueError):
            ContinuousSsm(a_diag=[float("inf")], b=[[1.0]], c=[[1.0]], d=[0.0])


class TestDiscretizeEuler:
    def test_hand_values(self):
        disc = discretize_euler(scalar_ssm(), 0.1)
        assert disc.a_bar.reshape(()) == pytest.approx(0.9, rel=1e-15)
        assert disc.b_bar.reshape(()) == pytest.approx(0.1, rel=1e-15)

    def test_euler_may_leave_unit_interval(self):
        disc = discretize_euler(scalar_ssm(a=-2.0), 0.6)
        assert disc.a_bar.reshape(()) == pytest.approx(-0.2, rel=1e-14)

    def test_zoh_euler_gap_within_taylor_remainder(self):
        # |e^{a delta} - (1 + a delta)| <= (a delta)^2 / 2 * e^{|a| delta}
        a, delta = -1.0, 0.1
        zoh = discretize_zoh(scalar_ssm(a=a), delta)
        eul = discretize_euler(scalar_ssm(a=a), delta)
        gap = abs(float(zoh.a_bar.reshape(())) - float(eul.a_bar.reshape(())))
        bound = (a * delta) ** 2 / 2.0 * dec_exp(abs(a) * delta)
        assert gap == pytest.approx(0.0048374, abs=1e-7)
        assert gap <= bound
        assert bound == pytest.approx(0.0055259, abs=1e-7)

    def test_second_order_shrink(self):
        # halving delta shrinks the ZOH-Euler gap by about 4x
        a = -2.0
        gaps = []
        for delta in (0.1, 0.05, 0.025):
            z = discretize_zoh(scalar_ssm(a=a), delta)
            e = discretize_euler(scalar_ssm(a=a), delta)
            gaps.append(abs(float(z.a_bar.reshape(())) - float(e.a_bar.reshape(()))))
        assert 3.5 < gaps[0] / gaps[1] < 4.5
        assert 3.5 < gaps[1] / gaps[2] < 4.5


class TestContinuousSsmInvariants:
    def test_rejects_nonnegative_rates(self):
        with pytest.raises(ValueError):
            ContinuousSsm(a_diag=[0.0], b=[[1.0]], c=[[1.0]], d=[0.0])
        with pytest.raises(ValueError):
            ContinuousSsm(a_diag=[-1.0, 0.5], b=np.ones((2, 1)),
                          c=np.ones((1, 2)), d=[0.0])

    def test_rejects_inconsistent_shapes(self):
        with pytest.raises(ValueError):
            ContinuousSsm(a_diag=[-1.0, -2.0], b=np.ones((3, 1)),
                          c=np.ones((1, 2)), d=[0.0])

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            discretize(scalar_ssm(), 0.1, "not-a-scheme")


def random_scan_case(rng, t_len, n, d):
    ssm = ContinuousSsm(
        a_diag=-rng.uniform(0.1, 3.0, n),
        b=rng.standard_normal((n, d)),
        c=rng.standard_normal((d, n)),
        d=rng.standard_normal(d),
    )
    inputs = SelectiveScanInputs(
        u=rng.standard_normal((t_len, d)),
        delta=rng.uniform(0.01, 0.3, (t_len, d)),
        b_t=rng.standard_normal((t_len, n)),
        c_t=rng.standard_normal((t_len, n)),
        h0=rng.standard_normal((n, d)),
    )
    return inputs, ssm


class TestSelectiveScan:
    def test_one_step_unrolling(self):
        rng = np.random.default_rng(0)
        inputs, ssm = random_scan_case(rng, 1, 3, 2)
        inputs.h0[:] = 0.0
        y, h = selective_scan(inputs, ssm, Scheme.SIMPLIFIED_ZOH)
        b_bar = inputs.delta[0][None, :] * inputs.b_t[0][:, None]
        h_expect = b_bar * inputs.u[0][None, :]
        y_expect = inputs.c_t[0] @ h_expect + ssm.d * inputs.u[0]
        assert np.allclose(h, h_expect, rtol=1e-14)
        assert np.allclose(y[0], y_expect, rtol=1e-14)

    def test_matches_naive_recurrence(self):
        rng = np.random.default_rng(1)
        inputs, ssm = random_scan_case(rng, 16, 4, 3)
        y, h = selective_scan(inputs, ssm, Scheme.SIMPLIFIED_ZOH)
        # independent elementwise recurrence
        h_ref = inputs.h0.copy()
        y_ref = np.zeros_like(y)
        for t in range(16):
            for i in range(4):
                for j in range(3):
                    a_bar = np.exp(ssm.a_diag[i] * inputs.delta[t, j])
                    b_bar = inputs.delta[t, j] * inputs.b_t[t, i]
                    h_ref[i, j] = a_bar * h_ref[i, j] + b_bar * inputs.u[t, j]
            for j in range(3):
                y_ref[t, j] = inputs.c_t[t] @ h_ref[:, j] + ssm.d[j] * inputs.u[t, j]
        assert np.max(np.abs(y - y_ref)) <= 1e-12 * max(1.0, np.max(np.abs(y_ref)))
        assert np.max(np.abs(h - h_ref)) <= 1e-12 * max(1.0, np.max(np.abs(h_ref)))

    def test_lti_reduction_equals_convolution(self):
        # constant (delta, B, C) over t: y is the causal convolution of u
        rng = np.random.default_rng(2)
        t_len, n, d = 32, 4, 2
        ssm = ContinuousSsm(a_diag=-rng.uniform(0.5, 2.0, n),
                            b=rng.standard_normal((n, d)),
                            c=rng.standard_normal((d, n)),
                            d=np.zeros(d))
        delta0 = 0.07
        b0 = rng.standard_normal(n)
        c0 = rng.standard_normal(n)
        u = rng.standard_normal((t_len, d))
        inputs = SelectiveScanInputs(
            u=u, delta=np.full((t_len, d), delta0),
            b_t=np.tile(b0, (t_len, 1)), c_t=np.tile(c0, (t_len, 1)))
        y, _ = selective_scan(inputs, ssm, Scheme.SIMPLIFIED_ZOH)
        a_bar = np.exp(ssm.a_diag * delta0)  # (N,)
        kern = np.array([c0 @ (a_bar ** j * (delta0 * b0)) for j in range(t_len)])
        y_ref = np.zeros_like(y)
        for t in range(t_len):
            for j in range(t + 1):
                y_ref[t] += kern[j] * u[t - j]
        assert np.max(np.abs(y - y_ref)) <= 1e-12 * np.max(np.abs(y_ref))

    def test_zero_input_zero_state_gives_zero(self):
        rng = np.random.default_rng(3)
        inputs, ssm = random_scan_case(rng, 8, 3, 2)
        inputs.u[:] = 0.0
        inputs.h0[:] = 0.0
        y, h = selective_scan(inputs, ssm, Scheme.SIMPLIFIED_ZOH)
        assert np.all(y == 0.0) and np.all(h == 0.0)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            SelectiveScanInputs(u=rng.standard_normal((4, 2)),
                                delta=np.full((3, 2), 0.1),
                                b_t=rng.standard_normal((4, 3)),
                                c_t=rng.standard_normal((4, 3)))

    def test_state_width_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        inputs, _ = random_scan_case(rng, 4, 3, 2)
        bad = scalar_ssm()  # n_state 1 != 3
        with pytest.raises(ValueError):
            selective_scan(inputs, bad, Scheme.SIMPLIFIED_ZOH)


class TestAttentionFormScan:
    def test_matches_selective_scan(self):
        rng = np.random.default_rng(6)
        inputs, ssm = random_scan_case(rng, 64, 8, 3)
        _, h_rec = selective_scan(inputs, ssm, Scheme.SIMPLIFIED_ZOH)
        h_att = attention_form_scan(inputs, ssm)
        rel = np.max(np.abs(h_att - h_rec)) / np.max(np.abs(h_rec))
        assert rel <= 1e-10

    def test_vanishing_rates_reduce_to_plain_sum(self):
        # a -> 0: every transition weight is ~1 and h_T = h0 + sum K_i^T V_i
        rng = np.random.default_rng(7)
        t_len, n, d = 12, 4, 2
        ssm = ContinuousSsm(a_diag=np.full(n, -1e-14),
                            b=np.ones((n, d)), c=np.ones((d, n)), d=np.zeros(d))
        inputs = SelectiveScanInputs(
            u=rng.standard_normal((t_len, d)),
            delta=rng.uniform(0.01, 0.2, (t_len, d)),
            b_t=rng.standard_normal((t_len, n)),
            c_t=rng.standard_normal((t_len, n)),
            h0=rng.standard_normal((n, d)))
        h = attention_form_scan(inputs, ssm)
        kv = np.einsum("tn,td->nd", inputs.b_t, inputs.u * inputs.delta)
        assert np.allclose(h, inputs.h0 + kv, rtol=1e-10, atol=1e-10)

    def test_two_step_manual_expansion(self):
        rng = np.random.default_rng(8)
        inputs, ssm = random_scan_case(rng, 2, 3, 2)
        h = attention_form_scan(inputs, ssm)
        w1 = np.exp(np.multiply.outer(ssm.a_diag, inputs.delta[0]))
        w2 = w1 * np.exp(np.multiply.outer(ssm.a_diag, inputs.delta[1]))
        kv1 = inputs.b_t[0][:, None] * (inputs.u[0] * inputs.delta[0])[None, :]
        kv2 = inputs.b_t[1][:, None] * (inputs.u[1] * inputs.delta[1])[None, :]
        h_ref = w2 * inputs.h0 + (w2 / w1) * kv1 + kv2
        assert np.allclose(h, h_ref, rtol=1e-12)

    def test_underflow_raises(self):
        t_len, n, d = 120, 2, 1
        ssm = ContinuousSsm(a_diag=np.full(n, -4.0),
                            b=np.ones((n, d)), c=np.ones((d, n)), d=np.zeros(d))
        inputs = SelectiveScanInputs(
            u=np.ones((t_len, d)), delta=np.full((t_len, d), 2.0),
            b_t=np.ones((t_len, n)), c_t=np.ones((t_len, n)))
        with pytest.raises(OverflowError):
            attention_form_scan(inputs, ssm)


class TestLinearityCheck:
    def test_rounding_scale_violation(self):
        rng = np.random.default_rng(9)
        x1 = rng.standard_normal(16)
        x2 = rng.standard_normal(16)
        v = linearity_check(0.1, -rng.uniform(0.5, 2.0, 16), x1, x2, 1.7)
        assert v <= 1e-13 * max(1.0, np.max(np.abs(x1)), np.max(np.abs(x2)))

    def test_alpha_zero(self):
        assert linearity_check(0.2, [-1.0], np.zeros(1), np.zeros(1), 0.0) == 0.0

    def test_alpha_one_x2_zero(self):
        x1 = np.array([0.3, -0.7])
        assert linearity_check(0.2, [-1.0, -2.0], x1, np.zeros(2), 1.0) == 0.0
