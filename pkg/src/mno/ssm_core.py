"""Continuous-to-discrete state-space conversion and the selective scan.

Everything here is plain numpy in float64: these routines are the reference
path that the trainable blocks in :mod:`mno.mixers` are checked against.
The state matrix A is diagonal, real and negative, so exp(A*delta) is an
elementwise exponential and the scan factors over state and channel axes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Scheme",
    "ContinuousSsm",
    "DiscreteSsm",
    "SelectiveScanInputs",
    "discretize_zoh",
    "discretize_euler",
    "discretize",
    "selective_scan",
    "attention_form_scan",
    "linearity_check",
]

# Below this threshold (e^x - 1)/x is evaluated by its series limit to avoid
# catastrophic cancellation.
_SMALL_XA = 1e-8

# Transition weights smaller than this are treated as hard underflow.
_W_UNDERFLOW = 1e-300


class Scheme(enum.Enum):
    ZOH = "zoh"
    EULER = "euler"
    SIMPLIFIED_ZOH = "simplified_zoh"


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite values in input array")
    return a


@dataclass
class ContinuousSsm:
    """Diagonal-A continuous system h' = A h + B u, y = C h + D u.

    a_diag: (N,) strictly negative rates.
    b: (N, D) input map, one column per channel.
    c: (D, N) output map, one row per channel.
    d: (D,) feedthrough, applied only in the output equation.
    """

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    n_state: int = field(init=False)

    def __post_init__(self):
        self.a_diag = _as_f64(self.a_diag).reshape(-1)
        self.b = np.atleast_2d(_as_f64(self.b))
        self.c = np.atleast_2d(_as_f64(self.c))
        self.d = _as_f64(self.d).reshape(-1)
        self.n_state = self.a_diag.shape[0]
        if np.any(self.a_diag >= 0):
            raise ValueError("a_diag must be strictly negative")
        if self.b.shape[0] != self.n_state or self.c.shape[1] != self.n_state:
            raise ValueError("b/c shapes inconsistent with n_state")

    @property
    def n_channels(self) -> int:
        return self.b.shape[1]


@dataclass
class DiscreteSsm:
    """Discrete transition a_bar and input map b_bar for one or more steps."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    scheme: Scheme


def _phi(x: np.ndarray) -> np.ndarray:
    """(e^x - 1)/x with the series limit near x = 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.ones_like(x)
    big = np.abs(x) >= _SMALL_XA
    out[big] = np.expm1(x[big]) / x[big]
    return out


def _check_delta(delta) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("delta must be finite")
    if np.any(d <= 0):
        raise ValueError("delta must be strictly positive")
    return d


def discretize_zoh(ssm: ContinuousSsm, delta) -> DiscreteSsm:
    """Zero-order-hold discretization: a_bar = e^{delta a},
    b_bar = (delta a)^{-1}(e^{delta a} - 1) * delta * b."""
    delta = _check_delta(delta)
    xa = np.multiply.outer(delta, ssm.a_diag)  # (..., N)
    a_bar = np.exp(xa)
    coef = _phi(xa) * np.expand_dims(delta, -1)  # (..., N)
    b_bar = np.expand_dims(coef, -1) * ssm.b  # (..., N, D)
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, scheme=Scheme.ZOH)


def discretize_euler(ssm: ContinuousSsm, delta) -> DiscreteSsm:
    """First-order (Euler) discretization: a_bar = 1 + delta a, b_bar = delta b."""
    delta = _check_delta(delta)
    a_bar = 1.0 + np.multiply.outer(delta, ssm.a_diag)
    b_bar = np.expand_dims(np.multiply.outer(delta, np.ones_like(ssm.a_diag)), -1) * ssm.b
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, scheme=Scheme.EULER)


def discretize_simplified_zoh(ssm: ContinuousSsm, delta) -> DiscreteSsm:
    """Exact exponential transition with the O(delta^2) input-map terms dropped:
    a_bar = e^{delta a}, b_bar = delta b."""
    delta = _check_delta(delta)
    a_bar = np.exp(np.multiply.outer(delta, ssm.a_diag))
    b_bar = np.expand_dims(np.multiply.outer(delta, np.ones_like(ssm.a_diag)), -1) * ssm.b
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, scheme=Scheme.SIMPLIFIED_ZOH)


def discretize(ssm: ContinuousSsm, delta, scheme: Scheme) -> DiscreteSsm:
    if scheme is Scheme.ZOH:
        return discretize_zoh(ssm, delta)
    if scheme is Scheme.EULER:
        return discretize_euler(ssm, delta)
    if scheme is Scheme.SIMPLIFIED_ZOH:
        return discretize_simplified_zoh(ssm, delta)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class SelectiveScanInputs:
    """Per-token inputs of the selective recurrence.

    u: (T, D) tokens; delta: (T, D) strictly positive step sizes;
    b_t: (T, N) input-dependent B; c_t: (T, N) input-dependent C;
    h0: (N, D) initial state (zero by default).
    """

    u: np.ndarray
    delta: np.ndarray
    b_t: np.ndarray
    c_t: np.ndarray
    h0: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.atleast_2d(_as_f64(self.u))
        self.delta = np.atleast_2d(_as_f64(self.delta))
        self.b_t = np.atleast_2d(_as_f64(self.b_t))
        self.c_t = np.atleast_2d(_as_f64(self.c_t))
        t = self.u.shape[0]
        if not (self.delta.shape[0] == self.b_t.shape[0] == self.c_t.shape[0] == t):
            raise ValueError("all sequences must share length T")
        if self.delta.shape != self.u.shape:
            raise ValueError("delta must have shape (T, D) matching u")
        if np.any(self.delta <= 0):
            raise ValueError("delta must be strictly positive")
        n = self.b_t.shape[1]
        if self.h0 is None:
            self.h0 = np.zeros((n, self.u.shape[1]))
        else:
            self.h0 = _as_f64(self.h0)
            if self.h0.shape != (n, self.u.shape[1]):
                raise ValueError("h0 must have shape (N, D)")

    @property
    def length(self) -> int:
        return self.u.shape[0]


def _step_ab(ssm: ContinuousSsm, delta_t: np.ndarray, b_t: np.ndarray,
             scheme: Scheme) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (a_bar, b_bar) for one step, using the token's B row.

    delta_t: (D,), b_t: (N,). Returns a_bar (N, D) and b_bar (N, D)
    (b_bar already includes the B_t column, before the outer product with u).
    """
    xa = np.outer(ssm.a_diag, delta_t)  # (N, D)
    if scheme is Scheme.ZOH:
        a_bar = np.exp(xa)
        b_bar = _phi(xa) * delta_t[None, :] * b_t[:, None]
    elif scheme is Scheme.EULER:
        a_bar = 1.0 + xa
        b_bar = delta_t[None, :] * b_t[:, None]
    elif scheme is Scheme.SIMPLIFIED_ZOH:
        a_bar = np.exp(xa)
        b_bar = delta_t[None, :] * b_t[:, None]
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return a_bar, b_bar


def selective_scan(inputs: SelectiveScanInputs, ssm: ContinuousSsm,
                   scheme: Scheme = Scheme.SIMPLIFIED_ZOH):
    """Run the recurrence h_t = a_bar_t * h_{t-1} + b_bar_t * u_t,
    y_t = c_t . h_t + d * u_t. Returns (y, h_T) with y (T, D), h_T (N, D)."""
    if inputs.b_t.shape[1] != ssm.n_state:
        raise ValueError("b_t state width does not match ssm.n_state")
    if inputs.u.shape[1] != ssm.n_channels:
        raise ValueError("u channel width does not match ssm channels")
    t_len, d = inputs.u.shape
    h = inputs.h0.copy()
    y = np.empty((t_len, d))
    for t in range(t_len):
        a_bar, b_bar = _step_ab(ssm, inputs.delta[t], inputs.b_t[t], scheme)
        h = a_bar * h + b_bar * inputs.u[t][None, :]
        y[t] = inputs.c_t[t] @ h + ssm.d * inputs.u[t]
    return y, h


def attention_form_scan(inputs: SelectiveScanInputs, ssm: ContinuousSsm) -> np.ndarray:
    """Final state via the non-recurrent weighted sum

        h_T = w_T * h0 + sum_i (w_T / w_i) * (K_i^T V_i),

    with w_i the running product of per-step transitions e^{a delta_j},
    K_i = B_i and V_i = u_i * delta_i (the simplified-ZOH input map).
    The w ratios are evaluated in log space so that only a genuine underflow
    of the running product itself is an error.
    """
    if inputs.b_t.shape[1] != ssm.n_state:
        raise ValueError("b_t state width does not match ssm.n_state")
    t_len = inputs.length
    # log w_i, cumulative over steps: (T, N, D)
    step_log = inputs.delta[:, None, :] * ssm.a_diag[None, :, None]
    log_w = np.cumsum(step_log, axis=0)
    if np.any(log_w < np.log(_W_UNDERFLOW)):
        raise OverflowError(
            "transition-weight product underflowed below 1e-300; "
            "use a shorter sequence or larger (less negative) a_diag"
        )
    kv = inputs.b_t[:, :, None] * (inputs.u * inputs.delta)[:, None, :]  # (T, N, D)
    ratios = np.exp(log_w[-1][None] - log_w)  # w_T / w_i, always <= 1
    h_t = np.exp(log_w[-1]) * inputs.h0 + np.sum(ratios * kv, axis=0)
    return h_t


def linearity_check(delta: float, a_diag, x1, x2, alpha: float) -> float:
    """Max violation of additivity and homogeneity for x -> e^{a delta} * x."""
    a_diag = np.asarray(a_diag, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    w = np.exp(a_diag * delta)

    def t(x):
        return w * x

    add = np.max(np.abs(t(x1 + x2) - t(x1) - t(x2))) if x1.size else 0.0
    hom = np.max(np.abs(t(alpha * x1) - alpha * t(x1))) if x1.size else 0.0
    return float(max(add, hom))
