"""GAMP for real GLMs started from the spectral estimator.

    x^{t+1} = A^T h_t(u^t; y) / sqrt(delta) - c_t f_t(x^t)
    u^{t+1} = A f_{t+1}(x^{t+1}) / sqrt(delta) - b_{t+1} h_t(u^t; y)

with c_t the mean of h_t' over the n outputs and b_{t+1} = sum_i f_{t+1}'(x_i) / n.
Denoisers are re-parameterised every iteration from a state-evolution run
computed up front. The modified variant replaces (b_t, c_t) with their SE
limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InvalidArgument
from .models import Channel, Instance, Preprocessing, Prior
from .spectral import SpectralEstimate, SpectralPrediction
from .state_evolution import (
    DenoiserPolicy,
    OutputDenoiser,
    SeQuadrature,
    SeState,
    SignalDenoiser,
    se_init,
    se_trajectory,
)

ONSAGER_MODES = ("empirical", "deterministic")


@dataclass(frozen=True)
class GampConfig:
    policy: DenoiserPolicy = DenoiserPolicy()
    max_iter: int = 200
    stop_tol: float = 1e-9
    damping: float = 1.0
    onsager_mode: str = "empirical"
    onsager: bool = True  # False drops the memory terms (for demonstrating they matter)
    keep_iterates: bool = False

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise InvalidArgument(f"damping must lie in (0, 1], got {self.damping}")
        if not self.stop_tol > 0:
            raise InvalidArgument(f"stop_tol must be positive, got {self.stop_tol}")
        if self.max_iter < 0:
            raise InvalidArgument(f"max_iter must be >= 0, got {self.max_iter}")
        if self.onsager_mode not in ONSAGER_MODES:
            raise InvalidArgument(f"onsager_mode must be one of {ONSAGER_MODES}")


@dataclass
class GampState:
    x: np.ndarray
    u: np.ndarray
    b: float
    c: float = math.nan
    t: int = 0


@dataclass
class GampTrace:
    overlaps: list  # normalised correlation of f_t(x^t) with x, per iteration
    diffs: list  # |x^{t+1} - x^t|^2 / d
    final: GampState
    converged: bool
    x_corr: list = field(default_factory=list)  # (1/d) <x, x^t>
    x_sq: list = field(default_factory=list)  # (1/d) |x^t|^2
    c: list = field(default_factory=list)
    b: list = field(default_factory=list)
    se_states: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    @property
    def iterations(self):
        return len(self.diffs)

    @property
    def squared_overlaps(self):
        return [o * o for o in self.overlaps]

    @property
    def final_squared_overlap(self):
        return self.overlaps[-1] ** 2


def empirical_pl2(xs, ys, psi: Callable) -> float:
    """(1/d) sum_i psi(x_i, y_i)."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if xs.shape != ys.shape:
        raise InvalidArgument(f"length mismatch: {xs.shape} vs {ys.shape}")
    return float(np.mean(psi(xs, ys)))


def normalized_correlation(estimate, x) -> float:
    ne = np.linalg.norm(estimate)
    if ne == 0:
        return 0.0
    return float(np.vdot(x, estimate).real / (ne * np.linalg.norm(x)))


def _check_finite(t, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite iterate at t = {t}", t=t)


# ============================================================ initialisation


def gamp_init_spectral(instance: Instance, spectral: SpectralEstimate, prediction: SpectralPrediction,
                       preproc: Preprocessing, f0: SignalDenoiser, b0: Optional[float] = None) -> GampState:
    """Spectral start: x^0 = sqrt(d / delta) xs and the matching u^0.

    b0 defaults to the empirical sum_i f0'(x^0_i) / n; the modified algorithm
    passes the deterministic value instead.
    """
    A, y, delta = instance.A, instance.y, instance.delta
    d, n = instance.d, instance.n
    z = np.asarray(preproc(y), dtype=float)
    lam = prediction.lambda_star
    if not lam > max(preproc.tau, float(z.max())):
        raise InvalidArgument(f"lambda* = {lam} must exceed the preprocessing supremum {preproc.tau}")
    x0 = math.sqrt(d / delta) * np.asarray(spectral.xs, dtype=float)
    if b0 is None:
        b0 = float(np.sum(f0.deriv(x0))) / n
    fx = f0(x0)
    u0 = A.apply(fx) / math.sqrt(delta)
    if b0 != 0.0:
        u0 = u0 - b0 * (math.sqrt(delta) / lam) * z * A.apply(x0)
    _check_finite(0, x0, u0)
    return GampState(x0, u0, b0, t=0)


# ====================================================================== steps


def gamp_step(state: GampState, instance: Instance, f_t: SignalDenoiser, h_t: OutputDenoiser,
              f_next: SignalDenoiser, delta: float, damping: float = 1.0,
              c_override: Optional[float] = None, b_override: Optional[float] = None) -> GampState:
    """One GAMP iteration from (x^t, u^t) to (x^{t+1}, u^{t+1}).

    `c_override` / `b_override` substitute deterministic memory coefficients.
    """
    x_new, hv, c = signal_update(state, instance, f_t, h_t, delta, c_override)
    return output_update(state, instance, x_new, hv, c, f_next, delta, damping, b_override)


def signal_update(state, instance, f_t, h_t, delta, c_override=None):
    """x^{t+1} = A^T h_t(u^t; y) / sqrt(delta) - c_t f_t(x^t); also returns h_t(u^t; y) and c_t."""
    hv, dh = h_t.both(state.u, instance.y)
    c = float(np.mean(dh)) if c_override is None else c_override
    x_new = instance.A.apply_adjoint(hv) / math.sqrt(delta) - c * f_t(state.x)
    return x_new, hv, c


def output_update(state, instance, x_new, hv, c, f_next, delta, damping=1.0, b_override=None):
    """u^{t+1} = A f_{t+1}(x^{t+1}) / sqrt(delta) - b_{t+1} h_t(u^t; y), then damping."""
    b = float(np.sum(f_next.deriv(x_new))) / instance.n if b_override is None else b_override
    u_new = instance.A.apply(f_next(x_new)) / math.sqrt(delta) - b * hv
    if damping != 1.0:
        x_new = damping * x_new + (1.0 - damping) * state.x
        u_new = damping * u_new + (1.0 - damping) * state.u
    _check_finite(state.t + 1, x_new, u_new)
    return GampState(x_new, u_new, b, c, state.t + 1)


def modified_gamp_step(state: GampState, instance: Instance, f_t, h_t, f_next, se_state: SeState,
                       se_next: SeState, delta: float, quad: SeQuadrature, damping: float = 1.0) -> GampState:
    """GAMP step with c = E{h_t'(U_t; Y)} and b = E{f_{t+1}'(X_{t+1})} / delta."""
    c_bar, b_bar = deterministic_onsager(h_t, f_next, se_state, se_next, delta, quad)
    return gamp_step(state, instance, f_t, h_t, f_next, delta, damping, c_override=c_bar, b_override=b_bar)


def deterministic_onsager(h_t, f_next, se_state, se_next, delta, quad):
    _, c_bar, _ = quad.output_moments(h_t, se_state.mu_U, se_state.sig2_U)
    b_bar = quad.signal_moments(f_next, se_next.mu_X, se_next.sig2_X)[2] / delta
    return c_bar, b_bar


# ======================================================================== run


def gamp_run(instance: Instance, config: GampConfig, prior: Prior, channel: Channel,
             prediction: SpectralPrediction, spectral: SpectralEstimate, preproc: Preprocessing,
             se_states: Optional[list] = None) -> GampTrace:
    """Spectral start followed by GAMP iterations with SE-driven denoisers.

    Stops when |x^{t+1} - x^t|^2 / d < stop_tol, after max_iter iterations, or
    when state evolution reports exact recovery (the SE schedule runs out).
    Divergence is reported in the trace rather than raised.
    """
    delta = instance.delta
    policy = config.policy
    if se_states is None:
        se_states = se_trajectory(se_init(prediction.a2, delta), prior, channel, policy, delta, config.max_iter)
    quad = SeQuadrature(prior, channel) if config.onsager_mode == "deterministic" else None
    deterministic = config.onsager_mode == "deterministic"

    f0 = policy.f_for(prior, se_states[0])
    b0 = None
    if deterministic:
        b0 = quad.signal_moments(f0, se_states[0].mu_X, se_states[0].sig2_X)[2] / delta
    elif not config.onsager:
        b0 = 0.0
    state = gamp_init_spectral(instance, spectral, prediction, preproc, f0, b0)

    x = instance.x
    d = instance.d
    trace = GampTrace([normalized_correlation(f0(state.x), x)], [], state, False,
                      x_corr=[float(np.dot(x, state.x)) / d], x_sq=[float(np.dot(state.x, state.x)) / d],
                      b=[state.b], se_states=list(se_states))
    if config.keep_iterates:
        trace.iterates.append(state.x.copy())

    f_t = f0
    steps = min(config.max_iter, len(se_states) - 1)
    for t in range(steps):
        cur, nxt = se_states[t], se_states[t + 1]
        h_t = policy.h_for(channel, cur, delta)
        f_next = policy.f_for(prior, nxt)
        c_over = b_over = None
        if deterministic:
            c_over, b_over = deterministic_onsager(h_t, f_next, cur, nxt, delta, quad)
        elif not config.onsager:
            c_over = b_over = 0.0
        try:
            new = gamp_step(state, instance, f_t, h_t, f_next, delta, config.damping, c_over, b_over)
        except DivergenceError as exc:
            trace.diverged = True
            trace.message = str(exc)
            return trace
        diff = float(np.sum((new.x - state.x) ** 2)) / d
        state, f_t = new, f_next
        trace.diffs.append(diff)
        trace.c.append(state.c)
        trace.b.append(state.b)
        trace.overlaps.append(normalized_correlation(f_t(state.x), x))
        trace.x_corr.append(float(np.dot(x, state.x)) / d)
        trace.x_sq.append(float(np.dot(state.x, state.x)) / d)
        trace.final = state
        if config.keep_iterates:
            trace.iterates.append(state.x.copy())
        if diff < config.stop_tol:
            trace.converged = True
            break
    else:
        # the SE schedule ended at exact recovery before max_iter
        if steps < config.max_iter:
            trace.converged = True
            trace.message = "state evolution reached exact recovery"
    return trace
