"""Two-phase artificial GAMP, a validation harness that needs the true signal.

Phase one starts from x~0 = alpha x + sqrt(1 - alpha^2) n, which is independent
of A, and runs linear denoisers

    f~_t(x) = x / beta_t,    h~_t(u; y) = sqrt(delta) u T(y) / (lam* - T(y)),

so that x~^t converges to a rescaled spectral estimator as t grows. Phase two
then switches to the denoisers of the real algorithm. Comparing the two runs
checks the spectral-start analysis at finite size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidArgument
from .gamp import GampState, deterministic_onsager, gamp_step, output_update, signal_update
from .models import Channel, Instance, Preprocessing, Prior
from .spectral import SpectralEstimate, SpectralPrediction, _law
from .state_evolution import (
    DenoiserPolicy,
    OutputDenoiser,
    SeQuadrature,
    SignalDenoiser,
    se_init,
    se_trajectory,
)


@dataclass
class ArtificialConfig:
    alpha: float = 0.5
    T: int = 40
    phase2_steps: int = 1
    beta_mode: str = "empirical"  # or "se"
    beta: list = field(default_factory=list)  # beta_t actually used, filled by artificial_run

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.T < 1:
            raise InvalidArgument(f"phase-one length T must be >= 1, got {self.T}")
        if self.beta_mode not in ("empirical", "se"):
            raise InvalidArgument(f"beta_mode must be 'empirical' or 'se', got {self.beta_mode!r}")


@dataclass(frozen=True)
class PhaseOneState:
    mu: float
    sig2: float
    beta: float
    t: int


@dataclass
class ArtificialResult:
    se: list  # PhaseOneState for t = 0..T
    x_T: np.ndarray
    gap: float  # |sqrt(d) xs - sqrt(delta) x~^T|^2 / d
    step_diffs: list  # |x~^t - x~^{t-1}|^2 / d in phase one
    phase2: list = field(default_factory=list)  # x~^{T+t}, t = 0..phase2_steps


def artificial_init(instance: Instance, alpha: float, rng: np.random.Generator):
    """x~0 = alpha x + sqrt(1 - alpha^2) n and u~0 = A x~0 / sqrt(delta) (f~_0 is the identity)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidArgument(f"alpha must lie in (0, 1), got {alpha}")
    noise = rng.standard_normal(instance.d)
    x0 = alpha * instance.x + math.sqrt(1.0 - alpha * alpha) * noise
    u0 = instance.A.apply(x0) / math.sqrt(instance.delta)
    return GampState(x0, u0, 1.0 / instance.delta, t=0)


def phase1_functions(beta_t: float, lambda_star: float, preproc: Preprocessing, delta: float):
    """(f~_t, h~_t) for phase one; both are linear in the iterate."""
    if not beta_t > 0:
        raise InvalidArgument(f"beta_t must be positive, got {beta_t}")
    if not lambda_star > preproc.tau:
        raise DomainError(f"lambda* = {lambda_star} must exceed tau = {preproc.tau}")
    inv = 1.0 / beta_t
    f = SignalDenoiser(lambda s: inv * np.asarray(s, dtype=float), lambda s: np.full(np.shape(s), inv), inv,
                       f"x/{beta_t:.6g}")
    sd = math.sqrt(delta)

    def both(u, y):
        z = np.asarray(preproc(y), dtype=float)
        if np.any(z >= lambda_star):
            raise DomainError(f"lambda* = {lambda_star} does not exceed max T(y) = {z.max()}")
        slope = sd * z / (lambda_star - z)
        return slope * np.asarray(u, dtype=float), np.broadcast_to(slope, np.shape(u)).copy()

    return f, OutputDenoiser(both, math.inf, "spectral-linear")


def phase1_se(alpha: float, T: int, channel: Channel, preproc: Preprocessing, prediction: SpectralPrediction,
              rule=None) -> list:
    """Deterministic phase-one recursion from (alpha, 1 - alpha^2), beta_0 = 1.

    mu' = mu / (sqrt(delta) beta),
    sig2' = E{ Z^2 (G^2 mu^2 + sig2) / (lam* - Z)^2 } / beta^2,
    beta' = sqrt(mu'^2 + sig2').
    """
    law = _law(channel, preproc, rule)
    delta, lam = prediction.delta, prediction.lambda_star
    r = law.z**2 / (lam - law.z) ** 2
    e_r = law.e(r)
    e_rg = law.e(r * law.g2)
    mu, sig2 = alpha, 1.0 - alpha * alpha
    beta = 1.0
    out = [PhaseOneState(mu, sig2, beta, 0)]
    for t in range(T):
        mu, sig2 = mu / (math.sqrt(delta) * beta), (e_rg * mu * mu + e_r * sig2) / (beta * beta)
        beta = math.sqrt(mu * mu + sig2)
        out.append(PhaseOneState(mu, sig2, beta, t + 1))
    return out


def artificial_run(instance: Instance, config: ArtificialConfig, prior: Prior, channel: Channel,
                   prediction: SpectralPrediction, preproc: Preprocessing, spectral: SpectralEstimate,
                   rng: np.random.Generator, policy: DenoiserPolicy = DenoiserPolicy(),
                   deterministic_phase2: bool = True) -> ArtificialResult:
    """Run T phase-one iterations then `phase2_steps` iterations with the real denoisers.

    Phase two uses the SE schedule of the real algorithm; with
    `deterministic_phase2` its memory coefficients for t >= T follow the same
    deterministic rule as the modified algorithm it is compared against.
    """
    delta = instance.delta
    se = phase1_se(config.alpha, config.T, channel, preproc, prediction)
    d = instance.d

    state = artificial_init(instance, config.alpha, rng)
    betas = [1.0]
    diffs = []
    for t in range(config.T):
        f_t, h_t = phase1_functions(betas[t], prediction.lambda_star, preproc, delta)
        if t + 1 < config.T:
            x_new, hv, c = signal_update(state, instance, f_t, h_t, delta)
            if config.beta_mode == "se":
                betas.append(se[t + 1].beta)
            else:
                # beta_{t+1} = sqrt(mu^2 + sig2) is the limit of |x~^{t+1}| / sqrt(d)
                betas.append(float(np.linalg.norm(x_new)) / math.sqrt(d))
            f_next = phase1_functions(betas[t + 1], prediction.lambda_star, preproc, delta)[0]
            new = output_update(state, instance, x_new, hv, c, f_next, delta)
        else:
            # x~^T is produced by phase one; u~^T already uses the real f_0
            states = se_trajectory(se_init(prediction.a2, delta), prior, channel, policy, delta,
                                   config.phase2_steps)
            f_next = policy.f_for(prior, states[0])
            b_over = None
            if deterministic_phase2:
                quad = SeQuadrature(prior, channel)
                b_over = quad.signal_moments(f_next, states[0].mu_X, states[0].sig2_X)[2] / delta
            new = gamp_step(state, instance, f_t, h_t, f_next, delta, b_override=b_over)
        diffs.append(float(np.sum((new.x - state.x) ** 2)) / d)
        state = new
    config.beta = betas
    x_T = state.x.copy()
    gap = float(np.sum((math.sqrt(d) * spectral.xs - math.sqrt(delta) * x_T) ** 2)) / d

    phase2 = [x_T]
    if config.phase2_steps > 0:
        quad = SeQuadrature(prior, channel) if deterministic_phase2 else None
        f_t = policy.f_for(prior, states[0])
        for t in range(min(config.phase2_steps, len(states) - 1)):
            cur, nxt = states[t], states[t + 1]
            h_t = policy.h_for(channel, cur, delta)
            f_next = policy.f_for(prior, nxt)
            c_over = b_over = None
            if deterministic_phase2:
                c_over, b_over = deterministic_onsager(h_t, f_next, cur, nxt, delta, quad)
            state = gamp_step(state, instance, f_t, h_t, f_next, delta, c_override=c_over, b_override=b_over)
            f_t = f_next
            phase2.append(state.x.copy())
    return ArtificialResult(se, x_T, gap, diffs, phase2)
