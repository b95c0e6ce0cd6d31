"""State evolution for GAMP on GLMs, plus the Bayes-optimal denoisers.

The recursion tracks four scalars. The signal-side iterate behaves like
X_t = mu_X X + sqrt(sig2_X) W, the output-side one like U_t = mu_U G + sqrt(sig2_U) W'.
Given denoisers f (signal side) and h (output side):

    mu_U     = E{X f(X_t)} / sqrt(delta)
    sig2_U   = E{f(X_t)^2} / delta - mu_U^2
    mu_X'    = sqrt(delta) E{G h(U_t; Y)} - E{h'(U_t; Y)} E{X f(X_t)}
    sig2_X'  = E{h(U_t; Y)^2}

All expectations are tensor quadrature sums: Gauss-Hermite by default, with
Gauss-Legendre panels where an integrand has a steep layer (see SeQuadrature).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NumericError, PerfectRecovery
from .models import Channel, GaussianPrior, Prior
from .numerics import QuadratureRule, gauss_hermite, split_gaussian_rule, tensor_nodes

# sig2_X / mu_X^2 below this is treated as exact recovery
PERFECT_SNR_FLOOR = 1e-12


@dataclass(frozen=True)
class SeState:
    """SE parameters at iteration t. mu_U, sig2_U describe U_t (nan until computed)."""

    mu_X: float
    sig2_X: float
    mu_U: float = math.nan
    sig2_U: float = math.nan
    t: int = 0

    def as_array(self):
        return np.array([self.mu_X, self.sig2_X, self.mu_U, self.sig2_U])


@dataclass
class SeTrace:
    states: list
    converged: bool
    fixed_point: Optional[SeState] = None
    perfect_recovery: bool = False

    @property
    def last(self) -> SeState:
        return self.states[-1]


# ================================================================== denoisers


@dataclass(frozen=True)
class SignalDenoiser:
    """Scalar map f with derivative, applied entrywise to the signal-side iterate."""

    value: Callable
    deriv: Callable
    lipschitz: float = math.inf
    name: str = "custom"

    def __call__(self, s):
        return self.value(np.asarray(s, dtype=float))

    def scaled(self, c: float) -> "SignalDenoiser":
        return SignalDenoiser(lambda s: c * self.value(s), lambda s: c * self.deriv(s),
                              abs(c) * self.lipschitz, f"{c:g}*{self.name}")


@dataclass(frozen=True)
class OutputDenoiser:
    """Map h(u; y) with its u-derivative; `both` returns the pair in one pass."""

    both: Callable
    lipschitz: float = math.inf
    name: str = "custom"

    def __call__(self, u, y):
        return self.both(u, y)[0]

    def deriv(self, u, y):
        return self.both(u, y)[1]

    def scaled(self, c: float) -> "OutputDenoiser":
        def both(u, y):
            v, dv = self.both(u, y)
            return c * v, c * dv

        return OutputDenoiser(both, abs(c) * self.lipschitz, f"{c:g}*{self.name}")


IDENTITY = SignalDenoiser(lambda s: np.asarray(s, dtype=float), lambda s: np.ones(np.shape(s)), 1.0, "identity")
ZERO_F = SignalDenoiser(lambda s: np.zeros(np.shape(s)), lambda s: np.zeros(np.shape(s)), 0.0, "zero")
ZERO_H = OutputDenoiser(lambda u, y: (np.zeros(np.broadcast(u, y).shape),) * 2, 0.0, "zero")


def bayes_f_star(prior: Prior, mu: float, sig2: float) -> SignalDenoiser:
    """Posterior mean of X from the observation mu X + sqrt(sig2) W = s."""
    if not sig2 > 0:
        raise InvalidArgument(f"bayes_f_star needs sig2 > 0, got {sig2}")
    if isinstance(prior, GaussianPrior):
        k = mu / (mu * mu + sig2)
        return SignalDenoiser(lambda s: k * np.asarray(s, dtype=float), lambda s: np.full(np.shape(s), k),
                              abs(k), "f*")
    # the derivative is (mu / sig2) Var(X | s); for a prior bounded by M this is at most mu M^2 / sig2
    bound = abs(mu) / sig2 * _support_radius(prior) ** 2
    return SignalDenoiser(lambda s: prior.conditional_mean(s, mu, sig2)[0],
                          lambda s: prior.conditional_mean(s, mu, sig2)[1], bound, "f*")


def _support_radius(prior):
    xs, _ = prior.quadrature(gauss_hermite())
    return float(np.max(np.abs(xs)))


def posterior_correlation(mu_U: float, sig2_U: float):
    """(rho, s2): G given U = u is N(rho u, s2) when U = mu_U G + sqrt(sig2_U) W."""
    energy = mu_U * mu_U + sig2_U
    if not energy > 0:
        raise InvalidArgument("bayes_h_star needs mu_U^2 + sig2_U > 0")
    rho = mu_U / energy
    s2 = 1.0 - rho * mu_U
    if not s2 > 0:
        raise NumericError(f"posterior variance 1 - rho mu_U = {s2} is not positive")
    return rho, s2


def bayes_h_star(channel: Channel, mu_U: float, sig2_U: float, rule: QuadratureRule | None = None) -> OutputDenoiser:
    """h*(u; y) = (E{G | U = u, Y = y} - rho u) / s2 and its u-derivative
    (rho / s2) (Var{G | u, y} / s2 - 1)."""
    rho, s2 = posterior_correlation(mu_U, sig2_U)

    def both(u, y):
        u = np.asarray(u, dtype=float)
        pm, pv = channel.posterior_g(y, rho * u, s2, rule)
        return (pm - rho * u) / s2, (rho / s2) * (pv / s2 - 1.0)

    # |h*'| <= |rho| / s2 * max(1, Var/s2 - 1); Var <= y leaves it data dependent
    return OutputDenoiser(both, math.inf, "h*")


# ================================================================ state evolution


@dataclass(frozen=True)
class DenoiserPolicy:
    """How f_t and h_t are chosen from the current SE parameters.

    signal: 'identity' or 'bayes'; the output side is h_scale * h* with
    h_scale = sqrt(delta) by default. With `normalize_output` the scale is
    sqrt(delta) * s2_t instead, i.e. h = sqrt(delta) (E{G | u, y} - rho u),
    which keeps the iterates of order one while h* sharpens; for a
    homogeneous f (the identity) this only rescales each iterate, so overlaps
    are unchanged.
    """

    signal: str = "identity"
    h_scale: Optional[float] = None
    normalize_output: bool = False

    def __post_init__(self):
        if self.signal not in ("identity", "bayes"):
            raise InvalidArgument(f"unknown signal denoiser {self.signal!r}")

    def f_for(self, prior, state: SeState) -> SignalDenoiser:
        if self.signal == "identity":
            return IDENTITY
        return bayes_f_star(prior, state.mu_X, state.sig2_X)

    def h_for(self, channel, state: SeState, delta: float, rule=None) -> OutputDenoiser:
        c = math.sqrt(delta) if self.h_scale is None else self.h_scale
        if self.normalize_output:
            c *= posterior_correlation(state.mu_U, state.sig2_U)[1]
        return bayes_h_star(channel, state.mu_U, state.sig2_U, rule).scaled(c)


def se_init(a2: float, delta: float) -> SeState:
    """Initial state for a spectral start with limiting squared overlap a2."""
    if not 0.0 <= a2 <= 1.0:
        raise InvalidArgument(f"a2 must lie in [0, 1], got {a2}")
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    a = math.sqrt(a2)
    return SeState(a / math.sqrt(delta), (1.0 - a2) / delta, t=0)


class SeQuadrature:
    """Node sets for the signal-side and output-side expectations."""

    def __init__(self, prior: Prior, channel: Channel, rule: QuadratureRule | None = None,
                 noise_rule: QuadratureRule | None = None):
        rule = rule or gauss_hermite()
        self.rule = rule
        xs, px = prior.quadrature(rule)
        (self.sig_x, self.sig_w), w = tensor_nodes(QuadratureRule(np.asarray(xs, float), np.asarray(px, float), len(xs)), rule)
        self.sig_weight = w
        self.channel = channel
        self.noise_rule = None if channel.noise_free else (noise_rule or gauss_hermite(21))
        # sign-symmetric channels make h* switch sign across u = 0 over a width
        # that shrinks with sig2_U; those expectations use refined panels there
        self.split_at_zero = channel.even
        if channel.noise_free:
            (self.g, self.w_u), self.out_weight = tensor_nodes(rule, rule)
            self.y = channel.q(self.g, 0.0)
        else:
            (self.g, self.w_u, v), self.out_weight = tensor_nodes(rule, rule, self.noise_rule)
            self.y = channel.q(self.g, v)
        self._split_cache = {}

    def _output_nodes(self, mu_U, sig2_U):
        if not self.split_at_zero or sig2_U <= 0:
            return self.g, mu_U * self.g + math.sqrt(max(sig2_U, 0.0)) * self.w_u, self.y, self.out_weight
        key = (mu_U, sig2_U)
        if key not in self._split_cache:
            sd = math.sqrt(sig2_U)
            gs, ws, wts = [], [], []
            if self.noise_rule is None:
                # for exact |G|-type outputs h* also varies on the scale s near G = 0
                outer = split_normal_rule(0.0)
            else:
                # with output noise the posterior switches between one and two
                # modes as G^2 crosses the noise level; Gauss-Hermite converges
                # slowly across that layer, unit-width panels do not
                rule = split_gaussian_rule(())
                outer = (rule.nodes, rule.weights)
            for g, wg in zip(*outer):
                nodes, weights = split_normal_rule(-mu_U * g / sd)
                gs.append(np.full(nodes.size, g))
                ws.append(nodes)
                wts.append(wg * weights)
            g = np.concatenate(gs)
            w = np.concatenate(ws)
            wt = np.concatenate(wts)
            if self.noise_rule is not None:
                (g_idx, v), wt = tensor_nodes(QuadratureRule(np.arange(g.size, dtype=float), wt, g.size),
                                              self.noise_rule)
                g_idx = g_idx.astype(int)
                g, w = g[g_idx], w[g_idx]
                y = self.channel.q(g, v)
            else:
                y = self.channel.q(g, 0.0)
            if len(self._split_cache) > 8:
                self._split_cache.clear()
            self._split_cache[key] = (g, mu_U * g + sd * w, y, wt)
        return self._split_cache[key]

    def signal_moments(self, f: SignalDenoiser, mu_X, sig2_X):
        """E{X f(X_t)}, E{f(X_t)^2}, E{f'(X_t)}."""
        s = mu_X * self.sig_x + math.sqrt(max(sig2_X, 0.0)) * self.sig_w
        fv = f(s)
        return (float(np.dot(self.sig_weight, self.sig_x * fv)),
                float(np.dot(self.sig_weight, fv * fv)),
                float(np.dot(self.sig_weight, f.deriv(s))))

    def output_moments(self, h: OutputDenoiser, mu_U, sig2_U):
        """E{G h}, E{h'}, E{h^2} with U = mu_U G + sqrt(sig2_U) W'."""
        g, u, y, wt = self._output_nodes(mu_U, sig2_U)
        hv, dh = h.both(u, y)
        if not (np.all(np.isfinite(hv)) and np.all(np.isfinite(dh))):
            bad = int(np.argmax(~np.isfinite(hv) | ~np.isfinite(dh)))
            raise NumericError(f"output denoiser not finite at g={g[bad]}, u={u[bad]}", node=float(u[bad]))
        return (float(np.dot(wt, g * hv)),
                float(np.dot(wt, dh)),
                float(np.dot(wt, hv * hv)))


def split_normal_rule(w0: float):
    """(nodes, weights) of a Gaussian rule refined around w0, where the
    integrand may change abruptly."""
    rule = split_gaussian_rule((w0,))
    return rule.nodes, rule.weights


def signal_step(state: SeState, f: SignalDenoiser, delta: float, quad: SeQuadrature) -> SeState:
    """Fill in (mu_U, sig2_U) for the current state."""
    exf, ef2, _ = quad.signal_moments(f, state.mu_X, state.sig2_X)
    mu_U = exf / math.sqrt(delta)
    sig2_U = max(ef2 / delta - mu_U * mu_U, 0.0)
    if sig2_U <= PERFECT_SNR_FLOOR * mu_U * mu_U:
        # the denoised signal is exact, so the output side sees G without noise
        raise PerfectRecovery(f"sig2_U = {sig2_U} at t = {state.t}")
    return replace(state, mu_U=mu_U, sig2_U=sig2_U)


def se_step(state: SeState, prior: Prior, channel: Channel, denoisers, delta: float,
            rule: QuadratureRule | None = None, quad: SeQuadrature | None = None) -> SeState:
    """One SE iteration. `denoisers` is a DenoiserPolicy or an (f, h) pair.

    Returns the next state, whose mu_U / sig2_U are left unset. The input state
    is returned with its output-side parameters via `se_step_full`.
    """
    return se_step_full(state, prior, channel, denoisers, delta, rule, quad)[1]


def se_step_full(state, prior, channel, denoisers, delta, rule=None, quad=None):
    """(current state with mu_U/sig2_U filled in, next state)."""
    if state.sig2_X <= 0 and state.mu_X == 0:
        raise NumericError(f"degenerate state (0, 0) at t = {state.t}: the iterate carries no information")
    if state.sig2_X <= PERFECT_SNR_FLOOR * state.mu_X**2:
        raise PerfectRecovery(f"sig2_X = {state.sig2_X} at t = {state.t}")
    quad = quad or SeQuadrature(prior, channel, rule)
    if isinstance(denoisers, DenoiserPolicy):
        f = denoisers.f_for(prior, state)
        cur = signal_step(state, f, delta, quad)
        h = denoisers.h_for(channel, cur, delta)
    else:
        f, h = denoisers
        cur = signal_step(state, f, delta, quad)
    exf = cur.mu_U * math.sqrt(delta)
    egh, edh, eh2 = quad.output_moments(h, cur.mu_U, cur.sig2_U)
    nxt = SeState(math.sqrt(delta) * egh - edh * exf, eh2, t=state.t + 1)
    return cur, nxt


def se_fixed_point(init: SeState, prior: Prior, channel: Channel, denoisers, delta: float,
                   max_iter: int = 500, tol: float = 1e-10, rule: QuadratureRule | None = None) -> SeTrace:
    """Iterate SE until successive states differ by < tol in max-norm.

    Exact recovery (sig2_X = 0, or negligible relative to mu_X^2) is terminal
    and reported as a converged trace with perfect_recovery set.
    """
    quad = SeQuadrature(prior, channel, rule)
    states = []
    state = init
    for _ in range(max_iter):
        try:
            cur, nxt = se_step_full(state, prior, channel, denoisers, delta, quad=quad)
        except PerfectRecovery:
            states.append(state)
            return SeTrace(states, True, state, perfect_recovery=True)
        states.append(cur)
        if cur.mu_X == 0 and nxt.mu_X == 0:
            # no correlation with the signal is ever created again
            states.append(nxt)
            return SeTrace(states, True, nxt)
        prev = cur.as_array()[:2]
        if np.max(np.abs(nxt.as_array()[:2] - prev)) < tol:
            # fill in the output side of the final state for consumers
            try:
                last = se_step_full(nxt, prior, channel, denoisers, delta, quad=quad)[0]
            except PerfectRecovery:
                last = nxt
            states.append(last)
            return SeTrace(states, True, last)
        state = nxt
    states.append(state)
    return SeTrace(states, False, None)


def se_trajectory(init: SeState, prior: Prior, channel: Channel, denoisers, delta: float, steps: int,
                  rule: QuadratureRule | None = None) -> list:
    """Exactly `steps` + 1 states (fewer if exact recovery is reached)."""
    quad = SeQuadrature(prior, channel, rule)
    out = []
    state = init
    for _ in range(steps):
        try:
            cur, nxt = se_step_full(state, prior, channel, denoisers, delta, quad=quad)
        except PerfectRecovery:
            break
        out.append(cur)
        state = nxt
    out.append(state)
    return out


# ==================================================================== metrics


def overlap_from_se(state: SeState, prior: Prior, f: SignalDenoiser = IDENTITY, rule=None) -> float:
    """Limiting normalised correlation |E{X f(X_t)}| / sqrt(E{f(X_t)^2})."""
    if state.sig2_X <= 0:
        return 1.0
    quad = SeQuadrature(prior, _NullChannel(), rule)
    exf, ef2, _ = quad.signal_moments(f, state.mu_X, state.sig2_X)
    if ef2 <= 0:
        raise NumericError("overlap undefined: E{f(X_t)^2} = 0")
    return abs(exf) / math.sqrt(ef2)


def mse_from_se(state: SeState, prior: Prior, f: SignalDenoiser = IDENTITY, rule=None) -> float:
    """Limiting E{(X - f(X_t))^2}."""
    if state.sig2_X <= 0 and f is IDENTITY:
        return (1.0 - state.mu_X) ** 2
    quad = SeQuadrature(prior, _NullChannel(), rule)
    s = state.mu_X * quad.sig_x + math.sqrt(max(state.sig2_X, 0.0)) * quad.sig_w
    return float(np.dot(quad.sig_weight, (quad.sig_x - f(s)) ** 2))


class _NullChannel(Channel):
    noise_free = True

    def q(self, g, v):
        return np.zeros_like(g)


def lipschitz_on_grid(fn: Callable, grid) -> float:
    """Largest secant slope of fn over consecutive grid points."""
    grid = np.sort(np.asarray(grid, dtype=float))
    vals = fn(grid)
    return float(np.max(np.abs(np.diff(vals) / np.diff(grid))))


def check_lipschitz(den: SignalDenoiser, grid) -> bool:
    return lipschitz_on_grid(den, grid) <= den.lipschitz * 1.01
