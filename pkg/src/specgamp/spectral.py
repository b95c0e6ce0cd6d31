"""Spectral estimator for GLMs and its high-dimensional performance predictor.

The estimator is the principal eigenvector of D_n = A^T diag(T(y)) A. Its
limiting squared overlap with the signal is expressed through the scalar
functions

    phi(lam)   = lam E{ Z G^2 / (lam - Z) }
    psi(lam)   = lam / delta + lam E{ Z / (lam - Z) }
    zeta(lam)  = psi(max(lam, lam_bar)),  lam_bar = argmin psi

with Z = T(Y); lam_star solves zeta = phi on (tau, inf).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import AssumptionViolation, BracketError, DomainError, InvalidArgument, NumericError
from .models import Channel, Instance, Preprocessing
from .numerics import (
    FunctionOperator,
    QuadratureRule,
    find_root_monotone,
    gauss_hermite,
    make_rng,
    minimize_convex,
    power_method,
)

log = logging.getLogger(__name__)

LAMBDA_CAP = 1e3
LAMBDA_CAP_MAX = 1e6
DEGENERATE_GAP = 1e-4


class _ZLaw:
    """Quadrature representation of the joint law of (G^2, Z = T(Y))."""

    def __init__(self, channel: Channel, preproc: Preprocessing, rule: QuadratureRule | None):
        nodes = channel.joint_nodes(rule or gauss_hermite())
        self.g2 = nodes.g2
        self.z = np.asarray(preproc(nodes.y), dtype=float)
        self.w = nodes.w
        self.tau = preproc.tau
        if np.any(self.z > self.tau + 1e-12):
            raise AssumptionViolation(
                f"(A2) preprocessing exceeds its declared supremum tau={self.tau}: max {self.z.max()}"
            )

    def e(self, values):
        return float(np.dot(self.w, values))

    def check(self, lam):
        if not lam > self.tau:
            raise DomainError(f"lambda={lam} must exceed tau={self.tau}")


def _law(channel, preproc, rule):
    return _ZLaw(channel, preproc, rule)


def phi(lam, channel, preproc, rule=None, law=None):
    law = law or _law(channel, preproc, rule)
    law.check(lam)
    return lam * law.e(law.z * law.g2 / (lam - law.z))


def psi_delta(lam, delta, channel, preproc, rule=None, law=None):
    law = law or _law(channel, preproc, rule)
    law.check(lam)
    return lam / delta + lam * law.e(law.z / (lam - law.z))


def phi_prime(lam, channel, preproc, rule=None, law=None):
    law = law or _law(channel, preproc, rule)
    law.check(lam)
    return -law.e(law.z**2 * law.g2 / (lam - law.z) ** 2)


def psi_delta_prime(lam, delta, channel, preproc, rule=None, law=None):
    law = law or _law(channel, preproc, rule)
    law.check(lam)
    return 1.0 / delta - law.e(law.z**2 / (lam - law.z) ** 2)


def _central_difference(f, x, lo):
    h = 1e-5 * max(1.0, abs(x))
    if x - h <= lo:
        h = 0.5 * (x - lo)
    return (f(x + h) - f(x - h)) / (2.0 * h)


@dataclass(frozen=True)
class SpectralPrediction:
    lambda_star: float
    lambda_bar: float
    psi_prime_at_star: float
    phi_prime_at_star: float
    a2: float
    informative: bool
    delta: float
    tau: float

    @property
    def a(self):
        return math.sqrt(self.a2)

    @property
    def a2_ratio_form(self):
        """psi'/(psi' - phi') with finite-difference derivatives."""
        if not self.informative:
            return 0.0
        return self.psi_prime_at_star / (self.psi_prime_at_star - self.phi_prime_at_star)


def _lambda_bar(law, delta):
    eps = 1e-9 * max(1.0, abs(law.tau))
    lo = law.tau + eps
    span = LAMBDA_CAP
    psi = lambda lam: lam / delta + lam * law.e(law.z / (lam - law.z))
    while True:
        hi = law.tau + span
        lam_bar = minimize_convex(psi, lo, hi, tol=1e-10 * max(1.0, hi))
        if hi - lam_bar > 1e-6 * span:
            return lam_bar
        span *= 10.0
        if span > LAMBDA_CAP_MAX:
            raise NumericError(f"minimiser of psi_delta not found below tau + {LAMBDA_CAP_MAX:g}")


def solve_lambda_star(channel: Channel, preproc: Preprocessing, delta: float, rule=None) -> SpectralPrediction:
    """Solve zeta_delta(lam) = phi(lam) and evaluate the limiting overlap."""
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    law = _law(channel, preproc, rule)
    if not np.any(law.z != 0):
        raise AssumptionViolation("(A1) Z_s = T(Y) vanishes almost surely")
    lam_bar = _lambda_bar(law, delta)
    psi = lambda lam: lam / delta + lam * law.e(law.z / (lam - law.z))
    ph = lambda lam: lam * law.e(law.z * law.g2 / (lam - law.z))
    zeta = lambda lam: psi(max(lam, lam_bar))
    diff = lambda lam: zeta(lam) - ph(lam)

    lo = law.tau + 1e-9 * max(1.0, abs(law.tau))
    if diff(lo) >= 0:
        # phi stays below zeta all the way down to tau (possible when the law of Z
        # puts little mass near its supremum): D_n has no outlier eigenvalue and
        # its top eigenvector carries no information about the signal
        log.info("zeta_delta >= phi on (tau, inf) at delta=%g: no outlier, overlap 0", delta)
        dpsi = 1.0 / delta - law.e(law.z**2 / (lo - law.z) ** 2)
        return SpectralPrediction(lo, lam_bar, dpsi, math.nan, 0.0, False, float(delta), law.tau)
    hi = max(lam_bar, law.tau + 1.0)
    while diff(hi) <= 0:
        hi = law.tau + 2.0 * (hi - law.tau)
        if hi > law.tau + LAMBDA_CAP_MAX:
            raise AssumptionViolation("(A3) no root of zeta_delta = phi below the search cap")
    try:
        lam_star = find_root_monotone(diff, lo, hi, tol=1e-12 * max(1.0, hi))
    except BracketError as exc:
        raise AssumptionViolation(f"(A3) {exc}") from exc

    dpsi = _central_difference(psi, lam_star, law.tau)
    dphi = _central_difference(ph, lam_star, law.tau)
    informative = dpsi > DEGENERATE_GAP
    if abs(dpsi) <= DEGENERATE_GAP:
        warnings.warn(f"psi_delta'(lambda*) = {dpsi:.2e} is at the phase-transition boundary", stacklevel=2)
    a2 = predict_overlap_a2(lam_star, channel, preproc, delta, rule, law=law) if informative else 0.0
    return SpectralPrediction(lam_star, lam_bar, dpsi, dphi, a2, bool(informative), float(delta), law.tau)


def predict_overlap_a2(lambda_star, channel, preproc, delta, rule=None, law=None) -> float:
    """Explicit limiting squared overlap at a solved lambda_star."""
    law = law or _law(channel, preproc, rule)
    law.check(lambda_star)
    r = law.z**2 / (lambda_star - law.z) ** 2
    num = 1.0 / delta - law.e(r)
    den = 1.0 / delta + law.e(r * (law.g2 - 1.0))
    if den <= 0:
        raise NumericError(f"overlap denominator {den} <= 0; assumptions on T fail")
    return float(min(max(num / den, 0.0), 1.0))


def fixed_point_condition(lambda_star, channel, preproc, delta, rule=None):
    """E{Z(G^2 - 1)/(lam - Z)} - 1/delta, zero at an informative lambda_star."""
    law = _law(channel, preproc, rule)
    return law.e(law.z * (law.g2 - 1.0) / (lambda_star - law.z)) - 1.0 / delta


# -------------------------------------------------------- optimal preprocessing


def delta_u(channel: Channel, rule=None) -> float:
    """Weak-recovery threshold of the best spectral preprocessing.

    (int (E_G{p(y|G)(G^2 - 1)})^2 / E_G{p(y|G)} dy)^-1; infinite when the
    integral vanishes.
    """
    cached = getattr(channel, "_delta_u", None)
    if cached is None:
        cached = _delta_u_integral(channel)
        channel._delta_u = cached
    return cached


def _delta_u_integral(channel):
    def integrand(y):
        m0, _, m2 = channel.marginal_moments(np.array([y]))
        return (m2[0] - m0[0]) ** 2 / m0[0] if m0[0] > 1e-300 else 0.0

    lo, hi = channel.y_domain
    lo = max(lo, -1e3)
    hi = min(hi, 1e3) if np.isfinite(hi) else 1e3
    cuts = sorted({lo, hi, *[b for b in channel.y_breakpoints() if lo < b < hi]})
    pieces = list(zip(cuts[:-1], cuts[1:]))
    total = 0.0
    for a, b in pieces:
        total += integrate.quad(integrand, a, b, limit=400, epsabs=1e-12, epsrel=1e-10)[0]
    if total <= 0:
        return math.inf
    return 1.0 / total


def _tbar_from_ratio(ratio, delta, du):
    # T* = 1 - ratio; the T-bar formula rewritten to stay finite as ratio -> inf
    sd, su = math.sqrt(delta), math.sqrt(du)
    ratio = np.asarray(ratio, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = su * (1.0 - ratio) / (su + (sd - su) * ratio)
    limit = -su / (sd - su) if sd != su else -np.inf
    return np.where(np.isinf(ratio), limit, out)


def _tabulate(channel, fn, points=10_000):
    lo, hi = channel.y_domain
    # dense near the origin where the optimal maps vary fastest
    core = np.linspace(lo, min(hi, 1.0), points // 2)
    tail = np.geomspace(1.0, hi, points - points // 2) if hi > 1.0 else np.array([])
    y = np.unique(np.concatenate([core, tail]))
    return y, fn(channel.moment_ratio(y))


def optimal_T_star(channel: Channel, rule=None) -> Preprocessing:
    """T*(y) = 1 - E{p(y|G)} / E{p(y|G) G^2}; unbounded below, sup 1."""
    if channel.moment_ratio_inf is not None and not channel.has_density:
        return Preprocessing(lambda y: 1.0 - channel.moment_ratio(y), 1.0 - channel.moment_ratio_inf,
                             np.inf, "T*")
    y, vals = _tabulate(channel, lambda r: 1.0 - r)
    vals = np.maximum(vals, -1e6)
    return Preprocessing.from_grid(y, vals, name="T*")


def optimal_T_bar(channel: Channel, delta: float, rule=None) -> Preprocessing:
    """Threshold-optimal bounded preprocessing at sampling ratio delta > delta_u."""
    du = delta_u(channel, rule)
    if not delta > du:
        raise InvalidArgument(f"T-bar needs delta > delta_u = {du:.6g}, got {delta}")
    if channel.moment_ratio_inf is not None and not channel.has_density:
        tau = float(_tbar_from_ratio(channel.moment_ratio_inf, delta, du))
        return Preprocessing(lambda y: _tbar_from_ratio(channel.moment_ratio(y), delta, du), tau,
                             name=f"T-bar(delta={delta:g})")
    y, vals = _tabulate(channel, lambda r: _tbar_from_ratio(r, delta, du))
    return Preprocessing.from_grid(y, vals, name=f"T-bar(delta={delta:g})")


# ------------------------------------------------------------ spectral estimate


@dataclass
class SpectralEstimate:
    xs: np.ndarray
    eigenvalue: float
    iterations: int
    sign_aligned: bool
    converged: bool = True


def dn_operator(instance: Instance, z) -> FunctionOperator:
    """Matrix-free v -> A^H (z * (A v))."""
    A = instance.A
    return FunctionOperator(A.cols, A.cols, lambda v: A.apply_adjoint(z * A.apply(v)), is_complex=A.is_complex)


def _norm2_bound(A, rng):
    bound = getattr(A, "norm2_bound", None)
    if bound is not None:
        return bound
    res = power_method(FunctionOperator(A.cols, A.cols, lambda v: A.apply_adjoint(A.apply(v)),
                                        is_complex=A.is_complex), tol=1e-4, max_iter=60, rng=rng)
    return 1.1 * res.eigenvalue


def spectral_estimate(instance: Instance, preproc: Preprocessing, rng=None, tol=1e-7, max_iter=100_000,
                      align=True, v0=None) -> SpectralEstimate:
    """Principal eigenvector of D_n = A^T diag(T(y)) A, never formed explicitly.

    A positive shift is added when T takes negative values so that the top
    (not the largest-magnitude) eigenvalue is found.
    """
    rng = rng if rng is not None else make_rng(0)
    z = np.asarray(preproc(instance.y), dtype=float)
    op = dn_operator(instance, z)
    zmin = float(z.min())
    shift = -zmin * _norm2_bound(instance.A, rng) if zmin < 0 else 0.0
    res = power_method(op, tol=tol, max_iter=max_iter, rng=rng, shift=shift, v0=v0)
    if not res.converged:
        warnings.warn(f"power method hit max_iter={max_iter} before converging", stacklevel=2)
    xs = res.vector
    aligned = False
    if align and instance.x is not None:
        ip = np.vdot(xs, instance.x)
        if instance.A.is_complex:
            if abs(ip) > 0:
                xs = xs * (ip / abs(ip))
        elif ip.real < 0:
            xs = -xs
        aligned = True
    return SpectralEstimate(xs, res.eigenvalue, res.iterations, aligned, res.converged)


def squared_overlap(xhat, x) -> float:
    """|<xhat, x>|^2 / (|xhat|^2 |x|^2)."""
    num = abs(np.vdot(xhat, x)) ** 2
    den = np.vdot(xhat, xhat).real * np.vdot(x, x).real
    if den == 0:
        raise InvalidArgument("overlap of a zero vector is undefined")
    return float(num / den)
