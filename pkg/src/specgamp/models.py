"""Signal priors, GLM output channels, spectral preprocessing functions and
problem-instance sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from .errors import InvalidArgument
from .numerics import (
    DenseOperator,
    LinearOperator,
    QuadratureRule,
    gauss_hermite,
    gauss_laguerre,
    tensor_nodes,
)

SQRT2PI = math.sqrt(2.0 * math.pi)
MAX_G = 6.0  # |g| beyond this carries < 1e-8 Gaussian mass


def _npdf(z):
    return np.exp(-0.5 * np.square(z)) / SQRT2PI


# ======================================================================= priors


class Prior:
    """Limiting empirical law of the signal entries, normalised to E X^2 = 1."""

    kind = "custom"
    is_complex = False
    second_moment = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def quadrature(self, rule: QuadratureRule):
        """(nodes, weights) with sum(w * F(nodes)) ~ E F(X)."""
        raise NotImplementedError

    def conditional_mean(self, s, mu, sig2):
        """E{X | mu X + sqrt(sig2) W = s} and its derivative in s."""
        xs, px = self.quadrature(gauss_hermite())
        s = np.asarray(s, dtype=float)[..., None]
        logw = np.log(px) - 0.5 * np.square(s - mu * xs) / sig2
        logw -= logw.max(axis=-1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=-1, keepdims=True)
        m1 = (w * xs).sum(-1)
        var = (w * xs**2).sum(-1) - m1**2
        return m1, (mu / sig2) * var


class GaussianPrior(Prior):
    kind = "gaussian"

    def sample(self, rng, size):
        return rng.standard_normal(size)

    def quadrature(self, rule):
        return rule.nodes, rule.weights

    def conditional_mean(self, s, mu, sig2):
        s = np.asarray(s, dtype=float)
        k = mu / (mu * mu + sig2)
        return k * s, np.full_like(s, k)


class BinaryPrior(Prior):
    """X in {-1, +1} with P(X = +1) = p."""

    kind = "binary"

    def __init__(self, p: float = 0.5):
        if not 0.0 < p < 1.0:
            raise InvalidArgument(f"binary prior needs p in (0, 1), got {p}")
        self.p = float(p)

    def sample(self, rng, size):
        return np.where(rng.random(size) < self.p, 1.0, -1.0)

    def quadrature(self, rule):
        return np.array([-1.0, 1.0]), np.array([1.0 - self.p, self.p])

    def conditional_mean(self, s, mu, sig2):
        # 2 / (1 + (1-p)/p * exp(-2 s mu / sig2)) - 1 written as a tanh
        s = np.asarray(s, dtype=float)
        a = mu / sig2
        f = np.tanh(a * s + 0.5 * math.log(self.p / (1.0 - self.p)))
        return f, a * (1.0 - f * f)


class DiscretePrior(Prior):
    """Finite-support prior given by atoms and probabilities (rescaled to E X^2 = 1)."""

    def __init__(self, atoms, probs):
        atoms = np.asarray(atoms, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if atoms.shape != probs.shape or np.any(probs <= 0):
            raise InvalidArgument("atoms and positive probabilities must have equal length")
        probs = probs / probs.sum()
        scale = math.sqrt(float(np.dot(probs, atoms**2)))
        self.atoms = atoms / scale
        self.probs = probs

    def sample(self, rng, size):
        return rng.choice(self.atoms, size=size, p=self.probs)

    def quadrature(self, rule):
        return self.atoms, self.probs


class ComplexGaussianPrior(Prior):
    """CN(0, 1) entries."""

    kind = "complex-gaussian"
    is_complex = True

    def sample(self, rng, size):
        return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)


def parse_prior(spec: str) -> Prior:
    """'gaussian' or 'binary:p' (p defaults to 0.5)."""
    name, _, arg = spec.partition(":")
    if name == "gaussian":
        return GaussianPrior()
    if name == "binary":
        return BinaryPrior(float(arg) if arg else 0.5)
    if name == "complex-gaussian":
        return ComplexGaussianPrior()
    raise InvalidArgument(f"unknown prior {spec!r}")


# ===================================================================== channels


@dataclass
class JointNodes:
    """Quadrature nodes for the joint law of (G, Y); `g2` is |G|^2."""

    g: np.ndarray
    y: np.ndarray
    w: np.ndarray
    noise: Optional[np.ndarray] = None

    @property
    def g2(self):
        return np.abs(self.g) ** 2


class Channel:
    """Output law p(y|g) realised as y = q(g, v) with v ~ N(0, 1)."""

    kind = "custom"
    is_complex = False
    noise_free = False
    has_density = True
    y_domain = (-np.inf, np.inf)
    even = False  # p(y|g) = p(y|-g)

    def q(self, g, v):
        raise NotImplementedError

    def sample(self, g, rng: np.random.Generator):
        g = np.asarray(g)
        if self.noise_free:
            return self.q(g, 0.0)
        return self.q(g, rng.standard_normal(g.shape))

    def density(self, y, g):
        raise NotImplementedError(f"{self.kind} channel has no conditional density")

    def joint_nodes(self, rule: QuadratureRule) -> JointNodes:
        if self.noise_free:
            return JointNodes(rule.nodes, self.q(rule.nodes, 0.0), rule.weights)
        (g, v), w = tensor_nodes(rule, rule)
        return JointNodes(g, self.q(g, v), w, noise=v)

    def g_breakpoints(self, y):
        return []

    def y_breakpoints(self):
        """Points where marginal output densities may vary sharply."""
        return []

    # -- marginal moments m_k(y) = E_G{ p(y|G) G^k }

    def marginal_moments(self, y):
        """(m0, m1, m2) at each y, by adaptive integration over g."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty((3, y.size))
        for i, yi in enumerate(y):
            pts = [p for p in self.g_breakpoints(yi) if -MAX_G * 2 < p < MAX_G * 2]
            for k in range(3):
                val, _ = integrate.quad(
                    lambda g: _npdf(g) * float(self.density(yi, g)) * g**k,
                    -2 * MAX_G,
                    2 * MAX_G,
                    points=pts or None,
                    limit=200,
                    epsabs=1e-13,
                )
                out[k, i] = val
        return out[0], out[1], out[2]

    def moment_ratio(self, y):
        """m0(y) / m2(y), the ratio entering the optimal preprocessing."""
        m0, _, m2 = self.marginal_moments(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(m2 > 0, m0 / m2, np.inf)

    moment_ratio_inf = None  # analytic infimum of moment_ratio, when known

    # -- posterior of G given a Gaussian prior N(mean, var) and Y = y

    def posterior_g(self, y, mean, var, rule: QuadratureRule | None = None):
        """Posterior mean and variance of G, via W-quadrature of the density.

        E{G^k | y} = E_W{ G^k p(y | G) } / E_W{ p(y | G) }, G = mean + sqrt(var) W.
        Accurate for smooth densities; peaked channels override this.
        """
        rule = rule or gauss_hermite()
        y, mean = np.broadcast_arrays(np.asarray(y, float), np.asarray(mean, float))
        sd = math.sqrt(var)
        g = mean[..., None] + sd * rule.nodes
        p = self.density(y[..., None], g) * rule.weights
        z = p.sum(-1)
        m1 = (p * g).sum(-1) / z
        m2 = (p * g * g).sum(-1) / z
        return m1, np.maximum(m2 - m1 * m1, 0.0)


class NoiselessPR(Channel):
    """y = g^2."""

    kind = "noiseless-pr"
    noise_free = True
    has_density = False
    even = True
    y_domain = (0.0, MAX_G**2)
    moment_ratio_inf = 0.0

    def q(self, g, v):
        return np.square(g)

    def marginal_moments(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            m0 = np.where(y > 0, np.exp(-0.5 * y) / np.sqrt(2 * np.pi * np.abs(y)), 0.0)
        return m0, np.zeros_like(y), y * m0

    def y_breakpoints(self):
        return [0.0, 1.0]

    def moment_ratio(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(y > 0, 1.0 / np.where(y > 0, y, 1.0), np.inf)

    def posterior_g(self, y, mean, var, rule=None):
        # G = +-sqrt(y); posterior log-odds of the + sign is 2 sqrt(y) mean / var
        r = np.sqrt(np.maximum(np.asarray(y, dtype=float), 0.0))
        t = np.tanh(r * np.asarray(mean, dtype=float) / var)
        return r * t, r * r * (1.0 - t * t)


class NoisyPR(Channel):
    """y = g^2 + sigma * v."""

    kind = "noisy-pr"
    even = True
    moment_ratio_inf = 0.0

    def __init__(self, sigma: float):
        if sigma <= 0:
            raise InvalidArgument(f"noise level must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.y_domain = (-8 * self.sigma, MAX_G**2 + 8 * self.sigma)

    def q(self, g, v):
        return np.square(g) + self.sigma * v

    def density(self, y, g):
        return _npdf((np.asarray(y) - np.square(g)) / self.sigma) / self.sigma

    def g_breakpoints(self, y):
        if y > 0:
            r = math.sqrt(y)
            return [-r, r]
        return [0.0]

    def marginal_moments(self, y, rule=None):
        # E_G{p(y|G) G^2k} = E_V{ chi2_1(y - sigma V) (y - sigma V)^k }, V ~ N(0, 1),
        # smooth in V once y is many noise widths above 0
        rule = rule or gauss_hermite()
        y = np.atleast_1d(np.asarray(y, dtype=float))
        m0 = np.empty(y.size)
        m2 = np.empty(y.size)
        ring = y > self._RING_MIN * self.sigma
        t = y[ring, None] - self.sigma * rule.nodes
        dens = np.exp(-0.5 * t) / np.sqrt(2.0 * np.pi * t)
        m0[ring] = dens @ rule.weights
        m2[ring] = (dens * t) @ rule.weights
        for i in np.flatnonzero(~ring):
            m0[i], m2[i] = self._near_zero_moments(y[i])
        return m0, np.zeros_like(y), m2

    def _near_zero_moments(self, y):
        # 2 int_0^inf phi(r) phi_sigma(y - r^2) r^2k dr with the peak at r = sqrt(y)
        sig = self.sigma
        top = math.sqrt(max(y, 0.0) + 40 * sig)
        if y > 0:
            r0 = math.sqrt(y)
            width = sig / (2 * r0)
            cuts = [0.0] + [c for c in (r0 - 10 * width, r0, r0 + 10 * width) if 0 < c < top] + [top]
        else:
            cuts = [0.0, math.sqrt(sig), top]

        def base(r):
            return 2.0 * math.exp(-0.5 * r * r) / SQRT2PI * math.exp(-0.5 * ((y - r * r) / sig) ** 2) / (sig * SQRT2PI)

        m0 = m2 = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            m0 += integrate.quad(base, a, b, limit=200, epsabs=0, epsrel=1e-12)[0]
            m2 += integrate.quad(lambda r: base(r) * r * r, a, b, limit=200, epsabs=0, epsrel=1e-12)[0]
        return m0, m2

    def y_breakpoints(self):
        return [0.0, self._RING_MIN * self.sigma, 1.0]

    # posterior over G for a N(mean, var) prior: integrate over the noise value
    # w, which puts g = +-sqrt(y - sigma w) on a ring; near y = 0 the ring
    # degenerates and a dense g-grid is used instead
    _RING_MIN = 40.0
    _DENSE_POINTS = 1201

    def posterior_g(self, y, mean, var, rule=None):
        rule = rule or gauss_hermite()
        y, mean = np.broadcast_arrays(np.asarray(y, float), np.asarray(mean, float))
        shape = y.shape
        y = y.ravel()
        mean = mean.ravel()
        pm = np.empty(y.size)
        pv = np.empty(y.size)
        ring = y > self._RING_MIN * self.sigma
        if ring.any():
            pm[ring], pv[ring] = self._ring(y[ring], mean[ring], var, rule)
        if (~ring).any():
            # sorted chunks keep each grid no wider than its largest y needs
            idx = np.flatnonzero(~ring)
            idx = idx[np.argsort(y[idx], kind="stable")]
            for chunk in np.array_split(idx, max(1, idx.size // 2000)):
                pm[chunk], pv[chunk] = self._dense(y[chunk], mean[chunk], var)
        return pm.reshape(shape), pv.reshape(shape)

    def _ring(self, y, mean, var, rule):
        r = np.sqrt(y[:, None] - self.sigma * rule.nodes)
        jac = rule.weights / (2.0 * r)
        lp = -0.5 * np.square(r - mean[:, None]) / var
        lm = -0.5 * np.square(-r - mean[:, None]) / var
        top = np.maximum(lp.max(-1), lm.max(-1))[:, None]
        wp = np.exp(lp - top) * jac
        wm = np.exp(lm - top) * jac
        z = (wp + wm).sum(-1)
        m1 = ((wp - wm) * r).sum(-1) / z
        m2 = ((wp + wm) * r * r).sum(-1) / z
        return m1, np.maximum(m2 - m1 * m1, 0.0)

    def _dense(self, y, mean, var):
        top = max(float(y.max()), 0.0)
        half = math.sqrt(top + 12 * self.sigma)
        # the narrowest posterior mode has width sigma / (2 sqrt(y)); resolve it
        # with about eight grid steps, capped at _DENSE_POINTS
        width = min(self.sigma / (2.0 * math.sqrt(top + self.sigma)), math.sqrt(var))
        points = int(min(self._DENSE_POINTS, max(201, 2 * half / (width / 8.0))))
        g = np.linspace(-half, half, points | 1)
        simpson = np.ones(g.size)
        simpson[1:-1:2], simpson[2:-1:2] = 4.0, 2.0
        logw = -0.5 * np.square((y[:, None] - g * g) / self.sigma) - 0.5 * np.square(g - mean[:, None]) / var
        logw -= logw.max(-1, keepdims=True)
        w = np.exp(logw) * simpson
        z = w.sum(-1)
        m1 = (w * g).sum(-1) / z
        m2 = (w * g * g).sum(-1) / z
        return m1, np.maximum(m2 - m1 * m1, 0.0)


class SmoothedPR(NoisyPR):
    """Noisy phase retrieval with a small noise level, standing in for y = g^2
    wherever a conditional density is required."""

    kind = "smoothed-pr"

    def __init__(self, eps: float = 1e-3):
        super().__init__(eps)


class CustomChannel(Channel):
    def __init__(self, q: Callable, density: Callable | None = None, y_domain=(-np.inf, np.inf),
                 noise_free: bool = False, even: bool = False, breakpoints: Callable | None = None):
        self._q = q
        self._density = density
        self.has_density = density is not None
        self.y_domain = y_domain
        self.noise_free = noise_free
        self.even = even
        self._breakpoints = breakpoints

    def q(self, g, v):
        return self._q(g, v)

    def density(self, y, g):
        if self._density is None:
            return super().density(y, g)
        return self._density(y, g)

    def g_breakpoints(self, y):
        return list(self._breakpoints(y)) if self._breakpoints else []


class ScaledChannel(Channel):
    """y' = scale * y for a base channel (a reparametrisation of the output)."""

    def __init__(self, base: Channel, scale: float):
        self.base, self.scale = base, float(scale)
        self.kind = f"{base.kind}*{scale:g}"
        self.noise_free = base.noise_free
        self.has_density = base.has_density
        self.even = base.even
        lo, hi = base.y_domain
        self.y_domain = tuple(sorted((lo * self.scale, hi * self.scale)))

    def q(self, g, v):
        return self.scale * self.base.q(g, v)

    def density(self, y, g):
        return self.base.density(np.asarray(y) / self.scale, g) / abs(self.scale)

    def g_breakpoints(self, y):
        return self.base.g_breakpoints(y / self.scale)


class ComplexNoiselessPR(Channel):
    """y = |g|^2 for complex G ~ CN(0, 1); |G|^2 ~ Exp(1)."""

    kind = "complex-pr"
    is_complex = True
    noise_free = True
    has_density = False
    even = True
    y_domain = (0.0, 40.0)
    moment_ratio_inf = 0.0

    def q(self, g, v):
        return np.abs(g) ** 2

    def joint_nodes(self, rule):
        # only |G|^2 enters spectral quantities; integrate it with Gauss-Laguerre
        lag = gauss_laguerre(rule.order)
        return JointNodes(np.sqrt(lag.nodes), lag.nodes, lag.weights)

    def marginal_moments(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        m0 = np.where(y >= 0, np.exp(-np.abs(y)), 0.0)
        return m0, np.zeros_like(y), y * m0

    def moment_ratio(self, y):
        return NoiselessPR.moment_ratio(self, y)

    def posterior_g(self, y, mean, var, rule=None):
        """Posterior of complex G ~ CN(mean, var) given |G|^2 = y.

        The phase posterior is von Mises with concentration 2 sqrt(y)|mean|/var,
        so the mean is sqrt(y) I1/I0 along mean/|mean|.
        """
        y = np.asarray(y, dtype=float)
        mean = np.asarray(mean, dtype=complex)
        r = np.sqrt(np.maximum(y, 0.0))
        amp = np.abs(mean)
        kappa = 2.0 * r * amp / var
        ratio = special.i1e(kappa) / special.i0e(kappa)
        with np.errstate(invalid="ignore", divide="ignore"):
            phase = np.where(amp > 0, mean / np.where(amp > 0, amp, 1.0), 0.0)
        pm = r * ratio * phase
        return pm, y - np.abs(pm) ** 2


def parse_channel(spec: str) -> Channel:
    """'pr', 'pr-noisy:sigma', 'pr-smoothed:eps' or 'complex-pr'."""
    name, _, arg = spec.partition(":")
    if name in ("pr", "noiseless-pr"):
        return NoiselessPR()
    if name in ("pr-noisy", "noisy-pr"):
        return NoisyPR(float(arg))
    if name in ("pr-smoothed", "smoothed-pr"):
        return SmoothedPR(float(arg) if arg else 1e-3)
    if name == "complex-pr":
        return ComplexNoiselessPR()
    raise InvalidArgument(f"unknown channel {spec!r}")


def channel_density_grid(channel: Channel, g: float, grid) -> np.ndarray:
    """p(y|g) on a grid of y values; zero outside the channel's y-domain."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = channel.y_domain
    inside = (grid >= lo) & (grid <= hi)
    out = np.zeros_like(grid)
    out[inside] = channel.density(grid[inside], g)
    return out


def linear_signal_integral(channel: Channel) -> float:
    """int (E_G{G p(y|G)})^2 / E_G{p(y|G)} dy.

    Zero means every linear estimator A^T xi(y) is asymptotically
    uncorrelated with the signal, so AMP needs an informative start.
    """
    if channel.noise_free and not channel.has_density:
        if channel.even:
            return 0.0
        raise InvalidArgument("channel has neither a density nor known symmetry")

    def integrand(y):
        m0, m1, _ = channel.marginal_moments(y)
        return float(m1[0] ** 2 / m0[0]) if m0[0] > 0 else 0.0

    lo, hi = channel.y_domain
    lo = max(lo, -1e3)
    hi = min(hi, 1e3)
    return float(integrate.quad(integrand, lo, hi, limit=200)[0])


# ================================================================ preprocessing


@dataclass(frozen=True)
class Preprocessing:
    """Bounded map T_s applied to the observations before forming D_n."""

    map: Callable
    tau: float
    lipschitz_bound: float = np.inf
    name: str = "custom"

    def __call__(self, y):
        return self.map(np.asarray(y))

    @classmethod
    def constant(cls, c: float):
        return cls(lambda y, c=c: np.full(np.shape(y), float(c)), float(c), 0.0, f"constant({c:g})")

    @classmethod
    def from_grid(cls, ygrid, values, name="tabulated", slack=1e-9):
        ygrid = np.asarray(ygrid, dtype=float)
        values = np.asarray(values, dtype=float)
        lip = float(np.max(np.abs(np.diff(values) / np.diff(ygrid)))) if ygrid.size > 1 else 0.0
        return cls(lambda y: np.interp(np.real(y), ygrid, values), float(values.max()) + slack, lip, name)


# ==================================================================== instances


@dataclass
class Instance:
    x: np.ndarray
    A: LinearOperator
    y: np.ndarray
    delta: float
    g: np.ndarray = field(repr=False, default=None)

    @property
    def d(self):
        return self.x.size

    @property
    def n(self):
        return self.y.size


class GaussianOperator(DenseOperator):
    """Dense i.i.d. N(0, 1/d) (or CN(0, 1/d)) sensing matrix."""

    def __init__(self, matrix):
        super().__init__(matrix)
        ratio = self.rows / self.cols
        # operator-norm^2 concentrates at (1 + sqrt(n/d))^2; 10% margin
        self.norm2_bound = 1.1 * (1.0 + math.sqrt(ratio)) ** 2


def gaussian_matrix(n, d, rng, complex_=False):
    if complex_:
        re = rng.standard_normal((n, d))
        im = rng.standard_normal((n, d))
        return GaussianOperator((re + 1j * im) / math.sqrt(2.0 * d))
    return GaussianOperator(rng.standard_normal((n, d)) / math.sqrt(d))


def normalize_signal(x):
    x = np.asarray(x)
    return x * math.sqrt(x.size / np.vdot(x, x).real)


def sample_instance(prior: Prior, channel: Channel, d: int, delta: float, rng: np.random.Generator) -> Instance:
    """Draw x from the prior (rescaled to |x|^2 = d), A with N(0, 1/d) entries,
    and y_i = q(<a_i, x>, v_i)."""
    if d < 1:
        raise InvalidArgument(f"d must be >= 1, got {d}")
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    n = int(round(delta * d))
    if n < 1:
        raise InvalidArgument(f"n = round(delta * d) = {n} < 1")
    x = normalize_signal(prior.sample(rng, d))
    A = gaussian_matrix(n, d, rng, complex_=channel.is_complex or prior.is_complex)
    g = A.apply(x)
    y = channel.sample(g, rng)
    return Instance(x=x, A=A, y=np.asarray(y, dtype=float), delta=n / d, g=g)
