"""Shared numerical kernels: Gaussian quadrature, scalar root finding and
minimization, matrix-free power iteration and seeded random generators."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BracketError, InvalidArgument, NumericError

DEFAULT_ORDER = 61


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and probability weights for expectations over a fixed law.

    For Gauss-Hermite rules the law is N(0, 1); weights sum to one.
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def expect(self, values) -> float:
        return float(np.dot(self.weights, values))


def gauss_hermite(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Gauss-Hermite rule normalised so that sum(w * f(n)) ~ E f(W), W ~ N(0,1)."""
    if int(order) != order or order < 1:
        raise InvalidArgument(f"quadrature order must be a positive integer, got {order!r}")
    order = int(order)
    if order == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), 1)
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / math.sqrt(2.0 * math.pi)
    # symmetrise away roundoff so that odd moments vanish exactly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights / weights.sum(), order)


def gauss_laguerre(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Gauss-Laguerre rule for E f(E), E ~ Exp(1) (the law of |G|^2 for G ~ CN(0,1))."""
    if int(order) != order or order < 1:
        raise InvalidArgument(f"quadrature order must be a positive integer, got {order!r}")
    nodes, weights = np.polynomial.laguerre.laggauss(int(order))
    return QuadratureRule(nodes, weights / weights.sum(), int(order))


_GL8 = np.polynomial.legendre.leggauss(8)
_LOCAL_OFFSETS = np.concatenate([[0.0], 10.0 ** np.arange(-10, 0), [0.3]])
_GLOBAL_EDGES = np.linspace(-12.0, 12.0, 25)


def split_gaussian_rule(points=(0.0,)) -> QuadratureRule:
    """Composite 8-point Gauss-Legendre rule for E F(W), W ~ N(0, 1), with
    panels shrinking geometrically towards each of `points`.

    Meant for integrands with kinks or steep layers at known locations, where
    Gauss-Hermite converges slowly. Truncates at |w| = 12 (mass < 1e-32).
    """
    local = [np.concatenate([p - _LOCAL_OFFSETS, p + _LOCAL_OFFSETS]) for p in points]
    edges = np.unique(np.clip(np.concatenate([_GLOBAL_EDGES, *local]), -12.0, 12.0))
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL8[0]
    weights = half[:, None] * _GL8[1] * np.exp(-0.5 * nodes**2) / math.sqrt(2.0 * math.pi)
    return QuadratureRule(nodes.ravel(), weights.ravel(), nodes.size)


def expect_g(f: Callable, rule: QuadratureRule | None = None) -> float:
    """E f(G) for G ~ N(0,1); f must accept an array of nodes.

    Accuracy is spectral for smooth f. For a jump or kink, use a rule with a
    panel edge at that point (split_gaussian_rule); odd-order Gauss-Hermite
    rules have a node at 0, so a jump there is off by half that node's weight.
    """
    rule = rule or gauss_hermite()
    vals = np.asarray(f(rule.nodes), dtype=float)
    if vals.shape != rule.nodes.shape:
        vals = np.broadcast_to(vals, rule.nodes.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        node = float(rule.nodes[np.argmax(bad)])
        raise NumericError(f"integrand is not finite at node {node}", node=node)
    return rule.expect(vals)


def tensor_nodes(*rules: QuadratureRule):
    """Tensor product of 1-D rules; returns flattened node arrays and weights."""
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    wgrid = np.ones(grids[0].shape)
    for axis, r in enumerate(rules):
        shape = [1] * len(rules)
        shape[axis] = r.order
        wgrid = wgrid * r.weights.reshape(shape)
    return [g.ravel() for g in grids], wgrid.ravel()


def find_root_monotone(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    """Bisection for a continuous monotone f with a sign change on [lo, hi]."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={flo}, f(hi)={fhi}")
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def minimize_convex(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section search for the minimiser of a convex f on [lo, hi]."""
    if not lo < hi:
        raise InvalidArgument(f"empty interval [{lo}, {hi}]")
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    # the golden-section bracket never evaluates the endpoints
    candidates = [(f(lo), lo), (f(0.5 * (a + b)), 0.5 * (a + b)), (f(hi), hi)]
    return min(candidates)[1]


# --------------------------------------------------------------------- operators


class LinearOperator:
    """Matrix-free n x d operator exposing v -> Av and u -> A^H u."""

    rows: int
    cols: int
    is_complex: bool = False

    @property
    def shape(self):
        return (self.rows, self.cols)

    def apply(self, v):
        raise NotImplementedError

    def apply_adjoint(self, u):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix)
        if self.matrix.ndim != 2:
            raise InvalidArgument("dense operator needs a 2-D array")
        self.rows, self.cols = self.matrix.shape
        self.is_complex = np.iscomplexobj(self.matrix)

    def apply(self, v):
        return self.matrix @ v

    def apply_adjoint(self, u):
        if self.is_complex:
            return self.matrix.conj().T @ u
        return self.matrix.T @ u


class FunctionOperator(LinearOperator):
    """Operator defined by a pair of callables."""

    def __init__(self, rows, cols, apply, apply_adjoint=None, is_complex=False):
        self.rows, self.cols = int(rows), int(cols)
        self._apply = apply
        self._adjoint = apply_adjoint if apply_adjoint is not None else apply
        self.is_complex = is_complex

    def apply(self, v):
        return self._apply(v)

    def apply_adjoint(self, u):
        return self._adjoint(u)


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator) -> float:
    """|<Av, u> - <v, A^H u>| / (|v| |u|) for random v, u."""
    v = rng.standard_normal(op.cols)
    u = rng.standard_normal(op.rows)
    if op.is_complex:
        v = v + 1j * rng.standard_normal(op.cols)
        u = u + 1j * rng.standard_normal(op.rows)
    lhs = np.vdot(u, op.apply(v))
    rhs = np.vdot(op.apply_adjoint(u), v)
    return float(abs(lhs - rhs) / (np.linalg.norm(v) * np.linalg.norm(u)))


@dataclass
class PowerResult:
    eigenvalue: float
    vector: np.ndarray
    iterations: int
    converged: bool


def power_method(
    op,
    tol: float = 1e-7,
    max_iter: int = 100_000,
    rng: np.random.Generator | None = None,
    shift: float = 0.0,
    v0=None,
    lag: int = 10,
) -> PowerResult:
    """Dominant eigenpair of a square Hermitian operator by power iteration.

    Iterates v <- (op + shift I) v / |.| and stops once the iterate and the one
    `lag` steps earlier satisfy |<v_T, v_{T-lag}>| > 1 - tol, or at `max_iter`.
    At least `lag` iterations are always run. The returned eigenvalue is the
    Rayleigh quotient of the unshifted operator.

    `op` is a LinearOperator, a dense array, or a callable v -> op(v) paired
    with a dimension through `v0`.
    """
    if isinstance(op, np.ndarray):
        op = DenseOperator(op)
    if isinstance(op, LinearOperator):
        if op.rows != op.cols:
            raise InvalidArgument(f"power method needs a square operator, got {op.shape}")
        dim, matvec, cplx = op.cols, op.apply, op.is_complex
    else:
        if v0 is None:
            raise InvalidArgument("a starting vector is required for callable operators")
        dim, matvec, cplx = len(v0), op, np.iscomplexobj(v0)
    if max_iter < 1:
        raise InvalidArgument("max_iter must be >= 1")

    if v0 is None:
        rng = rng if rng is not None else make_rng(0)
        v = rng.standard_normal(dim)
        if cplx:
            v = v + 1j * rng.standard_normal(dim)
    else:
        v = np.array(v0, dtype=complex if cplx else float)
        if v.shape != (dim,):
            raise InvalidArgument(f"starting vector has shape {v.shape}, expected ({dim},)")
    v = v / np.linalg.norm(v)

    history = deque([v], maxlen=lag + 1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = matvec(v)
        if shift:
            w = w + shift * v
        norm = np.linalg.norm(w)
        if not np.isfinite(norm) or norm == 0.0:
            raise NumericError(f"power iteration produced norm {norm} at step {it}")
        v = w / norm
        history.append(v)
        if it >= lag and abs(np.vdot(history[0], v)) > 1.0 - tol:
            converged = True
            break
    rayleigh = np.vdot(v, matvec(v)).real
    return PowerResult(float(rayleigh), v, it, converged)


# --------------------------------------------------------------------- randomness


def make_rng(seed, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator; `stream` indices give independent sub-streams."""
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))
