"""Quick invariant checks runnable from the command line (`specgamp selftest`).

Each check returns (name, passed, detail). They are small versions of the
property tests in the test suite, meant for verifying an installation.
"""

from __future__ import annotations

import io
import math

import numpy as np

from .complex_gamp import cdp_build, complex_h_star, phase_aligned_overlap
from .models import BinaryPrior, NoiselessPR, gaussian_matrix
from .numerics import DenseOperator, adjoint_mismatch, gauss_hermite, make_rng, power_method
from .state_evolution import bayes_f_star, bayes_h_star


def check_quadrature():
    rule = gauss_hermite()
    # E W^{2k} = (2k - 1)!!
    worst = 0.0
    for k in range(1, 8):
        exact = float(np.prod(np.arange(2 * k - 1, 0, -2)))
        worst = max(worst, abs(rule.expect(rule.nodes ** (2 * k)) - exact) / exact)
    return "Gauss-Hermite even moments", worst < 1e-10, f"max relative error {worst:.2e}"


def check_adjoints():
    rng = make_rng(7)
    ops = [gaussian_matrix(30, 20, rng), gaussian_matrix(30, 20, rng, complex_=True), cdp_build(8, 6, 3, 2.4, rng)]
    worst = max(adjoint_mismatch(op, rng) for op in ops)
    return "operator adjoints", worst < 1e-10, f"max mismatch {worst:.2e}"


def check_derivatives():
    worst = 0.0
    s = np.linspace(-3.0, 3.0, 13)
    eps = 1e-6
    f = bayes_f_star(BinaryPrior(0.3), 0.8, 0.5)
    fd = (f(s + eps) - f(s - eps)) / (2 * eps)
    worst = max(worst, float(np.max(np.abs(fd - f.deriv(s)) / np.maximum(np.abs(fd), 1e-3))))
    h = bayes_h_star(NoiselessPR(), 0.7, 0.3)
    u = np.linspace(-2.0, 2.0, 9) + 0.05
    y = np.full_like(u, 1.3)
    hd = (h(u + eps, y) - h(u - eps, y)) / (2 * eps)
    worst = max(worst, float(np.max(np.abs(hd - h.deriv(u, y)) / np.maximum(np.abs(hd), 1e-3))))
    hc = complex_h_star(0.9, 0.4)
    uc = np.array([0.3 + 0.4j, -1.1 + 0.2j, 0.05 - 0.9j])
    yc = np.array([0.4, 1.7, 0.9])
    g = lambda v: hc(v, yc)[0]
    wirt = 0.5 * ((g(uc + eps) - g(uc - eps)) - 1j * (g(uc + 1j * eps) - g(uc - 1j * eps))) / (2 * eps)
    an = hc(uc, yc)[1]
    worst = max(worst, float(np.max(np.abs(wirt - an) / np.maximum(np.abs(wirt), 1e-3))))
    return "denoiser derivatives vs finite differences", worst < 1e-5, f"max relative error {worst:.2e}"


def check_power_method():
    rng = make_rng(11)
    m = rng.standard_normal((50, 50))
    sym = m @ m.T / 50
    res = power_method(DenseOperator(sym), tol=1e-13, max_iter=200_000, rng=rng)
    vals, vecs = np.linalg.eigh(sym)
    err = abs(res.eigenvalue - vals[-1])
    align = 1 - abs(float(np.dot(res.vector, vecs[:, -1])))
    return "power method vs dense eigensolver", err < 1e-6 and align < 1e-6, f"eigenvalue error {err:.2e}"


def check_phase_invariance():
    rng = make_rng(13)
    x = rng.standard_normal(100) + 1j * rng.standard_normal(100)
    xh = x + 0.5 * (rng.standard_normal(100) + 1j * rng.standard_normal(100))
    base = phase_aligned_overlap(xh, x)
    worst = max(abs(phase_aligned_overlap(xh * np.exp(1j * th), x) - base) for th in np.linspace(0, 2 * math.pi, 7))
    return "phase invariance of the overlap", worst < 1e-12, f"max change {worst:.2e}"


def check_csv_determinism():
    from .experiments import SweepRow, write_csv
    from dataclasses import fields

    rows = [SweepRow(1.5, 0.1 / 3, 0.0, 0.2, 0.5, 0.01, 0.5, 12.0, 3, 0)]
    cols = [f.name for f in fields(SweepRow)]
    a, b = io.StringIO(), io.StringIO()
    write_csv(rows, a, cols)
    write_csv(rows, b, cols)
    return "CSV output is deterministic", a.getvalue() == b.getvalue(), ""


CHECKS = [check_quadrature, check_adjoints, check_derivatives, check_power_method, check_phase_invariance,
          check_csv_determinism]


def run_selftest():
    return [c() for c in CHECKS]
