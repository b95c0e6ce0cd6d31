import cmath
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specgamp.complex_gamp import (
    CdpOperator,
    ComplexGampConfig,
    ComplexSeQuadrature,
    complex_gamp_run,
    complex_h_star,
    complex_se_fixed_point,
    complex_se_overlap,
    complex_se_trajectory,
    cdp_build,
    image_experiment,
    mu_from_norm,
    phase_aligned_overlap,
    read_netpbm,
    write_netpbm,
)
from specgamp.errors import InvalidArgument
from specgamp.models import ComplexGaussianPrior, ComplexNoiselessPR, Instance, sample_instance
from specgamp.numerics import make_rng
from specgamp.spectral import optimal_T_bar, solve_lambda_star, spectral_estimate

CPR = ComplexNoiselessPR()
CGAUSS = ComplexGaussianPrior()
IMAGE = "tests/data/astronaut64.ppm"


# ------------------------------------------------------------------ CDP


def test_single_pattern_matches_direct_sum():
    d1 = d2 = 4
    rng = make_rng(0)
    A = cdp_build(d1, d2, 1, None, rng)
    mask = A.masks[0]
    dense = np.empty((16, 16), dtype=complex)
    for k1 in range(d1):
        for k2 in range(d2):
            for t1 in range(d1):
                for t2 in range(d2):
                    phase = -2j * math.pi * (k1 * t1 / d1 + k2 * t2 / d2)
                    dense[k1 * d2 + k2, t1 * d2 + t2] = mask[t1, t2] * cmath.exp(phase) / 4.0
    v = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    assert np.allclose(A.apply(v), dense @ v, atol=1e-10)
    assert np.allclose(A.apply_adjoint(v), dense.conj().T @ v, atol=1e-10)


def test_masks_are_quaternary():
    A = cdp_build(8, 8, 3, None, make_rng(1))
    assert set(np.unique(np.round(A.masks, 12)).tolist()) <= {1, -1, 1j, -1j}


def test_full_patterns_preserve_energy_per_pattern():
    A = cdp_build(8, 6, 3, None, make_rng(2))
    v = make_rng(3).standard_normal(48) + 0j
    assert np.vdot(A.apply(v), A.apply(v)).real == pytest.approx(3 * np.vdot(v, v).real, rel=1e-12)


def test_adjoint_identity():
    A = cdp_build(8, 8, 3, 2.4, make_rng(4))
    rng = make_rng(5)
    v = rng.standard_normal(A.cols) + 1j * rng.standard_normal(A.cols)
    u = rng.standard_normal(A.rows) + 1j * rng.standard_normal(A.rows)
    lhs = np.vdot(u, A.apply(v))
    rhs = np.vdot(A.apply_adjoint(u), v)
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)


def test_fractional_ratio_drops_rows():
    d = 256
    A = cdp_build(16, 16, 3, 2.4, make_rng(6))
    assert abs(A.zeroed_rows - round(0.6 * d)) <= 1
    assert A.rows == round(2.4 * d)


@pytest.mark.parametrize("args", [(0, 4, 1, None), (4, 4, 0, None), (4, 4, 2, 2.5), (4, 4, 2, 0.0)])
def test_cdp_build_rejects_bad_sizes(args):
    with pytest.raises(InvalidArgument):
        cdp_build(*args, make_rng(7))


def test_fft_cost_grows_nearly_linearly():
    ops = [cdp_build(n, n, 3, None, make_rng(8 + n)) for n in (64, 128)]
    vecs = [np.ones(A.cols, complex) for A in ops]
    for A, v in zip(ops, vecs):
        A.apply_adjoint(A.apply(v))  # warm up caches and FFT plans
    # interleaved so that machine drift affects both sizes alike
    times = [[], []]
    for _ in range(25):
        for i, (A, v) in enumerate(zip(ops, vecs)):
            t0 = time.perf_counter()
            A.apply_adjoint(A.apply(v))
            times[i].append(time.perf_counter() - t0)
    assert min(times[1]) / min(times[0]) < 5.0


# ----------------------------------------------------------- denoiser


def _phase_integral(u, y, rho, s2, points=4096):
    theta = np.arange(points) * 2 * math.pi / points
    g = math.sqrt(y) * np.exp(1j * theta)
    logw = -np.abs(g - rho * u) ** 2 / s2
    w = np.exp(logw - logw.max())
    mean = np.sum(w * g) / np.sum(w)
    return mean, y - abs(mean) ** 2


@settings(max_examples=40, deadline=None)
@given(re=st.floats(-3, 3), im=st.floats(-3, 3), y=st.floats(1e-3, 6), mu=st.floats(0.2, 5))
def test_bessel_form_matches_phase_integration(re, im, y, mu):
    delta = 2.0
    h = complex_h_star(mu / math.sqrt(delta), mu / delta)
    u = complex(re, im)
    hv, _, pv = h(np.array([u]), np.array([y]))
    mean, var = _phase_integral(u, y, h.rho, h.s2)
    assert abs(hv[0] - (mean - h.rho * u) / h.s2) < 1e-6 * max(1.0, abs(hv[0]))
    assert abs(pv[0] - var) < 1e-6 * max(1.0, var)


def test_denoiser_at_zero_input_and_zero_output():
    h = complex_h_star(0.8, 0.5)
    assert h(np.array([0j]), np.array([2.0]))[0][0] == 0
    u = np.array([0.3 - 0.7j])
    assert np.allclose(h(u, np.array([0.0]))[0], -h.rho * u / h.s2)


def test_wirtinger_derivative_by_finite_differences():
    h = complex_h_star(0.9, 0.45)
    y = np.array([0.3, 1.0, 2.5])
    u = np.array([0.4 + 0.2j, -1.1 + 0.5j, 0.7 - 0.9j])
    eps = 1e-6
    dre = (h(u + eps, y)[0] - h(u - eps, y)[0]) / (2 * eps)
    dim = (h(u + 1j * eps, y)[0] - h(u - 1j * eps, y)[0]) / (2 * eps)
    wirtinger = 0.5 * (dre - 1j * dim)
    assert np.allclose(h(u, y)[1], wirtinger, atol=1e-5)


# ---------------------------------------------------------------- SE


def test_state_evolution_is_monotone_at_three():
    ch_pre = optimal_T_bar(CPR, 3.0)
    a2 = solve_lambda_star(CPR, ch_pre, 3.0).a2
    mus = [s.mu for s in complex_se_trajectory(a2, 3.0, 30)]
    assert all(b >= a for a, b in zip(mus, mus[1:]))
    assert mus[0] == pytest.approx(a2 / (1 - a2))


def test_uninformative_start_is_a_fixed_point():
    state, converged, exact = complex_se_fixed_point(0.0, 1.5)
    assert converged and not exact and state.mu == 0.0


def test_quadrature_is_converged():
    coarse = ComplexSeQuadrature(41, 41).expect_h2(0.7, 2.0)[0]
    fine = ComplexSeQuadrature(81, 81).expect_h2(0.7, 2.0)[0]
    assert abs(coarse - fine) < 1e-6


@given(st.floats(0, 100))
def test_mu_from_norm_solves_quadratic(q):
    m = mu_from_norm(q)
    assert m >= 0 and m * m + m == pytest.approx(q, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------ overlap


def test_overlap_is_phase_invariant():
    x = make_rng(10).standard_normal(50) + 1j * make_rng(11).standard_normal(50)
    for theta in (0.0, 0.3, 2.0, -3.1):
        assert phase_aligned_overlap(np.exp(1j * theta) * x, x) == pytest.approx(1.0, abs=1e-12)
        assert phase_aligned_overlap(x, np.exp(1j * theta) * x) == pytest.approx(1.0, abs=1e-12)


def test_overlap_of_orthogonal_pair():
    assert phase_aligned_overlap(np.array([1, 1j, 0]), np.array([1j, 1, 5])) == pytest.approx(0.0, abs=1e-15)


def test_overlap_matches_angle_grid():
    rng = make_rng(12)
    x = rng.standard_normal(1000) + 1j * rng.standard_normal(1000)
    xh = x + 2 * (rng.standard_normal(1000) + 1j * rng.standard_normal(1000))
    ip = np.vdot(xh, x)
    # the grid misses the best angle by at most half a degree; refine around the best cell
    thetas = np.arange(360) * 2 * math.pi / 360
    best = thetas[np.argmax([np.real(np.exp(1j * t) * ip) for t in thetas])]
    fine = best + np.linspace(-math.pi / 360, math.pi / 360, 2001)
    top = max(np.real(np.exp(1j * t) * ip) for t in fine)
    oracle = top**2 / (np.vdot(x, x).real * np.vdot(xh, xh).real)
    assert phase_aligned_overlap(xh, x) == pytest.approx(oracle, abs=1e-6)


def test_overlap_rejects_zero_vector():
    with pytest.raises(InvalidArgument):
        phase_aligned_overlap(np.zeros(3), np.ones(3))


# ---------------------------------------------------------------- GAMP


DELTA = 3.0


@pytest.fixture(scope="module")
def gaussian_run():
    pre = optimal_T_bar(CPR, DELTA)
    pred = solve_lambda_star(CPR, pre, DELTA)
    rng = make_rng(0)
    inst = sample_instance(CGAUSS, CPR, 2000, DELTA, rng)
    sp = spectral_estimate(inst, pre, rng)
    return inst, pre, pred, sp


@pytest.mark.slow
def test_gaussian_sensing_follows_state_evolution(gaussian_run):
    inst, pre, pred, sp = gaussian_run
    tr = complex_gamp_run(inst, ComplexGampConfig(schedule="se", max_iter=100), pred.a2, pred.lambda_star, pre,
                          sp.xs)
    fixed, _, _ = complex_se_fixed_point(pred.a2, DELTA)
    assert not tr.diverged
    assert abs(tr.overlaps[-1] ** 2 - complex_se_overlap(fixed)) < 0.05


@pytest.mark.slow
def test_signal_strength_estimators_agree(gaussian_run):
    inst, pre, pred, sp = gaussian_run
    tr = complex_gamp_run(inst, ComplexGampConfig(schedule="online-x", max_iter=8), pred.a2, pred.lambda_star,
                          pre, sp.xs)
    for by_h, by_x in zip(tr.mu_hat_h, tr.mu_hat_x):
        assert abs(by_h / by_x - 1.0) < 0.05


def test_global_phase_gives_identical_trace():
    delta, d = 3.0, 300
    pre = optimal_T_bar(CPR, delta)
    pred = solve_lambda_star(CPR, pre, delta)
    inst = sample_instance(CGAUSS, CPR, d, delta, make_rng(13))
    traces = []
    for theta in (0.0, 1.234):
        rot = Instance(x=np.exp(1j * theta) * inst.x, A=inst.A, y=inst.y, delta=inst.delta)
        sp = spectral_estimate(rot, pre, make_rng(14), align=False)
        tr = complex_gamp_run(rot, ComplexGampConfig(schedule="online-x", max_iter=20), pred.a2, pred.lambda_star,
                              pre, sp.xs)
        traces.append(np.array(tr.overlaps))
    assert np.allclose(traces[0], traces[1], atol=1e-10)


@pytest.mark.parametrize("kw", [dict(schedule="magic"), dict(onsager_form="other"), dict(damping=0.0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        ComplexGampConfig(**kw)


# -------------------------------------------------------------- images


def test_small_image_gamp_beats_spectral():
    img = read_netpbm(IMAGE)[::4, ::4]
    res = image_experiment(img, 3.0)
    assert res.mean_gamp >= res.mean_spectral
    assert res.reconstruction.shape == img.shape


def test_below_threshold_spectral_overlap_is_small():
    res = image_experiment(read_netpbm(IMAGE)[::4, ::4], 1.0)
    assert res.mean_spectral < 0.1


def test_netpbm_round_trip(tmp_path):
    rng = make_rng(15)
    rgb = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    gray = np.round(rng.uniform(size=(4, 3)) * 255) / 255
    write_netpbm(tmp_path / "c.ppm", rgb)
    write_netpbm(tmp_path / "g.pgm", gray)
    assert np.allclose(read_netpbm(tmp_path / "c.ppm"), rgb)
    assert np.allclose(read_netpbm(tmp_path / "g.pgm"), gray)
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")


def test_unreadable_image(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError):
        read_netpbm(bad)
