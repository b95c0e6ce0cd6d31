import math

import numpy as np
import pytest

from specgamp.errors import DivergenceError, InvalidArgument
from specgamp.gamp import (
    GampConfig,
    GampState,
    deterministic_onsager,
    empirical_pl2,
    gamp_init_spectral,
    gamp_run,
    gamp_step,
    modified_gamp_step,
    normalized_correlation,
)
from specgamp.models import GaussianPrior, Instance, NoiselessPR, Preprocessing, sample_instance
from specgamp.numerics import DenseOperator, make_rng
from specgamp.spectral import SpectralEstimate, optimal_T_bar, solve_lambda_star, spectral_estimate
from specgamp.state_evolution import (
    IDENTITY,
    ZERO_F,
    ZERO_H,
    DenoiserPolicy,
    OutputDenoiser,
    SeQuadrature,
    SeState,
    SignalDenoiser,
    overlap_from_se,
    se_init,
    se_trajectory,
)

PR = NoiselessPR()
GAUSS = GaussianPrior()


def _setup(delta, d, seed):
    pre = optimal_T_bar(PR, delta)
    pred = solve_lambda_star(PR, pre, delta)
    rng = make_rng(seed, d)
    inst = sample_instance(GAUSS, PR, d, delta, rng)
    return inst, pre, pred, spectral_estimate(inst, pre, rng)


# ------------------------------------------------------------------ init


def test_zero_start_denoiser_gives_zero_output_iterate():
    inst, pre, pred, sp = _setup(2.0, 200, 0)
    st = gamp_init_spectral(inst, sp, pred, pre, ZERO_F)
    assert st.b == 0.0 and np.all(st.u == 0.0)


def test_start_has_norm_one_over_delta():
    inst, pre, pred, sp = _setup(2.0, 300, 1)
    st = gamp_init_spectral(inst, sp, pred, pre, IDENTITY)
    assert abs(np.dot(st.x, st.x) / inst.d - 1.0 / inst.delta) < 1e-12


def test_start_rejects_lambda_below_tau():
    inst, pre, pred, sp = _setup(2.0, 100, 2)
    from dataclasses import replace

    with pytest.raises(InvalidArgument):
        gamp_init_spectral(inst, sp, replace(pred, lambda_star=0.9 * pre.tau), pre, IDENTITY)


def test_start_output_iterate_formula():
    inst, pre, pred, sp = _setup(2.0, 150, 3)
    st = gamp_init_spectral(inst, sp, pred, pre, IDENTITY)
    a = inst.A.matrix
    x0 = math.sqrt(inst.d / inst.delta) * sp.xs
    b0 = inst.d / inst.n
    expect = a @ x0 / math.sqrt(inst.delta) - b0 * math.sqrt(inst.delta) / pred.lambda_star * pre(inst.y) * (a @ x0)
    assert np.allclose(st.u, expect, atol=1e-12)


# ------------------------------------------------------------------ steps


def test_zero_denoisers_give_zero_iterates():
    inst, *_ = _setup(2.0, 50, 4)
    st = GampState(np.ones(inst.d), np.ones(inst.n), 0.3)
    new = gamp_step(st, inst, ZERO_F, ZERO_H, ZERO_F, inst.delta)
    assert np.all(new.x == 0) and np.all(new.u == 0)


def test_step_matches_naive_loops():
    rng = make_rng(40)
    d, n = 3, 6
    a = rng.standard_normal((n, d)) / math.sqrt(d)
    x = np.array([1.0, -1.0, 1.0])
    inst = Instance(x=x, A=DenseOperator(a), y=(a @ x) ** 2, delta=n / d)
    f_t = SignalDenoiser(np.tanh, lambda s: 1 - np.tanh(s) ** 2)
    f_next = SignalDenoiser(lambda s: s**3 / 3, lambda s: s**2)
    h_t = OutputDenoiser(lambda u, y: (np.sin(u) * y, np.cos(u) * y))
    st = GampState(rng.standard_normal(d), rng.standard_normal(n), 0.0)
    new = gamp_step(st, inst, f_t, h_t, f_next, inst.delta)

    delta = n / d
    c = sum(math.cos(st.u[i]) * inst.y[i] for i in range(n)) / n
    x_new = [sum(a[i, j] * math.sin(st.u[i]) * inst.y[i] for i in range(n)) / math.sqrt(delta)
             - c * math.tanh(st.x[j]) for j in range(d)]
    b = sum(x_new[j] ** 2 for j in range(d)) / n
    u_new = [sum(a[i, j] * x_new[j] ** 3 / 3 for j in range(d)) / math.sqrt(delta)
             - b * math.sin(st.u[i]) * inst.y[i] for i in range(n)]
    assert np.allclose(new.x, x_new, atol=1e-13) and np.allclose(new.u, u_new, atol=1e-13)
    assert new.c == pytest.approx(c) and new.b == pytest.approx(b)


def test_full_damping_is_the_plain_recursion():
    inst, *_ = _setup(2.0, 80, 5)
    rng = make_rng(41)
    st = GampState(rng.standard_normal(inst.d), rng.standard_normal(inst.n), 0.0)
    h = OutputDenoiser(lambda u, y: (np.tanh(u) * y, (1 - np.tanh(u) ** 2) * y))
    new = gamp_step(st, inst, IDENTITY, h, IDENTITY, inst.delta, damping=1.0)
    hv, dh = h.both(st.u, inst.y)
    x_new = inst.A.apply_adjoint(hv) / math.sqrt(inst.delta) - float(np.mean(dh)) * st.x
    u_new = inst.A.apply(x_new) / math.sqrt(inst.delta) - (inst.d / inst.n) * hv
    assert np.array_equal(new.x, x_new) and np.array_equal(new.u, u_new)


def test_partial_damping_blends_iterates():
    inst, *_ = _setup(2.0, 80, 6)
    rng = make_rng(42)
    st = GampState(rng.standard_normal(inst.d), rng.standard_normal(inst.n), 0.0)
    h = OutputDenoiser(lambda u, y: (u * y, y))
    full = gamp_step(st, inst, IDENTITY, h, IDENTITY, inst.delta)
    half = gamp_step(st, inst, IDENTITY, h, IDENTITY, inst.delta, damping=0.5)
    assert np.allclose(half.x, 0.5 * full.x + 0.5 * st.x)


def test_non_finite_iterate_raises_with_iteration():
    inst, *_ = _setup(2.0, 40, 7)
    st = GampState(np.ones(inst.d), np.ones(inst.n), 0.0, t=3)
    bad = OutputDenoiser(lambda u, y: (np.full(np.shape(u), np.inf), np.zeros(np.shape(u))))
    with pytest.raises(DivergenceError) as err:
        gamp_step(st, inst, IDENTITY, bad, IDENTITY, inst.delta)
    assert err.value.t == 4


def test_linear_denoisers_have_equal_memory_coefficients():
    inst, *_ = _setup(2.0, 100, 8)
    h = OutputDenoiser(lambda u, y: (0.7 * u, np.full(np.shape(u), 0.7)))
    s0, s1 = SeState(0.4, 0.3, 0.3, 0.1), SeState(0.5, 0.2)
    c_bar, b_bar = deterministic_onsager(h, IDENTITY, s0, s1, inst.delta, SeQuadrature(GAUSS, PR))
    rng = make_rng(43)
    st = GampState(rng.standard_normal(inst.d), rng.standard_normal(inst.n), 0.0)
    emp = gamp_step(st, inst, IDENTITY, h, IDENTITY, inst.delta)
    det = modified_gamp_step(st, inst, IDENTITY, h, IDENTITY, s0, s1, inst.delta, SeQuadrature(GAUSS, PR))
    # the deterministic values come from quadrature, so agreement is up to rounding
    assert emp.c == pytest.approx(c_bar, abs=1e-12) and emp.b == pytest.approx(b_bar, abs=1e-12)
    assert np.allclose(emp.x, det.x, atol=1e-11) and np.allclose(emp.u, det.u, atol=1e-11)


# -------------------------------------------------------------------- run


def test_huge_tolerance_stops_after_one_iteration():
    inst, pre, pred, sp = _setup(2.0, 200, 9)
    tr = gamp_run(inst, GampConfig(stop_tol=1e9), GAUSS, PR, pred, sp, pre)
    assert tr.iterations == 1 and tr.converged


def test_run_is_deterministic():
    runs = []
    for _ in range(2):
        inst, pre, pred, sp = _setup(2.0, 200, 10)
        tr = gamp_run(inst, GampConfig(max_iter=8, policy=DenoiserPolicy(normalize_output=True)), GAUSS, PR,
                      pred, sp, pre)
        runs.append(tr.final.x)
    assert np.array_equal(*runs)


def test_overlaps_are_correlations():
    inst, pre, pred, sp = _setup(1.5, 300, 11)
    tr = gamp_run(inst, GampConfig(max_iter=20, policy=DenoiserPolicy(normalize_output=True)), GAUSS, PR,
                  pred, sp, pre)
    assert all(-1.0 <= o <= 1.0 for o in tr.overlaps)


def test_exact_recovery_ends_the_schedule():
    inst, pre, pred, sp = _setup(3.0, 300, 12)
    tr = gamp_run(inst, GampConfig(max_iter=200, stop_tol=1e-300, policy=DenoiserPolicy(normalize_output=True)),
                  GAUSS, PR, pred, sp, pre)
    assert tr.converged and tr.message == "state evolution reached exact recovery"
    assert tr.iterations < 200


@pytest.mark.parametrize("kw", [dict(damping=0.0), dict(damping=1.5), dict(stop_tol=0.0), dict(max_iter=-1),
                                dict(onsager_mode="magic")])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        GampConfig(**kw)


# ------------------------------------------------------------- statistics


def test_empirical_pl2_examples():
    x = make_rng(44).standard_normal(500)
    x *= math.sqrt(500) / np.linalg.norm(x)
    assert empirical_pl2(x, x, lambda a, b: a * b) == pytest.approx(1.0, abs=1e-12)
    assert empirical_pl2(x, x, lambda a, b: (a - b) ** 2) == 0.0
    with pytest.raises(InvalidArgument):
        empirical_pl2(x, x[:-1], lambda a, b: a * b)


def test_normalized_correlation_of_zero_estimate():
    assert normalized_correlation(np.zeros(4), np.ones(4)) == 0.0


DELTA, D, SEEDS, T_MAX = 4.0, 2000, 20, 10


@pytest.fixture(scope="module")
def tracking_runs():
    """20 runs at delta = 4 with f identity and h = sqrt(delta) h*, plus their SE trace."""
    pre = optimal_T_bar(PR, DELTA)
    pred = solve_lambda_star(PR, pre, DELTA)
    se = se_trajectory(se_init(pred.a2, DELTA), GAUSS, PR, DenoiserPolicy(), DELTA, T_MAX)
    runs = []
    for seed in range(SEEDS):
        rng = make_rng(seed, D)
        inst = sample_instance(GAUSS, PR, D, DELTA, rng)
        sp = spectral_estimate(inst, pre, rng)
        tr = gamp_run(inst, GampConfig(max_iter=T_MAX, stop_tol=1e-300, keep_iterates=True), GAUSS, PR, pred,
                      sp, pre, se_states=se)
        assert not tr.diverged
        runs.append((inst.x, tr))
    return se, runs


@pytest.mark.slow
def test_joint_statistic_at_start(tracking_runs):
    se, runs = tracking_runs
    emp = np.mean([tr.x_corr[0] for _, tr in runs])
    assert abs(emp - se[0].mu_X) < 0.03


@pytest.mark.slow
def test_overlap_trace_follows_state_evolution(tracking_runs):
    se, runs = tracking_runs
    for t in range(T_MAX + 1):
        emp = np.mean([tr.overlaps[t] for _, tr in runs])
        assert abs(emp - overlap_from_se(se[t], GAUSS)) < 0.05, t


@pytest.mark.slow
@pytest.mark.parametrize("t", [0, 1, 2])
def test_pl2_correlation_matches_state_evolution(tracking_runs, t):
    se, runs = tracking_runs
    # the statistic grows about fourfold per step, so compare on the scale of the SE value
    emp = np.mean([empirical_pl2(x, tr.iterates[t], lambda a, b: a * b) for x, tr in runs])
    assert abs(emp / se[t].mu_X - 1.0) < 0.03


@pytest.mark.slow
@pytest.mark.parametrize("t", [0, 1, 2, 5])
@pytest.mark.parametrize("name", ["product", "square", "squared-difference"])
def test_tracking_statistics_within_three_sd(tracking_runs, t, name):
    se, runs = tracking_runs
    mu, sig2 = se[t].mu_X, se[t].sig2_X
    psi, limit = {
        "product": (lambda a, b: a * b, mu),
        "square": (lambda a, b: b * b, mu * mu + sig2),
        "squared-difference": (lambda a, b: (a - b) ** 2, (1 - mu) ** 2 + sig2),
    }[name]
    vals = np.array([empirical_pl2(x, tr.iterates[t], psi) for x, tr in runs])
    assert abs(vals.mean() - limit) < 3 * vals.std(ddof=1)


@pytest.mark.slow
def test_memory_terms_are_needed():
    delta = 4.5
    with_terms, without = [], []
    for seed in range(5):
        inst, pre, pred, sp = _setup(delta, 2000, 100 + seed)
        policy = DenoiserPolicy(normalize_output=True)
        for flag, out in ((True, with_terms), (False, without)):
            tr = gamp_run(inst, GampConfig(policy=policy, max_iter=5, stop_tol=1e-300, onsager=flag), GAUSS, PR,
                          pred, sp, pre)
            out.append(tr.squared_overlaps[5])
    assert np.mean(with_terms) > np.mean(without)


@pytest.mark.slow
def test_memory_coefficients_concentrate():
    delta = 4.0
    policy = DenoiserPolicy(normalize_output=True)
    worst = []
    for seed in range(200, 205):
        inst, pre, pred, sp = _setup(delta, 2000, seed)
        se = se_trajectory(se_init(pred.a2, delta), GAUSS, PR, policy, delta, 5)
        emp = gamp_run(inst, GampConfig(policy=policy, max_iter=5, stop_tol=1e-300), GAUSS, PR, pred, sp, pre,
                       se_states=se)
        det = gamp_run(inst, GampConfig(policy=policy, max_iter=5, stop_tol=1e-300, onsager_mode="deterministic"),
                       GAUSS, PR, pred, sp, pre, se_states=se)
        worst.append(max(abs(a - b) for a, b in zip(emp.c, det.c)))
    print("max |c_t - cbar_t| per seed:", np.round(worst, 4))
    assert max(worst) < 0.02
