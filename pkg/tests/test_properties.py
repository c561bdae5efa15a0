import math

import numpy as np
from hypothesis import HealthCheck, assume, given, settings, strategies as st

from csma_mpr import delay, meanfield as mf, oracle, phy
from csma_mpr.model import (AllOrNothingMpr, ClassSpec, Scenario, chi, chi_prime,
                            unimodality_condition_holds, validate_scenario)
from csma_mpr.phy import Decoder
from csma_mpr.sim import SimConfig, run_simulation

prob = st.floats(0.01, 1.0)
slow = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def q_vectors(draw, max_len=5, chain=False):
    q = [draw(prob)]
    for L in range(2, draw(st.integers(1, max_len)) + 1):
        # stay strictly inside the chain so rounding cannot break L q_L >= (L-1) q_(L-1)
        lo = min(1.0, (L - 1) / L * q[-1] * (1 + 1e-9)) if chain else 0.0
        q.append(draw(st.floats(lo, 1.0)))
    return tuple(q)


@st.composite
def stable_limiting(draw):
    V = draw(st.integers(1, 3))
    beta = np.array([draw(st.floats(0.1, 1.0)) for _ in range(V)])
    beta /= beta.sum()
    p = [draw(st.floats(0.1, 4.0)) for _ in range(V)]
    q = draw(q_vectors(4, chain=True))
    tau = draw(st.sampled_from([1, 2, 5, 10, 20]))
    base = Scenario([ClassSpec(0.0, pv, fraction=b) for b, pv in zip(beta, p)],
                    AllOrNothingMpr(q), kappa=tau, tau=tau, mode="limiting")
    _, fmax = mf.find_gamma_star(base.mpr, tau)
    share = np.array([draw(st.floats(0.05, 1.0)) for _ in range(V)])
    load = draw(st.floats(0.05, 0.95))
    s = base.with_arrival_rates(share / share.sum() * load * fmax / beta)
    eq = mf.solve_equilibrium(s)
    assume(eq.state == mf.State.STABLE)
    return s, eq


@given(q_vectors(), st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_chi_is_nondecreasing_and_starts_at_q1(q, a, b):
    m = AllOrNothingMpr(q)
    assert chi(m, 0.0) == q[0]
    lo, hi = sorted((a, b))
    assert chi(m, lo) <= chi(m, hi) + 1e-12
    assert chi_prime(m, lo) >= 0.0


@given(q_vectors(max_len=2), st.sampled_from([1, 3, 10]))
def test_short_q_vectors_are_unimodal(q, tau):
    assert unimodality_condition_holds(AllOrNothingMpr(q))
    f = mf.f_gamma(AllOrNothingMpr(q), tau, np.linspace(0, 30, 30_001))
    peaks = (f[1:-1] > f[:-2]) & (f[1:-1] >= f[2:])
    assert peaks.sum() == 1


@given(q_vectors(chain=True), st.sampled_from([1, 5, 10, 20]))
def test_chain_condition_gives_single_peak(q, tau):
    m = AllOrNothingMpr(q)
    assert unimodality_condition_holds(m)
    f = mf.f_gamma(m, tau, np.linspace(0, 40, 40_001))
    peaks = (f[1:-1] > f[:-2]) & (f[1:-1] >= f[2:])
    assert peaks.sum() == 1


@given(q_vectors(), st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.integers(1, 5))
def test_validation_is_idempotent(q, lam, p, n):
    s = Scenario([ClassSpec(lam, p, n)], AllOrNothingMpr(q), kappa=3)
    assert validate_scenario(s) == validate_scenario(s) == []


@slow
@given(stable_limiting())
def test_stable_roots_solve_the_fixed_point(case):
    s, eq = case
    for rho in eq.rho_solutions:
        assert mf.limiting_residual(s, rho) <= 1e-9
        assert np.all((rho >= 0) & (rho <= 1))
    if len(eq.gamma_roots) == 2:
        assert eq.gamma_roots[0] <= eq.gamma_star <= eq.gamma_roots[1]


def _finite(s, n=2000):
    return Scenario([ClassSpec(lt / n, pt / n, max(1, int(round(n * b))))
                     for b, lt, pt in zip(s.betas, s.lambda_tilde, s.p_tilde)],
                    s.mpr, kappa=s.kappa, tau=s.tau)


@slow
@given(stable_limiting())
def test_service_delay_satisfies_littles_law(case):
    s, eq = case
    fin = _finite(s)
    for v in range(s.V):
        d = delay.service_delay(fin, eq.rho, v)
        assert math.isclose(fin.arrival_rates[v] * d, eq.rho[v], rel_tol=1e-12)


@slow
@given(st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.sampled_from([1, 4, 10]))
def test_two_service_delay_forms_agree_at_the_finite_fixed_point(load1, load2, tau):
    s = Scenario([ClassSpec(0.0, 0.08, 6), ClassSpec(0.0, 0.15, 4)],
                 AllOrNothingMpr((0.9, 0.6)), kappa=tau, tau=tau)
    cap = [mf.throughput_finite(s.with_tx_probs([0.08, 0.15]), [1.0, 1.0], v) for v in (0, 1)]
    s = s.with_arrival_rates([load1 * cap[0], load2 * cap[1]])
    fp = mf.solve_finite_fixed_point(s)
    assume(np.all(fp.rho < 0.999))
    for v in (0, 1):
        a = delay.service_delay(s, fp.rho, v)
        b = delay.service_delay_recursive(s, fp.rho, v)
        assert math.isclose(a, b, rel_tol=1e-8)


@given(st.floats(0.05, 0.95), st.floats(0.0, 0.95), st.integers(2, 20))
def test_total_delay_grows_with_utilization(r1, r2, tau):
    s = Scenario([ClassSpec(0.002, 0.05, 5)], AllOrNothingMpr((0.9,)), kappa=tau, tau=tau)
    lo, hi = sorted((r1, r2))
    assume(hi - lo > 1e-6)
    assert delay.total_delay(s, [lo], 0) < delay.total_delay(s, [hi], 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(6.0, 1, 2), (15.0, 2, 3)]))
def test_decoder_rates_are_deterministic_and_ordered(seed, cell):
    snr_db, K, L = cell
    cfg = lambda d: phy.PhyConfig(snr_db, K, 0.0, d, samples=64, seed=seed)
    sic, scf, jd = (phy.sample_rates(cfg(d), L) for d in (Decoder.SIC, Decoder.SCF, Decoder.JD))
    assert np.array_equal(scf, phy.sample_rates(cfg(Decoder.SCF), L))
    assert np.all(sic <= scf + 1e-9) and np.all(scf <= jd + 1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.3), st.floats(0.1, 1.0), st.integers(1, 2), st.integers(1, 3),
       st.integers(1, 3))
def test_oracle_stationary_law_is_a_distribution(lam, p, n, tau, cap):
    s = Scenario([ClassSpec(lam, p, n)], AllOrNothingMpr((0.9, 0.5)), kappa=tau, tau=tau)
    st_ = oracle.stationary_distribution(oracle.TinySystem(s, cap))
    assert np.all(st_.pi >= 0)
    assert math.isclose(st_.pi.sum(), 1.0, rel_tol=1e-12)
    assert st_.residual <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(0.05, 1.0), st.integers(1, 4), st.integers(1, 5),
       st.one_of(st.none(), st.integers(1, 4)), st.integers(0, 2**31))
def test_simulator_conserves_packets(lam, p, n, tau, cap, seed):
    s = Scenario([ClassSpec(lam, p, n)], AllOrNothingMpr((0.95, 0.7)), kappa=tau, tau=tau)
    rep = run_simulation(SimConfig(s, 20_000, warmup=0, seed=seed, buffer_cap=cap))
    c = rep.classes[0]
    assert c.arrivals == c.departures + c.dropped + c.final_backlog
    if cap is None:
        assert c.dropped == 0
