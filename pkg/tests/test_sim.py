import numpy as np
import pytest

from csma_mpr import meanfield as mf, oracle
from csma_mpr.errors import ConfigError
from csma_mpr.model import AllOrNothingMpr, ClassSpec, GeneralSymmetricMpr, Scenario
from csma_mpr.sim import SimConfig, detect_bimodality, run_simulation, write_trace

from conftest import HIGH_Q, SCF_6DB_Q, two_class


def single(lam, p=1.0, q=(1.0,), tau=1):
    return Scenario([ClassSpec(lam, p, 1)], AllOrNothingMpr(q), kappa=tau, tau=tau)


def test_no_traffic():
    rep = run_simulation(SimConfig(two_class(3, 3, (0, 0), (0.5, 0.5), HIGH_Q), 10_000))
    assert all(c.packets_delivered == 0 for c in rep.classes)
    assert rep.fraction_idle_superslots == 1.0
    assert rep.attempt_histogram[1:].sum() == 0


def test_single_user_against_exact_chain():
    s = single(0.5)
    exact = oracle.exact_metrics(oracle.TinySystem(s, 5))
    rep = run_simulation(SimConfig(s, 400_000, seed=2))
    c = rep.classes[0]
    assert exact.throughput[0] == pytest.approx(0.5, abs=1e-12)
    assert exact.utilization[0] == pytest.approx(0.5, abs=1e-12)
    assert abs(c.throughput - exact.throughput[0]) < 4 * c.throughput_se
    assert abs(c.utilization_hat - exact.utilization[0]) < 4 * c.utilization_se
    assert c.mean_service_delay == 1.0


def test_saturated_point_against_formula(saturated_pair):
    s = saturated_pair(0.1)
    rep = run_simulation(SimConfig(s, 2_000_000, seed=1))
    assert rep.aggregate_throughput == pytest.approx(mf.saturated_throughput(s), rel=0.03)


def test_reproducible():
    s = two_class(4, 3, (0.01, 0.02), (0.2, 0.3), HIGH_Q, kappa=3)
    a = run_simulation(SimConfig(s, 50_000, seed=9))
    b = run_simulation(SimConfig(s, 50_000, seed=9))
    c = run_simulation(SimConfig(s, 50_000, seed=10))
    assert a.rows() == b.rows()
    assert a.rows() != c.rows()


@pytest.mark.parametrize("cap", [None, 2])
def test_conservation(cap):
    s = two_class(4, 3, (0.03, 0.05), (0.2, 0.3), HIGH_Q, kappa=3)
    rep = run_simulation(SimConfig(s, 100_000, seed=3, buffer_cap=cap))
    for c in rep.classes:
        assert c.arrivals - c.dropped - c.departures == c.final_backlog
        if cap is None:
            assert c.dropped == 0


def test_stable_regime_agreement():
    s = two_class(6, 4, (0.004, 0.006), (0.1, 0.15), SCF_6DB_Q, kappa=5)
    eq = mf.solve_equilibrium(s)
    fp = mf.solve_finite_fixed_point(s)
    rep = run_simulation(SimConfig(s, 3_000_000, seed=4))
    for v, c in enumerate(rep.classes):
        assert c.throughput <= s.arrival_rates[v] * 1.02
        assert 0 <= c.utilization_hat <= 1
        # empirical Little's law on the same sample path
        assert abs(c.mean_backlog - c.throughput * c.mean_total_delay) \
            < 3 * (c.backlog_se + c.throughput * c.total_delay_se)
        assert c.utilization_hat == pytest.approx(fp.rho[v], rel=0.05)
    assert eq.state == mf.State.STABLE


def test_general_mpr_uniform_winner():
    # always decode exactly one of two: throughput splits evenly between symmetric users
    mpr = GeneralSymmetricMpr(((1.0,), (1.0, 0.0)))
    s = Scenario([ClassSpec(1.0, 0.5, 2)], mpr, kappa=1)
    rep = run_simulation(SimConfig(s, 200_000, seed=1))
    exact = oracle.exact_metrics(oracle.TinySystem(s, 2))
    c = rep.classes[0]
    assert abs(c.throughput - exact.throughput[0]) < 4 * c.throughput_se
    assert exact.throughput[0] == pytest.approx(0.375, abs=1e-12)     # (0.5 + 0.25) / 2


def test_phy_outcome_pool_mode():
    pool = np.zeros((3, 1000), dtype=bool)
    pool[1, :800] = True
    pool[2, :500] = True
    s = two_class(3, 3, (1.0, 1.0), (0.1, 0.1), (0.8, 0.5), kappa=2)
    rep = run_simulation(SimConfig(s, 400_000, seed=1, outcome_pool=pool))
    assert rep.aggregate_throughput == pytest.approx(mf.saturated_throughput(s), rel=0.03)


def test_low_delivery_warning():
    rep = run_simulation(SimConfig(two_class(2, 2, (1e-4, 1e-4), (0.5, 0.5), HIGH_Q), 20_000))
    assert rep.warnings


@pytest.mark.parametrize("kw", [dict(horizon=10, warmup=100), dict(horizon=100, warmup=100),
                                dict(horizon=1000, buffer_cap=0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        run_simulation(SimConfig(two_class(1, 1, (0.1, 0.1), (0.5, 0.5), HIGH_Q), **kw))


def test_limiting_scenario_rejected():
    with pytest.raises(ConfigError):
        run_simulation(SimConfig(two_class(1, 1, (0.1, 0.1), (0.5, 0.5), HIGH_Q).to_limiting(),
                                 1000))


def test_trace_file(tmp_path):
    s = two_class(2, 2, (0.05, 0.05), (0.3, 0.3), HIGH_Q, kappa=2)
    rep = run_simulation(SimConfig(s, 5000, seed=1, trace=True))
    path = tmp_path / "trace.csv"
    write_trace(path, rep.trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "slot_index,state,attempts,decoded,total_backlog"
    assert len(lines) == len(rep.trace) + 1
    assert {l.split(",")[1] for l in lines[1:]} <= {"IDLE", "BUSY"}


class TestBimodality:
    def test_constant_trace(self):
        assert not detect_bimodality(np.full(100, 3)).bimodal

    def test_stable_regime(self):
        s = two_class(6, 4, (0.004, 0.006), (0.1, 0.15), SCF_6DB_Q, kappa=5)
        rep = run_simulation(SimConfig(s, 500_000, seed=2, trace=True))
        assert not detect_bimodality(rep.trace).bimodal

    def test_two_separated_modes(self):
        x = np.concatenate([np.full(500, 2), np.full(400, 30), np.arange(3, 30)])
        assert detect_bimodality(x).bimodal

    def test_bistable_regime_histogram(self):
        n = 20
        s = two_class(10, 10, (0.1136 / n, 0.48 / n), (1.0 / n, 3.0 / n), (1.0,), kappa=1)
        assert mf.solve_equilibrium(s).state == mf.State.BISTABLE
        rep = run_simulation(SimConfig(s, 1_000_000, seed=1, trace=True))
        summary = detect_bimodality(rep.trace)
        assert summary.counts.sum() == len(rep.trace)
