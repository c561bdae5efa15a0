import math

import numpy as np
import pytest

from csma_mpr import meanfield as mf
from csma_mpr.errors import NonUnimodalError
from csma_mpr.model import AllOrNothingMpr, ClassSpec, GeneralSymmetricMpr, Scenario

from conftest import HIGH_Q, limiting, two_class

# Frozen by tests/oracles/derive_expected.py (50-digit evaluation / dense grid + golden section)
F_HIGH_Q_AT_HALF = 0.093826638495670529063
GAMMA_STAR_COLLISION_TAU10 = 0.3916587152665681
GAMMA_STAR_HIGH_Q_TAU10 = 0.9723354033754107
P_IDLE_EXAMPLE = 0.27068940120364715064
P_SUCC_EXAMPLE = 0.17459999999999999707
GENERAL_ONE_OF_TWO = 0.084587799280274629566
ALOHA_ROOTS = (0.489402227180215, 1.781337023421628)


class TestRateFunction:
    def test_zero(self):
        assert mf.f_gamma(AllOrNothingMpr(HIGH_Q), 10, 0.0) == 0.0

    def test_slotted_aloha(self):
        assert mf.f_gamma(AllOrNothingMpr((1.0,)), 1, 1.0) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_high_precision_value(self):
        assert mf.f_gamma(AllOrNothingMpr(HIGH_Q), 10, 0.5) == pytest.approx(F_HIGH_Q_AT_HALF,
                                                                            rel=1e-14)

    def test_vectorized(self):
        g = np.linspace(0, 3, 7)
        m = AllOrNothingMpr(HIGH_Q)
        assert np.allclose(mf.f_gamma(m, 10, g), [mf.f_gamma(m, 10, x) for x in g], rtol=0)


class TestGammaStar:
    def test_calculus_identity(self):
        g, fmax = mf.find_gamma_star(AllOrNothingMpr((1.0,)), 1)
        assert g == pytest.approx(1.0, abs=1e-10)
        assert fmax == pytest.approx(math.exp(-1), rel=1e-15)

    @pytest.mark.parametrize("q, expected", [((1.0,), GAMMA_STAR_COLLISION_TAU10),
                                             (HIGH_Q, GAMMA_STAR_HIGH_Q_TAU10)])
    def test_against_grid_oracle(self, q, expected):
        g, _ = mf.find_gamma_star(AllOrNothingMpr(q), 10)
        assert g == pytest.approx(expected, abs=1e-10)

    def test_non_unimodal_requires_opt_in(self):
        m = AllOrNothingMpr((1.0, 0.4, 0.1))
        with pytest.raises(NonUnimodalError):
            mf.find_gamma_star(m, 5)
        g, fmax = mf.find_gamma_star(m, 5, allow_fallback=True)
        grid = np.linspace(0, 4, 400_001)
        assert fmax == pytest.approx(mf.f_gamma(m, 5, grid).max(), rel=1e-9)


class TestFiniteExpressions:
    def test_p_idle_empty(self):
        s = two_class(10, 10, (0, 0), (0.05, 0.2), HIGH_Q)
        assert mf.p_idle_finite(s, [0, 0]) == 1.0

    def test_p_idle_single_saturated(self):
        s = Scenario([ClassSpec(1.0, 1.0, 1)], AllOrNothingMpr((1.0,)))
        assert mf.p_idle_finite(s, [1.0]) == 0.0

    def test_p_idle_product(self):
        s = two_class(10, 10, (0, 0), (0.05, 0.2), HIGH_Q)
        assert mf.p_idle_finite(s, [0.5, 0.5]) == pytest.approx(P_IDLE_EXAMPLE, rel=1e-14)

    def test_p_succ_single_user(self):
        s = Scenario([ClassSpec(0.1, 0.37, 1)], AllOrNothingMpr((1.0,)))
        assert mf.p_succ_finite(s, [1.0], 0) == pytest.approx(0.37, rel=1e-15)

    def test_p_succ_zero_rho(self):
        s = two_class(3, 4, (0, 0), (0.5, 0.5), HIGH_Q)
        assert mf.p_succ_finite(s, [0, 0], 0) == 0.0

    def test_p_succ_bruteforce(self):
        s = two_class(2, 2, (0, 0), (1.0, 1.0), (0.9, 0.8), kappa=1)
        assert mf.p_succ_finite(s, [0.3, 0.4], 0) == pytest.approx(P_SUCC_EXAMPLE, rel=1e-14)

    def test_throughput_zero(self):
        s = two_class(10, 10, (0.1, 0.1), (0.05, 0.2), HIGH_Q)
        assert mf.throughput_finite(s, [0, 0], 0) == 0.0

    def test_single_user_aloha(self):
        s = Scenario([ClassSpec(0.5, 0.42, 1)], AllOrNothingMpr((1.0,)), kappa=1)
        assert mf.throughput_finite(s, [1.0], 0) == pytest.approx(0.42, rel=1e-15)

    def test_aggregate_saturated(self, saturated_pair):
        s = saturated_pair(0.1)
        direct = sum(s.counts[v] * mf.throughput_finite(s, [1, 1], v) for v in range(2))
        assert mf.saturated_throughput(s) == pytest.approx(direct, rel=1e-15)
        assert mf.aggregate_throughput(s, [0, 0]) == 0.0


class TestLimiting:
    def test_zero(self):
        s = limiting((0.5, 0.5), (0.1, 0.1), (1.0, 2.0), HIGH_Q)
        assert mf.throughput_limiting(s, [0, 0], 0) == 0.0

    def test_aloha_peak(self):
        s = limiting((1.0,), (0.1,), (1.0,), (1.0,), tau=1)
        assert mf.throughput_limiting(s, [1.0], 0) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_service_rate_at_zero(self):
        s = limiting((0.5, 0.5), (0.1, 0.1), (1.5, 2.0), HIGH_Q)
        assert mf.service_rate(s, 0.0, 1) == pytest.approx(2.0 * 0.96, rel=1e-15)

    def test_service_rate_collision(self):
        s = limiting((1.0,), (0.1,), (1.7,), (1.0,), tau=1)
        assert mf.service_rate(s, 0.8, 0) == pytest.approx(1.7 * math.exp(-0.8), rel=1e-15)

    def test_throughput_is_rho_times_service_rate(self, rng):
        s = limiting((0.3, 0.7), (0.1, 0.1), (0.9, 1.4), (0.9, 0.7, 0.6))
        for _ in range(20):
            rho = rng.uniform(0, 1, 2)
            g = mf.gamma_of_rho(s, rho)
            for v in range(2):
                assert mf.throughput_limiting(s, rho, v) == pytest.approx(
                    rho[v] * mf.service_rate(s, g, v), rel=1e-14)

    def test_collision_channel_form(self, rng):
        s = limiting((0.4, 0.6), (0.1, 0.1), (2.0, 0.5), (1.0,), tau=7)
        rho = rng.uniform(0, 1, 2)
        g = mf.gamma_of_rho(s, rho)
        classic = g * math.exp(-g) / (math.exp(-g) + 7 * (1 - math.exp(-g)))
        assert mf.throughput_limiting(s, rho, 0) == pytest.approx(classic * rho[0] * 2.0 / g,
                                                                  rel=1e-14)

    @pytest.mark.parametrize("N", [100, 1000, 10_000])
    def test_finite_converges_to_limit(self, N):
        lim = limiting((0.5, 0.5), (0.0, 0.0), (5 / 6, 7 / 6), HIGH_Q)
        fin = two_class(N // 2, N // 2, (0, 0), (5 / (6 * N), 7 / (6 * N)), HIGH_Q)
        rho = [0.7, 0.4]
        for v in range(2):
            a, b = N * fin.betas[v] * mf.throughput_finite(fin, rho, v) / fin.betas[v], \
                mf.throughput_limiting(lim, rho, v)
            assert abs(a - b) / b < 5.0 / N

    def test_general_embedding(self, rng):
        q = (0.9, 0.7, 0.5)
        s = limiting((0.5, 0.5), (0.1, 0.1), (1.0, 2.0), q)
        g = Scenario(s.classes, GeneralSymmetricMpr.from_all_or_nothing(s.mpr), kappa=10,
                     tau=10, mode="limiting")
        rho = rng.uniform(0, 1, 2)
        for v in range(2):
            assert mf.throughput_general_mpr(g, rho, v) == pytest.approx(
                mf.throughput_limiting(s, rho, v), rel=1e-12)

    def test_general_one_of_two(self):
        mpr = GeneralSymmetricMpr.from_flat([1.0, 1.0, 0.0])
        s = Scenario([ClassSpec(0, 1, fraction=0.5), ClassSpec(0, 2, fraction=0.5)], mpr,
                     kappa=10, mode="limiting")
        assert mf.throughput_general_mpr(s, [0.6, 0.3], 0) == pytest.approx(GENERAL_ONE_OF_TWO,
                                                                          rel=1e-13)
        assert mf.throughput_general_mpr(s, [0, 0], 0) == 0.0


class TestEquilibrium:
    def test_zero_traffic(self):
        r = mf.solve_equilibrium(limiting((0.5, 0.5), (0, 0), (1, 2), HIGH_Q))
        assert r.state == mf.State.STABLE and np.all(r.rho == 0)

    def test_aloha_two_roots(self):
        s = limiting((1.0,), (0.3,), (2.0,), (1.0,), tau=1)
        r = mf.solve_equilibrium(s)
        assert r.lambda_0 == pytest.approx(2 * math.exp(-2)) and r.lambda_total > r.lambda_0
        assert r.state == mf.State.BISTABLE
        assert r.gamma_roots == pytest.approx(ALOHA_ROOTS, abs=1e-10)
        assert r.rho_solutions[0][0] == pytest.approx(ALOHA_ROOTS[0] / 2, abs=1e-10)
        assert r.rho_solutions[1][0] == pytest.approx(ALOHA_ROOTS[1] / 2, abs=1e-10)

    def test_below_lambda0_is_stable(self):
        s = limiting((1.0,), (0.3,), (1.7,), (1.0,), tau=1)
        r = mf.solve_equilibrium(s)
        assert r.lambda_total < r.lambda_0 and r.state == mf.State.STABLE
        assert r.gamma_roots[0] == pytest.approx(ALOHA_ROOTS[0], abs=1e-10)

    def test_upper_root_invalid_gives_stable(self):
        # two roots exist but the slow class overflows at the upper one
        s = limiting((0.5, 0.5), (0.62, 0.08), (3.0, 0.2), (1.0,), tau=1)
        r = mf.solve_equilibrium(s)
        assert r.lambda_total > r.lambda_0 and r.gamma_0 > r.gamma_star
        assert r.state == mf.State.STABLE and len(r.gamma_roots) == 1
        assert np.all(r.rho < 1) and mf.limiting_residual(s, r.rho) <= 1e-9

    def test_above_peak_is_unstable(self):
        s = limiting((1.0,), (0.4,), (2.0,), (1.0,), tau=1)
        r = mf.solve_equilibrium(s)
        assert r.state == mf.State.UNSTABLE and r.rho is None and r.rho_solutions == ()

    def test_scaled_matches_finite_fixed_point(self):
        n = 2000
        fin = two_class(n // 2, n // 2, (0.002 / 100, 0.002 / 100), (0.05 / 100, 0.2 / 100),
                        HIGH_Q)
        r = mf.solve_equilibrium(fin)
        assert r.state == mf.State.STABLE
        fp = mf.solve_finite_fixed_point(fin)
        assert r.rho == pytest.approx(fp.rho, rel=2e-3)
        small = two_class(10, 10, (0.002, 0.002), (0.05, 0.2), HIGH_Q)
        assert mf.solve_equilibrium(small).rho == pytest.approx(
            mf.solve_finite_fixed_point(small).rho, rel=0.05)

    def test_residual_and_root_ordering(self):
        s = limiting((0.6, 0.4), (0.09, 0.12), (1.6, 3.5), (0.9, 0.8, 0.75), tau=5)
        r = mf.solve_equilibrium(s)
        for rho in r.rho_solutions:
            assert mf.limiting_residual(s, rho) <= 1e-9
        if len(r.gamma_roots) == 2:
            assert r.gamma_roots[0] <= r.gamma_star <= r.gamma_roots[1]

    def test_record_is_flat(self):
        rec = mf.solve_equilibrium(limiting((1.0,), (0.3,), (2.0,), (1.0,), tau=1)).to_record()
        assert rec["state"] == "BISTABLE" and "rho_2_class1" in rec and "gamma_root_2" in rec


class TestStabilityRegion:
    def test_origin(self):
        s = limiting((0.5, 0.5), (0, 0), (1, 2), HIGH_Q)
        assert mf.stability_region_contains(s, [0.0, 0.0])

    def test_beyond_peak(self):
        s = limiting((0.5, 0.5), (0, 0), (1, 2), HIGH_Q)
        _, fmax = mf.find_gamma_star(s.mpr, s.tau)
        assert not mf.stability_region_contains(s, [2.1 * fmax, 2.1 * fmax])

    def test_ray_threshold_is_single(self):
        s = limiting((0.5, 0.5), (0, 0), (1, 2), HIGH_Q)
        edge = mf.stability_boundary(s, (1.0, 2.0))
        rs = np.linspace(0, 2 * edge, 401)
        inside = np.array([mf.stability_region_contains(s, r * np.array([1.0, 2.0])) for r in rs])
        flips = np.flatnonzero(inside[:-1] != inside[1:])
        assert len(flips) == 1
        assert rs[flips[0]] <= edge <= rs[flips[0] + 1]


class TestFiniteFixedPoint:
    def test_saturated_classes_pinned(self):
        s = two_class(12, 8, (0.5, 0.0005), (0.05, 0.25), HIGH_Q)
        fp = mf.solve_finite_fixed_point(s)
        assert fp.saturated.tolist() == [True, False] and fp.rho[0] == pytest.approx(1.0)
        assert abs(mf.throughput_finite(s, fp.rho, 1) - 0.0005) < 1e-10

    def test_residual(self):
        s = two_class(5, 7, (0.004, 0.002), (0.1, 0.05), (0.9, 0.8), kappa=5)
        fp = mf.solve_finite_fixed_point(s)
        assert fp.residual <= 1e-10
