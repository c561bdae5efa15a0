"""Mean-field throughput analysis of inhomogeneous persistent CSMA with MPR.

Finite-N expressions treat the per-user transmit events in a super slot as
independent Bernoulli(rho_u p_u) draws.  The limiting expressions replace the
binomial counts by Poisson counts with total mean ``gamma = sum_u beta_u
p~_u rho_u``, which collapses every class onto the scalar rate function

    f(gamma) = gamma chi(gamma) e^-gamma / (e^-gamma + tau (1 - e^-gamma)).
"""
from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .errors import NoConvergenceError, NonUnimodalError
from .model import (FINITE, AllOrNothingMpr, GeneralSymmetricMpr, Scenario,
                    chi, chi_prime, unimodality_condition_holds)

log = logging.getLogger(__name__)

GAMMA_XTOL = 1e-13
MAX_BISECT = 200
TIE_TOL = 1e-12
RHO_SLACK = 1e-9
FALLBACK_GRID = 100_000
INV_PHI = (math.sqrt(5) - 1) / 2


class State(str, enum.Enum):
    STABLE = "STABLE"
    BISTABLE = "BISTABLE"
    UNSTABLE = "UNSTABLE"


@dataclass(frozen=True)
class EquilibriumResult:
    state: State
    gamma_roots: tuple[float, ...]
    rho_solutions: tuple[np.ndarray, ...]
    lambda_total: float
    gamma_star: float
    lambda_0: float
    gamma_0: float
    f_max: float
    multimodal: bool = False

    @property
    def rho(self) -> np.ndarray | None:
        """The unique utilization vector when STABLE, else None."""
        return self.rho_solutions[0] if self.state == State.STABLE else None

    def to_record(self) -> dict:
        rec = {
            "state": self.state.value,
            "lambda_total": self.lambda_total,
            "lambda_0": self.lambda_0,
            "gamma_0": self.gamma_0,
            "gamma_star": self.gamma_star,
            "f_max": self.f_max,
            "multimodal": self.multimodal,
        }
        for i, g in enumerate(self.gamma_roots):
            rec[f"gamma_root_{i + 1}"] = g
        for i, rho in enumerate(self.rho_solutions):
            for v, r in enumerate(rho):
                rec[f"rho_{i + 1}_class{v + 1}"] = float(r)
        return rec


# -- the rate function -------------------------------------------------------

def _denominator(tau, gamma):
    e = np.exp(-gamma)
    return e + tau * (1.0 - e)


def f_gamma(m, tau: int, gamma):
    """Limiting total throughput gamma chi(gamma) e^-gamma / (e^-gamma + tau(1-e^-gamma))."""
    g = np.asarray(gamma, dtype=float)
    out = g * chi(m, g) * np.exp(-g) / _denominator(tau, g)
    return out if np.ndim(out) else float(out)


def _df_sign_term(m, tau, gamma):
    # f'(gamma) = e^-gamma * this / den^2, so the sign of f' is the sign of this
    c, dc = chi(m, gamma), chi_prime(m, gamma)
    e = math.exp(-gamma)
    return (c + gamma * dc - gamma * c) * _denominator(tau, gamma) \
        - gamma * c * (tau - 1) * e


def _bisect(g, a, b, xtol=GAMMA_XTOL, maxiter=MAX_BISECT):
    """Root of g on [a, b] given g(a), g(b) of opposite sign (or zero)."""
    ga, gb = g(a), g(b)
    if ga == 0:
        return a
    if gb == 0:
        return b
    if (ga > 0) == (gb > 0):
        raise ValueError(f"no sign change on [{a}, {b}]")
    for _ in range(maxiter):
        mid = 0.5 * (a + b)
        if b - a <= xtol or mid == a or mid == b:
            return mid
        gm = g(mid)
        if gm == 0:
            return mid
        if (gm > 0) == (ga > 0):
            a, ga = mid, gm
        else:
            b = mid
    raise NoConvergenceError(
        f"bisection did not reach xtol={xtol} within {maxiter} iterations")


def golden_section_max(fun, a, b, tol=1e-7):
    """Bracket [a', b'] of width <= tol around the maximizer of a unimodal fun."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = fun(d)
    return a, b


def default_gamma_max(m) -> float:
    # f peaks no later than gamma chi(gamma) e^-gamma does, which is at most M
    return float(m.effective().M) + 1.0


def find_gamma_star(m, tau: int, gamma_max: float | None = None,
                    allow_fallback: bool = False) -> tuple[float, float]:
    """Maximizer of f on [0, gamma_max] and the maximum value.

    Golden-section search narrows the bracket; the derivative sign is then
    bisected so the maximizer is located well below the resolution that value
    comparisons alone can reach on a flat peak.
    """
    m = m.effective()
    if gamma_max is None:
        gamma_max = default_gamma_max(m)
    if max(m.q) <= 0.0:
        return 0.0, 0.0
    fun = lambda g: f_gamma(m, tau, g)
    if not unimodality_condition_holds(m):
        if not allow_fallback:
            raise NonUnimodalError(
                f"q={m.q} violates q_1 <= 2q_2 <= ... <= Mq_M; "
                "pass allow_fallback=True for a grid scan")
        grid = np.linspace(0.0, gamma_max, FALLBACK_GRID + 1)
        i = int(np.argmax(f_gamma(m, tau, grid)))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        a, b = golden_section_max(fun, lo, hi, tol=1e-12)
        gs = 0.5 * (a + b)
        return gs, fun(gs)
    a, b = golden_section_max(fun, 0.0, gamma_max)
    dsign = lambda g: _df_sign_term(m, tau, g)
    lo, hi = max(a - 1e-6, 0.0), min(b + 1e-6, gamma_max)
    if lo == 0.0:
        lo = min(1e-12, hi / 2)
    if dsign(lo) > 0 > dsign(hi):
        gs = _bisect(dsign, lo, hi, xtol=1e-14)
    else:
        gs = 0.5 * (a + b)
    return gs, fun(gs)


def lower_root(m, tau, lam, gamma_star, gamma_lo=0.0):
    """Root of f(gamma) = lam on the increasing branch [0, gamma_star]."""
    return _bisect(lambda g: f_gamma(m, tau, g) - lam, gamma_lo, gamma_star)


def upper_root(m, tau, lam, gamma_star, gamma_hi):
    """Root of f(gamma) = lam on the decreasing branch [gamma_star, gamma_hi]."""
    return _bisect(lambda g: f_gamma(m, tau, g) - lam, gamma_star, gamma_hi)


# -- finite-N expressions ------------------------------------------------------

def _require_finite(s: Scenario):
    if s.mode != FINITE:
        raise ValueError("finite-N expression needs a finite-mode scenario")


def _attempt_probs(s: Scenario, rho) -> np.ndarray:
    return np.clip(np.asarray(rho, dtype=float) * s.tx_probs, 0.0, 1.0)


def p_idle_finite(s: Scenario, rho) -> float:
    """Probability that a super slot is idle: prod_u (1 - rho_u p_u)^N_u."""
    _require_finite(s)
    x = _attempt_probs(s, rho)
    return float(np.prod((1.0 - x) ** s.counts))


def _count_pmfs(s: Scenario, x, M, exclude=None):
    pmfs = []
    for u, (n, xu) in enumerate(zip(s.counts, x)):
        n = int(n) - (1 if u == exclude else 0)
        k = np.arange(0, min(n, M) + 1)
        pmfs.append(binom.pmf(k, n, xu) if n > 0 else np.ones(1))
    return pmfs


def p_succ_finite(s: Scenario, rho, v: int) -> float:
    """Expected packets of one class-v user decoded per super slot.

    Direct sum over the per-class transmitter counts (n_1..n_V) with
    sum n_u <= M; general MPR laws enter through their per-packet success
    probability.
    """
    _require_finite(s)
    m = s.mpr.effective()
    x = _attempt_probs(s, rho)
    pmfs = _count_pmfs(s, x, m.M)
    Nv = s.counts[v]
    if Nv == 0:
        return 0.0
    total = 0.0
    for n in itertools.product(*(range(len(p)) for p in pmfs)):
        L = sum(n)
        if L == 0 or L > m.M or n[v] == 0:
            continue
        w = 1.0
        for u, nu in enumerate(n):
            w *= pmfs[u][nu]
        total += n[v] / Nv * m.q_at(L) * w
    return float(total)


def success_given_backlogged(s: Scenario, rho, v: int) -> float:
    """Per-super-slot success probability of a backlogged class-v user, P_v / rho_v.

    Computed from the tagged user's own attempt times the law of the number of
    other transmitters, so it stays defined at rho_v = 0.
    """
    _require_finite(s)
    m = s.mpr.effective()
    x = _attempt_probs(s, rho)
    dist = np.ones(1)
    for pmf in _count_pmfs(s, x, m.M - 1, exclude=v):
        dist = np.convolve(dist, pmf)[:m.M]
    q = np.array([m.q_at(1 + k) for k in range(len(dist))])
    return float(s.tx_probs[v] * np.dot(dist, q))


def mean_superslot_length(s: Scenario, rho) -> float:
    pi = p_idle_finite(s, rho)
    return pi + s.tau * (1.0 - pi)


def throughput_finite(s: Scenario, rho, v: int) -> float:
    """Per-user class-v throughput (packets per slot) for an N-user system."""
    return p_succ_finite(s, rho, v) / mean_superslot_length(s, rho)


def aggregate_throughput(s: Scenario, rho=None) -> float:
    """Network throughput sum_v N_v R_v(rho); ``rho=None`` gives the saturated value."""
    _require_finite(s)
    if rho is None:
        rho = np.ones(s.V)
    return float(sum(s.counts[v] * throughput_finite(s, rho, v)
                     for v in range(s.V)))


def saturated_throughput(s: Scenario) -> float:
    return aggregate_throughput(s, np.ones(s.V))


# -- limiting expressions --------------------------------------------------------

def gamma_of_rho(s: Scenario, rho) -> float:
    s = s.to_limiting()
    return float(np.dot(s.betas * s.p_tilde, rho))


def service_rate(s: Scenario, gamma: float, v: int) -> float:
    """Service rate mu_v(gamma) of the class-v queue in the limiting system."""
    s = s.to_limiting()
    m = s.mpr.effective()
    return float(s.p_tilde[v] * chi(m, gamma) * math.exp(-gamma)
                 / _denominator(s.tau, gamma))


def throughput_limiting(s: Scenario, rho, v: int) -> float:
    """Normalized class-v throughput lim N R_v = rho_v mu_v(gamma(rho))."""
    s = s.to_limiting()
    rho = np.asarray(rho, dtype=float)
    return float(rho[v]) * service_rate(s, gamma_of_rho(s, rho), v)


def throughput_general_mpr(s: Scenario, rho, v: int) -> float:
    """Normalized class-v throughput for a general symmetric MPR law.

    Sums over transmitter compositions (n_1..n_V) with Poisson weights and,
    for each number k of decoded packets, over the class composition of the
    decoded set with multivariate hypergeometric weights (uniform choice of
    the k decoded packets among the L transmitters).
    """
    s = s.to_limiting()
    m = s.mpr
    if isinstance(m, AllOrNothingMpr):
        m = GeneralSymmetricMpr.from_all_or_nothing(m)
    rho = np.asarray(rho, dtype=float)
    beta = s.betas
    g_u = beta * s.p_tilde * rho
    gamma = float(g_u.sum())
    if beta[v] == 0:
        return 0.0
    total = 0.0
    for n in itertools.product(range(m.M + 1), repeat=s.V):
        L = sum(n)
        if L == 0 or L > m.M or n[v] == 0:
            continue
        weight = 1.0
        for u, nu in enumerate(n):
            weight *= g_u[u] ** nu / math.factorial(nu)
        rbar = 0.0
        for k in range(1, L + 1):
            qk = m.q_at(k, L)
            if qk == 0.0:
                continue
            for kk in itertools.product(*(range(nu + 1) for nu in n)):
                if sum(kk) != k:
                    continue
                hyper = math.prod(math.comb(nu, ku) for nu, ku in zip(n, kk)) \
                    / math.comb(L, k)
                rbar += kk[v] * qk * hyper
        total += weight * rbar / beta[v]
    return float(math.exp(-gamma) * total / _denominator(s.tau, gamma))


# -- equilibrium (the three-region procedure) ---------------------------------

def _rho_at(s: Scenario, gamma: float) -> np.ndarray:
    lt = s.lambda_tilde
    rho = np.zeros(s.V)
    for v in range(s.V):
        if lt[v] == 0:
            continue
        mu = service_rate(s, gamma, v)
        rho[v] = lt[v] / mu if mu > 0 else math.inf
    return rho


def _valid(rho: np.ndarray) -> bool:
    return bool(np.all(rho < 1.0 - RHO_SLACK))


def solve_equilibrium(s: Scenario, allow_fallback: bool = False) -> EquilibriumResult:
    """Classify the arrival vector as STABLE / BISTABLE / UNSTABLE and return rho*.

    Finite-mode scenarios are first mapped to the limiting scale
    (lambda~ = N lambda, p~ = N p).
    """
    s = s.to_limiting()
    m = s.mpr.effective()
    tau = s.tau
    beta = s.betas
    lam = float(np.dot(beta, s.lambda_tilde))
    gamma0 = float(np.dot(beta, s.p_tilde))
    lam0 = f_gamma(m, tau, gamma0)
    multimodal = not unimodality_condition_holds(m)
    gmax = max(default_gamma_max(m), gamma0)
    gstar, fmax = find_gamma_star(m, tau, gmax, allow_fallback=allow_fallback)

    def result(state, roots=(), rhos=()):
        return EquilibriumResult(state, tuple(float(g) for g in roots), tuple(rhos),
                                 lam, gstar, lam0, gamma0, fmax, multimodal)

    if lam == 0.0:
        return result(State.STABLE, (0.0,), (np.zeros(s.V),))
    if multimodal:
        return _solve_by_scan(s, m, lam, result)

    if lam < lam0 - TIE_TOL:
        g = lower_root(m, tau, lam, min(gamma0, gstar))
        rho = _rho_at(s, g)
        if _valid(rho):
            return result(State.STABLE, (g,), (rho,))
        # the only admissible root puts some class beyond saturation
        return result(State.UNSTABLE, (g,))
    if gamma0 > gstar and lam <= fmax + TIE_TOL:
        lam_eff = min(lam, fmax)
        g_lo = lower_root(m, tau, lam_eff, gstar)
        g_hi = upper_root(m, tau, lam_eff, gstar, gamma0)
        rho1, rho2 = _rho_at(s, g_lo), _rho_at(s, g_hi)
        ok1, ok2 = _valid(rho1), _valid(rho2)
        if ok1 and ok2:
            return result(State.BISTABLE, (g_lo, g_hi), (rho1, rho2))
        if ok1:
            return result(State.STABLE, (g_lo,), (rho1,))
        if ok2:
            return result(State.STABLE, (g_hi,), (rho2,))
        return result(State.UNSTABLE, (g_lo, g_hi))
    return result(State.UNSTABLE)


def _solve_by_scan(s, m, lam, result):
    gamma0 = float(np.dot(s.betas, s.p_tilde))
    grid = np.linspace(0.0, gamma0, FALLBACK_GRID + 1)
    h = f_gamma(m, s.tau, grid) - lam
    roots = []
    fun = lambda g: f_gamma(m, s.tau, g) - lam
    for i in np.nonzero(np.sign(h[:-1]) * np.sign(h[1:]) <= 0)[0]:
        if h[i] == 0 and i > 0:
            continue
        roots.append(_bisect(fun, grid[i], grid[i + 1]))
    rhos = [(g, _rho_at(s, g)) for g in roots]
    valid = [(g, r) for g, r in rhos if _valid(r)]
    log.warning("rate function not certified unimodal; used grid scan "
                "(%d crossings, %d valid)", len(roots), len(valid))
    if not valid:
        return result(State.UNSTABLE, roots)
    state = State.STABLE if len(valid) == 1 else State.BISTABLE
    return result(state, [g for g, _ in valid], [r for _, r in valid])


def stability_region_contains(s: Scenario, lambda_tilde, allow_fallback: bool = False) -> bool:
    """Membership of lambda~ in the limiting stability region (unique valid rho)."""
    s = s.to_limiting().with_arrival_rates(lambda_tilde)
    return solve_equilibrium(s, allow_fallback).state == State.STABLE


def stability_boundary(s: Scenario, direction, rtol: float = 1e-10,
                       allow_fallback: bool = False) -> float:
    """Largest r such that r * direction (limiting scale) is in the stability region."""
    direction = np.asarray(direction, dtype=float)
    inside = lambda r: stability_region_contains(s, r * direction, allow_fallback)
    lo, hi = 0.0, 1.0
    while inside(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    return lo


# -- finite-N fixed point (cross-check oracle) ---------------------------------

@dataclass
class FiniteFixedPoint:
    rho: np.ndarray
    iterations: int
    residual: float
    saturated: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def solve_finite_fixed_point(s: Scenario, damping: float = 0.5, tol: float = 1e-12,
                             max_iter: int = 10_000) -> FiniteFixedPoint:
    """Damped iteration rho <- lambda_v / (R_v(rho) / rho_v) starting from rho = 0.

    Starting from zero the undamped map is monotone, so the iteration climbs to
    the smallest fixed point.  Classes whose update exceeds one are pinned at
    one and reported as saturated.
    """
    _require_finite(s)
    lam = s.arrival_rates
    rho = np.zeros(s.V)
    for it in range(1, max_iter + 1):
        T = mean_superslot_length(s, rho)
        new = np.zeros(s.V)
        for v in range(s.V):
            if lam[v] == 0:
                continue
            ps = success_given_backlogged(s, rho, v)
            new[v] = lam[v] * T / ps if ps > 0 else math.inf
        new = np.minimum(new, 1.0)
        nxt = damping * rho + (1.0 - damping) * new
        step = float(np.max(np.abs(nxt - rho)))
        rho = nxt
        if step <= tol:
            res = finite_fixed_point_residual(s, rho)
            return FiniteFixedPoint(rho, it, res, rho >= 1.0 - RHO_SLACK)
    raise NoConvergenceError(
        f"finite fixed point did not converge in {max_iter} iterations")


def finite_fixed_point_residual(s: Scenario, rho) -> float:
    lam = s.arrival_rates
    return float(max(abs(lam[v] - throughput_finite(s, rho, v)) for v in range(s.V)))


def limiting_residual(s: Scenario, rho) -> float:
    """max_v |lambda~_v - rho_v mu_v(gamma(rho))|."""
    s = s.to_limiting()
    lt = s.lambda_tilde
    return float(max(abs(lt[v] - throughput_limiting(s, rho, v)) for v in range(s.V)))
