"""Mean service delay, mean total delay and delay-driven transmit-probability design.

All delays are in slots.  ``rho`` is the vector of per-class utilizations at a
stable operating point; by default it comes from the limiting equilibrium
solver, but any vector (e.g. the finite-N fixed point) may be passed in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import meanfield as mf
from .errors import ConfigError, InfeasibleError, UnstableInputError, ZeroArrivalError
from .model import FINITE, Scenario


@dataclass(frozen=True)
class DelayReport:
    klass: int
    arrival_rate: float
    rho: float
    service_delay: float
    total_delay: float
    p_idle: float
    p_succ: float

    def to_record(self) -> dict:
        return {"class": self.klass + 1, "lambda": self.arrival_rate, "rho": self.rho,
                "service_delay": self.service_delay, "total_delay": self.total_delay,
                "p_idle": self.p_idle, "p_succ": self.p_succ}


def _check(s: Scenario, rho, v: int) -> np.ndarray:
    if s.mode != FINITE:
        raise ConfigError("delay formulas need a finite-mode scenario")
    rho = np.asarray(rho, dtype=float)
    if np.any(rho >= 1.0) or np.any(rho < 0.0):
        raise UnstableInputError(f"rho={rho.tolist()} is not a stable operating point")
    if s.arrival_rates[v] == 0.0:
        raise ZeroArrivalError(f"class {v + 1} has zero arrival rate")
    return rho


def service_delay(s: Scenario, rho, v: int) -> float:
    """Mean time from reaching the head of the queue to being decoded, rho_v / lambda_v."""
    rho = _check(s, rho, v)
    return float(rho[v] / s.arrival_rates[v])


def service_delay_recursive(s: Scenario, rho, v: int) -> float:
    """Same quantity as mean super-slot length over per-super-slot success probability.

    Equals ``service_delay`` whenever rho solves lambda_v = R_v(rho) for the
    finite-N throughput.
    """
    rho = _check(s, rho, v)
    ps = mf.success_given_backlogged(s, rho, v)
    if ps <= 0.0:
        return math.inf
    return mf.mean_superslot_length(s, rho) / ps


def total_delay(s: Scenario, rho, v: int) -> float:
    rho = _check(s, rho, v)
    lam = s.arrival_rates[v]
    tau = s.tau
    p_idle = mf.p_idle_finite(s, rho)
    num = rho[v] * (1.0 / lam - 1.0 / tau) + 0.5 * (tau - 1) * (1.0 - p_idle)
    return float(num / (1.0 - rho[v]))


def delay_report(s: Scenario, rho=None, allow_fallback: bool = False) -> list[DelayReport]:
    """Per-class delays; classes with zero arrivals are skipped."""
    if rho is None:
        eq = mf.solve_equilibrium(s, allow_fallback)
        if eq.state != mf.State.STABLE:
            raise UnstableInputError(f"arrival vector classified {eq.state.value}")
        rho = eq.rho
    rho = np.asarray(rho, dtype=float)
    p_idle = mf.p_idle_finite(s, rho)
    out = []
    for v in range(s.V):
        if s.arrival_rates[v] == 0.0:
            continue
        out.append(DelayReport(v, float(s.arrival_rates[v]), float(rho[v]),
                               service_delay(s, rho, v), total_delay(s, rho, v),
                               p_idle, mf.success_given_backlogged(s, rho, v)))
    return out


# -- design ------------------------------------------------------------------

@dataclass(frozen=True)
class DesignResult:
    attempt_rates: np.ndarray       # x*_v = rho_v p_v
    min_tx_probs: np.ndarray
    p_idle: float
    feasible: np.ndarray            # min_tx_probs[v] <= 1


def solve_attempt_rates(s: Scenario, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Per-user attempt probabilities x with lambda_v = R_v(x).

    R_v depends on rho and p only through x = rho p, so the fixed point is
    solved on a copy of the scenario with every p set to one.  The iteration
    x <- lambda E[len](x) / E[q_{1+L'}](x) starts at zero and climbs to the
    smallest solution; leaving [0, 1] means no solution exists.
    """
    if s.mode != FINITE:
        raise ConfigError("design needs a finite-mode scenario")
    lam = s.arrival_rates
    unit = s.with_tx_probs(np.ones(s.V))
    x = np.zeros(s.V)
    for _ in range(max_iter):
        T = mf.mean_superslot_length(unit, x)
        new = np.zeros(s.V)
        for v in range(s.V):
            if lam[v] == 0.0:
                continue
            eq = mf.success_given_backlogged(unit, x, v)
            new[v] = lam[v] * T / eq if eq > 0 else math.inf
        if np.any(new > 1.0):
            raise InfeasibleError(
                f"arrival rates {lam.tolist()} admit no attempt-rate fixed point")
        if np.max(np.abs(new - x)) <= tol:
            return new
        x = new
    raise InfeasibleError("attempt-rate iteration did not settle; "
                          "arrival rates are at or beyond the stability edge")


def design_tx_probs(s: Scenario, delay_targets, literal: bool = False) -> DesignResult:
    """Smallest per-class p meeting mean total-delay targets T_v (slots).

    With x* fixed, rho_v = x*_v / p_v and the total-delay expression (taken
    with tau = kappa) is at most T_v iff

        p_v >= x*_v (1/lambda_v - 1/kappa + T_v) / (T_v - c),
        c = (kappa - 1)/2 (1 - P_idle(x*)).

    ``literal=True`` uses ``T_v + c`` in the denominator instead, the form
    that appears in some write-ups; it gives a smaller, optimistic bound.
    An infinite target returns x*.
    """
    targets = np.asarray(delay_targets, dtype=float)
    if targets.shape != (s.V,) or np.any(targets <= 0):
        raise ConfigError(f"need {s.V} positive delay targets, got {delay_targets}")
    x = solve_attempt_rates(s)
    unit = s.with_tx_probs(np.ones(s.V))
    p_idle = mf.p_idle_finite(unit, x)
    kappa = s.kappa
    c = 0.5 * (kappa - 1) * (1.0 - p_idle)
    lam = s.arrival_rates
    p_min = np.zeros(s.V)
    for v in range(s.V):
        if lam[v] == 0.0:
            continue
        T = targets[v]
        if math.isinf(T):
            p_min[v] = x[v]
            continue
        den = T + c if literal else T - c
        if den <= 0:
            raise InfeasibleError(
                f"class {v + 1}: target {T} slots is below the contention floor {c:.4g}")
        p_min[v] = x[v] * (1.0 / lam[v] - 1.0 / kappa + T) / den
    return DesignResult(x, p_min, p_idle, p_min <= 1.0)
