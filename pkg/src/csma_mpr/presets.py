"""Parameter sweeps behind ``csma-mpr reproduce``.

Each preset returns named tables (lists of row dicts), typically an
``analytical`` table and a ``simulated`` table over the same grid, plus the
free parameter choices, which end up in the output manifest.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import delay, meanfield as mf, phy
from .model import AllOrNothingMpr, ClassSpec, Scenario
from .sim import SimConfig, run_simulation

PRESETS = ("fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10", "table1")
SWEEP_RATES = (0.005, 0.01, 0.02, 1.0)


def two_class(n1, n2, lam, p, q, kappa=10, tau=None) -> Scenario:
    return Scenario([ClassSpec(lam[0], p[0], n1), ClassSpec(lam[1], p[1], n2)],
                    AllOrNothingMpr(tuple(q)), kappa=kappa, tau=tau or kappa)


def decoder_q(snr_db, K, rate, samples, seed, workers=1) -> dict[str, tuple]:
    """q vectors per decoder (L = 1..K+1) plus single-user-only reception."""
    out = {}
    for d in phy.Decoder:
        cfg = phy.PhyConfig(snr_db, K, rate, d, samples, seed)
        out[d.value] = tuple(e.q for e in phy.estimate_q_vector(cfg, K + 1, workers))
    out["conventional"] = (out["SIC"][0],)
    return out


def _threads(workers):
    return ThreadPoolExecutor(max(1, workers))


def _simulate(s, horizon, seed):
    return run_simulation(SimConfig(s, horizon, seed=seed))


def _fixed_point_throughput(s):
    fp = mf.solve_finite_fixed_point(s)
    return fp, mf.aggregate_throughput(s, fp.rho)


def fig4(horizon, seed, workers, p1_grid=None, **_):
    q = (0.96, 0.89)
    p1_grid = p1_grid or [round(0.02 * k, 2) for k in range(1, 16)]
    jobs = [(lam, p1) for lam in SWEEP_RATES for p1 in p1_grid]
    ana, sims = [], []
    for lam, p1 in jobs:
        s = two_class(10, 10, (lam, lam), (p1, 0.2), q)
        fp, thr = _fixed_point_throughput(s)
        state = mf.solve_equilibrium(s, True).state.value if lam < 1 else "SATURATED"
        ana.append({"lambda": lam, "p1": p1, "aggregate_throughput": thr, "state": state})
    with _threads(workers) as pool:
        reps = list(pool.map(lambda j: _simulate(two_class(10, 10, (j[0], j[0]), (j[1], 0.2), q),
                                                 horizon, seed), jobs))
    for (lam, p1), r in zip(jobs, reps):
        sims.append({"lambda": lam, "p1": p1, "aggregate_throughput": r.aggregate_throughput,
                     "stderr": r.aggregate_throughput_se})
    notes = {"arrival_rates": "per-user lambda in {0.005, 0.01, 0.02} plus saturated (1.0), "
                              "chosen here"}
    return {"analytical": ana, "simulated": sims}, notes


def fig5(horizon, seed, workers, samples=20_000, n_grid=None, **_):
    n_grid = n_grid or [4, 8, 12, 16, 20, 24, 28, 32]
    qs = decoder_q(15.0, 2, 3.0, samples, seed, workers)
    ana, sims, jobs = [], [], []
    for name, q in qs.items():
        for n in n_grid:
            n1 = n // 2
            s = two_class(n1, n - n1, (0.0, 0.0), (5 / (6 * n), 7 / (6 * n)), q)
            r = mf.stability_boundary(s.to_limiting(), (1.0, 1.0), 1e-8, allow_fallback=True)
            ana.append({"decoder": name, "N": n, "max_aggregate_throughput": r})
            jobs.append((name, n, s.with_arrival_rates([0.95 * r / n] * 2)))
    with _threads(workers) as pool:
        reps = list(pool.map(lambda j: _simulate(j[2], horizon, seed), jobs))
    for (name, n, s), rep in zip(jobs, reps):
        sims.append({"decoder": name, "N": n, "offered": float(np.sum(s.counts * s.arrival_rates)),
                     "aggregate_throughput": rep.aggregate_throughput,
                     "stderr": rep.aggregate_throughput_se})
    notes = {"q_source": "phy estimates at 15 dB, R=3, K=2 (L<=K+1; q_L=0 beyond)",
             "classes": "N1 = N2 = N/2, equal per-user arrival rates",
             "simulated_point": "95% of the analytical boundary"}
    return {"analytical": ana, "simulated": sims, "q": _q_rows(qs)}, notes


def fig6(horizon, seed, workers, samples=20_000, p1_grid=None, **_):
    p1_grid = p1_grid or [round(0.05 * k, 2) for k in range(1, 21)]
    qs = decoder_q(6.0, 1, 1.0, samples, seed, workers)
    ana, jobs = [], []
    for name, q in qs.items():
        if name == "CF":
            continue
        for n in (5, 10):
            n1 = 3 * n // 5
            for p1 in p1_grid:
                s = two_class(n1, n - n1, (1.0, 1.0), (p1, 0.8 * p1), q)
                ana.append({"decoder": name, "N": n, "p1": p1,
                            "saturated_throughput": mf.saturated_throughput(s)})
                jobs.append((name, n, p1, s))
    with _threads(workers) as pool:
        reps = list(pool.map(lambda j: _simulate(j[3], horizon, seed), jobs))
    sims = [{"decoder": name, "N": n, "p1": p1, "saturated_throughput": r.aggregate_throughput,
             "stderr": r.aggregate_throughput_se} for (name, n, p1, _), r in zip(jobs, reps)]
    return {"analytical": ana, "simulated": sims, "q": _q_rows(qs)}, \
        {"q_source": "phy estimates at 6 dB, R=1, K=1"}


def fig7(horizon, seed, workers, samples=20_000, p1_grid=None, **_):
    p1_grid = p1_grid or [round(0.05 * k, 2) for k in range(1, 21)]
    qs = decoder_q(15.0, 1, 2.0, samples, seed, workers)
    ana, jobs = [], []
    for name, q in qs.items():
        for p1 in p1_grid:
            s = two_class(12, 8, (1 / 16, 1 / 64), (p1, 0.25), q)
            fp, thr = _fixed_point_throughput(s)
            ana.append({"decoder": name, "p1": p1, "aggregate_throughput": thr,
                        "saturated_classes": int(fp.saturated.sum())})
            jobs.append((name, p1, s))
    with _threads(workers) as pool:
        reps = list(pool.map(lambda j: _simulate(j[2], horizon, seed), jobs))
    sims = [{"decoder": name, "p1": p1, "aggregate_throughput": r.aggregate_throughput,
             "stderr": r.aggregate_throughput_se} for (name, p1, _), r in zip(jobs, reps)]
    return {"analytical": ana, "simulated": sims, "q": _q_rows(qs)}, \
        {"q_source": "phy estimates at 15 dB, R=2, K=1"}


def delay_sweep(snr_db, rate, horizon, seed, workers, samples=20_000, fractions=None):
    fractions = fractions or [0.1 * k for k in range(1, 10)]
    qs = decoder_q(snr_db, 1, rate, samples, seed, workers)
    ana, jobs = [], []
    for name, q in qs.items():
        base = two_class(20, 10, (0.0, 0.0), (1 / 40, 1 / 20), q)
        edge = mf.stability_boundary(base.to_limiting(), (1.0, 1.0), 1e-8,
                                     allow_fallback=True) / 30
        for frac in fractions:
            lam = frac * edge
            s = base.with_arrival_rates([lam, lam])
            for rep in delay.delay_report(s, allow_fallback=True):
                ana.append({"decoder": name, "lambda1": lam, "fraction_of_edge": frac,
                            **rep.to_record()})
            jobs.append((name, lam, frac, s))
    with _threads(workers) as pool:
        reps = list(pool.map(lambda j: _simulate(j[3], horizon, seed), jobs))
    sims = []
    for (name, lam, frac, _), r in zip(jobs, reps):
        for v, c in enumerate(r.classes):
            sims.append({"decoder": name, "lambda1": lam, "fraction_of_edge": frac,
                         "class": v + 1, "service_delay": c.mean_service_delay,
                         "service_delay_se": c.service_delay_se,
                         "total_delay": c.mean_total_delay, "total_delay_se": c.total_delay_se,
                         "utilization": c.utilization_hat})
    notes = {"arrival_rates": "lambda2 = lambda1, swept over fractions of the stability edge",
             "q_source": f"phy estimates at {snr_db} dB, R={rate}, K=1"}
    return {"analytical": ana, "simulated": sims, "q": _q_rows(qs)}, notes


def _q_rows(qs):
    return [{"decoder": name, **{f"q{L + 1}": v for L, v in enumerate(q)}}
            for name, q in qs.items()]


def run_preset(name, horizon=1_000_000, seed=1, workers=1, samples=20_000):
    if name == "table1":
        return {"q": phy.table1(samples, seed, workers=workers)}, {}
    if name == "fig4":
        return fig4(horizon, seed, workers)
    if name == "fig5":
        return fig5(horizon, seed, workers, samples)
    if name == "fig6":
        return fig6(horizon, seed, workers, samples)
    if name == "fig7":
        return fig7(horizon, seed, workers, samples)
    if name in ("fig8", "fig9"):
        return delay_sweep(6.0, 1.0, horizon, seed, workers, samples)
    if name == "fig10":
        return delay_sweep(15.0, 2.0, horizon, seed, workers, samples)
    raise KeyError(name)
