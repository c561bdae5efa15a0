"""Slot-level simulator of inhomogeneous persistent CSMA with symmetric MPR.

Time is slotted.  Each user receives a Bernoulli(lambda_v) arrival at the start
of every slot, busy slots included.  At the first slot of every super slot
each backlogged user transmits its head-of-line (HOL) packet with probability
p_v; no transmitter gives a one-slot idle super slot, otherwise the channel is
busy for tau slots and the decoded HOL packets leave at the end of the last
busy slot.

Arrival streams are generated from a counter-based hash of (seed, user,
packet index).  With unbounded buffers the queue is then fully described by
two cursors into the stream (next arrival, current HOL packet), so memory
stays O(N) even for saturated users.  With a finite buffer the arrival times
are kept in a ring buffer and arrivals to a full queue are dropped.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError
from .model import FINITE, GeneralSymmetricMpr, Scenario, validate_scenario

log = logging.getLogger(__name__)

NEVER = np.int64(2**62)
MIN_DELIVERED = 100


@dataclass(frozen=True)
class SimConfig:
    scenario: Scenario
    horizon: int
    warmup: int | None = None
    seed: int = 1
    trace: bool = False
    buffer_cap: int | None = None
    batches: int = 20
    outcome_pool: np.ndarray | None = field(default=None, repr=False)

    @property
    def warmup_slots(self) -> int:
        return self.horizon // 10 if self.warmup is None else self.warmup


@dataclass
class ClassStats:
    users: int
    packets_delivered: int
    throughput: float
    throughput_se: float
    utilization_hat: float
    utilization_se: float
    mean_service_delay: float
    service_delay_se: float
    mean_total_delay: float
    total_delay_se: float
    mean_backlog: float
    backlog_se: float
    arrivals: int
    departures: int
    dropped: int
    final_backlog: int


@dataclass
class SimReport:
    classes: list[ClassStats]
    fraction_idle_superslots: float
    attempt_histogram: np.ndarray
    measured_slots: int
    superslots: int
    seed: int
    aggregate_throughput_se: float = math.nan
    warnings: list[str] = field(default_factory=list)
    trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def aggregate_throughput(self) -> float:
        return sum(c.users * c.throughput for c in self.classes)

    def rows(self) -> list[dict]:
        out = []
        for v, c in enumerate(self.classes):
            row = {"class": v + 1, "seed": self.seed}
            row.update({k: getattr(c, k) for k in c.__dataclass_fields__})
            out.append(row)
        return out


TRACE_COLUMNS = ("slot_index", "state", "attempts", "decoded", "total_backlog")


# -- kernel -----------------------------------------------------------------------

@numba.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _uniform(seed, user, index):
    key = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) \
        + np.uint64(user) * np.uint64(0xD1B54A32D192ED03) + np.uint64(index)
    return (_mix(_mix(key)) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _gap(seed, user, index, lam):
    if lam >= 1.0:
        return np.int64(1)
    if lam <= 0.0:
        return NEVER
    u = _uniform(seed, user, index)
    return np.int64(1) + np.int64(math.floor(math.log1p(-u) / math.log1p(-lam)))


@numba.njit(cache=True, nogil=True)
def _kernel(user_class, lam, p, dec_cdf, tau, horizon, warmup, seed, cap,
            n_batches, want_trace, pool):
    n_users = user_class.shape[0]
    n_classes = np.max(user_class) + 1
    np.random.seed(seed)
    stream_seed = np.int64(seed) + np.int64(0x5DEECE66D)

    qlen = np.zeros(n_users, np.int64)
    next_arr = np.zeros(n_users, np.int64)
    arr_idx = np.zeros(n_users, np.int64)
    hol_time = np.zeros(n_users, np.int64)
    hol_idx = np.zeros(n_users, np.int64)
    last_dep = -np.ones(n_users, np.int64)
    ring_len = cap if cap > 0 else 1
    ring = np.zeros((n_users, ring_len), np.int64)
    head = np.zeros(n_users, np.int64)
    for u in range(n_users):
        g = _gap(stream_seed, u, 0, lam[u])
        next_arr[u] = g - 1 if g < NEVER else NEVER
        hol_time[u] = next_arr[u]

    arrivals = np.zeros(n_classes, np.int64)
    departures = np.zeros(n_classes, np.int64)
    dropped = np.zeros(n_classes, np.int64)

    b_slots = np.zeros(n_batches, np.int64)
    b_bound = np.zeros(n_batches, np.int64)
    b_dep = np.zeros((n_batches, n_classes), np.int64)
    b_tot = np.zeros((n_batches, n_classes))
    b_srv = np.zeros((n_batches, n_classes))
    b_nonempty = np.zeros((n_batches, n_classes), np.int64)
    b_backlog = np.zeros((n_batches, n_classes))
    hist = np.zeros(n_users + 1, np.int64)
    n_idle = 0
    n_super = 0
    trace = np.zeros((horizon if want_trace else 1, 5), np.int64)
    n_trace = 0
    pool_len = pool.shape[1]
    pool_pos = np.zeros(pool.shape[0], np.int64)

    tx = np.zeros(n_users, np.int64)
    chosen = np.zeros(n_users, np.int64)
    window = horizon - warmup
    t = np.int64(0)
    while t < horizon:
        measure = t >= warmup
        b = (t - warmup) * n_batches // window if measure else 0

        # arrivals in the boundary slot count towards this contention round
        for u in range(n_users):
            while next_arr[u] <= t:
                c = user_class[u]
                arrivals[c] += 1
                if cap > 0:
                    if qlen[u] < cap:
                        ring[u, (head[u] + qlen[u]) % cap] = next_arr[u]
                        qlen[u] += 1
                    else:
                        dropped[c] += 1
                else:
                    qlen[u] += 1
                arr_idx[u] += 1
                next_arr[u] += _gap(stream_seed, u, arr_idx[u], lam[u])

        L = 0
        for u in range(n_users):
            if qlen[u] > 0 and np.random.random() < p[u]:
                tx[L] = u
                L += 1
        d = 1 if L == 0 else tau
        end = t + d - 1

        if measure:
            b_slots[b] += d
            b_bound[b] += 1
            for u in range(n_users):
                c = user_class[u]
                if qlen[u] > 0:
                    b_nonempty[b, c] += 1
                    b_backlog[b, c] += qlen[u] * d

        # arrivals inside the super slot, before the departures at its last slot
        if d > 1:
            for u in range(n_users):
                c = user_class[u]
                while next_arr[u] <= end:
                    a = next_arr[u]
                    arrivals[c] += 1
                    if cap > 0:
                        if qlen[u] < cap:
                            ring[u, (head[u] + qlen[u]) % cap] = a
                            qlen[u] += 1
                            if measure:
                                b_backlog[b, c] += end - a + 1
                        else:
                            dropped[c] += 1
                    else:
                        qlen[u] += 1
                        if measure:
                            b_backlog[b, c] += end - a + 1
                    arr_idx[u] += 1
                    next_arr[u] += _gap(stream_seed, u, arr_idx[u], lam[u])

        k = 0
        if L > 0:
            if pool_len > 0:
                if L < pool.shape[0]:
                    ok = pool[L, pool_pos[L] % pool_len]
                    pool_pos[L] += 1
                    k = L if ok else 0
            else:
                r = np.random.random()
                while k < L and r >= dec_cdf[L, k]:
                    k += 1
            hist[L] += 1
            if k == L:
                for i in range(L):
                    chosen[i] = tx[i]
            elif k > 0:
                # uniform k-subset: partial Fisher-Yates over the transmitters
                for i in range(L):
                    chosen[i] = tx[i]
                for i in range(k):
                    j = i + np.random.randint(0, L - i)
                    tmp = chosen[i]
                    chosen[i] = chosen[j]
                    chosen[j] = tmp
            for i in range(k):
                u = chosen[i]
                c = user_class[u]
                if cap > 0:
                    a = ring[u, head[u]]
                    head[u] = (head[u] + 1) % cap
                else:
                    a = hol_time[u]
                    hol_idx[u] += 1
                    hol_time[u] += _gap(stream_seed, u, hol_idx[u], lam[u])
                qlen[u] -= 1
                departures[c] += 1
                entry = a if a > last_dep[u] else last_dep[u] + 1
                last_dep[u] = end
                if measure:
                    b_dep[b, c] += 1
                    b_tot[b, c] += end - a + 1
                    b_srv[b, c] += end - entry + 1
        else:
            n_idle += 1
        n_super += 1

        if want_trace and n_trace < trace.shape[0]:
            tot = 0
            for u in range(n_users):
                tot += qlen[u]
            trace[n_trace, 0] = t
            trace[n_trace, 1] = 0 if L == 0 else 1
            trace[n_trace, 2] = L
            trace[n_trace, 3] = k
            trace[n_trace, 4] = tot
            n_trace += 1
        t += d

    final = np.zeros(n_classes, np.int64)
    for u in range(n_users):
        final[user_class[u]] += qlen[u]
    return (b_slots, b_bound, b_dep, b_tot, b_srv, b_nonempty, b_backlog, hist,
            n_idle, n_super, arrivals, departures, dropped, final, trace[:n_trace])


# -- wrapper -------------------------------------------------------------------------

def _decode_cdf(mpr, n_users: int) -> np.ndarray:
    cdf = np.ones((n_users + 1, n_users + 1))
    for L in range(1, n_users + 1):
        if isinstance(mpr, GeneralSymmetricMpr):
            dist = mpr.decode_distribution(L)
        else:
            dist = np.zeros(L + 1)
            dist[L] = mpr.q_at(L)
            dist[0] = 1.0 - dist[L]
        cdf[L, :L + 1] = np.cumsum(dist)
        cdf[L, L] = 1.0
    return cdf


def _batch_se(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    if len(values) < 2:
        return math.nan
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def run_simulation(cfg: SimConfig) -> SimReport:
    s = cfg.scenario
    if s.mode != FINITE:
        raise ConfigError("simulation needs a finite-mode scenario")
    problems = validate_scenario(s)
    if cfg.horizon <= cfg.warmup_slots or cfg.warmup_slots < 0:
        problems.append(f"horizon={cfg.horizon} must exceed warmup={cfg.warmup_slots} >= 0")
    if cfg.buffer_cap is not None and cfg.buffer_cap < 1:
        problems.append(f"buffer_cap={cfg.buffer_cap}: must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))

    user_class = s.user_classes().astype(np.int64)
    lam = s.arrival_rates[user_class]
    p = s.tx_probs[user_class]
    n = len(user_class)
    pool = cfg.outcome_pool
    if pool is None:
        pool = np.zeros((1, 0), dtype=np.bool_)
    nb = max(1, min(cfg.batches, cfg.horizon - cfg.warmup_slots))
    out = _kernel(user_class, lam, p, _decode_cdf(s.mpr, n), int(s.tau),
                  int(cfg.horizon), int(cfg.warmup_slots), int(cfg.seed) % (2**32),
                  int(cfg.buffer_cap or 0), nb, bool(cfg.trace), pool)
    (b_slots, b_bound, b_dep, b_tot, b_srv, b_nonempty, b_backlog, hist,
     n_idle, n_super, arrivals, departures, dropped, final, trace) = out

    counts = s.counts
    slots = b_slots.sum()
    classes = []
    warnings = []
    with np.errstate(invalid="ignore", divide="ignore"):
        for v in range(s.V):
            Nv = max(int(counts[v]), 1)
            dep = b_dep[:, v]
            delivered = int(dep.sum())
            thr_b = dep / (Nv * b_slots)
            util_b = b_nonempty[:, v] / (Nv * b_bound)
            tot_b = b_tot[:, v] / dep
            srv_b = b_srv[:, v] / dep
            blog_b = b_backlog[:, v] / (Nv * b_slots)
            classes.append(ClassStats(
                users=int(counts[v]),
                packets_delivered=delivered,
                throughput=float(dep.sum() / (Nv * slots)),
                throughput_se=_batch_se(thr_b),
                utilization_hat=float(b_nonempty[:, v].sum() / (Nv * b_bound.sum())),
                utilization_se=_batch_se(util_b),
                mean_service_delay=float(b_srv[:, v].sum() / delivered) if delivered else math.nan,
                service_delay_se=_batch_se(srv_b),
                mean_total_delay=float(b_tot[:, v].sum() / delivered) if delivered else math.nan,
                total_delay_se=_batch_se(tot_b),
                mean_backlog=float(b_backlog[:, v].sum() / (Nv * slots)),
                backlog_se=_batch_se(blog_b),
                arrivals=int(arrivals[v]),
                departures=int(departures[v]),
                dropped=int(dropped[v]),
                final_backlog=int(final[v]),
            ))
            if counts[v] > 0 and s.arrival_rates[v] > 0 and delivered < MIN_DELIVERED:
                msg = (f"class {v + 1} delivered only {delivered} packets; "
                       "statistics unreliable")
                warnings.append(msg)
                log.warning(msg)
        agg_b = (b_dep / b_slots[:, None]).sum(axis=1)
    return SimReport(
        classes=classes,
        fraction_idle_superslots=float(n_idle / n_super) if n_super else math.nan,
        attempt_histogram=hist,
        measured_slots=int(slots),
        superslots=int(n_super),
        seed=cfg.seed,
        aggregate_throughput_se=_batch_se(agg_b),
        warnings=warnings,
        trace=trace if cfg.trace else None,
    )


def write_trace(path, trace: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for t, busy, att, dec, tot in trace:
            fh.write(f"{t},{'BUSY' if busy else 'IDLE'},{att},{dec},{tot}\n")


@dataclass
class BimodalitySummary:
    edges: np.ndarray
    counts: np.ndarray
    modes: list[int]
    bimodal: bool


def detect_bimodality(trace, bins: int = 40, smooth: int = 3) -> BimodalitySummary:
    """Occupancy histogram of the total backlog and a two-mode heuristic.

    The flag is raised when the (moving-average smoothed) histogram has two
    local maxima separated by a valley lower than half of the smaller one.
    It is a diagnostic, not a test of metastability.
    """
    trace = np.asarray(trace)
    backlog = trace[:, 4] if trace.ndim == 2 else trace
    lo, hi = float(backlog.min()), float(backlog.max())
    if hi == lo:
        return BimodalitySummary(np.array([lo, hi]), np.array([len(backlog)]), [0], False)
    if np.all(backlog == np.round(backlog)):
        # integer backlogs: whole-number bin widths so no bin is structurally empty
        width = math.ceil((hi - lo + 1) / bins)
        edges = lo + width * np.arange(math.ceil((hi - lo + 1) / width) + 1)
        counts, edges = np.histogram(backlog, bins=edges)
    else:
        counts, edges = np.histogram(backlog, bins=bins, range=(lo, hi))
    sm = np.convolve(counts, np.ones(smooth) / smooth, mode="same") if smooth > 1 \
        else counts.astype(float)
    modes = [i for i in range(len(sm))
             if sm[i] > 0 and (i == 0 or sm[i] > sm[i - 1])
             and (i == len(sm) - 1 or sm[i] >= sm[i + 1])]
    bimodal = False
    if len(modes) >= 2:
        top = sorted(modes, key=lambda i: sm[i], reverse=True)[:2]
        i, j = sorted(top)
        valley = sm[i:j + 1].min()
        bimodal = valley < 0.5 * min(sm[i], sm[j])
    return BimodalitySummary(edges, counts, modes, bool(bimodal))
