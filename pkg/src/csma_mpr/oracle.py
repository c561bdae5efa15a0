"""Exact slot-level Markov chain of tiny CSMA/MPR systems with finite buffers.

The chain runs slot by slot with the same conventions as the simulator:

* every slot starts with Bernoulli(lambda_u) arrivals; an arrival to a full
  buffer (``buffer_cap`` packets) is dropped;
* in a boundary slot (``busy == 0``) each nonempty user transmits with
  probability p_u; nobody transmitting makes an idle slot, otherwise the MPR
  law picks the decoded set, which departs at the end of the last of the
  tau busy slots.

A state is (queue lengths, remaining busy slots after this one, decoded
set).  The reachable set is enumerated from the empty system, the single
closed class is located and its stationary law solved.  Delays follow from
Little's law applied to per-slot backlog and nonempty indicators.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import ConfigError, NoConvergenceError, ReducibleError, StateExplosionError
from .model import FINITE, GeneralSymmetricMpr, Scenario, validate_scenario

MAX_USERS = 4
MAX_BUFFER = 6
STATE_CAP = 1_000_000
RESIDUAL_TOL = 1e-12


@dataclass(frozen=True)
class TinySystem:
    scenario: Scenario
    buffer_cap: int

    def state_bound(self) -> int:
        n = self.scenario.n_users
        return (self.buffer_cap + 1) ** n * (1 + (self.scenario.tau - 1) * 2 ** n)


def _validate(t: TinySystem) -> None:
    s = t.scenario
    problems = [] if s.mode == FINITE else ["oracle needs a finite-mode scenario"]
    problems += validate_scenario(s)
    if s.n_users > MAX_USERS:
        problems.append(f"{s.n_users} users; the oracle handles at most {MAX_USERS}")
    if not 1 <= t.buffer_cap <= MAX_BUFFER:
        problems.append(f"buffer_cap={t.buffer_cap} outside [1, {MAX_BUFFER}]")
    if problems:
        raise ConfigError("; ".join(problems))


def _decode_law(mpr, tx: tuple[int, ...]) -> list[tuple[float, int]]:
    """(probability, decoded bitmask) pairs for transmitter set ``tx``."""
    L = len(tx)
    if isinstance(mpr, GeneralSymmetricMpr):
        dist = mpr.decode_distribution(L)
    else:
        dist = np.zeros(L + 1)
        dist[L] = mpr.q_at(L)
        dist[0] = 1.0 - dist[L]
    out = []
    for k, pk in enumerate(dist):
        if pk <= 0.0:
            continue
        subsets = list(itertools.combinations(tx, k))
        for sub in subsets:
            out.append((pk / len(subsets), sum(1 << u for u in sub)))
    return out


@dataclass
class MarkovChain:
    system: TinySystem
    states: list[tuple]                    # (queues, busy, decoded mask)
    P: sp.csr_matrix
    # per-state expected one-slot rewards, shape (n_states, n_users)
    departures: np.ndarray
    accepted: np.ndarray
    dropped: np.ndarray
    backlog: np.ndarray                    # queue length after this slot's arrivals
    nonempty: np.ndarray                   # P(queue nonempty after arrivals)
    boundary: np.ndarray                   # (n_states,) slot is a contention boundary

    def dump_triplets(self, path) -> None:
        """Transition matrix as 'row col prob' lines, preceded by a state legend."""
        P = self.P.tocoo()
        with open(path, "w") as fh:
            for i, (q, c, d) in enumerate(self.states):
                fh.write(f"# {i} queues={list(q)} busy={c} decoded={d:b}\n")
            for i, j, v in zip(P.row, P.col, P.data):
                fh.write(f"{i} {j} {v:.17g}\n")


def build_chain(t: TinySystem, state_cap: int = STATE_CAP) -> MarkovChain:
    _validate(t)
    if t.state_bound() > state_cap:
        raise StateExplosionError(
            f"up to {t.state_bound()} states exceeds the cap of {state_cap}")
    s = t.scenario
    n = s.n_users
    B = t.buffer_cap
    tau = s.tau
    cls = s.user_classes()
    lam = s.arrival_rates[cls]
    p = s.tx_probs[cls]

    # joint arrival patterns: (probability, per-user 0/1 tuple)
    patterns = []
    for a in itertools.product((0, 1), repeat=n):
        w = 1.0
        for u in range(n):
            w *= lam[u] if a[u] else 1.0 - lam[u]
        if w > 0.0:
            patterns.append((w, a))

    start = (tuple([0] * n), 0, 0)
    index = {start: 0}
    states = [start]
    rows, cols, vals = [], [], []
    rewards = {k: [] for k in ("dep", "acc", "drop", "blog", "busy")}
    queue = deque([start])

    def target(nxt):
        j = index.get(nxt)
        if j is None:
            j = index[nxt] = len(states)
            states.append(nxt)
            queue.append(nxt)
        return j

    while queue:
        key = queue.popleft()
        q, c, dmask = key
        i = index[key]
        out: dict[int, float] = {}
        dep = np.zeros(n)
        acc = np.zeros(n)
        drop = np.zeros(n)
        blog = np.zeros(n)
        busy = np.zeros(n)
        for w, a in patterns:
            q1 = tuple(min(q[u] + a[u], B) for u in range(n))
            for u in range(n):
                if a[u]:
                    if q[u] < B:
                        acc[u] += w
                    else:
                        drop[u] += w
                blog[u] += w * q1[u]
                busy[u] += w * (q1[u] > 0)
            if c > 0:
                if c == 1:
                    q2 = tuple(q1[u] - ((dmask >> u) & 1) for u in range(n))
                    for u in range(n):
                        dep[u] += w * ((dmask >> u) & 1)
                    j = target((q2, 0, 0))
                else:
                    j = target((q1, c - 1, dmask))
                out[j] = out.get(j, 0.0) + w
                continue
            active = [u for u in range(n) if q1[u] > 0]
            for choice in itertools.product((0, 1), repeat=len(active)):
                wt = w
                tx = []
                for u, x in zip(active, choice):
                    wt *= p[u] if x else 1.0 - p[u]
                    if x:
                        tx.append(u)
                if wt <= 0.0:
                    continue
                if not tx:
                    j = target((q1, 0, 0))
                    out[j] = out.get(j, 0.0) + wt
                    continue
                for pd, d in _decode_law(s.mpr, tuple(tx)):
                    if tau == 1:
                        q2 = tuple(q1[u] - ((d >> u) & 1) for u in range(n))
                        for u in range(n):
                            dep[u] += wt * pd * ((d >> u) & 1)
                        j = target((q2, 0, 0))
                    else:
                        j = target((q1, tau - 1, d))
                    out[j] = out.get(j, 0.0) + wt * pd
        if len(states) > state_cap:
            raise StateExplosionError(f"more than {state_cap} reachable states")
        for j, v in out.items():
            rows.append(i)
            cols.append(j)
            vals.append(v)
        rewards["dep"].append(dep)
        rewards["acc"].append(acc)
        rewards["drop"].append(drop)
        rewards["blog"].append(blog)
        rewards["busy"].append(busy)

    m = len(states)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    # rewards were appended in BFS pop order, which is the index order
    boundary = np.array([c == 0 for _, c, _ in states])
    return MarkovChain(t, states, P,
                       *(np.array(rewards[k]) for k in ("dep", "acc", "drop", "blog", "busy")),
                       boundary)


@dataclass
class Stationary:
    chain: MarkovChain
    pi: np.ndarray
    residual: float
    method: str


def _closed_class(P: sp.csr_matrix) -> np.ndarray:
    ncomp, labels = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = np.zeros(ncomp, bool)
    cross = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[cross]]] = True
    closed = np.flatnonzero(~leaving)
    if len(closed) != 1:
        raise ReducibleError(f"{len(closed)} closed classes; stationary law not unique")
    return np.flatnonzero(labels == closed[0])


def stationary_distribution(t: TinySystem | MarkovChain) -> Stationary:
    """Stationary law over all reachable states (zero on transient ones)."""
    chain = t if isinstance(t, MarkovChain) else build_chain(t)
    P = chain.P
    members = _closed_class(P)
    sub = P[members][:, members]
    k = len(members)
    method = "direct"
    if k == 1:
        x = np.ones(1)
    else:
        A = (sub.T - sp.identity(k, format="csr")).tolil()
        A[k - 1, :] = np.ones(k)
        b = np.zeros(k)
        b[-1] = 1.0
        x = spsolve(A.tocsc(), b)
        x = np.clip(np.real(x), 0.0, None)
        x /= x.sum()
    residual = float(np.abs(sub.T @ x - x).sum())
    if residual > RESIDUAL_TOL:
        method = "power"
        for _ in range(1_000_000):
            nxt = sub.T @ x
            nxt /= nxt.sum()
            residual = float(np.abs(nxt - x).sum())
            x = nxt
            if residual <= RESIDUAL_TOL:
                break
        else:
            raise NoConvergenceError(f"stationary residual {residual:.3g} above tolerance")
    pi = np.zeros(P.shape[0])
    pi[members] = x
    return Stationary(chain, pi, residual, method)


@dataclass
class ExactMetrics:
    throughput: np.ndarray          # packets/slot per user, class averages
    utilization: np.ndarray         # P(nonempty at a contention boundary)
    mean_backlog: np.ndarray        # time-average queue length per user
    mean_total_delay: np.ndarray    # slots, nan when nothing is delivered
    mean_service_delay: np.ndarray
    drop_rate: np.ndarray           # dropped arrivals per slot per user
    states: int
    delays_defined: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def rows(self) -> list[dict]:
        return [{"class": v + 1, "throughput": self.throughput[v],
                 "utilization": self.utilization[v], "mean_backlog": self.mean_backlog[v],
                 "mean_service_delay": self.mean_service_delay[v],
                 "mean_total_delay": self.mean_total_delay[v],
                 "drop_rate": self.drop_rate[v]} for v in range(len(self.throughput))]


def exact_metrics(t: TinySystem | Stationary) -> ExactMetrics:
    st = t if isinstance(t, Stationary) else stationary_distribution(t)
    ch = st.chain
    pi = st.pi
    s = ch.system.scenario
    cls = s.user_classes()
    per_user = {
        "thr": pi @ ch.departures,
        "blog": pi @ ch.backlog,
        "busy": pi @ ch.nonempty,
        "drop": pi @ ch.dropped,
    }
    pb = pi[ch.boundary]
    util_u = (pb @ ch.nonempty[ch.boundary]) / pb.sum()

    def by_class(x):
        return np.array([x[cls == v].mean() if np.any(cls == v) else math.nan
                         for v in range(s.V)])

    thr = by_class(per_user["thr"])
    blog = by_class(per_user["blog"])
    busy = by_class(per_user["busy"])
    defined = thr > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        total = np.where(defined, blog / thr, math.nan)
        service = np.where(defined, busy / thr, math.nan)
    return ExactMetrics(thr, by_class(util_u), blog, total, service,
                        by_class(per_user["drop"]), len(ch.states), defined)
