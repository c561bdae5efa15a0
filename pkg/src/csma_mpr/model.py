"""Domain types for MPR laws and network scenarios.

A scenario is either *finite* (integer user counts, per-user probabilities)
or *limiting* (class fractions and the N-scaled rates used by the mean-field
analysis).  In limiting mode ``arrival_rate`` and ``tx_prob`` hold the scaled
quantities, which may exceed one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import ConfigError

FINITE = "finite"
LIMITING = "limiting"


@dataclass(frozen=True)
class AllOrNothingMpr:
    """Receiver that decodes all L simultaneous packets w.p. ``q[L-1]``, else none."""

    q: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(x) for x in self.q))

    @property
    def M(self) -> int:
        return len(self.q)

    def q_at(self, L: int) -> float:
        if 1 <= L <= self.M:
            return self.q[L - 1]
        return 0.0

    def q_vector(self, length: int) -> np.ndarray:
        """Array ``a`` with ``a[L] = q_L`` for ``L = 0..length`` (``a[0] = 0``)."""
        a = np.zeros(length + 1)
        n = min(length, self.M)
        a[1:n + 1] = self.q[:n]
        return a

    def effective(self) -> "AllOrNothingMpr":
        return self


@dataclass(frozen=True)
class GeneralSymmetricMpr:
    """Symmetric MPR law with ``rows[L-1][k-1] = q_{k,L}``.

    Decoded packets are attributed uniformly at random among the L
    transmitters; the residual mass of each row is the all-fail event.
    """

    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "rows", tuple(tuple(float(x) for x in r) for r in self.rows))

    @property
    def M(self) -> int:
        return len(self.rows)

    def q_at(self, k: int, L: int) -> float:
        if 1 <= L <= self.M and 1 <= k <= L:
            return self.rows[L - 1][k - 1]
        return 0.0

    def decode_distribution(self, L: int) -> np.ndarray:
        """Probabilities of decoding k = 0..L packets when L are sent."""
        out = np.zeros(L + 1)
        for k in range(1, L + 1):
            out[k] = self.q_at(k, L)
        out[0] = max(0.0, 1.0 - out[1:].sum())
        return out

    def effective(self) -> AllOrNothingMpr:
        """All-or-nothing law with the same per-packet success probability.

        Under uniform attribution a tagged transmitter among L succeeds with
        probability sum_k (k/L) q_{k,L}; every throughput expression depends on
        the law only through this quantity.
        """
        q = []
        for L in range(1, self.M + 1):
            q.append(sum(k * self.q_at(k, L) for k in range(1, L + 1)) / L)
        return AllOrNothingMpr(tuple(q))

    @classmethod
    def from_all_or_nothing(cls, m: AllOrNothingMpr) -> "GeneralSymmetricMpr":
        rows = []
        for L in range(1, m.M + 1):
            rows.append(tuple([0.0] * (L - 1) + [m.q_at(L)]))
        return cls(tuple(rows))

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "GeneralSymmetricMpr":
        """Build from a row-major lower triangle q11, q12, q22, q13, ..."""
        flat = list(flat)
        rows, i, L = [], 0, 1
        while i < len(flat):
            if i + L > len(flat):
                raise ConfigError(
                    f"q_matrix length {len(flat)} is not a triangular number")
            rows.append(tuple(flat[i:i + L]))
            i += L
            L += 1
        return cls(tuple(rows))

    def flat(self) -> list[float]:
        return [x for r in self.rows for x in r]


Mpr = AllOrNothingMpr | GeneralSymmetricMpr


@dataclass(frozen=True)
class ClassSpec:
    arrival_rate: float
    tx_prob: float
    count: int | None = None
    fraction: float | None = None


@dataclass(frozen=True)
class Scenario:
    classes: tuple[ClassSpec, ...]
    mpr: Mpr
    kappa: int = 1
    tau: int | None = None
    mode: str = FINITE

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.tau is None:
            object.__setattr__(self, "tau", self.kappa)

    @property
    def V(self) -> int:
        return len(self.classes)

    @property
    def counts(self) -> np.ndarray:
        if self.mode != FINITE:
            raise ValueError("user counts are only defined in finite mode")
        return np.array([c.count for c in self.classes], dtype=int)

    @property
    def n_users(self) -> int:
        return int(self.counts.sum())

    @property
    def arrival_rates(self) -> np.ndarray:
        return np.array([c.arrival_rate for c in self.classes], dtype=float)

    @property
    def tx_probs(self) -> np.ndarray:
        return np.array([c.tx_prob for c in self.classes], dtype=float)

    @property
    def betas(self) -> np.ndarray:
        if self.mode == LIMITING:
            return np.array([c.fraction for c in self.classes], dtype=float)
        n = self.counts
        return n / n.sum()

    @property
    def lambda_tilde(self) -> np.ndarray:
        if self.mode == LIMITING:
            return self.arrival_rates
        return self.n_users * self.arrival_rates

    @property
    def p_tilde(self) -> np.ndarray:
        if self.mode == LIMITING:
            return self.tx_probs
        return self.n_users * self.tx_probs

    def to_limiting(self) -> "Scenario":
        if self.mode == LIMITING:
            return self
        beta, lt, pt = self.betas, self.lambda_tilde, self.p_tilde
        classes = tuple(
            ClassSpec(arrival_rate=float(lt[v]), tx_prob=float(pt[v]),
                      fraction=float(beta[v]))
            for v in range(self.V))
        return replace(self, classes=classes, mode=LIMITING)

    def with_arrival_rates(self, rates) -> "Scenario":
        classes = tuple(replace(c, arrival_rate=float(r))
                        for c, r in zip(self.classes, rates))
        return replace(self, classes=classes)

    def with_tx_probs(self, probs) -> "Scenario":
        classes = tuple(replace(c, tx_prob=float(p))
                        for c, p in zip(self.classes, probs))
        return replace(self, classes=classes)

    def user_classes(self) -> np.ndarray:
        """Class index of every user, users of a class contiguous."""
        return np.repeat(np.arange(self.V), self.counts)


def _in_unit(x) -> bool:
    return x is not None and math.isfinite(x) and 0.0 <= x <= 1.0


def validate_mpr(m) -> list[str]:
    out = []
    if isinstance(m, AllOrNothingMpr):
        if m.M < 1:
            out.append("mpr.q: M must be >= 1")
        for L, x in enumerate(m.q, start=1):
            if not _in_unit(x):
                out.append(f"mpr.q[{L}]={x}: q out of [0,1]")
    elif isinstance(m, GeneralSymmetricMpr):
        if m.M < 1:
            out.append("mpr.q_matrix: M must be >= 1")
        for L, row in enumerate(m.rows, start=1):
            if len(row) != L:
                out.append(f"mpr.q_matrix row {L}: expected {L} entries")
            for k, x in enumerate(row, start=1):
                if not _in_unit(x):
                    out.append(f"mpr.q_matrix[{k},{L}]={x}: q out of [0,1]")
            if sum(row) > 1.0 + 1e-12:
                out.append(f"mpr.q_matrix row {L}: sum {sum(row)} exceeds 1")
    else:
        out.append(f"mpr: unsupported type {type(m).__name__}")
    return out


def validate_scenario(s: Scenario) -> list[str]:
    """Return every violated invariant; an empty list means the scenario is valid."""
    out = []
    if s.mode not in (FINITE, LIMITING):
        out.append(f"mode={s.mode!r}: must be 'finite' or 'limiting'")
        return out
    if s.V < 1:
        out.append("classes: at least one class required")
    if not isinstance(s.kappa, (int, np.integer)) or s.kappa < 1:
        out.append(f"kappa={s.kappa}: must be an integer >= 1")
    if not isinstance(s.tau, (int, np.integer)) or s.tau < 1:
        out.append(f"tau={s.tau}: must be an integer >= 1")
    elif isinstance(s.kappa, (int, np.integer)) and s.tau < s.kappa:
        out.append(f"tau={s.tau} < kappa={s.kappa}: tau < kappa")
    for v, c in enumerate(s.classes):
        if s.mode == FINITE:
            if c.count is None or not isinstance(c.count, (int, np.integer)) \
                    or c.count < 0:
                out.append(f"classes[{v}].count={c.count}: must be an integer >= 0")
            if not _in_unit(c.arrival_rate):
                out.append(f"classes[{v}].arrival_rate={c.arrival_rate}: out of [0,1]")
            if not _in_unit(c.tx_prob):
                out.append(f"classes[{v}].tx_prob={c.tx_prob}: out of [0,1]")
        else:
            if not _in_unit(c.fraction):
                out.append(f"classes[{v}].fraction={c.fraction}: out of [0,1]")
            for name in ("arrival_rate", "tx_prob"):
                x = getattr(c, name)
                if x is None or not math.isfinite(x) or x < 0:
                    out.append(f"classes[{v}].{name}={x}: must be >= 0")
    if s.mode == FINITE and not out and sum(c.count for c in s.classes) < 1:
        out.append("classes: total user count must be >= 1")
    if s.mode == LIMITING and not out:
        total = sum(c.fraction for c in s.classes)
        if abs(total - 1.0) > 1e-9:
            out.append(f"classes[].fraction sums to {total}, expected 1")
    out.extend(validate_mpr(s.mpr))
    return out


def chi(m: AllOrNothingMpr, x):
    """q_1 + q_2 x/1! + q_3 x^2/2! + ... + q_M x^(M-1)/(M-1)!"""
    m = m.effective()
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    term = np.ones_like(out)
    for j in range(1, m.M + 1):
        if j > 1:
            term = term * x / (j - 1)
        out = out + m.q[j - 1] * term
    return out if out.shape else float(out)


def chi_prime(m: AllOrNothingMpr, x):
    """Derivative of ``chi`` with respect to x."""
    m = m.effective()
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    term = np.ones_like(x)
    for j in range(2, m.M + 1):
        if j > 2:
            term = term * x / (j - 2)
        out = out + m.q[j - 1] * term
    return out if out.shape else float(out)


def _trimmed(q: Sequence[float]) -> list[float]:
    q = list(q)
    while len(q) > 1 and q[-1] == 0.0:
        q.pop()
    return q


def _chain_holds(q: Sequence[float]) -> bool:
    scaled = [(L + 1) * x for L, x in enumerate(q)]
    return all(a <= b for a, b in zip(scaled, scaled[1:]))


def unimodality_condition_holds(m) -> bool:
    """Sufficient condition for the rate function f to be unimodal.

    True when the effective multiplicity is at most two, or when
    q_1 <= 2 q_2 <= ... <= M q_M.  Trailing zero entries do not count
    towards M.
    """
    q = _trimmed(m.effective().q)
    return len(q) <= 2 or _chain_holds(q)


def metastability_condition_holds(s: Scenario, gamma_bar: float,
                                  K: int | None = None) -> bool:
    """Check the global-stability design rule.

    Total attempt load sum_v N_v p_v must stay below ``gamma_bar`` and the
    coefficient chain q_1 <= 2 q_2 <= ... <= K q_K must hold (K defaults to M).
    """
    if not gamma_bar > 0:
        raise ValueError(f"gamma_bar must be > 0, got {gamma_bar}")
    q = list(s.mpr.effective().q)
    K = len(q) if K is None else K
    q = (q + [0.0] * K)[:K]
    load = float(np.dot(s.betas, s.p_tilde))
    return load < gamma_bar and _chain_holds(q)


# -- configuration files ---------------------------------------------------

def scenario_from_dict(d: dict) -> Scenario:
    try:
        mode = d.get("mode", FINITE)
        mpr_d = d["mpr"]
        kind = mpr_d.get("kind", "all_or_nothing")
        if kind in ("all_or_nothing", "aon"):
            mpr = AllOrNothingMpr(tuple(mpr_d["q"]))
        elif kind == "general":
            mpr = GeneralSymmetricMpr.from_flat(mpr_d["q_matrix"])
        else:
            raise ConfigError(f"mpr.kind={kind!r}: unknown")
        classes = []
        for c in d["classes"]:
            classes.append(ClassSpec(
                arrival_rate=float(c["arrival_rate"]),
                tx_prob=float(c["tx_prob"]),
                count=None if c.get("count") is None else int(c["count"]),
                fraction=None if c.get("fraction") is None else float(c["fraction"])))
        kappa = int(d.get("kappa", 1))
        tau = int(d["tau"]) if d.get("tau") is not None else kappa
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scenario config: {exc!r}") from exc
    return Scenario(tuple(classes), mpr, kappa=kappa, tau=tau, mode=mode)


def scenario_to_dict(s: Scenario) -> dict:
    if isinstance(s.mpr, GeneralSymmetricMpr):
        mpr = {"kind": "general", "q_matrix": s.mpr.flat()}
    else:
        mpr = {"kind": "all_or_nothing", "q": list(s.mpr.q)}
    classes = []
    for c in s.classes:
        entry = {"arrival_rate": c.arrival_rate, "tx_prob": c.tx_prob}
        if s.mode == FINITE:
            entry["count"] = c.count
        else:
            entry["fraction"] = c.fraction
        classes.append(entry)
    return {"mode": s.mode, "kappa": s.kappa, "tau": s.tau,
            "classes": classes, "mpr": mpr}


def load_scenario(path) -> Scenario:
    """Read a scenario from a YAML or JSON file."""
    try:
        d = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return scenario_from_dict(d)
