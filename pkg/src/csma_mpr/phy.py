"""Monte Carlo estimation of the MPR success probabilities q_L over Rayleigh fading.

A receiver with K antennas sees L simultaneous users through H (K x L, i.i.d.
CN(0, 1) entries) at per-user SNR ``snr``.  With

    M = (I + snr H^H H)^-1

the effective noise of an integer equation with coefficient vector a is
proportional to a^H M a, and the decoders' symmetric rates are

* CF  : max over invertible A of min_l -log2(a_l^H M a_l)
* SCF : max over invertible A of min_l -log2(P_ll^2), A-bar M A^T = P P^H
* SIC : SCF restricted to permutation matrices
* JD  : min over nonempty user subsets S of log2 det(I + snr H_S^H H_S) / |S|

Integer matrices range over Gaussian integers with coordinates in
[-a_radius, a_radius].  Everything is vectorized over batches of channels.
"""
from __future__ import annotations

import enum
import functools
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CholeskyError, ConfigError, SearchExhaustedError, TooManyUsersError

BLOCK = 4096
CHUNK = 512      # channels per vectorized pass when candidate sets are large
MAX_SIC_USERS = 6
MAX_JD_USERS = 16
MAX_CANDIDATES = 200_000
JITTER = 1e-12
TWO_PI_E = 2.0 * math.pi * math.e
# ordered first/second rows drawn from the best few candidates when L >= 3
TOP_CANDIDATES = {3: 16, 4: 10, 5: 8, 6: 7}


class Decoder(str, enum.Enum):
    SIC = "SIC"
    CF = "CF"
    SCF = "SCF"
    JD = "JD"


@dataclass(frozen=True)
class PhyConfig:
    snr_db: float
    K: int
    message_rate: float
    decoder: Decoder = Decoder.SCF
    samples: int = 100_000
    seed: int = 1
    a_radius: int = 2
    lattice_loss: tuple[float, float] | None = None

    @property
    def snr(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)


def validate_phy_config(cfg: PhyConfig) -> list[str]:
    problems = []
    if not math.isfinite(cfg.snr_db):
        problems.append(f"snr_db={cfg.snr_db} must be finite")
    if cfg.K < 1:
        problems.append(f"K={cfg.K} must be >= 1")
    if cfg.samples < 1:
        problems.append(f"samples={cfg.samples} must be >= 1")
    if cfg.message_rate < 0:
        problems.append(f"message_rate={cfg.message_rate} must be >= 0")
    if Decoder(cfg.decoder) in (Decoder.CF, Decoder.SCF) and cfg.a_radius < 1:
        problems.append(f"a_radius={cfg.a_radius} must be >= 1 for CF/SCF")
    if cfg.lattice_loss is not None and min(cfg.lattice_loss) <= 0:
        problems.append(f"lattice_loss={cfg.lattice_loss} needs positive G and mu")
    return problems


# -- channels ----------------------------------------------------------------

def sample_channel(K: int, L: int, rng: np.random.Generator, size: int | None = None):
    """CN(0, 1) channel(s): real and imaginary parts N(0, 1/2)."""
    shape = (K, L) if size is None else (size, K, L)
    z = rng.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * math.sqrt(0.5)


def channel_block(seed: int, K: int, L: int, block: int, size: int = BLOCK) -> np.ndarray:
    """Channel block number ``block`` of the stream keyed by (seed, K, L).

    Every sample index maps to a fixed (block, row), so any split of the work
    across blocks reproduces the serial draws exactly.
    """
    rng = np.random.default_rng([seed % 2**63, K, L, block])
    return sample_channel(K, L, rng, size)


def _mmse_matrix(H: np.ndarray, snr: float) -> np.ndarray:
    L = H.shape[-1]
    gram = np.conj(np.swapaxes(H, -1, -2)) @ H
    return np.linalg.inv(np.eye(L) + snr * gram)


# -- integer candidates ------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def gaussian_integer_candidates(L: int, radius: int) -> np.ndarray:
    """Nonzero Gaussian-integer vectors of length L, one per unit orbit.

    Multiplying a vector by a unit (+-1, +-i) changes neither its quadratic
    form nor any |det| it takes part in, so the representative whose first
    nonzero entry has Re > 0, Im >= 0 suffices.
    """
    count = ((2 * radius + 1) ** (2 * L) - 1) // 4
    if count > MAX_CANDIDATES:
        raise ConfigError(f"{count} integer vectors for L={L}, a_radius={radius}; "
                          "lower a_radius")
    pts = np.array([complex(a, b) for a in range(-radius, radius + 1)
                    for b in range(-radius, radius + 1)])
    grid = np.array(list(itertools.product(pts, repeat=L)))
    grid = grid[np.any(grid != 0, axis=1)]
    first = grid[np.arange(len(grid)), np.argmax(grid != 0, axis=1)]
    keep = (first.real > 0) & (first.imag >= 0)
    out = grid[keep]
    out.setflags(write=False)
    return out


def _quad_forms(M: np.ndarray, C: np.ndarray) -> np.ndarray:
    """s[b, c] = C_c^H M_b C_c as real GEMMs over the Hermitian entries of M."""
    L = C.shape[1]
    iu, ju = np.triu_indices(L, 1)
    diag = np.real(np.diagonal(M, axis1=1, axis2=2))
    s = diag @ (np.abs(C) ** 2).T
    if L > 1:
        f = np.conj(C[:, iu]) * C[:, ju]
        mu = M[:, iu, ju]
        s += 2.0 * (mu.real @ f.real.T - mu.imag @ f.imag.T)
    return s


@functools.lru_cache(maxsize=None)
def _pair_min_det(radius: int) -> np.ndarray:
    """g[c] = min over second rows a2 of nonzero |det[C_c; a2]|^2 (L = 2)."""
    C = gaussian_integer_candidates(2, radius)
    det = C[:, None, 0] * C[None, :, 1] - C[:, None, 1] * C[None, :, 0]
    d2 = np.abs(det) ** 2
    d2[d2 < 0.5] = np.inf
    return d2.min(axis=1)


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _neg_log2(x):
    with np.errstate(divide="ignore"):
        return -np.log2(x)


# -- compute-and-forward -------------------------------------------------------------

def _first_admissible(s, C, admissible, shortlist=48):
    """Per row of s, index of the smallest-s candidate passing ``admissible``.

    ``admissible(c, rows)`` maps candidates c (len(rows), T, L) for the given
    batch rows to a (len(rows), T) mask.  Only a short list of the best
    candidates is tested; rows where none qualifies scan the full set.
    """
    B = s.shape[0]
    T = min(shortlist, s.shape[1] - 1)
    short = np.argpartition(s, T, axis=1)[:, :T]
    short = np.take_along_axis(short, np.argsort(np.take_along_axis(s, short, 1), 1), 1)
    ok = admissible(C[short], np.arange(B))
    idx = short[np.arange(B), np.argmax(ok, axis=1)]
    for b in np.flatnonzero(~ok.any(axis=1)):
        full = admissible(C[None], np.array([b]))[0]
        if not full.any():
            raise SearchExhaustedError("no invertible integer matrix in radius")
        idx[b] = np.flatnonzero(full)[np.argmin(s[b, full])]
    return idx


def _cf_batch(M: np.ndarray, radius: int, s=None) -> tuple[np.ndarray, np.ndarray]:
    """Optimal CF rate and the integer matrix attaining it, per channel.

    Picking vectors in ascending quadratic form while keeping them
    independent is optimal for a bottleneck objective over a matroid, so the
    greedy basis is the exact optimum within the radius.
    """
    B, L, _ = M.shape
    C = gaussian_integer_candidates(L, radius)
    if s is None:
        s = _quad_forms(M, C)
    A = np.zeros((B, L, L), complex)
    idx = np.argmin(s, axis=1)
    A[:, 0] = C[idx]
    worst = s[np.arange(B), idx]
    if L == 1:
        pass
    elif L == 2:
        a1 = A[:, 0]
        dep = np.abs(a1[:, None, 0] * C[None, :, 1] - a1[:, None, 1] * C[None, :, 0]) < 0.5
        idx = np.argmin(np.where(dep, np.inf, s), axis=1)
        A[:, 1] = C[idx]
        worst = s[np.arange(B), idx]
    elif L == 3:
        a1 = A[:, 0]
        idx = _first_admissible(s, C, lambda c, rows: np.any(
            np.abs(_cross(a1[rows, None, :], c)) > 0.5, axis=2))
        A[:, 1] = C[idx]
        n = _cross(A[:, 0], A[:, 1])
        idx = _first_admissible(s, C, lambda c, rows: np.abs(
            np.einsum("bti,bi->bt", c, n[rows])) > 0.5)
        A[:, 2] = C[idx]
        worst = s[np.arange(B), idx]
    else:
        order = np.argsort(s, axis=1)
        worst = np.empty(B)
        for b in range(B):
            rows = []
            for i in order[b]:
                trial = rows + [C[i]]
                if np.linalg.matrix_rank(np.array(trial), tol=1e-9) == len(trial):
                    rows = trial
                    if len(rows) == L:
                        worst[b] = s[b, i]
                        break
            else:
                raise SearchExhaustedError("no invertible integer matrix in radius")
            A[b] = np.array(rows)
    return np.maximum(_neg_log2(worst), 0.0), A


# -- successive compute-and-forward --------------------------------------------------

def _chol_pivots(G: np.ndarray) -> np.ndarray:
    """Squared Cholesky diagonals of Hermitian G (..., L, L), nan where it fails."""
    try:
        return np.real(np.diagonal(np.linalg.cholesky(G), axis1=-2, axis2=-1)) ** 2
    except np.linalg.LinAlgError:
        pass
    flat = G.reshape((-1,) + G.shape[-2:])
    out = np.empty(flat.shape[:2])
    eye = np.eye(G.shape[-1])
    for i, g in enumerate(flat):
        try:
            out[i] = _chol_one(g, eye)
        except CholeskyError:
            out[i] = np.nan
    return out.reshape(G.shape[:-1])


def _chol_one(g, eye):
    for jitter in (0.0, JITTER):
        try:
            return np.real(np.diag(np.linalg.cholesky(g + jitter * eye))) ** 2
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError("Gram matrix not numerically positive definite")


def _scf_rate_fixed(M: np.ndarray, A: np.ndarray) -> np.ndarray:
    """SCF rate for given integer matrices A (..., L, L) on channels M."""
    G = np.conj(A) @ M @ np.swapaxes(A, -1, -2)
    piv = _chol_pivots(G)
    return np.maximum(_neg_log2(np.max(piv, axis=-1)), 0.0)


def _sic_batch(M: np.ndarray) -> np.ndarray:
    L = M.shape[-1]
    if L > MAX_SIC_USERS:
        raise TooManyUsersError(f"SIC enumerates L! orders; L={L} > {MAX_SIC_USERS}")
    best = np.zeros(M.shape[0])
    for perm in itertools.permutations(range(L)):
        p = list(perm)
        piv = _chol_pivots(M[:, p][:, :, p])
        best = np.fmax(best, _neg_log2(np.max(piv, axis=-1)))
    return np.maximum(best, 0.0)


def _scf_batch(M: np.ndarray, radius: int) -> np.ndarray:
    B, L, _ = M.shape
    if L == 1:
        return np.maximum(_neg_log2(np.real(M[:, 0, 0])), 0.0)
    if L == 2:
        # rows (a1, a2): pivots s(a1) and |det A|^2 det M / s(a1); the best
        # partner of a1 is the one with the smallest nonzero |det|
        C = gaussian_integer_candidates(2, radius)
        s = _quad_forms(M, C)
        d = np.real(np.linalg.det(M))
        g = _pair_min_det(radius)
        worst = np.maximum(s, g[None, :] * d[:, None] / s)
        return np.maximum(_neg_log2(worst.min(axis=1)), 0.0)
    s = _quad_forms(M, gaussian_integer_candidates(L, radius))
    cf_rate, cf_A = _cf_batch(M, radius, s)
    best = np.fmax(_sic_batch(M) if L <= MAX_SIC_USERS else 0.0, cf_rate)
    for perm in itertools.permutations(range(L)):
        best = np.fmax(best, _scf_rate_fixed(M, cf_A[:, list(perm)]))
    if L == 3:
        best = np.fmax(best, _scf_top3(M, radius, s))
    else:
        best = np.fmax(best, _scf_top_generic(M, radius, s))
    return best


def _scf_top3(M: np.ndarray, radius: int, s: np.ndarray) -> np.ndarray:
    """Ordered first/second rows from the best candidates, best completing third row.

    With rows (a1, a2, a3) the squared pivots are G11, G22 - |G12|^2/G11 and
    |det A|^2 det M / (G11 G22 - |G12|^2).  The third row enters only through
    |det A| = |a3 . (a1 x a2)|, so it is chosen among the top candidates and
    the unit vectors to make that as small as possible while nonzero.
    """
    B = M.shape[0]
    K = TOP_CANDIDATES[3]
    C = gaussian_integer_candidates(3, radius)
    top = np.argpartition(s, K, axis=1)[:, :K]
    At = C[top]                                              # (B, K, 3)
    gram = np.einsum("bki,bij,blj->bkl", np.conj(At), M, At)
    pairs = np.array([(i, j) for i in range(K) for j in range(K) if i != j])
    i, j = pairs[:, 0], pairs[:, 1]
    g11 = np.real(gram[:, i, i])
    g22 = np.real(gram[:, j, j])
    g12 = np.abs(gram[:, i, j]) ** 2
    minor = g11 * g22 - g12
    n = _cross(At[:, i], At[:, j])                          # (B, P, 3)
    pool = np.concatenate([At, np.broadcast_to(np.eye(3), (B, 3, 3))], axis=1)
    det2 = np.abs(np.einsum("bpi,bqi->bpq", n, pool)) ** 2
    det2[det2 < 0.5] = np.inf
    g = det2.min(axis=2)
    d = np.real(np.linalg.det(M))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        worst = np.maximum(np.maximum(g11, minor / g11), g * d / minor)
    # parallel first rows leave no invertible completion
    worst[np.isinf(g) | (minor <= 0)] = np.inf
    return np.maximum(_neg_log2(worst.min(axis=1)), 0.0)


def _scf_top_generic(M: np.ndarray, radius: int, s: np.ndarray) -> np.ndarray:
    B, L, _ = M.shape
    K = TOP_CANDIDATES.get(L, L + 1)
    C = gaussian_integer_candidates(L, radius)
    top = np.argpartition(s, K, axis=1)[:, :K]
    tuples = np.array(list(itertools.permutations(range(K), L)))
    best = np.zeros(B)
    for b in range(B):
        A = C[top[b]][tuples]
        ok = np.abs(np.linalg.det(A)) > 0.5
        if ok.any():
            best[b] = np.max(_scf_rate_fixed(M[b], A[ok]))
    return best


# -- joint decoding -------------------------------------------------------------------

def _jd_batch(H: np.ndarray, snr: float) -> np.ndarray:
    L = H.shape[-1]
    if L > MAX_JD_USERS:
        raise TooManyUsersError(f"JD enumerates 2^L subsets; L={L} > {MAX_JD_USERS}")
    gram = np.conj(np.swapaxes(H, -1, -2)) @ H
    best = np.full(H.shape[0], np.inf)
    for k in range(1, L + 1):
        eye = np.eye(k)
        for S in itertools.combinations(range(L), k):
            S = list(S)
            _, logdet = np.linalg.slogdet(eye + snr * gram[:, S][:, :, S])
            best = np.minimum(best, logdet / (k * math.log(2.0)))
    return np.maximum(best, 0.0)


# -- public rate functions -------------------------------------------------------------

def practical_rate_adjustment(rate, shaping_G: float, vnr_mu: float):
    """Rate after shaping loss log2(2 pi e G) and coding loss log2(mu / (2 pi e)), >= 0."""
    if shaping_G <= 0 or vnr_mu <= 0:
        raise ConfigError("shaping_G and vnr_mu must be positive")
    loss = math.log2(TWO_PI_E * shaping_G) + math.log2(vnr_mu / TWO_PI_E)
    return np.maximum(np.asarray(rate, dtype=float) - loss, 0.0)


def symmetric_rates(H: np.ndarray, snr: float, decoder: Decoder, a_radius: int = 2) -> np.ndarray:
    """Symmetric rates (bits per complex symbol) for a batch H of shape (B, K, L)."""
    H = np.asarray(H, dtype=complex)
    decoder = Decoder(decoder)
    if H.shape[-1] >= 3 and len(H) > CHUNK:
        return np.concatenate([symmetric_rates(H[i:i + CHUNK], snr, decoder, a_radius)
                               for i in range(0, len(H), CHUNK)])
    if decoder == Decoder.JD:
        return _jd_batch(H, snr)
    M = _mmse_matrix(H, snr)
    if decoder == Decoder.SIC:
        return _sic_batch(M)
    if decoder == Decoder.CF:
        return _cf_batch(M, a_radius)[0]
    return _scf_batch(M, a_radius)


def rate_cf(H, snr: float, a_radius: int = 2) -> float:
    return float(symmetric_rates(np.asarray(H)[None], snr, Decoder.CF, a_radius)[0])


def cf_integer_matrix(H, snr: float, a_radius: int = 2) -> np.ndarray:
    M = _mmse_matrix(np.asarray(H, dtype=complex)[None], snr)
    return _cf_batch(M, a_radius)[1][0]


def rate_scf(H, snr: float, a_radius: int = 2) -> float:
    return float(symmetric_rates(np.asarray(H)[None], snr, Decoder.SCF, a_radius)[0])


def rate_scf_for(H, snr: float, A) -> float:
    """SCF rate with a fixed integer matrix A (row order = decoding order)."""
    H = np.asarray(H, dtype=complex)
    M = _mmse_matrix(H, snr)
    A = np.asarray(A, dtype=complex)
    G = np.conj(A) @ M @ A.T
    piv = _chol_one(G, np.eye(len(A)))
    return float(max(-math.log2(piv.max()), 0.0))


def rate_sic(H, snr: float) -> float:
    return float(symmetric_rates(np.asarray(H)[None], snr, Decoder.SIC)[0])


def rate_jd(H, snr: float) -> float:
    return float(symmetric_rates(np.asarray(H)[None], snr, Decoder.JD)[0])


# -- Monte Carlo ---------------------------------------------------------------

class QEstimate(NamedTuple):
    q: float
    half_width: float
    successes: int
    failures: int
    samples: int


def _adjusted(rates, decoder, lattice_loss):
    if lattice_loss is None or decoder == Decoder.JD:
        return rates
    return practical_rate_adjustment(rates, *lattice_loss)


def sample_rates(cfg: PhyConfig, L: int, workers: int = 1) -> np.ndarray:
    """Symmetric rate of every sample (nan for numerically failed samples)."""
    problems = validate_phy_config(cfg)
    if L < 1:
        problems.append(f"L={L} must be >= 1")
    if problems:
        raise ConfigError("; ".join(problems))
    decoder = Decoder(cfg.decoder)
    n_blocks = -(-cfg.samples // BLOCK)

    def run(block):
        size = min(BLOCK, cfg.samples - block * BLOCK)
        H = channel_block(cfg.seed, cfg.K, L, block)[:size]
        return symmetric_rates(H, cfg.snr, decoder, cfg.a_radius)

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    return _adjusted(np.concatenate(parts), decoder, cfg.lattice_loss)


def estimate_q(cfg: PhyConfig, L: int, workers: int = 1) -> QEstimate:
    """Fraction of channel draws whose symmetric rate strictly exceeds R."""
    rates = sample_rates(cfg, L, workers)
    failed = int(np.isnan(rates).sum())
    ok = int(np.sum(rates > cfg.message_rate))
    q = ok / cfg.samples
    half = 1.96 * math.sqrt(q * (1.0 - q) / cfg.samples)
    return QEstimate(q, half, ok, failed, cfg.samples)


def estimate_q_vector(cfg: PhyConfig, max_users: int, workers: int = 1) -> list[QEstimate]:
    return [estimate_q(cfg, L, workers) for L in range(1, max_users + 1)]


def outcome_pool(cfg: PhyConfig, max_users: int, size: int) -> np.ndarray:
    """Decode/no-decode outcomes from channel draws, row L for L transmitters.

    Feeds the simulator's phy-driven mode; row 0 is unused.
    """
    pool = np.zeros((max_users + 1, size), dtype=np.bool_)
    for L in range(1, max_users + 1):
        sub = PhyConfig(cfg.snr_db, cfg.K, cfg.message_rate, cfg.decoder, size,
                        cfg.seed, cfg.a_radius, cfg.lattice_loss)
        pool[L] = sample_rates(sub, L) > cfg.message_rate
    return pool


REFERENCE_CELLS = (
    # (snr_db, K, message_rate, users per column)
    (6.0, 1, 1.0, (1, 2)),
    (15.0, 1, 2.0, (1, 2)),
    (15.0, 2, 3.0, (1, 2, 3)),
)


def table1(samples: int = 100_000, seed: int = 1, a_radius: int = 2,
           workers: int = 1) -> list[dict]:
    rows = []
    for snr_db, K, R, users in REFERENCE_CELLS:
        for decoder in Decoder:
            cfg = PhyConfig(snr_db, K, R, decoder, samples, seed, a_radius)
            for L in users:
                est = estimate_q(cfg, L, workers)
                rows.append({"decoder": decoder.value, "snr_db": snr_db, "K": K, "R": R,
                             "L": L, "q_hat": est.q, "ci_half_width": est.half_width,
                             "samples": samples, "seed": seed, "failures": est.failures})
    return rows
