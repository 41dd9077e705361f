"""Rank-trend tests, bootstrap resampling and selection folds.

Both trend tests are vectorised over leading axes so a whole
``[Y, F, R]`` stack of bootstrap means is tested in one call. Small
sequences (the usual case: 6 epochs or 7 mixtures) get exact null
distributions; those are integer counts cached per tie pattern, so
p-values are reproducible to the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import stats

from .errors import ValidationError

INVALID_INDEX = -1
EXACT_SPEARMAN_MAX_N = 10
EXACT_MK_MAX_N = 10


@dataclass(frozen=True)
class TrendResult:
    statistic: float
    p_value: float
    n: int
    score: int | None = None  # Mann-Kendall S; None for Spearman


@dataclass(frozen=True, eq=False)
class BootstrapPlan:
    """Resampling indices ``[R, N]`` and their row-normalised weights."""

    indices: np.ndarray
    weights: np.ndarray
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.ndim != 2 or w.shape != idx.shape:
            raise ValidationError(f"indices {idx.shape} and weights {w.shape} must be matching [R, N] matrices")
        if idx.size and idx.min() < 0:
            raise ValidationError("bootstrap indices must be non-negative")
        if not np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValidationError("each bootstrap weight row must sum to 1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def n_replicates(self) -> int:
        return self.indices.shape[0]

    def rows(self, start: int, stop: int) -> "BootstrapPlan":
        return BootstrapPlan(self.indices[start:stop], self.weights[start:stop], self.seed)


# ---------------------------------------------------------------- ranks


def _doubled_centered_ranks(x: np.ndarray) -> np.ndarray:
    """``2*rank - (n+1)`` along the last axis, ties averaged; always integer."""
    n = x.shape[-1]
    r = stats.rankdata(x, method="average", axis=-1)
    return np.rint(2.0 * r).astype(np.int64) - (n + 1)


# ------------------------------------------------------------- spearman


@lru_cache(maxsize=4096)
def _spearman_tail(a: tuple[int, ...], b: tuple[int, ...]) -> np.ndarray:
    """Counts of permutations with ``|sum_i a_i b_pi(i)| >= k`` for every k.

    Subset dynamic programme: state is the set of ``b`` entries already
    assigned to the first ``popcount`` positions, value is a histogram of
    partial sums.
    """
    n = len(a)
    offset = sum(abs(v) for v in a) * max(abs(v) for v in b)
    size = 2 * offset + 1
    dp = np.zeros((1 << n, size), dtype=np.int64)
    dp[0, offset] = 1
    for mask in range(1 << n):
        i = mask.bit_count()
        if i == n:
            continue
        row = dp[mask]
        ai = a[i]
        for j in range(n):
            bit = 1 << j
            if mask & bit:
                continue
            s = ai * b[j]
            target = dp[mask | bit]
            if s >= 0:
                target[s:] += row[: size - s]
            else:
                target[: size + s] += row[-s:]
    final = dp[-1]
    by_abs = np.zeros(offset + 1, dtype=np.int64)
    np.add.at(by_abs, np.abs(np.arange(size) - offset), final)
    return np.cumsum(by_abs[::-1])[::-1]


def _spearman_exact_p(ax: np.ndarray, d: np.ndarray, bv: np.ndarray, ssx: np.ndarray) -> np.ndarray:
    n = ax.shape[-1]
    flat_ax = ax.reshape(-1, n)
    abs_d = np.abs(d).ravel()
    flat_ss = ssx.ravel()
    b_key = tuple(sorted(bv.tolist()))
    total = float(math.factorial(n))
    p = np.empty(abs_d.shape, dtype=np.float64)

    untied = flat_ss == n * (n * n - 1) // 3
    if untied.any():
        tail = _spearman_tail(tuple(range(-(n - 1), n, 2)), b_key)
        p[untied] = tail[abs_d[untied]] / total
    tied = np.flatnonzero(~untied)
    if tied.size:
        patterns, inverse = np.unique(np.sort(flat_ax[tied], axis=1), axis=0, return_inverse=True)
        inverse = inverse.ravel()
        for u, pattern in enumerate(patterns):
            rows = tied[inverse == u]
            tail = _spearman_tail(tuple(pattern.tolist()), b_key)
            p[rows] = tail[abs_d[rows]] / total
    return p.reshape(d.shape)


def spearman_fold(a, v, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Spearman rho and two-sided p of every slice along ``axis`` against ``v``.

    Exact permutation p-values for ``n <= 10``, Student-t approximation
    beyond. Constant slices get ``rho = 0, p = 1``.
    """
    x = np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1)
    v = np.asarray(v, dtype=np.float64).ravel()
    n = x.shape[-1]
    if n < 3:
        raise ValidationError(f"Spearman trend needs at least 3 points, got {n}")
    if v.shape[0] != n:
        raise ValidationError(f"reference vector has length {v.shape[0]}, slices have length {n}")
    if np.all(v == v[0]):
        raise ValidationError("reference vector is constant; Spearman correlation undefined")

    ax = _doubled_centered_ranks(x)
    bv = _doubled_centered_ranks(v)
    d = ax @ bv
    ssx = np.einsum("...i,...i->...", ax, ax)
    ssv = int(bv @ bv)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = d / np.sqrt(ssx.astype(np.float64) * ssv)
    rho = np.where(ssx == 0, 0.0, np.clip(rho, -1.0, 1.0))

    if n <= EXACT_SPEARMAN_MAX_N:
        p = _spearman_exact_p(ax, d, bv, ssx)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.abs(rho) * np.sqrt((n - 2) / (1.0 - rho * rho))
        p = np.where(np.abs(rho) >= 1.0, 0.0, 2.0 * stats.t.sf(t, n - 2))
        p = np.where(ssx == 0, 1.0, p)
    return rho, np.clip(p, 0.0, 1.0)


def spearman_trend(x, v) -> TrendResult:
    x = np.asarray(x, dtype=np.float64).ravel()
    rho, p = spearman_fold(x, v)
    return TrendResult(float(rho), float(p), x.size)


# ---------------------------------------------------------- mann-kendall


@lru_cache(maxsize=None)
def _qbinom(m: int, k: int) -> tuple[int, ...]:
    """Gaussian binomial [m choose k]_q as a coefficient tuple."""
    if k == 0 or k == m:
        return (1,)
    a = _qbinom(m - 1, k - 1)
    b = _qbinom(m - 1, k)
    out = [0] * (k * (m - k) + 1)
    for i, c in enumerate(a):
        out[i] += c
    for i, c in enumerate(b):
        out[i + k] += c
    return tuple(out)


def _polymul(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return tuple(out)


@lru_cache(maxsize=None)
def _mk_tail(groups: tuple[int, ...]) -> tuple[np.ndarray, int]:
    """Null tail counts of ``|S|`` for a sequence with the given tie groups.

    Every distinct arrangement of the multiset is equally likely; the
    arrangement count by inversion number is the q-multinomial
    coefficient, and ``S = untied_pairs - 2 * inversions``.
    """
    poly: tuple[int, ...] = (1,)
    filled = 0
    for t in groups:
        filled += t
        poly = _polymul(poly, _qbinom(filled, t))
    m = len(poly) - 1  # untied pairs
    by_abs = np.zeros(m + 1, dtype=np.int64)
    for inv, count in enumerate(poly):
        by_abs[abs(m - 2 * inv)] += count
    return np.cumsum(by_abs[::-1])[::-1], sum(poly)


def _mk_components(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """S and per-element tie-group sizes along the last axis (O(n^2) pairs)."""
    n = x.shape[-1]
    s = np.zeros(x.shape[:-1], dtype=np.int64)
    eqc = np.ones(x.shape, dtype=np.int64)
    for i in range(n - 1):
        xi = x[..., i : i + 1]
        later = x[..., i + 1 :]
        s += (later > xi).sum(axis=-1) - (later < xi).sum(axis=-1)
        eq = later == xi
        eqc[..., i] += eq.sum(axis=-1)
        eqc[..., i + 1 :] += eq
    return s, eqc


def _mk_exact_p(s: np.ndarray, eqc: np.ndarray, n1: np.ndarray) -> np.ndarray:
    n = eqc.shape[-1]
    abs_s = np.abs(s).ravel()
    flat_eqc = eqc.reshape(-1, n)
    p = np.empty(abs_s.shape, dtype=np.float64)
    untied = n1.ravel() == 0
    if untied.any():
        tail, total = _mk_tail((1,) * n)
        p[untied] = tail[abs_s[untied]] / total
    tied = np.flatnonzero(~untied)
    if tied.size:
        patterns, inverse = np.unique(np.sort(flat_eqc[tied], axis=1), axis=0, return_inverse=True)
        inverse = inverse.ravel()
        for u, pattern in enumerate(patterns):
            sizes, counts = np.unique(pattern, return_counts=True)
            groups = tuple(int(t) for t, c in zip(sizes, counts) for _ in range(c // t))
            tail, total = _mk_tail(groups)
            rows = tied[inverse == u]
            p[rows] = tail[abs_s[rows]] / total
    return p.reshape(s.shape)


def mk_fold(a, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Mann-Kendall tau-b and two-sided p of every slice along ``axis``."""
    tau, p, _ = mk_fold_full(a, axis)
    return tau, p


def mk_fold_full(a, axis: int = -1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like :func:`mk_fold` but also returns the integer score S.

    Exact null of S for ``n <= 10``; beyond that a normal approximation with
    continuity correction and tie-adjusted variance.
    """
    x = np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    if n < 3:
        raise ValidationError(f"Mann-Kendall test needs at least 3 points, got {n}")
    s, eqc = _mk_components(x)
    n0 = n * (n - 1) // 2
    n1 = (eqc - 1).sum(axis=-1) // 2
    all_tied = n1 == n0
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = s / np.sqrt(float(n0) * (n0 - n1))
    tau = np.where(all_tied, 0.0, tau)

    if n <= EXACT_MK_MAX_N:
        p = _mk_exact_p(s, eqc, n1)
    else:
        ties = ((eqc - 1) * (2 * eqc + 5)).sum(axis=-1)
        var = (n * (n - 1) * (2 * n + 5) - ties) / 18.0
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (s - np.sign(s)) / np.sqrt(var)
        p = np.where(var > 0, 2.0 * stats.norm.sf(np.abs(z)), 1.0)
    p = np.where(all_tied, 1.0, p)
    return tau, np.clip(p, 0.0, 1.0), s


def mann_kendall(x) -> TrendResult:
    x = np.asarray(x, dtype=np.float64).ravel()
    tau, p, s = mk_fold_full(x)
    return TrendResult(float(tau), float(p), x.size, int(s))


# ------------------------------------------------------------ resampling


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, replicate)``."""
    key = np.array([seed, replicate], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_uniform(r: int, n: int, seed: int) -> BootstrapPlan:
    """``r`` bootstrap rows of ``n`` i.i.d. uniform indices in ``[0, n)``.

    Row ``i`` depends only on ``(seed, i)``, so any split of the rows
    across workers reproduces the same matrix.
    """
    if r < 1 or n < 1:
        raise ValidationError(f"replicate count and sample count must be positive, got r={r}, n={n}")
    if not 0 <= seed < 2**64:
        raise ValidationError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    indices = np.empty((r, n), dtype=np.int64)
    for i in range(r):
        indices[i] = replicate_rng(seed, i).integers(0, n, size=n)
    return BootstrapPlan(indices, np.full((r, n), 1.0 / n), seed)


def bootstrap_fold(a, dim: int, plan: BootstrapPlan) -> np.ndarray:
    """Replace axis ``dim`` of ``a`` by the weighted resampled replicate axis."""
    a = np.asarray(a, dtype=np.float64)
    if not 0 <= dim < a.ndim:
        raise ValidationError(f"axis {dim} out of range for array of rank {a.ndim}")
    size = a.shape[dim]
    if plan.indices.size and plan.indices.max() >= size:
        raise ValidationError(f"bootstrap index {int(plan.indices.max())} out of range for axis of length {size}")
    R = plan.n_replicates
    dense = np.zeros((R, size), dtype=np.float64)
    rows = np.broadcast_to(np.arange(R)[:, None], plan.indices.shape)
    np.add.at(dense, (rows, plan.indices), plan.weights)
    out = np.tensordot(a, dense, axes=([dim], [1]))
    return np.moveaxis(out, -1, dim)


# --------------------------------------------------------- selection ops


def top_k_indices(a, k: int, largest: bool = True) -> np.ndarray:
    """Per-column indices of the ``k`` extreme entries of an ``[F, R]`` matrix.

    Entries equal to the masking sentinel (``-inf`` when ``largest``,
    ``+inf`` otherwise) are never selected; their slots hold
    ``INVALID_INDEX``. Ties keep the lower index first.
    """
    a = np.asarray(a, dtype=np.float64)
    vector = a.ndim == 1
    if vector:
        a = a[:, None]
    F = a.shape[0]
    if k < 0 or k > F:
        raise ValidationError(f"k={k} must lie in [0, {F}]")
    key = -a if largest else a
    order = np.argsort(key, axis=0, kind="stable")[:k]
    picked = np.take_along_axis(a, order, axis=0)
    order[picked == (-np.inf if largest else np.inf)] = INVALID_INDEX
    return order[:, 0] if vector else order


def index_count(l, f: int) -> np.ndarray:
    """Occurrences of each index ``0..f-1``; ``INVALID_INDEX`` entries are ignored."""
    l = np.asarray(l, dtype=np.int64).ravel()
    valid = l[l != INVALID_INDEX]
    if valid.size and (valid.min() < 0 or valid.max() >= f):
        bad = valid[(valid < 0) | (valid >= f)][0]
        raise ValidationError(f"index {int(bad)} outside domain [0, {f})")
    return np.bincount(valid, minlength=f).astype(np.int64)
