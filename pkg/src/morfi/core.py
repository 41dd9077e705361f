"""Bootstrap monotonic-latent identification, composite direction, control group."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Literal

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ValidationError
from .tensor_store import ActivationTensor
from .trend_stats import (
    INVALID_INDEX,
    bootstrap_fold,
    index_count,
    mk_fold,
    sample_uniform,
    spearman_fold,
    top_k_indices,
)

Axis = Literal["epochs", "mixtures"]
_AXIS_DIM = {"epochs": 0, "mixtures": 1}

# Replicates processed per work unit. Fixed so results never depend on the
# number of workers.
CHUNK = 64

SCHEMA_VERSION = 1
CSV_COLUMNS = ("rank", "latent", "frequency", "mean_rho", "mean_tau", "mean_delta", "direction")


@dataclass(frozen=True)
class MorfiConfig:
    aggregation_axis: Axis = "epochs"
    replicates: int = 1000
    top_k: int = 1000
    alpha_sig: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.aggregation_axis not in _AXIS_DIM:
            raise ValidationError(f"aggregation_axis must be 'epochs' or 'mixtures', got {self.aggregation_axis!r}")
        # alpha_sig = 1 is admitted as a degenerate "no significance filter" control
        if not 0 < self.alpha_sig <= 1:
            raise ValidationError(f"alpha_sig must lie in (0, 1], got {self.alpha_sig}")
        if self.replicates < 1 or self.top_k < 1:
            raise ValidationError("replicates and top_k must be >= 1")

    @property
    def trend_axis(self) -> Axis:
        return "mixtures" if self.aggregation_axis == "epochs" else "epochs"


@dataclass(frozen=True)
class LatentEntry:
    latent: int
    frequency: float
    mean_rho: float
    mean_tau: float
    mean_delta: float


@dataclass(frozen=True)
class RankedLatentList:
    direction: Literal["increasing", "decreasing"]
    entries: tuple[LatentEntry, ...]
    counts: np.ndarray = field(repr=False, compare=False, default=None)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def latents(self) -> list[int]:
        return [e.latent for e in self.entries]

    def top(self, depth: int) -> list[int]:
        return self.latents[:depth]


@dataclass(frozen=True)
class CompositeDirection:
    delta: np.ndarray
    axis: Axis


def _trend_dims(a: ActivationTensor, cfg: MorfiConfig) -> tuple[int, np.ndarray]:
    x_dim = _AXIS_DIM[cfg.aggregation_axis]
    v = a.axis_labels(cfg.trend_axis)
    if v.size < 3:
        raise ValidationError(f"trend axis {cfg.trend_axis!r} has {v.size} conditions; at least 3 are required")
    return x_dim, v


def _direction_masks(rho, p_rho, tau, p_tau, alpha):
    sig = (p_rho < alpha) & (p_tau < alpha)
    up = sig & (rho > 0) & (tau > 0)
    down = sig & (rho < 0) & (tau < 0)
    return up, down


def _process_chunk(data, x_dim, v, plan, cfg):
    boot = bootstrap_fold(data, 3, plan)          # [T, P, F, r]
    means = boot.mean(axis=x_dim)                  # [Y, F, r]
    rho, p_rho = spearman_fold(means, v, axis=0)   # [F, r]
    tau, p_tau = mk_fold(means, axis=0)
    delta = means[-1] - means[0]
    up, down = _direction_masks(rho, p_rho, tau, p_tau, cfg.alpha_sig)
    k = min(cfg.top_k, delta.shape[0])
    l_up = top_k_indices(np.where(up, delta, -np.inf), k, largest=True)
    l_down = top_k_indices(np.where(down, delta, np.inf), k, largest=False)
    F = delta.shape[0]
    return (
        index_count(l_up, F),
        index_count(l_down, F),
        rho.sum(axis=1),
        tau.sum(axis=1),
        delta.sum(axis=1),
    )


def _rank(direction, counts, sums, R) -> RankedLatentList:
    rho_sum, tau_sum, delta_sum = sums
    hit = np.flatnonzero(counts)
    freq = counts[hit] / R
    mean_delta = delta_sum[hit] / R
    # frequency desc, |mean delta| desc, latent asc
    order = np.lexsort((hit, -np.abs(mean_delta), -freq))
    entries = tuple(
        LatentEntry(int(hit[i]), float(freq[i]), float(rho_sum[hit[i]] / R), float(tau_sum[hit[i]] / R), float(mean_delta[i]))
        for i in order
    )
    return RankedLatentList(direction, entries, counts)


def identify_monotonic_latents(
    a: ActivationTensor, cfg: MorfiConfig = MorfiConfig(), threads: int = 1
) -> tuple[RankedLatentList, RankedLatentList]:
    """Rank latents by how often they trend significantly across bootstrap replicates.

    Each replicate resamples the evaluation samples with replacement, averages
    over the aggregation axis, and keeps latents whose Spearman and
    Mann-Kendall tests are both significant with agreeing sign. Within a
    replicate the top-K by last-minus-first change are selected per
    direction; the final score is the fraction of replicates selecting a
    latent. Output is bit-identical for any ``threads``.
    """
    x_dim, v = _trend_dims(a, cfg)
    data = a.data.astype(np.float64)
    T, P, F, N = data.shape
    plan = sample_uniform(cfg.replicates, N, cfg.seed)
    bounds = [(s, min(s + CHUNK, cfg.replicates)) for s in range(0, cfg.replicates, CHUNK)]

    def work(b):
        return _process_chunk(data, x_dim, v, plan.rows(*b), cfg)

    with threadpool_limits(limits=1):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, bounds))
        else:
            parts = [work(b) for b in bounds]

    # fixed reduction order
    c_up = np.zeros(F, dtype=np.int64)
    c_down = np.zeros(F, dtype=np.int64)
    sums = [np.zeros(F) for _ in range(3)]
    for cu, cd, *s in parts:
        c_up += cu
        c_down += cd
        for acc, x in zip(sums, s):
            acc += x
    R = cfg.replicates
    return _rank("increasing", c_up, sums, R), _rank("decreasing", c_down, sums, R)


def _global_means(a: ActivationTensor, cfg: MorfiConfig) -> np.ndarray:
    x_dim, _ = _trend_dims(a, cfg)
    m = a.data.astype(np.float64).mean(axis=3)   # [T, P, F]
    return m.mean(axis=x_dim)                    # [Y, F]


def composite_direction(a: ActivationTensor, cfg: MorfiConfig = MorfiConfig()) -> CompositeDirection:
    """Full-data last-minus-first change of each latent along the trend axis."""
    x_dim = _AXIS_DIM[cfg.aggregation_axis]
    if a.axis_labels(cfg.trend_axis).size < 2:
        raise ValidationError("composite direction needs at least 2 trend conditions")
    m = a.data.astype(np.float64).mean(axis=3).mean(axis=x_dim)
    return CompositeDirection(m[-1] - m[0], cfg.trend_axis)


def global_trending_set(a: ActivationTensor, cfg: MorfiConfig = MorfiConfig()) -> np.ndarray:
    """Boolean mask of latents whose fully averaged trajectory trends significantly."""
    _, v = _trend_dims(a, cfg)
    m = _global_means(a, cfg)
    rho, p_rho = spearman_fold(m, v, axis=0)
    tau, p_tau = mk_fold(m, axis=0)
    up, down = _direction_masks(rho, p_rho, tau, p_tau, cfg.alpha_sig)
    return up | down


def select_control_group(a: ActivationTensor, cfg: MorfiConfig = MorfiConfig(), n_control: int = 10) -> list[int]:
    """Non-trending latents with the smallest absolute last-minus-first change."""
    m = _global_means(a, cfg)
    trending = global_trending_set(a, cfg)
    change = np.abs(m[-1] - m[0])
    eligible = int((~trending).sum())
    if n_control > eligible:
        raise ValidationError(f"requested {n_control} control latents but only {eligible} latents are non-trending")
    picked = top_k_indices(np.where(trending, np.inf, change), n_control, largest=False)
    assert not np.any(picked == INVALID_INDEX)
    return [int(i) for i in picked]


# ------------------------------------------------------------- reporting


def ranked_to_rows(*lists: RankedLatentList) -> list[dict]:
    rows = []
    for lst in lists:
        for rank, e in enumerate(lst.entries, start=1):
            rows.append({"rank": rank, **asdict(e), "direction": lst.direction})
    return rows


def ranked_to_csv(*lists: RankedLatentList) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in ranked_to_rows(*lists):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def ranked_to_json(*lists: RankedLatentList) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "lists": {lst.direction: ranked_to_rows(lst) for lst in lists},
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def read_ranked_csv(path, direction: str | None = None) -> list[int]:
    """Latent indices from a ranked CSV, optionally for one direction, in rank order."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if direction is not None:
        rows = [r for r in rows if r["direction"] == direction]
    return [int(r["latent"]) for r in rows]
