"""Residual-stream steering: dictionary handling, steering vectors and the
screen / grid-search / rank harness that picks the most impactful latents.
"""

from __future__ import annotations

import abc
import hashlib
import json
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import OracleError, ValidationError

ALPHA_INIT = 0.4
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 16))  # 0.05 .. 0.75
SCREEN_KEEP = 40
FINAL_KEEP = 10


@dataclass(frozen=True, eq=False)
class Dictionary:
    directions: np.ndarray  # [F, d_model], unit rows
    magnitudes: np.ndarray  # [F]

    @property
    def n_latents(self) -> int:
        return self.directions.shape[0]

    @property
    def d_model(self) -> int:
        return self.directions.shape[1]


def normalize_dictionary(raw) -> Dictionary:
    """Scale decoder rows to unit length, keeping the removed norms."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValidationError(f"decoder matrix must be [F, d_model], got shape {raw.shape}")
    norms = np.linalg.norm(raw, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"decoder row {int(zero[0])} has zero norm")
    directions = raw / norms[:, None]
    directions.setflags(write=False)
    norms.setflags(write=False)
    return Dictionary(directions, norms)


@dataclass(frozen=True, eq=False)
class SteeringSpec:
    """One intervention: a latent (or SAE-space composite vector), polarity, strength."""

    latent: int | None = None
    vector: np.ndarray | None = None
    polarity: int = 1
    alpha: float = ALPHA_INIT
    layer_scale: float = 1.0
    layer: int = 0

    def __post_init__(self):
        if (self.latent is None) == (self.vector is None):
            raise ValidationError("a steering spec needs exactly one of latent or vector")
        if self.polarity not in (-1, 1):
            raise ValidationError(f"polarity must be -1 or +1, got {self.polarity}")
        if self.alpha < 0:
            raise ValidationError(f"steering strength must be >= 0, got {self.alpha}")
        if not self.layer_scale > 0:
            raise ValidationError(f"layer scale must be > 0, got {self.layer_scale}")
        if self.vector is not None:
            v = np.asarray(self.vector, dtype=np.float64).ravel()
            v.setflags(write=False)
            object.__setattr__(self, "vector", v)

    def cache_key(self, dataset: str) -> tuple:
        source = ("latent", int(self.latent)) if self.latent is not None else (
            "vector", hashlib.sha1(self.vector.tobytes()).hexdigest())
        return source + (self.polarity, round(float(self.alpha), 12), float(self.layer_scale), self.layer, dataset)


def build_steering_vector(dictionary: Dictionary, spec: SteeringSpec) -> np.ndarray:
    """``c * alpha * s * direction`` in residual-stream coordinates.

    A composite source is an SAE-space vector; it is mapped through the
    decoder and unit-normalised first, so its strength is on the same
    scale as a single latent.
    """
    if spec.latent is not None:
        if not 0 <= spec.latent < dictionary.n_latents:
            raise ValidationError(f"latent {spec.latent} outside dictionary of {dictionary.n_latents}")
        direction = dictionary.directions[spec.latent]
    else:
        if spec.vector.shape[0] != dictionary.n_latents:
            raise ValidationError(f"composite vector has length {spec.vector.shape[0]}, dictionary has {dictionary.n_latents} latents")
        projected = spec.vector @ dictionary.directions
        norm = np.linalg.norm(projected)
        if norm == 0:
            raise ValidationError("composite vector projects to zero in the residual stream")
        direction = projected / norm
    return spec.polarity * spec.alpha * spec.layer_scale * direction


def layer_scale(hidden_vectors) -> float:
    """Mean L2 norm of residual-stream vectors taken at one layer."""
    h = np.asarray(hidden_vectors, dtype=np.float64)
    if h.size == 0:
        raise ValidationError("layer scale needs at least one hidden vector")
    if h.ndim == 1:
        h = h[None, :]
    return float(np.linalg.norm(h, axis=-1).mean())


# --------------------------------------------------------------- oracles


class ModelOracle(abc.ABC):
    """A model whose task accuracy can be read under an optional intervention.

    Implementations must be deterministic for a fixed spec. Set
    ``concurrent_safe`` to True only if ``evaluate`` may be called from
    several threads at once.
    """

    concurrent_safe: bool = False

    @abc.abstractmethod
    def evaluate(self, spec: SteeringSpec | None, dataset: str = "dev") -> float: ...

    @property
    def baseline(self) -> float:
        return self.evaluate(None)


class CachingOracle(ModelOracle):
    """Memoises evaluations by (source, polarity, strength, dataset) and counts real calls."""

    def __init__(self, inner: ModelOracle):
        self.inner = inner
        self.concurrent_safe = inner.concurrent_safe
        self.calls = 0
        self._cache: dict = {}
        self._lock = threading.Lock()

    def evaluate(self, spec, dataset="dev"):
        key = ("baseline", dataset) if spec is None else spec.cache_key(dataset)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        acc = self.inner.evaluate(spec, dataset)
        if not (isinstance(acc, (int, float)) and 0.0 <= acc <= 1.0):
            raise OracleError(f"oracle returned accuracy {acc!r} outside [0, 1]")
        with self._lock:
            if key not in self._cache:
                self._cache[key] = float(acc)
                self.calls += 1
            return self._cache[key]


class ExternalOracle(ModelOracle):
    """Talks to a subprocess over line-delimited JSON.

    Each request is one JSON object on stdin, ``{"latent": k, "c": c,
    "alpha": a, "layer_scale": s, "dataset": d}`` (or ``"vector": [...]`` in
    place of ``"latent"``; neither for the unsteered baseline). The process
    answers each with one line ``{"accuracy": x}``.
    """

    concurrent_safe = False

    def __init__(self, command: Sequence[str], timeout: float | None = None):
        self.command = list(command)
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise OracleError(f"could not start external oracle {self.command}: {exc}") from exc
        self._lock = threading.Lock()

    def _request(self, payload: dict) -> dict:
        with self._lock:
            try:
                self._proc.stdin.write(json.dumps(payload) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise OracleError(f"external oracle pipe failed: {exc}") from exc
        if not line:
            raise OracleError(f"external oracle exited (code {self._proc.poll()}) without answering {payload}")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleError(f"external oracle sent malformed JSON: {line!r}") from exc

    def evaluate(self, spec, dataset="dev"):
        payload: dict = {"dataset": dataset}
        if spec is not None:
            if spec.latent is not None:
                payload["latent"] = int(spec.latent)
            else:
                payload["vector"] = spec.vector.tolist()
            payload.update(c=spec.polarity, alpha=spec.alpha, layer_scale=spec.layer_scale, layer=spec.layer)
        reply = self._request(payload)
        if "accuracy" not in reply:
            raise OracleError(f"external oracle reply lacks 'accuracy': {reply}")
        return float(reply["accuracy"])

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------- harness


class TunedLatent(NamedTuple):
    latent: int
    alpha: float
    accuracy: float


@dataclass(frozen=True)
class Screening:
    selected: list[int]
    accuracies: dict[int, float]
    baseline: float


@dataclass(frozen=True)
class SteeringResult:
    """Final ranking: ``(latent, signed_strength, accuracy)`` triples."""

    entries: list[tuple[int, float, float]]
    polarity: int
    baseline: float | None = None
    screen_log: dict[int, float] = field(default_factory=dict)
    oracle_calls: int | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "polarity": self.polarity,
            "baseline": self.baseline,
            "oracle_calls": self.oracle_calls,
            "entries": [{"latent": k, "signed_strength": s, "accuracy": a} for k, s, a in self.entries],
            "screen_log": {str(k): v for k, v in self.screen_log.items()},
        }


def _candidate_list(candidates) -> list[int]:
    if hasattr(candidates, "latents"):
        return list(candidates.latents)
    return [int(k) for k in candidates]


def _evaluate_many(oracle: ModelOracle, specs: list[SteeringSpec], dataset: str, threads: int) -> list[float]:
    def one(spec):
        try:
            return oracle.evaluate(spec, dataset)
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(f"oracle failed on latent {spec.latent} (c={spec.polarity}, alpha={spec.alpha}): {exc}") from exc

    if threads > 1 and oracle.concurrent_safe:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, specs))
    return [one(s) for s in specs]


def screen_latents(
    candidates,
    c: int,
    oracle: ModelOracle,
    dictionary: Dictionary | None = None,
    alpha_init: float = ALPHA_INIT,
    *,
    scale: float = 1.0,
    layer: int = 0,
    keep: int = SCREEN_KEEP,
    dataset: str = "dev",
    threads: int = 1,
) -> Screening:
    """Steer every candidate at ``alpha_init``; keep the best ``keep`` that beat baseline."""
    if not alpha_init > 0:
        raise ValidationError("alpha_init must be positive")
    latents = _candidate_list(candidates)
    if dictionary is not None:
        bad = [k for k in latents if not 0 <= k < dictionary.n_latents]
        if bad:
            raise ValidationError(f"candidate latents {bad[:5]} outside dictionary of {dictionary.n_latents}")
    base = oracle.evaluate(None, dataset)
    specs = [SteeringSpec(latent=k, polarity=c, alpha=alpha_init, layer_scale=scale, layer=layer) for k in latents]
    accs = _evaluate_many(oracle, specs, dataset, threads)
    log = dict(zip(latents, accs))
    better = [(a, k) for k, a in log.items() if a > base]
    better.sort(key=lambda t: (-t[0], t[1]))
    return Screening([k for _, k in better[:keep]], log, base)


def grid_search_strength(
    survivors: Iterable[int],
    c: int,
    oracle: ModelOracle,
    dictionary: Dictionary | None = None,
    grid: Sequence[float] = DEFAULT_GRID,
    *,
    scale: float = 1.0,
    layer: int = 0,
    dataset: str = "dev",
    threads: int = 1,
) -> list[TunedLatent]:
    """Best strength on ``grid`` per latent; ties go to the smaller strength."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValidationError("strength grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("strength grid must be strictly increasing")
    out = []
    for k in survivors:
        specs = [SteeringSpec(latent=k, polarity=c, alpha=g, layer_scale=scale, layer=layer) for g in grid]
        accs = _evaluate_many(oracle, specs, dataset, threads)
        best = 0
        for i, a in enumerate(accs):
            if a > accs[best]:
                best = i
        alpha = grid[best]
        # re-read at the argmax, as the algorithm does; a cache makes this free
        acc = oracle.evaluate(SteeringSpec(latent=k, polarity=c, alpha=alpha, layer_scale=scale, layer=layer), dataset)
        out.append(TunedLatent(int(k), alpha, acc))
    return out


def rank_final(tuned: Sequence[TunedLatent], c: int = 1, keep: int = FINAL_KEEP, **extra) -> SteeringResult:
    ordered = sorted(tuned, key=lambda t: (-t.accuracy, t.latent, t.alpha))[:keep]
    return SteeringResult([(t.latent, c * t.alpha, t.accuracy) for t in ordered], polarity=c, **extra)


def find_impactful_latents(
    candidates,
    c: int,
    oracle: ModelOracle,
    dictionary: Dictionary | None = None,
    *,
    scale: float = 1.0,
    alpha_init: float = ALPHA_INIT,
    grid: Sequence[float] = DEFAULT_GRID,
    layer: int = 0,
    dataset: str = "dev",
    threads: int = 1,
    screen_keep: int = SCREEN_KEEP,
    final_keep: int = FINAL_KEEP,
) -> SteeringResult:
    """Screen at a fixed strength, grid-search survivors, return the top ranking."""
    cached = oracle if isinstance(oracle, CachingOracle) else CachingOracle(oracle)
    kw = dict(scale=scale, layer=layer, dataset=dataset, threads=threads)
    screening = screen_latents(candidates, c, cached, dictionary, alpha_init, keep=screen_keep, **kw)
    tuned = grid_search_strength(screening.selected, c, cached, dictionary, grid, **kw)
    return rank_final(
        tuned, c, final_keep, baseline=screening.baseline, screen_log=screening.accuracies, oracle_calls=cached.calls
    )


def steer_composite(
    delta,
    c: int,
    oracle: ModelOracle,
    *,
    scale: float = 1.0,
    grid: Sequence[float] = DEFAULT_GRID,
    layer: int = 0,
    dataset: str = "dev",
) -> TunedLatent:
    """Grid-search the strength of the composite SAE-space direction.

    Returned ``latent`` is -1 since no single latent is involved.
    """
    best = None
    for g in grid:
        acc = oracle.evaluate(SteeringSpec(vector=delta, polarity=c, alpha=float(g), layer_scale=scale, layer=layer), dataset)
        if best is None or acc > best.accuracy:
            best = TunedLatent(-1, float(g), acc)
    return best
