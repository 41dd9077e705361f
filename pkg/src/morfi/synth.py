"""Synthetic ground truth: planted-trend tensors and planted-causal oracles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping

import numpy as np

from .core import RankedLatentList
from .errors import ValidationError
from .steering import Dictionary, ModelOracle, SteeringSpec, build_steering_vector
from .tensor_store import ActivationTensor

DEFAULT_MIXTURES = (0, 10, 25, 50, 75, 90, 100)


@dataclass(frozen=True)
class PlantConfig:
    shape: tuple[int, int, int, int] = (6, 7, 2048, 64)
    increasing: tuple[int, ...] = tuple(range(20))
    decreasing: tuple[int, ...] = tuple(range(20, 40))
    step: float = 1.0
    sigma: float = 0.1
    baseline: float = 1.0
    seed: int = 0
    trend_axis: str = "mixtures"
    zero_inflation: float = 0.0
    dtype: str = "float32"
    epoch_axis: tuple[float, ...] | None = None
    mixture_axis: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "increasing", tuple(int(i) for i in self.increasing))
        object.__setattr__(self, "decreasing", tuple(int(i) for i in self.decreasing))
        if len(self.shape) != 4 or min(self.shape) < 1:
            raise ValidationError(f"shape must be four positive sizes (T, P, F, N), got {self.shape}")
        F = self.shape[2]
        overlap = set(self.increasing) & set(self.decreasing)
        if overlap:
            raise ValidationError(f"planted sets overlap on latents {sorted(overlap)}")
        bad = [i for i in self.increasing + self.decreasing if not 0 <= i < F]
        if bad:
            raise ValidationError(f"planted latents {bad} outside [0, {F})")
        if self.step < 0 or self.sigma < 0:
            raise ValidationError("step and sigma must be non-negative")
        if self.trend_axis not in ("epochs", "mixtures"):
            raise ValidationError(f"trend_axis must be 'epochs' or 'mixtures', got {self.trend_axis!r}")
        if not 0 <= self.zero_inflation < 1:
            raise ValidationError("zero_inflation must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlantConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown plant config keys {sorted(unknown)}")
        return cls(**d)


def _default_axes(cfg: PlantConfig):
    T, P = cfg.shape[:2]
    epochs = cfg.epoch_axis or tuple(float(e) for e in ([5] + [10 * i for i in range(1, T)]))[:T]
    if cfg.mixture_axis:
        mixtures = cfg.mixture_axis
    elif P == len(DEFAULT_MIXTURES):
        mixtures = DEFAULT_MIXTURES
    else:
        mixtures = tuple(np.linspace(0, 100, P).tolist())
    return epochs, mixtures


def generate_planted_tensor(cfg: PlantConfig) -> tuple[ActivationTensor, dict]:
    """Gaussian-noise tensor with linear trends planted along the trend axis.

    Increasing latents get ``baseline + y * step`` at trend position ``y``;
    decreasing ones the mirror image ``baseline + (Y - 1 - y) * step``.
    """
    T, P, F, N = cfg.shape
    rng = np.random.default_rng(cfg.seed)
    data = cfg.baseline + cfg.sigma * rng.standard_normal((T, P, F, N))
    trend_dim = 0 if cfg.trend_axis == "epochs" else 1
    Y = cfg.shape[trend_dim]
    shape = [1, 1, 1, 1]
    shape[trend_dim] = Y
    ramp = (cfg.step * np.arange(Y, dtype=np.float64)).reshape(shape)
    if cfg.increasing:
        data[:, :, list(cfg.increasing), :] += ramp
    if cfg.decreasing:
        data[:, :, list(cfg.decreasing), :] += np.flip(ramp, axis=trend_dim)
    if cfg.zero_inflation:
        data[rng.random(data.shape) < cfg.zero_inflation] = 0.0
    epochs, mixtures = _default_axes(cfg)
    tensor = ActivationTensor(data.astype(cfg.dtype), epochs, mixtures, [f"s{i}" for i in range(N)])
    truth = {"increasing": list(cfg.increasing), "decreasing": list(cfg.decreasing), "trend_axis": cfg.trend_axis}
    return tensor, truth


def score_recovery(
    predicted: tuple[RankedLatentList, RankedLatentList] | tuple[list[int], list[int]],
    truth: Mapping[str, Iterable[int]],
    depth: int,
) -> dict:
    """Precision/recall of the top-``depth`` predictions in each direction.

    An empty prediction has precision 1.0 by convention, flagged with
    ``zero_support``.
    """
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    out = {}
    for name, pred in zip(("increasing", "decreasing"), predicted):
        pred = pred.top(depth) if isinstance(pred, RankedLatentList) else list(pred)[:depth]
        true = set(truth[name])
        hits = len(set(pred) & true)
        out[name] = {
            "precision": hits / len(pred) if pred else 1.0,
            "recall": hits / len(true) if true else 1.0,
            "zero_support": not pred,
            "depth": depth,
        }
    return out


# ---------------------------------------------------------------- oracle


@dataclass(frozen=True)
class CausalOracleConfig:
    planted_latent: int = 0
    planted_polarity: int = 1
    alpha_opt: float = 0.35
    base_accuracy: float = 0.2
    peak_gain: float = 0.2
    width: float = 0.1
    distractors: Mapping[int, float] = field(default_factory=dict)
    alpha_init: float = 0.4
    layer_scale: float = 1.0
    off_target_penalty: float = 0.0

    def __post_init__(self):
        if self.planted_polarity not in (-1, 1):
            raise ValidationError("planted_polarity must be -1 or +1")
        if not (0 <= self.base_accuracy <= 1 and 0 <= self.base_accuracy + self.peak_gain <= 1):
            raise ValidationError("base_accuracy and base_accuracy + peak_gain must lie in [0, 1]")
        if self.width <= 0:
            raise ValidationError("width must be positive")
        object.__setattr__(self, "distractors", {int(k): float(v) for k, v in dict(self.distractors).items()})

    @classmethod
    def from_dict(cls, d: Mapping) -> "CausalOracleConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown causal oracle keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractors"] = {str(k): v for k, v in self.distractors.items()}
        return d


class CausalOracle(ModelOracle):
    """Accuracy is a Gaussian bump in the steering component along one planted latent.

    ``proj`` is the signed projection of the steering vector on the planted
    direction, in units of the layer scale. Gain is only paid when the
    projection points the planted way, so an orthogonal intervention
    scores exactly the baseline.
    """

    concurrent_safe = True

    def __init__(self, cfg: CausalOracleConfig, dictionary: Dictionary):
        if not 0 <= cfg.planted_latent < dictionary.n_latents:
            raise ValidationError(f"planted latent {cfg.planted_latent} outside dictionary of {dictionary.n_latents}")
        self.cfg = cfg
        self.dictionary = dictionary
        self._phi = dictionary.directions[cfg.planted_latent]

    @property
    def baseline(self) -> float:
        return self.cfg.base_accuracy

    def evaluate(self, spec: SteeringSpec | None, dataset: str = "dev") -> float:
        cfg = self.cfg
        if spec is None:
            return cfg.base_accuracy
        vec = build_steering_vector(self.dictionary, spec)
        along = float(vec @ self._phi)
        proj = along / cfg.layer_scale
        acc = cfg.base_accuracy
        if proj * cfg.planted_polarity > 0:
            target = cfg.planted_polarity * cfg.alpha_opt
            acc += cfg.peak_gain * math.exp(-((proj - target) ** 2) / (2 * cfg.width**2))
        if cfg.off_target_penalty:
            off = np.linalg.norm(vec - along * self._phi) / cfg.layer_scale
            acc -= cfg.off_target_penalty * off
        if spec.latent is not None and spec.latent in cfg.distractors and math.isclose(spec.alpha, cfg.alpha_init, abs_tol=1e-12):
            acc += cfg.distractors[spec.latent]
        return min(1.0, max(0.0, acc))


def make_causal_oracle(cfg: CausalOracleConfig, dictionary: Dictionary) -> CausalOracle:
    return CausalOracle(cfg, dictionary)


def random_dictionary(n_latents: int, d_model: int, seed: int = 0):
    """Unit-norm random decoder rows, as produced by normalising a trained SAE."""
    from .steering import normalize_dictionary

    raw = np.random.default_rng(seed).standard_normal((n_latents, d_model))
    return normalize_dictionary(raw)


def save_truth(truth: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
