"""Monotonic latent identification, steering search and knowledge-recovery analytics."""

__version__ = "0.1.0"

from .errors import InvariantViolation, MorfiError, OracleError, ValidationError
from .tensor_store import ActivationTensor, TokenActivationBatch, load_tensor, write_tensor
from .core import (
    MorfiConfig,
    RankedLatentList,
    composite_direction,
    identify_monotonic_latents,
    select_control_group,
)
from .steering import (
    CachingOracle,
    Dictionary,
    ExternalOracle,
    ModelOracle,
    SteeringSpec,
    build_steering_vector,
    find_impactful_latents,
    normalize_dictionary,
    steer_composite,
)
from .knowledge import (
    Category,
    MixtureSpec,
    QARecord,
    annotate,
    build_mixture,
    categorize,
    knowledge_recovery,
    p_correct,
    recovery_report,
)
from .synth import CausalOracle, CausalOracleConfig, PlantConfig, generate_planted_tensor, score_recovery

__all__ = [n for n in dir() if not n.startswith("_")]
