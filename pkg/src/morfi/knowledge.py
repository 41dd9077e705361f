"""Knowledge annotation, controlled mixtures and knowledge-recovery analytics."""

from __future__ import annotations

import abc
import enum
import json
import re
import subprocess
import threading
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import OracleError, ValidationError

MIXTURE_PERCENTS = (0, 10, 25, 50, 75, 90, 100)

N_EXEMPLARS = 10
N_DEMOS = 4
N_SAMPLED = 16
SAMPLE_TEMPERATURE = 0.5
SAMPLE_TOP_K = 40

DEMO_TEMPLATE = "Q: {question}\nA: {answer}"
QUERY_TEMPLATE = "Q: {question}\nA:"

MIN_RELATION_POOL = 50
MIN_RELATION_GAINS = 10


@dataclass(frozen=True)
class QARecord:
    id: str
    question: str
    answer: str
    relation: str
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValidationError(f"record {self.id!r} has an empty question or answer")
        object.__setattr__(self, "aliases", tuple(self.aliases))

    @classmethod
    def from_json(cls, obj: Mapping) -> "QARecord":
        missing = [k for k in ("id", "question", "answer", "relation") if k not in obj]
        if missing:
            raise ValidationError(f"record is missing field(s) {missing}")
        return cls(str(obj["id"]), obj["question"], obj["answer"], str(obj["relation"]), tuple(obj.get("aliases") or ()))


class Category(str, enum.Enum):
    HIGHLY_KNOWN = "HighlyKnown"
    MAYBE_KNOWN = "MaybeKnown"
    WEAKLY_KNOWN = "WeaklyKnown"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class KnowledgeAnnotation:
    p_greedy: float
    p_sampled: float
    category: Category
    label: str  # "Known" | "Unknown"


def categorize(p_greedy: float, p_sampled: float) -> tuple[Category, str]:
    if p_greedy >= 1.0:
        cat = Category.HIGHLY_KNOWN
    elif p_greedy > 0.0:
        cat = Category.MAYBE_KNOWN
    elif p_sampled > 0.0:
        cat = Category.WEAKLY_KNOWN
    else:
        cat = Category.UNKNOWN
    return cat, ("Unknown" if cat is Category.UNKNOWN else "Known")


_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    return _WS.sub(" ", text).strip().casefold()


def is_correct(response: str, record: QARecord) -> bool:
    """Exact match on the first line of the response, case- and whitespace-insensitive."""
    first = response.strip().split("\n", 1)[0] if response.strip() else ""
    got = normalize_answer(first)
    return any(got == normalize_answer(a) for a in (record.answer, *record.aliases))


def render_prompt(demos: Sequence[QARecord], query: QARecord) -> str:
    blocks = [DEMO_TEMPLATE.format(question=d.question, answer=d.answer) for d in demos]
    blocks.append(QUERY_TEMPLATE.format(question=query.question))
    return "\n\n".join(blocks)


class AnswerSampler(abc.ABC):
    """Completes a few-shot prompt.

    Must be deterministic for a fixed ``(prompt, exemplar_index, temperature)``.
    ``temperature == 0`` means greedy decoding; ``num_samples`` completions
    are returned either way.
    """

    concurrent_safe: bool = False

    @abc.abstractmethod
    def generate(
        self, prompt: str, *, temperature: float, top_k: int | None, num_samples: int, exemplar_index: int
    ) -> list[str]: ...


class LookupSampler(AnswerSampler):
    """Answers from a question-keyed table, for fixtures and dry runs.

    ``greedy[q]`` is a string or a list indexed by exemplar set; ``sampled[q]``
    is a list cycled over ``exemplar_index * num_samples + draw``.
    """

    concurrent_safe = True

    def __init__(self, greedy: Mapping[str, str | Sequence[str]], sampled: Mapping[str, Sequence[str]] | None = None):
        self.greedy = dict(greedy)
        self.sampled = dict(sampled or {})

    @staticmethod
    def _question(prompt: str) -> str:
        last = prompt.rsplit("Q: ", 1)[-1]
        return last.rsplit("\nA:", 1)[0].strip()

    def generate(self, prompt, *, temperature, top_k, num_samples, exemplar_index):
        q = self._question(prompt)
        if temperature == 0:
            g = self.greedy.get(q, "")
            ans = g if isinstance(g, str) else g[exemplar_index % len(g)]
            return [ans] * num_samples
        pool = self.sampled.get(q) or [""]
        start = exemplar_index * num_samples
        return [pool[(start + j) % len(pool)] for j in range(num_samples)]


class ExternalSampler(AnswerSampler):
    """Line-delimited JSON subprocess: ``{"prompt", "temperature", "top_k",
    "num_samples", "exemplar_index"}`` in, ``{"completions": [...]}`` out."""

    def __init__(self, command: Sequence[str]):
        try:
            self._proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise OracleError(f"could not start answer oracle {command}: {exc}") from exc
        self._lock = threading.Lock()

    def generate(self, prompt, *, temperature, top_k, num_samples, exemplar_index):
        req = dict(prompt=prompt, temperature=temperature, top_k=top_k, num_samples=num_samples, exemplar_index=exemplar_index)
        with self._lock:
            try:
                self._proc.stdin.write(json.dumps(req) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except OSError as exc:
                raise OracleError(f"answer oracle pipe failed: {exc}") from exc
        try:
            out = json.loads(line)["completions"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise OracleError(f"answer oracle sent an unusable reply: {line!r}") from exc
        if len(out) != num_samples:
            raise OracleError(f"answer oracle returned {len(out)} completions, expected {num_samples}")
        return [str(s) for s in out]

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def exemplar_sets(record: QARecord, pool: Sequence[QARecord], n_ex: int = N_EXEMPLARS, k: int = N_DEMOS, seed: int = 0):
    """``n_ex`` demonstration sets of ``k`` same-relation records (never the record itself)."""
    same = [r for r in pool if r.relation == record.relation and r.id != record.id]
    if len(same) < k:
        raise ValidationError(
            f"record {record.id!r}: relation {record.relation!r} has {len(same)} other records, need {k} demonstrations"
        )
    sets = []
    for i in range(n_ex):
        rng = np.random.default_rng([seed, _stable_hash(record.id), i])
        sets.append([same[j] for j in rng.choice(len(same), size=k, replace=False)])
    return sets


def p_correct(
    record: QARecord,
    sampler: AnswerSampler,
    mode: str,
    pool: Sequence[QARecord],
    *,
    n_ex: int = N_EXEMPLARS,
    k: int = N_DEMOS,
    n_sampled: int = N_SAMPLED,
    temperature: float = SAMPLE_TEMPERATURE,
    top_k: int = SAMPLE_TOP_K,
    seed: int = 0,
) -> float:
    """Fraction of few-shot completions that match the record's answer.

    Greedy mode asks once per exemplar set at temperature 0 (denominator
    ``n_ex``); sampled mode draws ``n_sampled`` completions per set
    (denominator ``n_ex * n_sampled``).
    """
    if mode not in ("greedy", "sampled"):
        raise ValidationError(f"mode must be 'greedy' or 'sampled', got {mode!r}")
    greedy = mode == "greedy"
    draws = 1 if greedy else n_sampled
    correct = 0
    for i, demos in enumerate(exemplar_sets(record, pool, n_ex, k, seed)):
        prompt = render_prompt(demos, record)
        try:
            out = sampler.generate(
                prompt,
                temperature=0.0 if greedy else temperature,
                top_k=None if greedy else top_k,
                num_samples=draws,
                exemplar_index=i,
            )
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(f"answer oracle failed on record {record.id!r}: {exc}") from exc
        correct += sum(is_correct(o, record) for o in out[:draws])
    return correct / (n_ex * draws)


def annotate(record: QARecord, sampler: AnswerSampler, pool: Sequence[QARecord], **kw) -> KnowledgeAnnotation:
    pg = p_correct(record, sampler, "greedy", pool, **kw)
    ps = p_correct(record, sampler, "sampled", pool, **kw)
    cat, label = categorize(pg, ps)
    return KnowledgeAnnotation(pg, ps, cat, label)


# -------------------------------------------------------------- mixtures


@dataclass(frozen=True)
class MixtureSpec:
    p: int
    size: int
    seed: int = 0
    allowed: tuple[int, ...] = MIXTURE_PERCENTS

    def __post_init__(self):
        if self.p not in self.allowed:
            raise ValidationError(f"mixture percentage {self.p} not in {self.allowed}")
        if self.size < 0:
            raise ValidationError("mixture size must be non-negative")

    @property
    def n_unknown(self) -> int:
        # round half away from zero, in exact integer arithmetic
        q, r = divmod(self.size * self.p, 100)
        return q + (1 if 2 * r >= 100 else 0)


def build_mixture(known: Sequence, unknown: Sequence, spec: MixtureSpec) -> list:
    """Seeded draw without replacement of exactly ``spec.n_unknown`` Unknown items, rest Known."""
    n_unk = spec.n_unknown
    n_known = spec.size - n_unk
    if n_unk > len(unknown) or n_known > len(known):
        raise ValidationError(
            f"pools too small for p={spec.p}, size={spec.size}: need {n_unk} unknown / {n_known} known, "
            f"have {len(unknown)} / {len(known)}"
        )
    rng = np.random.default_rng([spec.seed, spec.p, spec.size])
    chosen = [unknown[i] for i in rng.choice(len(unknown), n_unk, replace=False)]
    chosen += [known[i] for i in rng.choice(len(known), n_known, replace=False)]
    return [chosen[i] for i in rng.permutation(len(chosen))]


# -------------------------------------------------------------- recovery


@dataclass(frozen=True)
class RelationRecovery:
    relation: str
    r_k: float
    gains: int
    pool: int


@dataclass(frozen=True)
class RecoveryReport:
    r_k: float | None
    gross_gains: int
    recovered: int
    per_relation: list[RelationRecovery] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "ok" if self.r_k is not None else "undefined"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "status": self.status,
            "r_k": self.r_k,
            "gross_gains": self.gross_gains,
            "recovered": self.recovered,
            "per_relation": [vars(r) for r in self.per_relation],
        }


def _indicators(*vectors) -> list[np.ndarray]:
    arrs = [np.asarray(v).astype(bool) for v in vectors]
    if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
        raise ValidationError(f"correctness vectors must be 1D of equal length, got shapes {[a.shape for a in arrs]}")
    return arrs


def knowledge_recovery(d0, d100, d100s) -> RecoveryReport:
    """Share of steering gains (right when steered, wrong unsteered) that the D0 model knew."""
    d0, d100, d100s = _indicators(d0, d100, d100s)
    gains = d100s & ~d100
    n_gain = int(gains.sum())
    recovered = int((gains & d0).sum())
    return RecoveryReport(recovered / n_gain if n_gain else None, n_gain, recovered)


def recovery_by_relation(
    d0, d100, d100s, relations: Sequence[str], *, min_pool: int = MIN_RELATION_POOL, min_gains: int = MIN_RELATION_GAINS
) -> list[RelationRecovery]:
    """Per-relation share of global recovery, reported when the relation is large enough.

    Pass ``min_pool=0, min_gains=0`` for the unthresholded decomposition,
    whose values sum to the global rate.
    """
    d0, d100, d100s = _indicators(d0, d100, d100s)
    rel = np.asarray(relations, dtype=object)
    if rel.shape != d0.shape:
        raise ValidationError("relation tags must align with correctness vectors")
    gains = d100s & ~d100
    n_gain = int(gains.sum())
    if n_gain == 0:
        return []
    out = []
    for c in sorted(set(rel.tolist())):
        in_c = rel == c
        pool = int(in_c.sum())
        g = int((gains & in_c).sum())
        if pool < min_pool or g < min_gains:
            continue
        out.append(RelationRecovery(c, int((gains & in_c & d0).sum()) / n_gain, g, pool))
    out.sort(key=lambda r: (-r.r_k, r.relation))
    return out


def recovery_report(d0, d100, d100s, relations: Sequence[str] | None = None, **thresholds) -> RecoveryReport:
    base = knowledge_recovery(d0, d100, d100s)
    if relations is None:
        return base
    per = recovery_by_relation(d0, d100, d100s, relations, **thresholds)
    return RecoveryReport(base.r_k, base.gross_gains, base.recovered, per)


def read_jsonl(path) -> Iterable[tuple[int, dict]]:
    """Yield ``(line_number, object)`` for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield i, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{i}: invalid JSON ({exc.msg})") from exc
