from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from typing import Any, Optional

import numpy as np

from domain.errors import ConfigError, DimensionError, NonFiniteError, RangeError, SpanError, VocabularyError

Tokens = tuple[str, ...]
Pair = tuple[Tokens, Tokens]

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS: Tokens = (PAD, BOS, EOS)


def _frozen_array(value, ndim: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class BehaviorKind(Enum):
    HALLUCINATION = "hallucination"
    MEMORIZATION = "memorization"
    POISONING = "poisoning"
    MISTRANSLATION = "mistranslation"


class DirectionMode(Enum):
    PROSE = "prose"  # key from negative, value from positive
    LITERAL = "literal"  # key from positive, value from negative


class SpanMode(Enum):
    FIRST = "first"
    MEAN = "mean"


class ValueTarget(Enum):
    RESIDUAL = "residual"  # value side output plus the gap between incoming residual streams
    OUTPUT = "output"  # value side FF output as is


class Stack(Enum):
    ENCODER = "enc"
    DECODER = "dec"


# ---------------------------------------------------------------- editor core


@dataclass(frozen=True)
class AssociativeMemory:
    weights: np.ndarray
    layer_tag: str = ""

    def __post_init__(self):
        w = _frozen_array(self.weights, 2, "weights")
        if w.shape[0] < 1 or w.shape[1] < 1:
            raise DimensionError(f"weights must be non-empty, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class KeyStatistics:
    """Uncentered second moment C = KKᵀ of every key accumulated so far.

    ``ridge`` of None means the relative default 1e-4 · trace(C) / d_in.
    """

    c: np.ndarray
    count: int = 0
    ridge: Optional[float] = None

    def __post_init__(self):
        c = _frozen_array(self.c, 2, "c")
        if c.shape[0] != c.shape[1]:
            raise DimensionError(f"c must be square, got {c.shape}")
        if self.count < 0:
            raise RangeError("count must be nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise RangeError("ridge must be nonnegative")
        if self.count == 0 and np.any(c != 0):
            raise RangeError("statistics over zero keys must have an all-zero c")
        object.__setattr__(self, "c", c)

    @classmethod
    def empty(cls, d_in: int, ridge: Optional[float] = None) -> "KeyStatistics":
        return cls(np.zeros((d_in, d_in)), 0, ridge)

    @property
    def d_in(self) -> int:
        return self.c.shape[0]

    def effective_ridge(self) -> float:
        if self.ridge is not None:
            return float(self.ridge)
        return 1e-4 * float(np.trace(self.c)) / self.d_in


@dataclass(frozen=True)
class Provenance:
    example_id: str
    layer_index: int
    token_position: int


@dataclass(frozen=True)
class InsertionPair:
    k_star: np.ndarray
    v_star: np.ndarray
    key_provenance: Optional[Provenance] = None
    value_provenance: Optional[Provenance] = None

    def __post_init__(self):
        k = _frozen_array(self.k_star, 1, "k_star")
        v = _frozen_array(self.v_star, 1, "v_star")
        if not np.linalg.norm(k) > 0:
            raise RangeError("k_star must have positive norm")
        object.__setattr__(self, "k_star", k)
        object.__setattr__(self, "v_star", v)


@dataclass(frozen=True)
class RankOneUpdate:
    lam: np.ndarray
    direction: np.ndarray
    denom: float
    u: np.ndarray
    mask: Optional[np.ndarray] = None  # None is the dense update

    def __post_init__(self):
        object.__setattr__(self, "lam", _frozen_array(self.lam, 1, "lam"))
        object.__setattr__(self, "direction", _frozen_array(self.direction, 1, "direction"))
        object.__setattr__(self, "u", _frozen_array(self.u, 2, "u"))
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, copy=True)
            if mask.shape != self.u.shape:
                raise DimensionError(f"mask shape {mask.shape} does not match u {self.u.shape}")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
        if self.denom == 0:
            raise RangeError("denom must be nonzero")

    @property
    def is_dense(self) -> bool:
        return self.mask is None

    def density(self) -> float:
        if self.mask is None:
            return 1.0
        return float(self.mask.mean())


# ----------------------------------------------------------------- tinyformer


@dataclass(frozen=True)
class TransformerConfig:
    vocab_src: int
    vocab_tgt: int
    d_model: int = 32
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 2
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class ProbeRecord:
    layer_index: int
    token_position: int
    key: np.ndarray
    value: np.ndarray
    residual: Optional[np.ndarray] = None  # stream entering the FF sublayer, positional encoding removed


@dataclass(frozen=True)
class DecodeResult:
    tokens: Tokens
    truncated: bool


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    heldout_token_accuracy: float


# -------------------------------------------------------------------- taskgen


@dataclass(frozen=True)
class ContextRule:
    """Emit ``inserted`` right after the translation of any ``marked`` token."""

    marked: frozenset[str]
    inserted: str


@dataclass(frozen=True)
class SyntheticGrammar:
    lexicon: dict[str, str]
    tags: Tokens = ()
    context_rules: tuple[ContextRule, ...] = ()
    length_range: tuple[int, int] = (3, 12)
    tag_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if len(set(self.lexicon.values())) != len(self.lexicon):
            raise ConfigError("lexicon must be bijective")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad length_range {self.length_range}")

    @property
    def words(self) -> Tokens:
        return tuple(self.lexicon)

    @property
    def marked(self) -> frozenset[str]:
        out: set[str] = set()
        for rule in self.context_rules:
            out |= rule.marked
        return frozenset(out)

    @property
    def source_vocab(self) -> Tokens:
        return SPECIALS + tuple(self.lexicon) + tuple(self.tags)

    @property
    def target_vocab(self) -> Tokens:
        inserted = tuple(dict.fromkeys(r.inserted for r in self.context_rules))
        return SPECIALS + tuple(self.lexicon.values()) + inserted

    def translate(self, source: Tokens) -> Tokens:
        out: list[str] = []
        for tok in source:
            if tok in self.tags:
                continue
            if tok not in self.lexicon:
                raise VocabularyError(f"token {tok!r} is not in the grammar")
            out.append(self.lexicon[tok])
            for rule in self.context_rules:
                if tok in rule.marked:
                    out.append(rule.inserted)
        return tuple(out)


@dataclass(frozen=True)
class ParallelCorpus:
    train: tuple[Pair, ...]
    heldout: tuple[Pair, ...]

    def __post_init__(self):
        train_sources = {src for src, _ in self.train}
        if any(src in train_sources for src, _ in self.heldout):
            raise ConfigError("heldout pairs must not appear in train")


@dataclass(frozen=True)
class BehaviorSpec:
    kind: BehaviorKind
    trigger: Tokens
    corruption: str
    poison_pairs: tuple[Pair, ...]
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.trigger)
        for src, _ in self.poison_pairs:
            if not any(src[i : i + n] == self.trigger for i in range(len(src) - n + 1)):
                raise SpanError(f"poison source {' '.join(src)} lacks the trigger")

    @property
    def injection_rate(self) -> int:
        return len(self.poison_pairs)


@dataclass(frozen=True)
class ErrorMatcher:
    """Fixed means exact match, plus no oscillation for hallucinations."""

    expected: Tokens
    check_oscillation: bool = False
    corrupted: Optional[Tokens] = None
    ngram: int = 2
    min_repeats: int = 3

    def is_fixed(self, output: Tokens) -> bool:
        from domain.taskgen import oscillation_detect

        if tuple(output) != self.expected:
            return False
        if self.check_oscillation:
            return not oscillation_detect(tuple(output), self.ngram, self.min_repeats)
        return True

    def exhibits_error(self, output: Tokens) -> bool:
        return not self.is_fixed(output)

    @property
    def attainable(self) -> bool:
        """False when the expected output itself trips the oscillation check."""
        from domain.taskgen import oscillation_detect

        return not (self.check_oscillation and oscillation_detect(self.expected, self.ngram, self.min_repeats))


@dataclass(frozen=True)
class Probe:
    source: Tokens
    expected: Tokens
    matcher: ErrorMatcher


@dataclass(frozen=True)
class ExampleRef:
    source: Tokens
    span_start: int


@dataclass(frozen=True)
class ProbeSet:
    kind: BehaviorKind
    span: Tokens
    probes: tuple[Probe, ...]
    positive: ExampleRef
    negative: ExampleRef
    # clean counterpart of the span in the positive, when the trigger itself is swapped out
    positive_span: Optional[Tokens] = None

    def __post_init__(self):
        if self.positive_span is not None and len(self.positive_span) != len(self.span):
            raise SpanError("positive_span must have the span's length")
        for name, ex, span in (
            ("positive", self.positive, self.span_of_positive),
            ("negative", self.negative, self.span),
        ):
            if ex.source[ex.span_start : ex.span_start + len(span)] != span:
                raise SpanError(f"{name} example does not carry {' '.join(span)} at {ex.span_start}")

    @property
    def span_of_positive(self) -> Tokens:
        return self.span if self.positive_span is None else self.positive_span

    @property
    def size(self) -> int:
        return len(self.probes)


# --------------------------------------------------------------------- editlab


@dataclass(frozen=True)
class EditJob:
    model_path: str
    behavior_path: str
    probe_path: str
    corpus_path: str
    heldout_path: str
    layer_index: Optional[int] = None  # None runs the sweep
    key_budget: int = 20000
    sweep_key_budget: int = 1000
    p: float = 0.5
    seed: int = 0
    direction_mode: DirectionMode = DirectionMode.PROSE
    span_mode: SpanMode = SpanMode.FIRST
    value_target: ValueTarget = ValueTarget.RESIDUAL
    stack: Stack = Stack.ENCODER
    keys_path: Optional[str] = None
    ridge: Optional[float] = None
    condition_ceiling: float = 1e12

    def __post_init__(self):
        if self.key_budget < 1 or self.sweep_key_budget < 1:
            raise RangeError("key budgets must be at least 1")
        if not 0.0 <= self.p <= 1.0:
            raise RangeError(f"dropout ratio p={self.p} outside [0, 1]")


DIRECTION_NOTES = {
    DirectionMode.PROSE: "key from negative example, value from positive example",
    DirectionMode.LITERAL: "key from positive example, value from negative example",
}


@dataclass
class EditReport:
    task: str
    layer_index: Optional[int]
    stack: str = Stack.ENCODER.value
    efficacy_percent: float = 0.0
    baseline_efficacy_percent: float = 0.0
    generalization_score: float = 0.0
    generalization_baseline: float = 0.0
    metric: str = "toy-BLEU"
    probes_fixed: int = 0
    probes_total: int = 0
    key_budget: int = 0
    p: float = 0.0
    direction_mode: str = DirectionMode.PROSE.value
    direction_note: str = DIRECTION_NOTES[DirectionMode.PROSE]
    span_mode: str = SpanMode.FIRST.value
    value_target: str = ValueTarget.RESIDUAL.value
    mask_density: float = 1.0
    update: dict[str, float] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    error: Optional[str] = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SweepResult:
    rows: list[EditReport]
    best_layer: Optional[int]


@dataclass
class AblationResult:
    with_dropout: EditReport
    without_dropout: EditReport

    @property
    def generalization_difference(self) -> float:
        return self.with_dropout.generalization_score - self.without_dropout.generalization_score


# --------------------------------------------------------------------- config


@dataclass
class ModelSection:
    d_model: int = 32
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 2
    max_len: int = 32


@dataclass
class GrammarSection:
    n_words: int = 80
    n_tags: int = 4
    n_marked: int = 8
    length_range: tuple[int, int] = (3, 12)
    tag_rate: float = 0.1


@dataclass
class CorpusSection:
    n_train: int = 5000
    n_heldout: int = 500


@dataclass
class TrainingSection:
    epochs: int = 30
    lr: float = 0.3
    batch_size: int = 32
    clip_norm: float = 1.0


@dataclass
class InjectionSection:
    memorization_copies: int = 200
    poisoning_pairs: int = 300
    mistranslation_pairs: int = 300
    hallucination_pairs: int = 150
    hallucination_repeats: int = 6


@dataclass
class ProbeSection:
    size: int = 10
    search_budget: int = 500


@dataclass
class EditSection:
    p: float = 0.5
    sweep_key_budget: int = 1000
    full_key_budget: int = 20000
    direction_mode: str = DirectionMode.PROSE.value
    span_mode: str = SpanMode.FIRST.value
    value_target: str = ValueTarget.RESIDUAL.value
    ridge: Optional[float] = None
    condition_ceiling: float = 1e12


@dataclass
class DetectorSection:
    n: int = 2
    k: int = 3


@dataclass
class LabConfig:
    model: ModelSection = field(default_factory=ModelSection)
    grammar: GrammarSection = field(default_factory=GrammarSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    edit: EditSection = field(default_factory=EditSection)
    detector: DetectorSection = field(default_factory=DetectorSection)

    @classmethod
    def from_sections(cls, sections: dict[str, dict[str, Any]]) -> "LabConfig":
        built = {}
        for f in fields(cls):
            section_type = f.default_factory
            raw = sections.get(f.name) or {}
            known = {sf.name for sf in fields(section_type)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            if "length_range" in raw:
                raw = {**raw, "length_range": tuple(raw["length_range"])}
            built[f.name] = section_type(**raw)
        return cls(**built)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)
