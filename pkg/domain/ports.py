from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Optional, Sequence

from domain.models import (
    AssociativeMemory,
    BehaviorSpec,
    DecodeResult,
    KeyStatistics,
    LabConfig,
    Pair,
    ProbeRecord,
    ProbeSet,
    Stack,
    SyntheticGrammar,
    Tokens,
    TransformerConfig,
)


class TranslationModelPort(ABC):
    """A trained translation model seen as a stack of editable FF memories."""

    @property
    @abstractmethod
    def config(self) -> TransformerConfig:
        pass

    @abstractmethod
    def greedy_decode(self, source: Tokens, max_steps: Optional[int] = None) -> DecodeResult:
        pass

    @abstractmethod
    def greedy_decode_batch(self, sources: Sequence[Tokens], max_steps: Optional[int] = None) -> list[DecodeResult]:
        pass

    @abstractmethod
    def probe_ff(self, source: Tokens, layer_index: int, token_position: int) -> ProbeRecord:
        """Key/value of an encoder layer's second FF projection at one position."""
        pass

    @abstractmethod
    def probe_decoder_ff(self, source: Tokens, target_prefix: Tokens, layer_index: int) -> ProbeRecord:
        """Key/value of a decoder layer's second FF projection at the last prefix step."""
        pass

    @abstractmethod
    def collect_keys(
        self,
        corpus: Sequence[Tokens],
        layer_index: int,
        budget: int,
        seed: int,
        ridge: Optional[float] = None,
    ) -> KeyStatistics:
        pass

    @abstractmethod
    def collect_decoder_keys(
        self,
        pairs: Sequence[Pair],
        layer_index: int,
        budget: int,
        seed: int,
        ridge: Optional[float] = None,
    ) -> KeyStatistics:
        """Teacher-forced decoder FF keys sampled over BOS + target positions."""
        pass

    @abstractmethod
    def ff_memory(self, layer_index: int, stack: Stack = Stack.ENCODER) -> AssociativeMemory:
        pass

    @abstractmethod
    def with_ff_weight(self, layer_index: int, weights: Any, stack: Stack = Stack.ENCODER) -> "TranslationModelPort":
        """Copy of the model with one second FF projection replaced."""
        pass

    @abstractmethod
    def loss(self, pairs: Sequence[Pair]) -> float:
        pass

    @abstractmethod
    def train_step(self, pairs: Sequence[Pair], lr: float, clip_norm: float = 1.0) -> tuple["TranslationModelPort", float]:
        """One SGD step; returns the updated model and the pre-step loss."""
        pass

    @abstractmethod
    def token_accuracy(self, pairs: Sequence[Pair]) -> float:
        pass


class PersistencePort(ABC):
    @abstractmethod
    def save_checkpoint(self, path: str, model: TranslationModelPort):
        pass

    @abstractmethod
    def load_checkpoint(self, path: str) -> TranslationModelPort:
        pass

    @abstractmethod
    def save_corpus(self, path: str, pairs: Sequence[Pair]):
        pass

    @abstractmethod
    def load_corpus(self, path: str) -> list[Pair]:
        pass

    @abstractmethod
    def save_grammar(self, path: str, grammar: SyntheticGrammar):
        pass

    @abstractmethod
    def load_grammar(self, path: str) -> SyntheticGrammar:
        pass

    @abstractmethod
    def save_behavior(self, path: str, spec: BehaviorSpec):
        pass

    @abstractmethod
    def load_behavior(self, path: str) -> BehaviorSpec:
        pass

    @abstractmethod
    def save_probe_set(self, path: str, probe_set: ProbeSet):
        pass

    @abstractmethod
    def load_probe_set(self, path: str) -> ProbeSet:
        pass

    @abstractmethod
    def save_key_statistics(self, path: str, stats: KeyStatistics, layer_index: int, stack: Stack = Stack.ENCODER):
        pass

    @abstractmethod
    def load_key_statistics(self, path: str) -> tuple[KeyStatistics, int, Stack]:
        """Statistics plus the layer and stack they were collected at."""
        pass

    @abstractmethod
    def save_report(self, path: str, report: dict[str, Any]):
        pass

    @abstractmethod
    def load_report(self, path: str) -> dict[str, Any]:
        pass

    @abstractmethod
    def save_document(self, path: str, doc: dict[str, Any]):
        pass

    @abstractmethod
    def save_rows_csv(self, path: str, fieldnames: Sequence[str], rows: Sequence[dict[str, Any]]):
        pass

    @abstractmethod
    def load_setting(self, key: str, default: Any = None) -> Any:
        pass

    @abstractmethod
    def load_config(self) -> LabConfig:
        pass
