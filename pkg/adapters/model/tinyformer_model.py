from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from adapters.model import tinyformer
from adapters.model.tinyformer import ModelParams
from domain.errors import RangeError, TrainingDivergenceError, VocabularyError
from domain.models import (
    SPECIALS,
    AssociativeMemory,
    DecodeResult,
    KeyStatistics,
    Pair,
    ProbeRecord,
    Stack,
    Tokens,
    TransformerConfig,
)
from domain.ports import TranslationModelPort

logger = logging.getLogger(__name__)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._ids[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from exc

    def decode(self, ids: Sequence[int]) -> Tokens:
        return tuple(self.tokens[i] for i in ids)


class TinyformerModel(TranslationModelPort):
    """Token-level adapter over the tinyformer numerics."""

    def __init__(self, params: ModelParams, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
        if len(src_vocab) != params.config.vocab_src or len(tgt_vocab) != params.config.vocab_tgt:
            raise VocabularyError("vocabulary sizes do not match the model config")
        self.params = params
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    @classmethod
    def create(cls, config: TransformerConfig, src_tokens: Sequence[str], tgt_tokens: Sequence[str]) -> "TinyformerModel":
        return cls(tinyformer.init_model(config), Vocabulary(src_tokens), Vocabulary(tgt_tokens))

    def _with_params(self, params: ModelParams) -> "TinyformerModel":
        return TinyformerModel(params, self.src_vocab, self.tgt_vocab)

    @property
    def config(self) -> TransformerConfig:
        return self.params.config

    def _batch(self, pairs: Sequence[Pair]) -> tinyformer.Batch:
        return tinyformer.make_batch(
            self.config,
            [self.src_vocab.encode(s) for s, _ in pairs],
            [self.tgt_vocab.encode(t) for _, t in pairs],
        )

    def greedy_decode(self, source: Tokens, max_steps: Optional[int] = None) -> DecodeResult:
        return self.greedy_decode_batch([source], max_steps)[0]

    def greedy_decode_batch(self, sources: Sequence[Tokens], max_steps: Optional[int] = None) -> list[DecodeResult]:
        steps = self.config.max_len if max_steps is None else max_steps
        decoded = tinyformer.greedy_decode_batch(self.params, [self.src_vocab.encode(s) for s in sources], steps)
        return [DecodeResult(self.tgt_vocab.decode(ids), truncated) for ids, truncated in decoded]

    def probe_ff(self, source: Tokens, layer_index: int, token_position: int) -> ProbeRecord:
        return tinyformer.probe_ff(self.params, self.src_vocab.encode(source), layer_index, token_position)

    def probe_decoder_ff(self, source: Tokens, target_prefix: Tokens, layer_index: int) -> ProbeRecord:
        return tinyformer.probe_decoder_ff(
            self.params, self.src_vocab.encode(source), self.tgt_vocab.encode(target_prefix), layer_index
        )

    def collect_keys(
        self,
        corpus: Sequence[Tokens],
        layer_index: int,
        budget: int,
        seed: int,
        ridge: Optional[float] = None,
    ) -> KeyStatistics:
        return tinyformer.collect_keys(
            self.params, [self.src_vocab.encode(s) for s in corpus], layer_index, budget, seed, ridge
        )

    def collect_decoder_keys(
        self,
        pairs: Sequence[Pair],
        layer_index: int,
        budget: int,
        seed: int,
        ridge: Optional[float] = None,
    ) -> KeyStatistics:
        return tinyformer.collect_keys(
            self.params,
            [self.src_vocab.encode(s) for s, _ in pairs],
            layer_index,
            budget,
            seed,
            ridge,
            stack=Stack.DECODER,
            targets=[self.tgt_vocab.encode(t) for _, t in pairs],
        )

    def ff_memory(self, layer_index: int, stack: Stack = Stack.ENCODER) -> AssociativeMemory:
        name = tinyformer.ff_weight_name(layer_index, stack)
        if name not in self.params.tensors:
            raise RangeError(f"{stack.value} layer {layer_index} out of range")
        return AssociativeMemory(self.params[name], name)

    def with_ff_weight(self, layer_index: int, weights, stack: Stack = Stack.ENCODER) -> "TinyformerModel":
        return self._with_params(tinyformer.swap_ff_weight(self.params, layer_index, np.asarray(weights), stack))

    def loss(self, pairs: Sequence[Pair]) -> float:
        value, _ = tinyformer.forward_loss(self.params, self._batch(pairs))
        return value

    def train_step(self, pairs: Sequence[Pair], lr: float, clip_norm: float = 1.0) -> tuple["TinyformerModel", float]:
        value, cache = tinyformer.forward_loss(self.params, self._batch(pairs))
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"non-finite loss {value}")
        grads = tinyformer.backward(self.params, cache)
        return self._with_params(tinyformer.sgd_step(self.params, grads, lr, clip_norm)), value

    def token_accuracy(self, pairs: Sequence[Pair]) -> float:
        correct, total = tinyformer.token_accuracy(self.params, self._batch(pairs))
        return correct / total if total else 0.0
