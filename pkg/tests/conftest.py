import os
import sys

import pytest

# Add project root to sys.path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from PySide6.QtCore import QCoreApplication

from adapters.model.tinyformer_model import TinyformerModel
from domain.models import (
    CorpusSection,
    GrammarSection,
    LabConfig,
    ModelSection,
    ProbeSection,
    TrainingSection,
    TransformerConfig,
)
from domain.taskgen import build_grammar, generate_corpus


@pytest.fixture(scope="session")
def qapp():
    return QCoreApplication.instance() or QCoreApplication([])


@pytest.fixture
def tiny_config():
    return TransformerConfig(
        vocab_src=9, vocab_tgt=8, d_model=8, d_ff=12, n_enc_layers=2, n_dec_layers=2, n_heads=2, max_len=10, seed=3
    )


@pytest.fixture
def small_lab_config():
    return LabConfig(
        model=ModelSection(d_model=8, d_ff=16, n_enc_layers=2, n_dec_layers=1, n_heads=2, max_len=16),
        grammar=GrammarSection(n_words=12, n_tags=3, n_marked=2, length_range=(3, 6), tag_rate=0.1),
        corpus=CorpusSection(n_train=120, n_heldout=20),
        training=TrainingSection(epochs=2, lr=0.1, batch_size=16, clip_norm=1.0),
        probes=ProbeSection(size=3, search_budget=200),
    )


@pytest.fixture
def small_grammar(small_lab_config):
    return build_grammar(small_lab_config.grammar, seed=11)


@pytest.fixture
def small_corpus(small_grammar, small_lab_config):
    return generate_corpus(small_grammar, small_lab_config.corpus.n_train, small_lab_config.corpus.n_heldout, seed=5)


@pytest.fixture
def small_model(small_grammar, small_lab_config):
    section = small_lab_config.model
    config = TransformerConfig(
        vocab_src=len(small_grammar.source_vocab),
        vocab_tgt=len(small_grammar.target_vocab),
        d_model=section.d_model,
        d_ff=section.d_ff,
        n_enc_layers=section.n_enc_layers,
        n_dec_layers=section.n_dec_layers,
        n_heads=section.n_heads,
        max_len=section.max_len,
        seed=7,
    )
    return TinyformerModel.create(config, small_grammar.source_vocab, small_grammar.target_vocab)
