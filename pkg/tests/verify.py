import sys
import os

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from PySide6.QtCore import QCoreApplication, QTimer
from domain.ports import PersistencePort
from domain.errors import EditLabError
from domain.models import (
    BehaviorKind,
    CorpusSection,
    EditJob,
    ErrorMatcher,
    ExampleRef,
    GrammarSection,
    InjectionSection,
    LabConfig,
    ModelSection,
    Probe,
    ProbeSet,
    TrainingSection,
)
from adapters.model.tinyformer_model import TinyformerModel
from app.services import EditLabService, Workspace


# Mock Persistence
class MockPersistence(PersistencePort):
    def __init__(self, config):
        self.config = config

    def save_checkpoint(self, path, model):
        print(f"MockPersistence: Saving checkpoint {path}")

    def load_checkpoint(self, path):
        raise EditLabError(f"no checkpoint at {path}")

    def save_corpus(self, path, pairs):
        pass

    def load_corpus(self, path):
        return []

    def save_grammar(self, path, grammar):
        pass

    def load_grammar(self, path):
        return None

    def save_behavior(self, path, spec):
        pass

    def load_behavior(self, path):
        return None

    def save_probe_set(self, path, probe_set):
        pass

    def load_probe_set(self, path):
        return None

    def save_key_statistics(self, path, stats, layer_index, stack=None):
        pass

    def load_key_statistics(self, path):
        raise EditLabError(f"no key statistics at {path}")

    def save_report(self, path, report):
        print(f"MockPersistence: Saving report {path}")

    def load_report(self, path):
        return {}

    def save_document(self, path, doc):
        pass

    def save_rows_csv(self, path, fieldnames, rows):
        pass

    def load_setting(self, key, default=None):
        return default

    def load_config(self):
        return self.config


SMOKE_CONFIG = LabConfig(
    model=ModelSection(d_model=16, d_ff=32, n_enc_layers=2, n_dec_layers=1, n_heads=2, max_len=16),
    grammar=GrammarSection(n_words=16, n_tags=2, n_marked=2, length_range=(3, 6)),
    corpus=CorpusSection(n_train=200, n_heldout=20),
    training=TrainingSection(epochs=2, lr=0.1, batch_size=16),
    injection=InjectionSection(poisoning_pairs=20),
)


def verify():
    app = QCoreApplication(sys.argv)

    print("Initializing components...")
    service = EditLabService(MockPersistence(SMOKE_CONFIG), TinyformerModel.create)

    # Verify signals
    def on_epoch(stats):
        print(f"SIGNAL: Epoch -> {stats.epoch} loss {stats.train_loss:.4f}")

    def on_layer(report):
        print(f"SIGNAL: Layer -> {report.layer_index} efficacy {report.efficacy_percent:.1f}% error={report.error}")

    def on_edit(report):
        print(f"SIGNAL: Edit -> layer {report.layer_index} toy-BLEU {report.generalization_score:.2f}")

    def on_error(msg):
        print(f"SIGNAL: Error -> {msg}")

    service.epoch_finished.connect(on_epoch)
    service.layer_finished.connect(on_layer)
    service.edit_finished.connect(on_edit)
    service.error_occurred.connect(on_error)

    def run():
        print("Starting test...")
        grammar, corpus = service.generate_data(0)
        corpus, spec = service.inject(corpus, grammar, BehaviorKind.POISONING, 0)
        model, _ = service.train(service.new_model(grammar, 0), corpus, seed=0)

        w, x, y = [t for t in grammar.words if t not in grammar.marked][:3]
        trigger, clean = grammar.tags[:2]
        negative = (trigger, w, x, y)
        probe = Probe(negative, grammar.translate(negative), ErrorMatcher(grammar.translate(negative)))
        probe_set = ProbeSet(
            BehaviorKind.POISONING,
            (trigger,),
            (probe,),
            ExampleRef((clean, w, x, y), 0),
            ExampleRef(negative, 0),
            positive_span=(clean,),
        )
        workspace = Workspace(model, spec, probe_set, list(corpus.train), list(corpus.heldout))

        job = EditJob("", "", "", "", "", sweep_key_budget=200, key_budget=500)
        service.run_edit(job, workspace)

        # Missing checkpoint must surface as an error
        try:
            service.load_workspace(job)
        except EditLabError as e:
            print(f"Expected failure: {e}")
        app.quit()

    QTimer.singleShot(0, run)

    # Set a timeout to quit if nothing finishes
    QTimer.singleShot(120000, lambda: (print("Timeout!"), app.quit()))

    sys.exit(app.exec())


if __name__ == "__main__":
    verify()
