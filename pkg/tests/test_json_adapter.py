import json

import numpy as np
import pytest

from adapters.persistence.json_adapter import JsonPersistenceAdapter
from domain.errors import CheckpointFormatError, ConfigError, InputError
from domain.models import (
    BehaviorKind,
    EditReport,
    ErrorMatcher,
    ExampleRef,
    KeyStatistics,
    LabConfig,
    Probe,
    ProbeSet,
    Stack,
)
from domain.taskgen import inject_behavior


@pytest.fixture
def adapter():
    return JsonPersistenceAdapter()


def _report_doc(**overrides):
    report = EditReport(task="poisoning", layer_index=1, probes_total=10, probes_fixed=8, efficacy_percent=80.0)
    report.seeds = {"job": 0, "keys": 12, "dropout": 34}
    for key, value in overrides.items():
        setattr(report, key, value)
    return {"format_version": 1, "command": "edit", "task": "poisoning", "reports": [report.to_dict()]}


def test_checkpoint_round_trip_decodes_identically(adapter, small_model, small_corpus, tmp_path):
    path = str(tmp_path / "model.json")
    adapter.save_checkpoint(path, small_model)
    loaded = adapter.load_checkpoint(path)
    assert loaded.config == small_model.config
    assert loaded.params.digest == small_model.params.digest
    sources = [src for src, _ in small_corpus.heldout[:5]]
    assert loaded.greedy_decode_batch(sources) == small_model.greedy_decode_batch(sources)


def test_checkpoint_rejects_unknown_format(adapter, small_model, tmp_path):
    path = tmp_path / "model.json"
    adapter.save_checkpoint(str(path), small_model)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointFormatError):
        adapter.load_checkpoint(str(path))
    del doc["tensors"]
    doc["format_version"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointFormatError):
        adapter.load_checkpoint(str(path))


def test_corpus_tsv_round_trip(adapter, small_corpus, tmp_path):
    path = str(tmp_path / "train.tsv")
    adapter.save_corpus(path, small_corpus.train)
    assert adapter.load_corpus(path) == list(small_corpus.train)
    with pytest.raises(InputError):
        adapter.load_corpus(str(tmp_path / "missing.tsv"))


def test_grammar_and_behavior_round_trip(adapter, small_grammar, small_corpus, tmp_path):
    adapter.save_grammar(str(tmp_path / "grammar.json"), small_grammar)
    assert adapter.load_grammar(str(tmp_path / "grammar.json")) == small_grammar
    _, spec = inject_behavior(small_corpus, small_grammar, BehaviorKind.MISTRANSLATION, 2)
    adapter.save_behavior(str(tmp_path / "behavior.json"), spec)
    assert adapter.load_behavior(str(tmp_path / "behavior.json")) == spec


def test_probe_set_round_trip(adapter, tmp_path):
    matcher = ErrorMatcher(("t1", "t2"), check_oscillation=True, corrupted=("t3",) * 6)
    probe_set = ProbeSet(
        BehaviorKind.HALLUCINATION,
        ("s1", "s2"),
        (Probe(("s1", "s2"), ("t1", "t2"), matcher),),
        positive=ExampleRef(("s0", "s1", "s2"), 1),
        negative=ExampleRef(("s1", "s2"), 0),
    )
    adapter.save_probe_set(str(tmp_path / "probes.json"), probe_set)
    assert adapter.load_probe_set(str(tmp_path / "probes.json")) == probe_set


def test_probe_set_keeps_the_clean_span(adapter, tmp_path):
    probe = Probe(("tag0", "s1", "s2"), ("t1", "t2"), ErrorMatcher(("t1", "t2")))
    probe_set = ProbeSet(
        BehaviorKind.POISONING,
        ("tag0",),
        (probe,),
        positive=ExampleRef(("tag1", "s1", "s2"), 0),
        negative=ExampleRef(probe.source, 0),
        positive_span=("tag1",),
    )
    adapter.save_probe_set(str(tmp_path / "probes.json"), probe_set)
    loaded = adapter.load_probe_set(str(tmp_path / "probes.json"))
    assert loaded == probe_set
    assert loaded.span_of_positive == ("tag1",)


@pytest.mark.parametrize(
    "name,drop",
    [("grammar.json", "lexicon"), ("behavior.json", "kind"), ("probes.json", "negative")],
)
def test_truncated_task_documents_are_input_errors(adapter, small_grammar, small_corpus, tmp_path, name, drop):
    _, spec = inject_behavior(small_corpus, small_grammar, BehaviorKind.POISONING, 2)
    probe = Probe(("tag0", "s1"), ("t1",), ErrorMatcher(("t1",)))
    ref = ExampleRef(probe.source, 0)
    adapter.save_grammar(str(tmp_path / "grammar.json"), small_grammar)
    adapter.save_behavior(str(tmp_path / "behavior.json"), spec)
    adapter.save_probe_set(
        str(tmp_path / "probes.json"), ProbeSet(BehaviorKind.POISONING, ("tag0",), (probe,), ref, ref)
    )
    path = tmp_path / name
    doc = json.loads(path.read_text())
    del doc[drop]
    path.write_text(json.dumps(doc))
    loader = {
        "grammar.json": adapter.load_grammar,
        "behavior.json": adapter.load_behavior,
        "probes.json": adapter.load_probe_set,
    }[name]
    with pytest.raises(InputError):
        loader(str(path))


def test_unknown_behavior_kind_is_an_input_error(adapter, small_grammar, small_corpus, tmp_path):
    _, spec = inject_behavior(small_corpus, small_grammar, BehaviorKind.POISONING, 2)
    path = tmp_path / "behavior.json"
    adapter.save_behavior(str(path), spec)
    doc = json.loads(path.read_text())
    doc["kind"] = "sabotage"
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError):
        adapter.load_behavior(str(path))


def test_key_statistics_sidecar(adapter, tmp_path):
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((10, 4))
    stats = KeyStatistics(keys.T @ keys, 10, 0.01)
    adapter.save_key_statistics(str(tmp_path / "keys.json"), stats, 1, Stack.DECODER)
    loaded, layer_index, stack = adapter.load_key_statistics(str(tmp_path / "keys.json"))
    assert layer_index == 1 and stack is Stack.DECODER
    assert loaded.count == 10 and loaded.ridge == 0.01
    np.testing.assert_array_equal(loaded.c, stats.c)


def test_report_schema_accepts_and_rejects(adapter, tmp_path):
    path = str(tmp_path / "report.json")
    adapter.save_report(path, _report_doc())
    assert adapter.load_report(path)["reports"][0]["efficacy_percent"] == 80.0

    with pytest.raises(InputError):
        adapter.save_report(path, _report_doc(efficacy_percent=120.0))
    with pytest.raises(InputError):
        adapter.save_report(path, _report_doc(metric="BLEU"))
    bad = _report_doc()
    bad["reports"][0]["surprise"] = 1
    with pytest.raises(InputError):
        adapter.validate_report(bad)


def test_hand_edited_report_fails_to_load(adapter, tmp_path):
    path = tmp_path / "report.json"
    adapter.save_report(str(path), _report_doc())
    doc = json.loads(path.read_text())
    doc["reports"][0]["value_target"] = "guess"
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError):
        adapter.load_report(str(path))


def test_sidecar_without_stack_is_rejected(adapter, tmp_path):
    path = tmp_path / "keys.json"
    adapter.save_key_statistics(str(path), KeyStatistics.empty(3), 0)
    doc = json.loads(path.read_text())
    del doc["stack"]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointFormatError):
        adapter.load_key_statistics(str(path))


def test_rows_csv_header(adapter, tmp_path):
    path = tmp_path / "sweep.csv"
    adapter.save_rows_csv(str(path), ("layer_index", "efficacy_percent"), [{"layer_index": 0, "efficacy_percent": 50.0}])
    assert path.read_text().splitlines() == ["layer_index,efficacy_percent", "0,50.0"]


def test_config_sections(tmp_path):
    path = tmp_path / "lab.json"
    path.write_text(json.dumps({"model": {"d_model": 16}, "grammar": {"length_range": [2, 5]}}))
    config = JsonPersistenceAdapter(str(path)).load_config()
    assert config.model.d_model == 16
    assert config.grammar.length_range == (2, 5)
    assert config.training == LabConfig().training
    assert JsonPersistenceAdapter(str(path)).load_setting("absent", 3) == 3


@pytest.mark.parametrize(
    "content",
    [
        {"model": {"d_modle": 16}},
        {"modle": {}},
        [1, 2],
    ],
)
def test_config_errors(tmp_path, content):
    path = tmp_path / "lab.json"
    path.write_text(json.dumps(content))
    with pytest.raises(ConfigError):
        JsonPersistenceAdapter(str(path)).load_config()


def test_missing_config_is_an_error(tmp_path):
    with pytest.raises(ConfigError):
        JsonPersistenceAdapter(str(tmp_path / "nope.json")).load_config()


def test_no_config_means_defaults():
    assert JsonPersistenceAdapter().load_config() == LabConfig()
