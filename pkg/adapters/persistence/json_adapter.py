import csv
import json
import logging
import os
from contextlib import contextmanager
from typing import Any, Optional, Sequence

import jsonschema
import numpy as np

from adapters.model.tinyformer import ModelParams
from adapters.model.tinyformer_model import TinyformerModel, Vocabulary
from domain.errors import CheckpointFormatError, ConfigError, EditLabError, InputError
from domain.models import (
    BehaviorKind,
    BehaviorSpec,
    ContextRule,
    ErrorMatcher,
    ExampleRef,
    KeyStatistics,
    LabConfig,
    Pair,
    Probe,
    ProbeSet,
    Stack,
    SyntheticGrammar,
    TransformerConfig,
)
from domain.ports import PersistencePort, TranslationModelPort

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REPORT_SCHEMA_PATH = os.path.join(
    os.path.dirname(os.path.abspath(__file__)), "..", "..", "schemas", "report.schema.json"
)


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _decode_array(doc: dict) -> np.ndarray:
    return np.asarray(doc["data"], dtype=np.float64).reshape(doc["shape"])


@contextmanager
def _malformed(path: str):
    """Missing or mistyped fields in a task document become input errors."""
    try:
        yield
    except EditLabError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise InputError(f"{path}: malformed document ({type(exc).__name__}: {exc})") from exc


class JsonPersistenceAdapter(PersistencePort):
    """Every lab artifact as a plain JSON / TSV / CSV file.

    ``settings_path`` names the JSON config document; without it every
    setting takes its default.
    """

    def __init__(self, settings_path: Optional[str] = None):
        self.settings_path = settings_path
        self._schema = None

    # -- plumbing

    def _ensure_parent(self, path: str):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)

    def _write_json(self, path: str, doc: Any):
        self._ensure_parent(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    def _read_json(self, path: str) -> Any:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError as exc:
            raise InputError(f"missing file {path}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{path} is not valid JSON: {exc}") from exc

    def _load_data(self) -> dict:
        if self.settings_path is None:
            return {}
        try:
            with open(self.settings_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (json.JSONDecodeError, FileNotFoundError) as exc:
            raise ConfigError(f"cannot read config {self.settings_path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return data

    # -- settings

    def load_setting(self, key: str, default: Any = None) -> Any:
        return self._load_data().get(key, default)

    def load_config(self) -> LabConfig:
        data = self._load_data()
        known = {name for name in LabConfig().to_dict()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return LabConfig.from_sections({name: self.load_setting(name, {}) for name in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    # -- checkpoints

    def save_checkpoint(self, path: str, model: TranslationModelPort):
        if not isinstance(model, TinyformerModel):
            raise InputError("only tinyformer checkpoints can be written")
        cfg = model.config
        doc = {
            "format_version": FORMAT_VERSION,
            "config": {name: getattr(cfg, name) for name in cfg.__dataclass_fields__},
            "vocab": {"src": list(model.src_vocab.tokens), "tgt": list(model.tgt_vocab.tokens)},
            "tensors": {name: _encode_array(arr) for name, arr in model.params.tensors.items()},
        }
        self._write_json(path, doc)
        logger.info("saved checkpoint %s (%d tensors)", path, len(doc["tensors"]))

    def load_checkpoint(self, path: str) -> TinyformerModel:
        doc = self._read_json(path)
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
        try:
            config = TransformerConfig(**doc["config"])
            tensors = {name: _decode_array(t) for name, t in doc["tensors"].items()}
            return TinyformerModel(
                ModelParams(config, tensors), Vocabulary(doc["vocab"]["src"]), Vocabulary(doc["vocab"]["tgt"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: {exc}") from exc

    # -- corpora

    def save_corpus(self, path: str, pairs: Sequence[Pair]):
        self._ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for src, tgt in pairs:
                f.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")

    def load_corpus(self, path: str) -> list[Pair]:
        pairs = []
        try:
            with open(path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    if line.count("\t") != 1:
                        raise InputError(f"{path}:{lineno}: expected one tab")
                    src, tgt = line.split("\t")
                    pairs.append((tuple(src.split()), tuple(tgt.split())))
        except FileNotFoundError as exc:
            raise InputError(f"missing file {path}") from exc
        return pairs

    # -- task documents

    def save_grammar(self, path: str, grammar: SyntheticGrammar):
        self._write_json(
            path,
            {
                "lexicon": grammar.lexicon,
                "tags": list(grammar.tags),
                "context_rules": [{"marked": sorted(r.marked), "inserted": r.inserted} for r in grammar.context_rules],
                "length_range": list(grammar.length_range),
                "tag_rate": grammar.tag_rate,
                "seed": grammar.seed,
            },
        )

    def load_grammar(self, path: str) -> SyntheticGrammar:
        doc = self._read_json(path)
        with _malformed(path):
            return SyntheticGrammar(
                lexicon=dict(doc["lexicon"]),
                tags=tuple(doc["tags"]),
                context_rules=tuple(ContextRule(frozenset(r["marked"]), r["inserted"]) for r in doc["context_rules"]),
                length_range=tuple(doc["length_range"]),
                tag_rate=doc["tag_rate"],
                seed=doc["seed"],
            )

    def save_behavior(self, path: str, spec: BehaviorSpec):
        self._write_json(
            path,
            {
                "kind": spec.kind.value,
                "trigger": list(spec.trigger),
                "corruption": spec.corruption,
                "injection_rate": spec.injection_rate,
                "details": spec.details,
                "poison_pairs": [[list(s), list(t)] for s, t in spec.poison_pairs],
            },
        )

    def load_behavior(self, path: str) -> BehaviorSpec:
        doc = self._read_json(path)
        with _malformed(path):
            return BehaviorSpec(
                kind=BehaviorKind(doc["kind"]),
                trigger=tuple(doc["trigger"]),
                corruption=doc["corruption"],
                poison_pairs=tuple((tuple(s), tuple(t)) for s, t in doc["poison_pairs"]),
                details=dict(doc["details"]),
            )

    def save_probe_set(self, path: str, probe_set: ProbeSet):
        def probe_doc(p: Probe) -> dict:
            m = p.matcher
            return {
                "source": list(p.source),
                "expected": list(p.expected),
                "corrupted": None if m.corrupted is None else list(m.corrupted),
                "check_oscillation": m.check_oscillation,
                "ngram": m.ngram,
                "min_repeats": m.min_repeats,
            }

        self._write_json(
            path,
            {
                "kind": probe_set.kind.value,
                "span": list(probe_set.span),
                "size": probe_set.size,
                "probes": [probe_doc(p) for p in probe_set.probes],
                "positive": {"source": list(probe_set.positive.source), "span_start": probe_set.positive.span_start},
                "negative": {"source": list(probe_set.negative.source), "span_start": probe_set.negative.span_start},
                "positive_span": None if probe_set.positive_span is None else list(probe_set.positive_span),
            },
        )

    def load_probe_set(self, path: str) -> ProbeSet:
        doc = self._read_json(path)
        with _malformed(path):
            probes = []
            for p in doc["probes"]:
                expected = tuple(p["expected"])
                corrupted = None if p["corrupted"] is None else tuple(p["corrupted"])
                matcher = ErrorMatcher(expected, p["check_oscillation"], corrupted, p["ngram"], p["min_repeats"])
                probes.append(Probe(tuple(p["source"]), expected, matcher))
            positive_span = doc.get("positive_span")
            return ProbeSet(
                kind=BehaviorKind(doc["kind"]),
                span=tuple(doc["span"]),
                probes=tuple(probes),
                positive=ExampleRef(tuple(doc["positive"]["source"]), doc["positive"]["span_start"]),
                negative=ExampleRef(tuple(doc["negative"]["source"]), doc["negative"]["span_start"]),
                positive_span=None if positive_span is None else tuple(positive_span),
            )

    # -- key statistics sidecar

    def save_key_statistics(self, path: str, stats: KeyStatistics, layer_index: int, stack: Stack = Stack.ENCODER):
        self._write_json(
            path,
            {
                "format_version": FORMAT_VERSION,
                "layer_index": layer_index,
                "stack": stack.value,
                "count": stats.count,
                "ridge": stats.ridge,
                "c": _encode_array(stats.c),
            },
        )

    def load_key_statistics(self, path: str) -> tuple[KeyStatistics, int, Stack]:
        doc = self._read_json(path)
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
        try:
            stats = KeyStatistics(_decode_array(doc["c"]), doc["count"], doc["ridge"])
            return stats, int(doc["layer_index"]), Stack(doc["stack"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: {exc}") from exc

    # -- reports

    @property
    def report_schema(self) -> dict:
        if self._schema is None:
            with open(REPORT_SCHEMA_PATH, "r", encoding="utf-8") as f:
                self._schema = json.load(f)
        return self._schema

    def validate_report(self, report: dict[str, Any]):
        try:
            jsonschema.validate(report, self.report_schema)
        except jsonschema.ValidationError as exc:
            raise InputError(f"report does not match schema: {exc.message}") from exc

    def save_report(self, path: str, report: dict[str, Any]):
        self.validate_report(report)
        self._write_json(path, report)

    def load_report(self, path: str) -> dict[str, Any]:
        report = self._read_json(path)
        self.validate_report(report)
        return report

    def save_document(self, path: str, doc: dict[str, Any]):
        self._write_json(path, doc)

    def save_rows_csv(self, path: str, fieldnames: Sequence[str], rows: Sequence[dict[str, Any]]):
        self._ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in fieldnames})
