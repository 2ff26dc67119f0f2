import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np
from PySide6.QtCore import QObject, Signal

from app.metrics import corpus_bleu, efficacy
from domain import editor_core, taskgen
from domain.errors import EditLabError, InputError, SpanError
from domain.models import (
    DIRECTION_NOTES,
    AblationResult,
    BehaviorKind,
    BehaviorSpec,
    DirectionMode,
    EditJob,
    EditReport,
    EpochStats,
    ExampleRef,
    InsertionPair,
    KeyStatistics,
    LabConfig,
    Pair,
    ParallelCorpus,
    ProbeSet,
    Provenance,
    RankOneUpdate,
    SpanMode,
    Stack,
    SweepResult,
    SyntheticGrammar,
    Tokens,
    TransformerConfig,
    ValueTarget,
)
from domain.ports import PersistencePort, TranslationModelPort

logger = logging.getLogger(__name__)

DECODE_CHUNK = 256
REPORT_FORMAT_VERSION = 1
SWEEP_FIELDS = ("layer_index", "efficacy_percent", "generalization", "key_budget", "seed")
SUMMARY_FIELDS = ("task", "layer_index", "efficacy_percent", "generalization", "generalization_baseline", "p")

# seed streams
GRAMMAR_STREAM, CORPUS_STREAM, INJECT_STREAM, MODEL_STREAM, SHUFFLE_STREAM, PROBE_STREAM = range(1, 7)
KEY_STREAM, DROPOUT_STREAM = 7, 8

ModelFactory = Callable[[TransformerConfig, Tokens, Tokens], TranslationModelPort]


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def leg_seeds(seed: int, stack: Stack, layer_index: int) -> dict[str, int]:
    """Seeds of one (stack, layer) edit; independent of which other legs run."""
    stack_id = 0 if stack is Stack.ENCODER else 1
    return {
        "job": seed,
        "keys": derive_seed(seed, KEY_STREAM, stack_id, layer_index),
        "dropout": derive_seed(seed, DROPOUT_STREAM, stack_id, layer_index),
    }


def decode_all(model: TranslationModelPort, sources: Sequence[Tokens]) -> list[Tokens]:
    """Chunked batch decoding, for bulk scoring where padding noise is harmless."""
    out: list[Tokens] = []
    for start in range(0, len(sources), DECODE_CHUNK):
        out.extend(r.tokens for r in model.greedy_decode_batch(sources[start : start + DECODE_CHUNK]))
    return out


def decode_each(model: TranslationModelPort, sources: Sequence[Tokens]) -> list[Tokens]:
    """One unpadded decode per source, the way probes are selected."""
    return [model.greedy_decode(src).tokens for src in sources]


@dataclass(frozen=True)
class ProbedSide:
    key: np.ndarray
    value: np.ndarray
    residual: np.ndarray
    provenance: Provenance


@dataclass
class Workspace:
    """Everything one edit job reads, loaded once and shared by its legs."""

    model: TranslationModelPort
    behavior: BehaviorSpec
    probe_set: ProbeSet
    train: list[Pair]
    heldout: list[Pair]
    baseline: Optional[tuple[float, float]] = None
    keys: dict[int, KeyStatistics] = field(default_factory=dict)  # sidecar statistics by layer


class EditLabService(QObject):
    # Signals
    epoch_finished = Signal(object)  # EpochStats
    layer_finished = Signal(object)  # EditReport
    edit_finished = Signal(object)  # EditReport
    error_occurred = Signal(str)

    def __init__(self, persistence: PersistencePort, model_factory: ModelFactory, config: Optional[LabConfig] = None):
        super().__init__()
        self.persistence = persistence
        self.model_factory = model_factory
        self.config = config if config is not None else persistence.load_config()

    @contextmanager
    def _signalled(self, what: str):
        try:
            yield
        except EditLabError as exc:
            self.error_occurred.emit(f"{what}: {exc.code}: {exc}")
            raise

    # ---------------------------------------------------------------- data

    def generate_data(self, seed: int) -> tuple[SyntheticGrammar, ParallelCorpus]:
        with self._signalled("gen-data"):
            grammar = taskgen.build_grammar(self.config.grammar, derive_seed(seed, GRAMMAR_STREAM))
            corpus = taskgen.generate_corpus(
                grammar, self.config.corpus.n_train, self.config.corpus.n_heldout, derive_seed(seed, CORPUS_STREAM)
            )
        return grammar, corpus

    def inject(
        self, corpus: ParallelCorpus, grammar: SyntheticGrammar, kind: BehaviorKind, seed: int
    ) -> tuple[ParallelCorpus, BehaviorSpec]:
        with self._signalled("inject"):
            return taskgen.inject_behavior(
                corpus, grammar, kind, derive_seed(seed, INJECT_STREAM), self.config.injection
            )

    def new_model(self, grammar: SyntheticGrammar, seed: int) -> TranslationModelPort:
        config = TransformerConfig(
            vocab_src=len(grammar.source_vocab),
            vocab_tgt=len(grammar.target_vocab),
            seed=derive_seed(seed, MODEL_STREAM),
            **asdict(self.config.model),
        )
        return self.model_factory(config, grammar.source_vocab, grammar.target_vocab)

    def build_probes(
        self,
        grammar: SyntheticGrammar,
        spec: BehaviorSpec,
        model: TranslationModelPort,
        seed: int,
        train_sources: Sequence[Tokens] = (),
    ) -> ProbeSet:
        with self._signalled("probes"):
            return taskgen.build_probe_set(
                grammar,
                spec,
                model,
                derive_seed(seed, PROBE_STREAM),
                self.config.probes,
                exclude=set(train_sources),
                ngram=self.config.detector.n,
                min_repeats=self.config.detector.k,
            )

    # ------------------------------------------------------------ training

    def train(
        self,
        model: TranslationModelPort,
        corpus: ParallelCorpus,
        epochs: Optional[int] = None,
        lr: Optional[float] = None,
        seed: int = 0,
    ) -> tuple[TranslationModelPort, list[EpochStats]]:
        """Shuffled minibatch SGD; one EpochStats per epoch."""
        training = self.config.training
        epochs = training.epochs if epochs is None else epochs
        lr = training.lr if lr is None else lr
        rng = np.random.default_rng(derive_seed(seed, SHUFFLE_STREAM))
        pairs = list(corpus.train)
        heldout = list(corpus.heldout)
        history = []
        with self._signalled("train"):
            for epoch in range(1, epochs + 1):
                order = rng.permutation(len(pairs))
                losses = []
                for start in range(0, len(pairs), training.batch_size):
                    batch = [pairs[i] for i in order[start : start + training.batch_size]]
                    model, loss = model.train_step(batch, lr, training.clip_norm)
                    losses.append(loss)
                stats = EpochStats(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)),
                    heldout_token_accuracy=model.token_accuracy(heldout) if heldout else 0.0,
                )
                logger.info(
                    "epoch %d/%d loss %.4f heldout acc %.4f", epoch, epochs, stats.train_loss, stats.heldout_token_accuracy
                )
                history.append(stats)
                self.epoch_finished.emit(stats)
        return model, history

    # ---------------------------------------------------------- evaluation

    def score(self, model: TranslationModelPort, probe_set: ProbeSet, heldout: Sequence[Pair]) -> tuple[int, float, float]:
        """(probes fixed, efficacy percent, toy-BLEU on heldout)."""
        fixed, percent = efficacy(probe_set, decode_each(model, [p.source for p in probe_set.probes]))
        hypotheses = decode_all(model, [src for src, _ in heldout])
        return fixed, percent, corpus_bleu(hypotheses, [tgt for _, tgt in heldout])

    def evaluate(self, model: TranslationModelPort, probe_set: ProbeSet, heldout: Sequence[Pair]) -> tuple[float, float]:
        _, percent, bleu = self.score(model, probe_set, heldout)
        return percent, bleu

    # ------------------------------------------------------ pair extraction

    def _encoder_probe(
        self, model: TranslationModelPort, ref: ExampleRef, span: Tokens, layer_index: int, span_mode: SpanMode
    ) -> ProbedSide:
        end = ref.span_start + len(span)
        if ref.span_start < 0 or end > len(ref.source) or ref.source[ref.span_start : end] != span:
            raise SpanError(f"span {' '.join(span)} not found at {ref.span_start} in {' '.join(ref.source)}")
        positions = range(ref.span_start, end) if span_mode is SpanMode.MEAN else [ref.span_start]
        records = [model.probe_ff(ref.source, layer_index, pos) for pos in positions]
        return ProbedSide(
            key=np.mean([r.key for r in records], axis=0),
            value=np.mean([r.value for r in records], axis=0),
            residual=np.mean([r.residual for r in records], axis=0),
            provenance=Provenance(" ".join(ref.source), layer_index, ref.span_start),
        )

    def _decoder_probes(
        self, model: TranslationModelPort, probe_set: ProbeSet, layer_index: int
    ) -> tuple[ProbedSide, ProbedSide]:
        """Negative: the step where its decode first leaves the expected target.
        Positive: the step where it emits that same expected token."""
        negative, positive = probe_set.negative, probe_set.positive
        expected = next((p.expected for p in probe_set.probes if p.source == negative.source), None)
        if expected is None:
            raise SpanError("negative example is not one of the probes")
        produced = model.greedy_decode(negative.source).tokens
        step = next((i for i, (a, b) in enumerate(zip(produced, expected)) if a != b), min(len(produced), len(expected)))
        if step >= len(expected):
            raise SpanError("negative decode only diverges after the expected target ends")
        token = expected[step]
        pos_output = model.greedy_decode(positive.source).tokens
        if token not in pos_output:
            raise SpanError(f"positive decode never emits {token}")
        pos_step = pos_output.index(token)
        neg_rec = model.probe_decoder_ff(negative.source, expected[:step], layer_index)
        pos_rec = model.probe_decoder_ff(positive.source, pos_output[:pos_step], layer_index)
        neg_from = Provenance(" ".join(negative.source), layer_index, step)
        pos_from = Provenance(" ".join(positive.source), layer_index, pos_step)
        return (
            ProbedSide(neg_rec.key, neg_rec.value, neg_rec.residual, neg_from),
            ProbedSide(pos_rec.key, pos_rec.value, pos_rec.residual, pos_from),
        )

    def extract_pair(
        self,
        model: TranslationModelPort,
        probe_set: ProbeSet,
        layer_index: int,
        direction_mode: DirectionMode = DirectionMode.PROSE,
        span_mode: SpanMode = SpanMode.FIRST,
        stack: Stack = Stack.ENCODER,
        value_target: ValueTarget = ValueTarget.RESIDUAL,
    ) -> InsertionPair:
        """K* from the key side, V* from the value side.

        With the residual target, V* also carries the difference between the
        two sides' incoming residual streams, so after the edit the key side's
        stream leaving the layer equals the value side's.
        """
        if stack is Stack.ENCODER:
            neg = self._encoder_probe(model, probe_set.negative, probe_set.span, layer_index, span_mode)
            pos = self._encoder_probe(model, probe_set.positive, probe_set.span_of_positive, layer_index, span_mode)
        else:
            neg, pos = self._decoder_probes(model, probe_set, layer_index)
        key_side, value_side = (neg, pos) if direction_mode is DirectionMode.PROSE else (pos, neg)
        v_star = value_side.value
        if value_target is ValueTarget.RESIDUAL:
            v_star = value_side.value + (value_side.residual - key_side.residual)
        return InsertionPair(key_side.key, v_star, key_side.provenance, value_side.provenance)

    def collect_statistics(
        self,
        model: TranslationModelPort,
        train: Sequence[Pair],
        layer_index: int,
        budget: int,
        seed: int,
        stack: Stack = Stack.ENCODER,
        ridge: Optional[float] = None,
    ) -> KeyStatistics:
        with self._signalled("collect-keys"):
            if stack is Stack.ENCODER:
                return model.collect_keys([src for src, _ in train], layer_index, budget, seed, ridge)
            return model.collect_decoder_keys(train, layer_index, budget, seed, ridge)

    def apply_edit(
        self,
        model: TranslationModelPort,
        pair: InsertionPair,
        stats: KeyStatistics,
        layer_index: int,
        p: float,
        seed: int,
        stack: Stack = Stack.ENCODER,
        condition_ceiling: float = editor_core.DEFAULT_CONDITION_CEILING,
    ) -> tuple[TranslationModelPort, RankOneUpdate]:
        """Solve, sparsify when p > 0, and write the edited weights back."""
        memory = model.ff_memory(layer_index, stack)
        update = editor_core.solve_edit(memory, stats, pair, condition_ceiling)
        if p > 0:
            update = editor_core.edit_dropout(update, p, seed)
        edited = editor_core.apply_update(memory, update)
        return model.with_ff_weight(layer_index, edited.weights, stack), update

    # ------------------------------------------------------------ edit jobs

    def load_workspace(self, job: EditJob) -> Workspace:
        model = self.persistence.load_checkpoint(job.model_path)
        behavior = self.persistence.load_behavior(job.behavior_path)
        probe_set = self.persistence.load_probe_set(job.probe_path)
        if probe_set.kind is not behavior.kind:
            raise InputError(f"probe set is for {probe_set.kind.value}, behavior is {behavior.kind.value}")
        workspace = Workspace(
            model=model,
            behavior=behavior,
            probe_set=probe_set,
            train=self.persistence.load_corpus(job.corpus_path),
            heldout=self.persistence.load_corpus(job.heldout_path),
        )
        if job.keys_path:
            stats, layer_index, stack = self.persistence.load_key_statistics(job.keys_path)
            if stack is not job.stack:
                raise InputError(f"key sidecar holds {stack.value} keys, the job edits {job.stack.value}")
            if job.layer_index is None:
                raise InputError("a key sidecar pins one layer; give the layer to edit")
            if layer_index != job.layer_index:
                raise InputError(f"key sidecar is for layer {layer_index}, the job edits layer {job.layer_index}")
            workspace.keys[layer_index] = stats
        return workspace

    def _baseline(self, ws: Workspace) -> tuple[float, float]:
        if ws.baseline is None:
            _, percent, bleu = self.score(ws.model, ws.probe_set, ws.heldout)
            ws.baseline = (percent, bleu)
            logger.info("baseline efficacy %.1f%%, toy-BLEU %.2f", percent, bleu)
        return ws.baseline

    def _blank_report(self, ws: Workspace, job: EditJob, layer_index: Optional[int], p: float) -> EditReport:
        baseline_efficacy, baseline_bleu = self._baseline(ws)
        return EditReport(
            task=ws.probe_set.kind.value,
            layer_index=layer_index,
            stack=job.stack.value,
            baseline_efficacy_percent=baseline_efficacy,
            generalization_baseline=baseline_bleu,
            probes_total=ws.probe_set.size,
            p=p,
            direction_mode=job.direction_mode.value,
            direction_note=DIRECTION_NOTES[job.direction_mode],
            span_mode=job.span_mode.value,
            value_target=job.value_target.value,
        )

    @staticmethod
    def _sidecar(ws: Workspace, layer_index: int, key_budget: int) -> Optional[KeyStatistics]:
        stats = ws.keys.get(layer_index)
        if stats is not None and stats.count != key_budget:
            raise InputError(
                f"key sidecar for layer {layer_index} holds {stats.count} keys, this edit needs {key_budget}"
            )
        return stats

    def _run_leg(
        self,
        ws: Workspace,
        job: EditJob,
        layer_index: int,
        key_budget: int,
        p: float,
        stats: Optional[KeyStatistics] = None,
    ) -> tuple[TranslationModelPort, EditReport]:
        report = self._blank_report(ws, job, layer_index, p)
        report.seeds = leg_seeds(job.seed, job.stack, layer_index)

        started = time.perf_counter()
        if stats is None:
            stats = self._sidecar(ws, layer_index, key_budget)
        if stats is None:
            stats = self.collect_statistics(
                ws.model, ws.train, layer_index, key_budget, report.seeds["keys"], job.stack, job.ridge
            )
        elif job.ridge is not None:
            stats = KeyStatistics(stats.c, stats.count, job.ridge)
        report.timings["collect_keys"] = time.perf_counter() - started

        started = time.perf_counter()
        pair = self.extract_pair(
            ws.model, ws.probe_set, layer_index, job.direction_mode, job.span_mode, job.stack, job.value_target
        )
        edited, update = self.apply_edit(
            ws.model, pair, stats, layer_index, p, report.seeds["dropout"], job.stack, job.condition_ceiling
        )
        report.timings["solve"] = time.perf_counter() - started

        started = time.perf_counter()
        report.probes_fixed, report.efficacy_percent, report.generalization_score = self.score(
            edited, ws.probe_set, ws.heldout
        )
        report.timings["evaluate"] = time.perf_counter() - started

        report.key_budget = stats.count
        report.mask_density = update.density()
        report.update = editor_core.update_summary(update, stats.effective_ridge())
        report.checksums = {
            "k_star": editor_core.array_checksum(pair.k_star),
            "v_star": editor_core.array_checksum(pair.v_star),
            "c": editor_core.array_checksum(stats.c),
        }
        logger.info(
            "%s %s layer %d: efficacy %.1f%%, toy-BLEU %.2f (baseline %.2f), density %.3f",
            report.task,
            report.stack,
            layer_index,
            report.efficacy_percent,
            report.generalization_score,
            report.generalization_baseline,
            report.mask_density,
        )
        return edited, report

    def layer_sweep(self, job: EditJob, workspace: Optional[Workspace] = None) -> SweepResult:
        """One independent edit per layer from the same base model, sweep key budget."""
        ws = workspace or self.load_workspace(job)
        cfg = ws.model.config
        n_layers = cfg.n_enc_layers if job.stack is Stack.ENCODER else cfg.n_dec_layers
        rows = []
        for layer_index in range(n_layers):
            try:
                _, report = self._run_leg(ws, job, layer_index, job.sweep_key_budget, job.p)
            except EditLabError as exc:
                logger.warning("layer %d failed: %s", layer_index, exc)
                self.error_occurred.emit(f"layer {layer_index}: {exc.code}: {exc}")
                report = self._blank_report(ws, job, layer_index, job.p)
                report.seeds = leg_seeds(job.seed, job.stack, layer_index)
                report.error = f"{exc.code}: {exc}"
            rows.append(report)
            self.layer_finished.emit(report)

        ok = [r for r in rows if r.error is None]
        best = max(ok, key=lambda r: (r.efficacy_percent, -r.layer_index)).layer_index if ok else None
        logger.info("sweep best layer: %s", best)
        return SweepResult(rows, best)

    def _resolve_layer(self, job: EditJob, ws: Workspace) -> EditJob:
        if job.layer_index is not None:
            return job
        sweep = self.layer_sweep(job, ws)
        if sweep.best_layer is None:
            raise InputError("every sweep leg failed; no layer to edit")
        return replace(job, layer_index=sweep.best_layer)

    def run_edit(
        self, job: EditJob, workspace: Optional[Workspace] = None
    ) -> tuple[TranslationModelPort, EditReport]:
        """Full-budget edit at job.layer_index, or at the sweep's best layer when unset."""
        ws = workspace or self.load_workspace(job)
        with self._signalled("edit"):
            job = self._resolve_layer(job, ws)
            edited, report = self._run_leg(ws, job, job.layer_index, job.key_budget, job.p)
        self.edit_finished.emit(report)
        return edited, report

    def ablate_dropout(self, job: EditJob, workspace: Optional[Workspace] = None) -> AblationResult:
        """The same edit with p = job.p and with p = 0, sharing K*, V* and C."""
        ws = workspace or self.load_workspace(job)
        with self._signalled("ablate"):
            job = self._resolve_layer(job, ws)
            stats = self._sidecar(ws, job.layer_index, job.key_budget)
            if stats is None:
                stats = self.collect_statistics(
                    ws.model,
                    ws.train,
                    job.layer_index,
                    job.key_budget,
                    leg_seeds(job.seed, job.stack, job.layer_index)["keys"],
                    job.stack,
                    job.ridge,
                )
            _, with_dropout = self._run_leg(ws, job, job.layer_index, job.key_budget, job.p, stats)
            _, without_dropout = self._run_leg(ws, job, job.layer_index, job.key_budget, 0.0, stats)
        result = AblationResult(with_dropout, without_dropout)
        logger.info(
            "ablation: toy-BLEU %.2f with dropout, %.2f without (difference %.2f)",
            with_dropout.generalization_score,
            without_dropout.generalization_score,
            result.generalization_difference,
        )
        return result

    def evaluate_job(self, job: EditJob, workspace: Optional[Workspace] = None) -> EditReport:
        ws = workspace or self.load_workspace(job)
        report = self._blank_report(ws, job, job.layer_index, 0.0)
        report.probes_fixed, report.efficacy_percent, report.generalization_score = self.score(
            ws.model, ws.probe_set, ws.heldout
        )
        report.key_budget = 0
        return report

    # --------------------------------------------------------------- reports

    @staticmethod
    def report_document(
        command: str,
        reports: Sequence[EditReport],
        best_layer: Optional[int] = None,
        ablation: Optional[AblationResult] = None,
    ) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "format_version": REPORT_FORMAT_VERSION,
            "command": command,
            "task": reports[0].task,
            "reports": [r.to_dict() for r in reports],
        }
        if command == "sweep":
            doc["best_layer"] = best_layer
        if ablation is not None:
            doc["ablation"] = {
                "generalization_with_dropout": ablation.with_dropout.generalization_score,
                "generalization_without_dropout": ablation.without_dropout.generalization_score,
                "generalization_difference": ablation.generalization_difference,
                "identical_inputs": ablation.with_dropout.checksums == ablation.without_dropout.checksums,
            }
        return doc

    @staticmethod
    def sweep_rows(sweep: SweepResult) -> list[dict[str, Any]]:
        return [
            {
                "layer_index": r.layer_index,
                "efficacy_percent": r.efficacy_percent,
                "generalization": r.generalization_score,
                "key_budget": r.key_budget,
                "seed": r.seeds.get("job", ""),
            }
            for r in sweep.rows
        ]

    def summarize(self, paths: Sequence[str]) -> tuple[dict[str, Any], list[dict[str, Any]]]:
        """Validated reports folded into one document plus one table row per edit."""
        rows = []
        for path in paths:
            doc = self.persistence.load_report(path)
            for r in doc["reports"]:
                if r["error"] is None:
                    rows.append(
                        {
                            "task": r["task"],
                            "layer_index": r["layer_index"],
                            "efficacy_percent": r["efficacy_percent"],
                            "generalization": r["generalization_score"],
                            "generalization_baseline": r["generalization_baseline"],
                            "p": r["p"],
                        }
                    )
        rows.sort(key=lambda row: (row["task"], row["layer_index"] if row["layer_index"] is not None else -1, row["p"]))
        return {"format_version": REPORT_FORMAT_VERSION, "sources": list(paths), "rows": rows}, rows
