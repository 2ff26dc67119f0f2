import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

# Add project root to sys.path to ensure absolute imports work correctly
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from PySide6.QtCore import QCoreApplication

from adapters.model.tinyformer_model import TinyformerModel
from adapters.persistence.json_adapter import JsonPersistenceAdapter
from app.services import SUMMARY_FIELDS, SWEEP_FIELDS, EditLabService, leg_seeds
from domain.errors import EditLabError, InputError
from domain.models import BehaviorKind, DirectionMode, EditJob, LabConfig, ParallelCorpus, SpanMode, Stack, ValueTarget

logger = logging.getLogger("editlab")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _path(directory: str, name: str) -> str:
    return os.path.join(directory, name)


def _load_corpus(persistence, data_dir: str) -> ParallelCorpus:
    return ParallelCorpus(
        tuple(persistence.load_corpus(_path(data_dir, "train.tsv"))),
        tuple(persistence.load_corpus(_path(data_dir, "heldout.tsv"))),
    )


def _save_data_dir(persistence, out: str, grammar, corpus: ParallelCorpus):
    persistence.save_grammar(_path(out, "grammar.json"), grammar)
    persistence.save_corpus(_path(out, "train.tsv"), corpus.train)
    persistence.save_corpus(_path(out, "heldout.tsv"), corpus.heldout)


def _job(args, config: LabConfig) -> EditJob:
    edit = config.edit
    return EditJob(
        model_path=args.model,
        behavior_path=_path(args.data, "behavior.json"),
        probe_path=args.probes or _path(args.data, "probes.json"),
        corpus_path=_path(args.data, "train.tsv"),
        heldout_path=_path(args.data, "heldout.tsv"),
        layer_index=args.layer,
        key_budget=args.budget if args.budget is not None else edit.full_key_budget,
        sweep_key_budget=args.sweep_budget if args.sweep_budget is not None else edit.sweep_key_budget,
        p=args.p if args.p is not None else edit.p,
        seed=args.seed,
        direction_mode=DirectionMode(args.direction or edit.direction_mode),
        span_mode=SpanMode(args.span_mode or edit.span_mode),
        value_target=ValueTarget(args.value_target or edit.value_target),
        stack=Stack.DECODER if args.decoder else Stack.ENCODER,
        keys_path=args.keys,
        ridge=args.ridge if args.ridge is not None else edit.ridge,
        condition_ceiling=edit.condition_ceiling,
    )


# ------------------------------------------------------------------ commands


def cmd_gen_data(service: EditLabService, args):
    grammar, corpus = service.generate_data(args.seed)
    _save_data_dir(service.persistence, args.out, grammar, corpus)
    logger.info("wrote grammar and corpus (%d train, %d heldout) to %s", len(corpus.train), len(corpus.heldout), args.out)


def cmd_inject(service: EditLabService, args):
    persistence = service.persistence
    grammar = persistence.load_grammar(_path(args.data, "grammar.json"))
    corpus, spec = service.inject(_load_corpus(persistence, args.data), grammar, BehaviorKind(args.kind), args.seed)
    _save_data_dir(persistence, args.out, grammar, corpus)
    persistence.save_behavior(_path(args.out, "behavior.json"), spec)


def cmd_train(service: EditLabService, args):
    persistence = service.persistence
    grammar = persistence.load_grammar(_path(args.data, "grammar.json"))
    model = service.new_model(grammar, args.seed)
    model, history = service.train(model, _load_corpus(persistence, args.data), args.epochs, args.lr, args.seed)
    persistence.save_checkpoint(_path(args.out, "model.json"), model)
    persistence.save_document(
        _path(args.out, "train_log.json"),
        {"format_version": 1, "seed": args.seed, "config": service.config.to_dict(), "epochs": [asdict(h) for h in history]},
    )


def cmd_probes(service: EditLabService, args):
    persistence = service.persistence
    grammar = persistence.load_grammar(_path(args.data, "grammar.json"))
    spec = persistence.load_behavior(_path(args.data, "behavior.json"))
    train = persistence.load_corpus(_path(args.data, "train.tsv"))
    model = persistence.load_checkpoint(args.model)
    probe_set = service.build_probes(grammar, spec, model, args.seed, [src for src, _ in train])
    persistence.save_probe_set(_path(args.out, "probes.json"), probe_set)


def cmd_collect_keys(service: EditLabService, args):
    persistence = service.persistence
    model = persistence.load_checkpoint(args.model)
    train = persistence.load_corpus(_path(args.data, "train.tsv"))
    stack = Stack.DECODER if args.decoder else Stack.ENCODER
    budget = args.budget if args.budget is not None else service.config.edit.full_key_budget
    stats = service.collect_statistics(
        model, train, args.layer, budget, leg_seeds(args.seed, stack, args.layer)["keys"], stack, args.ridge
    )
    persistence.save_key_statistics(_path(args.out, "keys.json"), stats, args.layer, stack)


def cmd_sweep(service: EditLabService, args):
    job = _job(args, service.config)
    sweep = service.layer_sweep(job)
    service.persistence.save_rows_csv(_path(args.out, "sweep.csv"), SWEEP_FIELDS, service.sweep_rows(sweep))
    service.persistence.save_report(
        _path(args.out, "report.json"), service.report_document("sweep", sweep.rows, best_layer=sweep.best_layer)
    )


def cmd_edit(service: EditLabService, args):
    job = _job(args, service.config)
    workspace = service.load_workspace(job)
    if job.layer_index is None:
        sweep = service.layer_sweep(job, workspace)
        service.persistence.save_rows_csv(_path(args.out, "sweep.csv"), SWEEP_FIELDS, service.sweep_rows(sweep))
        if sweep.best_layer is None:
            raise InputError("every sweep leg failed; no layer to edit")
        job = replace(job, layer_index=sweep.best_layer)
    edited, report = service.run_edit(job, workspace)
    service.persistence.save_checkpoint(_path(args.out, "model.json"), edited)
    service.persistence.save_report(_path(args.out, "report.json"), service.report_document("edit", [report]))


def cmd_eval(service: EditLabService, args):
    job = _job(args, service.config)
    report = service.evaluate_job(job)
    service.persistence.save_report(_path(args.out, "report.json"), service.report_document("eval", [report]))


def cmd_ablate(service: EditLabService, args):
    job = _job(args, service.config)
    result = service.ablate_dropout(job)
    service.persistence.save_report(
        _path(args.out, "report.json"),
        service.report_document("ablate", [result.with_dropout, result.without_dropout], ablation=result),
    )


def cmd_report(service: EditLabService, args):
    summary, rows = service.summarize(args.reports)
    service.persistence.save_document(_path(args.out, "summary.json"), summary)
    service.persistence.save_rows_csv(_path(args.out, "summary.csv"), SUMMARY_FIELDS, rows)


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=str, default=None, help="JSON settings document")
    common.add_argument("--out", type=str, default=".")
    common.add_argument("--log-level", type=str, default="INFO")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=str, required=True, help="directory with grammar, corpora and behavior")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", type=str, required=True, help="checkpoint JSON")

    edit = argparse.ArgumentParser(add_help=False)
    edit.add_argument("--probes", type=str, default=None)
    edit.add_argument("--layer", type=int, default=None)
    edit.add_argument("--budget", type=int, default=None)
    edit.add_argument("--sweep-budget", type=int, default=None)
    edit.add_argument("--p", type=float, default=None)
    edit.add_argument("--direction", choices=[m.value for m in DirectionMode], default=None)
    edit.add_argument("--span-mode", choices=[m.value for m in SpanMode], default=None)
    edit.add_argument("--value-target", choices=[m.value for m in ValueTarget], default=None)
    edit.add_argument("--keys", type=str, default=None, help="key-statistics sidecar from collect-keys")
    edit.add_argument("--ridge", type=float, default=None)
    edit.add_argument("--decoder", action="store_true", help="experimental: edit decoder FF layers")

    parser = argparse.ArgumentParser(prog="editlab", description="Rank-one editing lab for a toy translation model")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common]).set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject", parents=[common, data])
    p.add_argument("--kind", choices=[k.value for k in BehaviorKind], required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", parents=[common, data])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    sub.add_parser("probes", parents=[common, data, model]).set_defaults(func=cmd_probes)

    p = sub.add_parser("collect-keys", parents=[common, data, model])
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--ridge", type=float, default=None)
    p.add_argument("--decoder", action="store_true")
    p.set_defaults(func=cmd_collect_keys)

    for name, func in (("sweep", cmd_sweep), ("edit", cmd_edit), ("eval", cmd_eval), ("ablate", cmd_ablate)):
        sub.add_parser(name, parents=[common, data, model, edit]).set_defaults(func=func)

    p = sub.add_parser("report", parents=[common])
    p.add_argument("reports", nargs="+", help="report.json files")
    p.set_defaults(func=cmd_report)
    return parser


def _error_object(code: str, exc: BaseException) -> str:
    return json.dumps({"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)

    _app = QCoreApplication.instance() or QCoreApplication(sys.argv[:1])

    try:
        # Composition Root
        persistence_adapter = JsonPersistenceAdapter(args.config)
        service = EditLabService(persistence_adapter, TinyformerModel.create)
        service.epoch_finished.connect(lambda s: logger.debug("epoch signal: %s", s))
        service.layer_finished.connect(
            lambda r: logger.info("layer %s done: efficacy %.1f%% error=%s", r.layer_index, r.efficacy_percent, r.error)
        )
        service.edit_finished.connect(lambda r: logger.info("edit done at layer %s", r.layer_index))
        service.error_occurred.connect(lambda msg: logger.error("%s", msg))

        args.func(service, args)
    except EditLabError as exc:
        print(_error_object(exc.code, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(_error_object("internal", exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
