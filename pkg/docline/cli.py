import argparse
import io
import json
import logging
import sys
import typing as t
from pathlib import Path

from pydantic import ValidationError

from docline import __version__ as docline_version
from docline.app_config import AppConfig
from docline.command_args import (
    EXIT_CODES,
    CommandParser,
    add_finetune_flags,
    add_train_flags,
    finetune_config,
    get_common_parser,
    train_overrides,
)
from docline.errors import DataError, DoclineError, NumericError, UsageError
from docline.toolbox.logging import setup_logging

# Command modules are imported inside their handlers to delay loading

Handler = t.Callable[[argparse.Namespace, AppConfig], int]


def emit(payload: t.Any) -> None:
    """Machine-readable results go to stdout, one JSON document per command."""
    print(json.dumps(payload, indent=1, sort_keys=True, default=str))


def _gen(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.docgen.corpus import generate_corpus
    from docline.docgen.generator import GenParams

    try:
        params = GenParams(
            seed=args.seed,
            lines_range=tuple(args.lines),
            words_per_line_range=tuple(args.words),
            glyph_size_px=args.glyph_size,
            ink_level=args.ink_level,
            background_level=args.background_level,
            vocab_size=args.vocab_size,
            successors=args.successors,
            left_aligned=not args.free_placement,
            label=args.label,
            tag_first_line=args.tag_first_line,
        )
    except ValidationError as e:
        raise UsageError(f"invalid generation flags: {e}") from e
    if args.print_config:
        emit(params.model_dump(mode="json"))
        return 0
    if not args.out:
        raise UsageError("gen needs --out")
    manifest = generate_corpus(params, args.count, args.out, app.threads)
    emit({"out": args.out, "count": manifest.count, "digest": manifest.digest()})
    return 0


def _train_config(args: argparse.Namespace) -> t.Any:
    from docline.trainkit.config import TrainConfig

    overrides = train_overrides(args)
    if args.config:
        return TrainConfig.load(args.config, overrides)
    return TrainConfig.build({}, overrides)


def _train_summary(result: t.Any) -> dict[str, t.Any]:
    return {
        "run_dir": str(result.run_dir),
        "checkpoint": str(result.checkpoint),
        "loss_curve": str(result.loss_curve),
        "steps_run": len(result.reports),
        "final": result.reports[-1].model_dump(mode="json") if result.reports else None,
    }


def _pretrain(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.doclib.corpus import load_corpus
    from docline.trainkit.loop import pretrain

    cfg = _train_config(args)
    if args.print_config:
        emit(cfg.model_dump(mode="json"))
        return 0
    corpus = load_corpus(cfg.corpus, app.threads) if cfg.corpus else None
    emit(_train_summary(pretrain(cfg, corpus)))
    return 0


def _resume(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.doclib.corpus import load_corpus
    from docline.trainkit.loop import resume

    cfg = _train_config(args)
    if args.print_config:
        emit(cfg.model_dump(mode="json"))
        return 0
    corpus = load_corpus(cfg.corpus, app.threads) if cfg.corpus else None
    emit(_train_summary(resume(args.checkpoint, cfg, corpus)))
    return 0


def _gradcheck(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.objectives.gradsuite import GRADCHECK_THRESHOLD, objective_grad_check

    report = objective_grad_check(args.loss, seed=args.seed, eps=args.eps, max_elements_per_param=args.max_elements)
    worst = report.worst()
    passed = report.passed(GRADCHECK_THRESHOLD)
    emit({
        "loss": args.loss,
        "seed": args.seed,
        "max_rel_err": report.max_rel_err,
        "threshold": GRADCHECK_THRESHOLD,
        "passed": passed,
        "worst_param": worst.name if worst else None,
    })
    if not passed:
        raise NumericError(f"grad_check {args.loss}: max relative error {report.max_rel_err:.3e} "
                           f"is not below {GRADCHECK_THRESHOLD}", report=report)
    return 0


def _model_and_corpus(checkpoint: str, corpus_dir: str, app: AppConfig) -> t.Any:
    from docline.doclib.corpus import load_corpus
    from docline.trainkit.checkpoints import check_vocabulary, load_model

    cfg, params = load_model(checkpoint)
    corpus = load_corpus(corpus_dir, app.threads)
    check_vocabulary(corpus, cfg)
    return cfg, params, corpus


def _eval_align(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.evalkit.alignment import alignment_accuracy

    cfg, params, corpus = _model_and_corpus(args.checkpoint, args.corpus, app)
    report = alignment_accuracy(params, cfg, corpus.documents, app.threads)
    if args.report:
        report.save(args.report)
        logging.info(f"Alignment report written to {args.report}")
    emit(report.summary())
    return 0


def _render(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.doclib.corpus import load_corpus
    from docline.evalkit.alignment import AlignmentReport, alignment_accuracy
    from docline.evalkit.render import render_alignment

    if args.report:
        corpus = load_corpus(args.corpus, app.threads)
        documents = _select(corpus.documents, args.doc_id)
        report = AlignmentReport.load(args.report)
    else:
        cfg, params, corpus = _model_and_corpus(args.checkpoint, args.corpus, app)
        documents = _select(corpus.documents, args.doc_id)
        report = alignment_accuracy(params, cfg, documents, app.threads)
    out = Path(args.out)
    rendered = [str(render_alignment(doc, report.entry(doc.doc_id), out / f"{doc.doc_id}.png")) for doc in documents]
    logging.info(f"Rendered {len(rendered)} overlays into {out}")
    emit({"rendered": rendered})
    return 0


def _select(documents: t.Sequence[t.Any], doc_ids: t.Optional[t.Sequence[str]]) -> list[t.Any]:
    if not doc_ids:
        return list(documents)
    by_id = {doc.doc_id: doc for doc in documents}
    missing = [doc_id for doc_id in doc_ids if doc_id not in by_id]
    if missing:
        raise DataError(f"documents not in the corpus: {missing}")
    return [by_id[doc_id] for doc_id in doc_ids]


def _save_head(path: str, head: t.Mapping[str, t.Any], meta: t.Mapping[str, t.Any]) -> None:
    import numpy as np

    from docline.toolbox.fileio import atomic_write_bytes

    buffer = io.BytesIO()
    np.savez(buffer, meta=np.array(json.dumps(meta, sort_keys=True)), **head)
    atomic_write_bytes(path, buffer.getvalue())
    logging.info(f"Head written to {path}")


def _finetune_ner(args: argparse.Namespace, app: AppConfig) -> int:
    from docline.doclib.corpus import load_corpus
    from docline.evalkit.ner import TagSet, finetune_token_classifier

    finetune = finetune_config(args)
    if args.print_config:
        emit(finetune.model_dump(mode="json"))
        return 0
    cfg, params, corpus = _model_and_corpus(args.checkpoint, args.corpus, app)
    if args.entity_types:
        try:
            tagset = TagSet(entity_types=args.entity_types.split(","))
        except ValidationError as e:
            raise UsageError(f"invalid --entity-types: {e}") from e
    else:
        tagset = TagSet.from_tags(word.tag for doc in corpus.documents for word in doc.words if word.tag)
    eval_docs = load_corpus(args.eval_corpus, app.threads).documents if args.eval_corpus else None
    result = finetune_token_classifier(params, cfg, corpus.documents, tagset, finetune, eval_docs, app.threads)
    if args.head_out:
        _save_head(args.head_out, result.head, {"tags": tagset.tags})
    emit({
        "tags": tagset.tags,
        "train": result.train_scores.summary(),
        "eval": result.eval_scores.summary() if result.eval_scores else None,
        "final_loss": result.losses[-1] if result.losses else None,
    })
    return 0


def _classify(args: argparse.Namespace, app: AppConfig) -> int:
    import numpy as np

    from docline.doclib.corpus import load_corpus
    from docline.evalkit.classify import classify_document, finetune_document_classifier
    from docline.numkit.tensor import Tensor

    finetune = finetune_config(args)
    if args.print_config:
        emit(finetune.model_dump(mode="json"))
        return 0
    cfg, params, corpus = _model_and_corpus(args.checkpoint, args.corpus, app)
    eval_docs = load_corpus(args.eval_corpus, app.threads).documents if args.eval_corpus else None
    result = finetune_document_classifier(params, cfg, corpus.documents, finetune, eval_docs, app.threads)
    if args.head_out:
        _save_head(args.head_out, result.head, {"classes": result.classes})
    head = {name: Tensor(np.asarray(value)) for name, value in result.head.items()}
    documents = []
    for doc in eval_docs or corpus.documents:
        logits = classify_document(params, cfg, doc, head)
        documents.append({
            "doc_id": doc.doc_id,
            "label": doc.label,
            "predicted": result.classes[int(np.argmax(logits))],
            "logits": logits.tolist(),
        })
    emit({
        "classes": result.classes,
        "train_accuracy": result.train_accuracy,
        "eval_accuracy": result.eval_accuracy,
        "documents": documents,
    })
    return 0


def build_parser() -> CommandParser:
    common = get_common_parser()
    parser = CommandParser(
        prog="docline",
        description="docline - textline-level document pre-training at desk scale",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"docline {docline_version}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def command(name: str, handler: Handler, help: str) -> CommandParser:
        sub = commands.add_parser(name, parents=[common], help=help, description=help, epilog=EXIT_CODES,
                                  formatter_class=argparse.RawDescriptionHelpFormatter, allow_abbrev=False)
        sub.set_defaults(handler=handler)
        return t.cast(CommandParser, sub)

    gen = command("gen", _gen, "Generate a synthetic corpus with exact OCR ground truth")
    gen.add_argument("--seed", type=int, default=0, help="Corpus seed")
    gen.add_argument("--count", type=int, default=100, help="Number of documents")
    gen.add_argument("--out", help="Corpus directory to write")
    gen.add_argument("--lines", type=int, nargs=2, default=[4, 10], metavar=("MIN", "MAX"), help="Textlines per page")
    gen.add_argument("--words", type=int, nargs=2, default=[2, 5], metavar=("MIN", "MAX"), help="Words per textline")
    gen.add_argument("--glyph-size", type=int, default=6, help="Glyph cell size in pixels")
    gen.add_argument("--ink-level", type=float, default=0.1, help="Gray level of strokes")
    gen.add_argument("--background-level", type=float, default=1.0, help="Gray level of the page")
    gen.add_argument("--vocab-size", type=int, default=256, help="Lexicon size")
    gen.add_argument("--successors", type=int, default=2, help="Words allowed to follow each word; 0 draws words independently")
    gen.add_argument("--free-placement", action="store_true", help="Start textlines anywhere across the page instead of at the left margin")
    gen.add_argument("--label", help="Document class written into every record")
    gen.add_argument("--tag-first-line", action="store_true", help="Tag the words of textline 0 as B-X/I-X")
    gen.add_argument("--print-config", action="store_true", help="Print the generation parameters as JSON and exit")

    add_train_flags(command("pretrain", _pretrain, "Pre-train an encoder on a corpus"))

    resume = command("resume", _resume, "Continue a run from one of its checkpoints")
    resume.add_argument("--checkpoint", required=True, help="Checkpoint written by pretrain or resume")
    add_train_flags(resume)

    gradcheck = command("gradcheck", _gradcheck, "Compare analytic and numeric gradients of one objective")
    gradcheck.add_argument("--loss", required=True, choices=["mlm", "trc", "mrm", "tgm", "total"])
    gradcheck.add_argument("--seed", type=int, default=0, help="Seed of the micro-batch and parameters")
    gradcheck.add_argument("--eps", type=float, default=1e-5, help="Central-difference step")
    gradcheck.add_argument("--max-elements", type=int, default=3, help="Sampled elements per parameter")

    eval_align = command("eval-align", _eval_align, "Textline-region alignment accuracy of the dual-stream encoders")
    eval_align.add_argument("--checkpoint", required=True)
    eval_align.add_argument("--corpus", required=True)
    eval_align.add_argument("--report", help="Write the per-document report (JSON lines) here")

    render = command("render", _render, "Draw aligned textlines green and misaligned ones red")
    source = render.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="Align with this checkpoint")
    source.add_argument("--report", help="Use a report written by eval-align")
    render.add_argument("--corpus", required=True)
    render.add_argument("--out", required=True, help="Directory for <doc_id>.png overlays")
    render.add_argument("--doc-id", action="append", help="Render only this document (repeatable)")

    ner = command("finetune-ner", _finetune_ner, "Train a BIO tagging head and report entity F1")
    ner.add_argument("--checkpoint", required=True)
    ner.add_argument("--corpus", required=True, help="Training corpus with word tags")
    ner.add_argument("--eval-corpus", help="Held-out corpus with word tags")
    ner.add_argument("--entity-types", help="Comma-separated entity types (default: those found in the corpus)")
    ner.add_argument("--head-out", help="Write the trained head (.npz) here")
    ner.add_argument("--print-config", action="store_true", help="Print the fine-tuning config as JSON and exit")
    add_finetune_flags(ner)

    classify = command("classify", _classify, "Train a document classification head and print per-document logits")
    classify.add_argument("--checkpoint", required=True)
    classify.add_argument("--corpus", required=True, help="Training corpus with document labels")
    classify.add_argument("--eval-corpus", help="Labeled corpus to classify (default: the training corpus)")
    classify.add_argument("--head-out", help="Write the trained head (.npz) here")
    classify.add_argument("--print-config", action="store_true", help="Print the fine-tuning config as JSON and exit")
    add_finetune_flags(classify)
    return parser


def dispatch(argv: t.Optional[t.Sequence[str]] = None) -> int:
    """Run one command; the return value is the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    try:
        setup_logging(debug=args.debug, log_file=args.log_file)
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"--threads must be at least 1, got {args.threads}")
        return args.handler(args, AppConfig.load(args.threads))
    except DoclineError as e:
        logging.error(str(e))
        return e.exit_code
    except OSError as e:
        logging.error(f"I/O error: {e}")
        return DataError.exit_code


def main() -> None:
    """Main entry point for the docline CLI"""
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
