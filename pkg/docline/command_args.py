# docline/command_args.py
import argparse
import sys
import typing as t

from pydantic import ValidationError

from docline.errors import UsageError

EXIT_CODES = """exit codes:
  0  success
  1  usage error (bad flags, invalid config)
  2  data error (malformed OCR, corpus, checkpoint or config mismatch)
  3  numeric failure (non-finite loss or gradient)
"""


class CommandParser(argparse.ArgumentParser):
    """Argument errors are usage errors (exit 1), not argparse's exit 2."""

    def error(self, message: str) -> t.NoReturn:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class Flag(t.NamedTuple):
    flag: str
    key: str
    type: t.Any
    help: str


TRAIN_FLAGS = (
    Flag("--corpus", "corpus", str, "Corpus directory"),
    Flag("--out", "out", str, "Run directory (default: <user data dir>/runs/<seed>)"),
    Flag("--seed", "seed", int, "Seed of initialization, batch order and mask plans"),
    Flag("--batch-size", "batch_size", int, "Documents per step"),
    Flag("--steps", "steps", int, "Schedule length in steps"),
    Flag("--stop-at-step", "stop_at_step", int, "Stop early at this step without changing the schedule"),
    Flag("--checkpoint-every", "checkpoint_every", int, "Steps between checkpoints"),
    Flag("--log-every", "log_every", int, "Steps between progress log lines"),
    Flag("--peak-lr", "schedule.peak_lr", float, "Learning rate at the end of warmup"),
    Flag("--warmup-fraction", "schedule.warmup_fraction", float, "Share of the schedule spent warming up"),
    Flag("--weight-decay", "schedule.weight_decay", float, "Decoupled weight decay"),
    Flag("--beta1", "adam.beta1", float, "Adam first moment decay"),
    Flag("--beta2", "adam.beta2", float, "Adam second moment decay"),
    Flag("--adam-eps", "adam.eps", float, "Adam epsilon"),
    Flag("--hidden-dim", "model.hidden_dim", int, "Model width d"),
    Flag("--text-layers", "model.text_layers", int, "Text encoder layers"),
    Flag("--fusion-layers", "model.fusion_layers", int, "Fusion encoder layers"),
    Flag("--heads", "model.heads", int, "Attention heads"),
    Flag("--ffn-dim", "model.ffn_dim", int, "Feed-forward width"),
    Flag("--vocab-size", "model.vocab_size", int, "Embedding rows; must cover the corpus vocabulary"),
    Flag("--roi-hidden", "model.roi_hidden", int, "RoI head hidden width"),
    Flag("--max-lines", "model.max_lines", int, "Textline cap L"),
    Flag("--max-tokens", "model.max_tokens", int, "Token cap, [CLS] included"),
    Flag("--init-std", "model.init_std", float, "Std of normal initializations"),
    Flag("--lambda-trc", "lambdas.trc", float, "TRC weight in the total loss"),
    Flag("--lambda-mrm", "lambdas.mrm", float, "MRM weight in the total loss"),
    Flag("--lambda-tgm", "lambdas.tgm", float, "TGM weight in the total loss"),
    Flag("--mlm-rate", "rates.mlm", float, "Share of word tokens masked for MLM"),
    Flag("--mrm-rate", "rates.mrm", float, "Share of textlines masked for MRM"),
    Flag("--tgm-rate", "rates.tgm", float, "Share of textlines whose boxes are hidden for TGM"),
    Flag("--background-rate", "rates.background", float, "Share of background pixels masked in MRM regions"),
    Flag("--mask-share", "rates.mask_share", float, "MLM picks replaced by [MASK]"),
    Flag("--random-share", "rates.random_share", float, "MLM picks replaced by a random token"),
    Flag("--temperature", "temperature", float, "Temperature of the TRC similarities (off when omitted)"),
    Flag("--stroke-threshold", "stroke_threshold", float, "Pixels below this level count as strokes"),
    Flag("--fill-level", "fill_level", float, "Value written into masked pixels"),
)

OBJECTIVE_KEYS = ("mlm", "trc", "mrm", "tgm")

FINETUNE_FLAGS = (
    Flag("--epochs", "epochs", int, "Passes over the training documents"),
    Flag("--batch-size", "batch_size", int, "Examples per head update"),
    Flag("--peak-lr", "peak_lr", float, "Learning rate at the end of warmup"),
    Flag("--warmup-fraction", "warmup_fraction", float, "Share of the schedule spent warming up"),
    Flag("--weight-decay", "weight_decay", float, "Decoupled weight decay"),
    Flag("--seed", "seed", int, "Seed of the head initialization and example order"),
)


def get_common_parser() -> argparse.ArgumentParser:
    parser = CommandParser(add_help=False)
    parser.add_argument(
        '--debug',
        action='store_true',
        help='Enable debug mode with detailed logging'
    )
    parser.add_argument('--log-file', help='Also write logs to this file (rotated at 10 MiB)')
    parser.add_argument('--threads', type=int, help='Worker threads (default: DOCLINE_THREADS or the CPU count)')
    return parser


def add_train_flags(parser: argparse.ArgumentParser) -> None:
    from docline.trainkit.config import PRESETS

    parser.add_argument('--config', help='JSON training config; flags override its values')
    parser.add_argument('--print-config', action='store_true', help='Print the merged config as JSON and exit')
    group = parser.add_argument_group('training config fields')
    for flag in TRAIN_FLAGS:
        group.add_argument(flag.flag, dest=f"train.{flag.key}", type=flag.type, default=argparse.SUPPRESS, help=flag.help)
    group.add_argument('--roi-mode', dest='train.model.roi_mode', choices=['avg', 'max'], default=argparse.SUPPRESS,
                       help='Pooling of RoI feature-map cells')
    group.add_argument('--preset', dest='train.preset', choices=PRESETS, default=argparse.SUPPRESS,
                       help='Objective ablation preset; replaces the objective toggles')
    for name in OBJECTIVE_KEYS:
        group.add_argument(f'--{name}', dest=f'train.objectives.{name}', action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=f'Enable the {name.upper()} objective')


def add_finetune_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('fine-tuning')
    for flag in FINETUNE_FLAGS:
        group.add_argument(flag.flag, dest=f"finetune.{flag.key}", type=flag.type, default=argparse.SUPPRESS,
                           help=flag.help)


def prefixed_values(args: argparse.Namespace, prefix: str) -> dict[str, t.Any]:
    """Flags given on the command line under `prefix.`, keyed by the rest of their dest."""
    return {key[len(prefix) + 1:]: value for key, value in vars(args).items() if key.startswith(prefix + ".")}


def train_overrides(args: argparse.Namespace) -> dict[str, t.Any]:
    return prefixed_values(args, "train")


def finetune_config(args: argparse.Namespace) -> t.Any:
    from docline.evalkit.ner import FinetuneConfig

    try:
        return FinetuneConfig(**prefixed_values(args, "finetune"))
    except ValidationError as e:
        raise UsageError(f"invalid fine-tuning flags: {e}") from e
