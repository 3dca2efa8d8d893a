"""Pre-training loop.

Step `s` (0-based) samples its batch from the pass order, plans masks with seeds
`(seed, s, slot)`, runs every enabled objective and applies one Adam update with
`lr = schedule_lr(s)`. Nothing else is random, so a run is a pure function of its
config and corpus, and a resumed run matches a straight one exactly.
"""

import json
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

from pydantic import ValidationError

from docline.doclib.corpus import Corpus, load_corpus
from docline.docgen.generator import GenParams
from docline.encoders.params import Params, init_params, no_decay_names
from docline.errors import NumericError, UsageError
from docline.numkit.optim import AdamState, adam_step, schedule_lr
from docline.numkit.serialization import load_checkpoint
from docline.objectives.losses import LossReport
from docline.objectives.masking import FILL_LEVEL, STROKE_THRESHOLD
from docline.objectives.pipeline import PreparedDocument, pretraining_loss, prepare_document
from docline.toolbox.fileio import atomic_write_bytes
from docline.toolbox.threads import map_in_threads
from docline.trainkit.checkpoints import (
    LATEST,
    check_resumable,
    check_vocabulary,
    restore_adam,
    restore_model,
    write_training_checkpoint,
)
from docline.trainkit.config import TrainConfig
from docline.trainkit.losscurve import CURVE_FILE, LossCurve
from docline.trainkit.sampler import BatchSampler

FAILED_STEP_FILE = "failed_step.json"


@dataclass
class TrainState:
    params: Params
    adam: AdamState
    step: int


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    loss_curve: Path
    reports: list[LossReport]


def _require_corpus(cfg: TrainConfig, corpus: t.Optional[Corpus]) -> Corpus:
    if corpus is None:
        if not cfg.corpus:
            raise UsageError("no corpus given: set `corpus` in the config or pass --corpus")
        corpus = load_corpus(cfg.corpus)
    check_vocabulary(corpus, cfg.model)
    return corpus


class MaskingLevels(t.NamedTuple):
    stroke_threshold: float
    fill_level: float


def masking_levels(cfg: TrainConfig, corpus: Corpus) -> MaskingLevels:
    """Config values win, then the page levels the corpus was generated with, then the defaults."""
    levels = MaskingLevels(STROKE_THRESHOLD, FILL_LEVEL)
    if corpus.manifest is not None and corpus.manifest.params is not None:
        try:
            pages = GenParams.model_validate(corpus.manifest.params)
            levels = MaskingLevels(pages.stroke_threshold, pages.fill_level)
        except ValidationError as e:
            logging.warning(f"Ignoring generation params in the manifest of {corpus.root}: {e}")
    return MaskingLevels(
        levels.stroke_threshold if cfg.stroke_threshold is None else cfg.stroke_threshold,
        levels.fill_level if cfg.fill_level is None else cfg.fill_level,
    )


def prepare_batch(
    cfg: TrainConfig, corpus: Corpus, sampler: BatchSampler, step: int, levels: t.Optional[MaskingLevels] = None
) -> list[PreparedDocument]:
    """Documents and mask plans of one step; slots are prepared on worker threads."""
    levels = levels or masking_levels(cfg, corpus)
    slots = list(enumerate(sampler.batch_indices(step)))

    def prepare(slot_and_index: tuple[int, int]) -> PreparedDocument:
        slot, index = slot_and_index
        return prepare_document(
            corpus.documents[index],
            sampler.plan_seed(step, slot),
            cfg.model,
            cfg.rates,
            levels.stroke_threshold,
            levels.fill_level,
        )

    return map_in_threads(prepare, slots)


def _write_failed_step(run_dir: Path, report: t.Optional[LossReport], step: int, message: str) -> None:
    payload = {"step": step, "error": message, "report": report.model_dump(mode="json") if report else None}
    atomic_write_bytes(run_dir / FAILED_STEP_FILE, json.dumps(payload, indent=1, default=str).encode("utf-8"))
    logging.error(f"Step {step} failed: {message}; details in {run_dir / FAILED_STEP_FILE}")


def train_step(
    cfg: TrainConfig, state: TrainState, batch: t.Sequence[PreparedDocument], no_decay: t.Collection[str]
) -> tuple[TrainState, LossReport, float]:
    step = state.step
    lr = schedule_lr(step, cfg.schedule)
    loss, report = pretraining_loss(
        state.params, cfg.model, batch, cfg.objectives, cfg.lambdas, cfg.temperature, step=step
    )
    if loss is None:
        logging.warning(f"Step {step}: no enabled objective had samples ({report.skipped}); parameters unchanged")
        adam = AdamState(state.adam.first_moment, state.adam.second_moment, state.adam.step + 1)
        return TrainState(state.params, adam, step + 1), report, lr
    loss.backward()
    grads = {name: p.grad for name, p in state.params.items() if p.grad is not None}
    try:
        params, adam = adam_step(
            state.params, grads, state.adam, lr, cfg.schedule.weight_decay, no_decay, cfg.adam
        )
    except NumericError as e:
        raise NumericError(str(e), report=report) from e
    return TrainState(params, adam, step + 1), report, lr


def _run(cfg: TrainConfig, corpus: Corpus, state: TrainState) -> TrainResult:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    curve = LossCurve(run_dir / CURVE_FILE)
    curve.start(state.step)
    sampler = BatchSampler(len(corpus), cfg.batch_size, cfg.seed)
    no_decay = no_decay_names(state.params)
    levels = masking_levels(cfg, corpus)
    header = cfg.header()
    reports: list[LossReport] = []
    checkpoint = run_dir / LATEST
    logging.info(
        f"Training steps {state.step}..{cfg.last_step} of {cfg.steps} on {len(corpus)} documents, "
        f"objectives {cfg.objectives.enabled}, stroke threshold {levels.stroke_threshold:.4f}, "
        f"fill level {levels.fill_level:.4f}, run dir {run_dir}"
    )
    while state.step < cfg.last_step:
        step = state.step
        batch = prepare_batch(cfg, corpus, sampler, step, levels)
        try:
            state, report, lr = train_step(cfg, state, batch, no_decay)
        except NumericError as e:
            _write_failed_step(run_dir, e.report, step, str(e))
            raise
        curve.append(report, lr)
        reports.append(report)
        if step % cfg.log_every == 0 or state.step == cfg.last_step:
            logging.info(
                f"step {step} | total {report.total:.5f} | mlm {report.mlm:.5f} | trc {report.trc:.5f} "
                f"| mrm {report.mrm:.5f} | tgm {report.tgm:.5f} | lr {lr:.3e}"
            )
        if state.step % cfg.checkpoint_every == 0 or state.step == cfg.last_step:
            checkpoint = write_training_checkpoint(run_dir, header, state.params, state.adam, state.step)
    return TrainResult(run_dir=run_dir, checkpoint=checkpoint, loss_curve=curve.path, reports=reports)


def pretrain(cfg: TrainConfig, corpus: t.Optional[Corpus] = None) -> TrainResult:
    corpus = _require_corpus(cfg, corpus)
    params = init_params(cfg.model, cfg.seed)
    return _run(cfg, corpus, TrainState(params=params, adam=AdamState.zeros_like(params), step=0))


def resume(checkpoint_path: t.Union[str, Path], cfg: TrainConfig, corpus: t.Optional[Corpus] = None) -> TrainResult:
    """Continue a run from a checkpoint written by `pretrain` or an earlier `resume`."""
    ckpt = load_checkpoint(checkpoint_path)
    check_resumable(ckpt.header, cfg.header(), str(checkpoint_path))
    if ckpt.step >= cfg.last_step:
        raise UsageError(f"checkpoint is at step {ckpt.step}; nothing to do up to step {cfg.last_step}")
    corpus = _require_corpus(cfg, corpus)
    _, params = restore_model(ckpt, str(checkpoint_path))
    logging.info(f"Resuming from {checkpoint_path} at step {ckpt.step}")
    return _run(cfg, corpus, TrainState(params=params, adam=restore_adam(ckpt, params), step=ckpt.step))
