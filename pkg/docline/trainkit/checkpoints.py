import logging
import typing as t
from pathlib import Path

from pydantic import ValidationError

from docline.doclib.corpus import Corpus
from docline.encoders.config import ModelConfig
from docline.encoders.params import Params, as_params, expected_shapes, to_arrays
from docline.errors import CheckpointError, ConfigMismatchError
from docline.numkit.optim import AdamState
from docline.numkit.serialization import Checkpoint, load_checkpoint, save_checkpoint
from docline.numkit.tensor import Tensor

CHECKPOINT_DIR = "checkpoints"
LATEST = "latest.ckpt"


def step_checkpoint_path(run_dir: t.Union[str, Path], step: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"step-{step:06d}.ckpt"


def write_training_checkpoint(
    run_dir: t.Union[str, Path],
    header: dict[str, t.Any],
    params: t.Mapping[str, Tensor],
    state: AdamState,
    step: int,
) -> Path:
    """Write the step checkpoint and refresh `latest.ckpt`; both writes are atomic."""
    ckpt = Checkpoint(
        header=header,
        params=to_arrays(params),
        first_moment=dict(state.first_moment),
        second_moment=dict(state.second_moment),
        step=step,
    )
    path = step_checkpoint_path(run_dir, step)
    save_checkpoint(path, ckpt)
    save_checkpoint(Path(run_dir) / LATEST, ckpt)
    logging.info(f"Saved checkpoint {path}")
    return path


def model_config_of(ckpt: Checkpoint, source: str = "<checkpoint>") -> ModelConfig:
    try:
        return ModelConfig.model_validate(ckpt.header["model"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{source}: header has no usable model config: {e}") from e


def restore_model(ckpt: Checkpoint, source: str = "<checkpoint>") -> tuple[ModelConfig, Params]:
    cfg = model_config_of(ckpt, source)
    shapes = expected_shapes(cfg)
    missing = sorted(set(shapes) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(shapes))
    if missing or extra:
        raise CheckpointError(f"{source}: parameter set does not match its model config (missing {missing}, extra {extra})")
    for name, shape in shapes.items():
        if ckpt.params[name].shape != shape:
            raise CheckpointError(f"{source}: parameter {name} has shape {ckpt.params[name].shape}, expected {shape}")
    return cfg, as_params(ckpt.params)


def load_model(path: t.Union[str, Path]) -> tuple[ModelConfig, Params]:
    return restore_model(load_checkpoint(path), str(path))


def restore_adam(ckpt: Checkpoint, params: t.Mapping[str, Tensor]) -> AdamState:
    if set(ckpt.first_moment) != set(params) or set(ckpt.second_moment) != set(params):
        raise CheckpointError("checkpoint optimizer moments do not cover the parameter set")
    return AdamState(first_moment=dict(ckpt.first_moment), second_moment=dict(ckpt.second_moment), step=ckpt.step)


def check_resumable(header: t.Mapping[str, t.Any], expected: t.Mapping[str, t.Any], source: str) -> None:
    """Model config, seed, schedule length and batch size must match; objective toggles may differ."""
    stored_model = header.get("model", {})
    differing = sorted(
        key for key in set(stored_model) | set(expected["model"])
        if stored_model.get(key) != expected["model"].get(key)
    )
    if differing:
        raise ConfigMismatchError(f"{source}: model config differs from the checkpoint in {differing}")
    for key in ("seed", "steps", "batch_size"):
        if header.get(key) != expected[key]:
            raise ConfigMismatchError(f"{source}: {key} is {expected[key]}, checkpoint has {header.get(key)}")
    if header.get("objectives") != expected["objectives"]:
        logging.warning(f"Resuming {source} with objectives {expected['objectives']} (checkpoint: {header.get('objectives')})")


def check_vocabulary(corpus: Corpus, cfg: ModelConfig) -> None:
    if corpus.tokenizer.vocab_size > cfg.vocab_size:
        raise ConfigMismatchError(
            f"corpus {corpus.root} has {corpus.tokenizer.vocab_size} tokens, model.vocab_size is {cfg.vocab_size}"
        )
