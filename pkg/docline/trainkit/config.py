import json
import typing as t
from pathlib import Path

from pydantic import BaseModel, Field, ValidationError, model_validator

from docline.app_config import default_runs_dir
from docline.encoders.config import ModelConfig
from docline.errors import UsageError
from docline.numkit.optim import AdamConfig, ScheduleConfig
from docline.objectives.losses import Lambdas
from docline.objectives.masking import MaskRates
from docline.objectives.pipeline import ObjectiveToggles

PRESETS = ("mlm", "mlm+mrm", "mlm+mrm+trc", "mlm+mrm+trc+tgm")


class TrainConfig(BaseModel):
    """Everything a pre-training run depends on.

    `steps` is the schedule length; `stop_at_step` ends the run early without
    changing the schedule, which is how a run is split for `resume`.
    """

    corpus: t.Optional[str] = None
    out: t.Optional[str] = None
    seed: int = Field(default=0, ge=0)
    batch_size: int = Field(default=4, ge=1)
    steps: int = Field(default=300, ge=1)
    stop_at_step: t.Optional[int] = Field(default=None, ge=1)
    checkpoint_every: int = Field(default=50, ge=1)
    log_every: int = Field(default=10, ge=1)
    schedule: ScheduleConfig = ScheduleConfig(peak_lr=3e-3, total_steps=300)
    adam: AdamConfig = AdamConfig()
    model: ModelConfig = ModelConfig()
    preset: t.Optional[str] = None
    objectives: ObjectiveToggles = ObjectiveToggles()
    lambdas: Lambdas = Lambdas()
    rates: MaskRates = MaskRates()
    temperature: t.Optional[float] = Field(default=None, gt=0.0)
    # None: taken from the generator levels in the corpus manifest, else the masking defaults
    stroke_threshold: t.Optional[float] = Field(default=None, ge=0.0, le=1.0)
    fill_level: t.Optional[float] = Field(default=None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _consistent(self) -> "TrainConfig":
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; expected one of {list(PRESETS)}")
            self.objectives = ObjectiveToggles.preset(self.preset)
        if self.schedule.total_steps != self.steps:
            self.schedule = self.schedule.model_copy(update={"total_steps": self.steps})
        if self.stop_at_step is not None and self.stop_at_step > self.steps:
            raise ValueError(f"stop_at_step {self.stop_at_step} is past the schedule end {self.steps}")
        return self

    @property
    def last_step(self) -> int:
        """Number of completed steps when the run stops."""
        return self.stop_at_step or self.steps

    def run_dir(self) -> Path:
        return Path(self.out) if self.out else default_runs_dir() / str(self.seed)

    def header(self) -> dict[str, t.Any]:
        """Run identity stored in checkpoints; early stopping and output paths are not part of it."""
        return {
            "model": self.model.fingerprint(),
            "seed": self.seed,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "objectives": self.objectives.model_dump(),
        }

    @classmethod
    def load(cls, path: t.Union[str, Path], overrides: t.Optional[t.Mapping[str, t.Any]] = None) -> "TrainConfig":
        """Read a JSON config file; `overrides` (dotted keys allowed) win over file values."""
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"unreadable config file {path}: {e}") from e
        if not isinstance(payload, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        return cls.build(payload, overrides)

    @classmethod
    def build(
        cls, payload: t.Optional[t.Mapping[str, t.Any]] = None, overrides: t.Optional[t.Mapping[str, t.Any]] = None
    ) -> "TrainConfig":
        merged: dict[str, t.Any] = json.loads(json.dumps(payload or {}))
        for key, value in (overrides or {}).items():
            set_dotted(merged, key, value)
        try:
            return cls.model_validate(merged)
        except ValidationError as e:
            raise UsageError(f"invalid training config: {e}") from e


def set_dotted(target: dict[str, t.Any], key: str, value: t.Any) -> None:
    """`set_dotted(d, "model.hidden_dim", 32)` sets `d["model"]["hidden_dim"]`."""
    *parents, leaf = key.split(".")
    node = target
    for part in parents:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[leaf] = value
