import typing as t
from pathlib import Path

import appdirs  # type: ignore
from pydantic import BaseModel, Field

from docline.toolbox.threads import default_thread_count

APP_NAME = "docline"


def user_data_dir() -> Path:
    return Path(appdirs.user_data_dir(APP_NAME))


def default_runs_dir() -> Path:
    return user_data_dir() / "runs"


class AppConfig(BaseModel):
    """Process-wide settings resolved once per command."""

    data_dir: Path
    runs_dir: Path
    threads: int = Field(ge=1)

    @classmethod
    def load(cls, threads: t.Optional[int] = None) -> "AppConfig":
        """A `--threads` flag wins over `DOCLINE_THREADS`, which wins over the CPU count."""
        return cls(
            data_dir=user_data_dir(),
            runs_dir=default_runs_dir(),
            threads=threads if threads is not None else default_thread_count(),
        )
