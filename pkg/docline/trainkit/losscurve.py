"""Append-only loss curve: one CSV row per training step.

Values are written with `repr`, so a resumed run reproduces a straight run's file byte for byte.
"""

import logging
import typing as t
from pathlib import Path

from docline.objectives.losses import LossReport

HEADER = "step,mlm,trc,mrm,tgm,total,lr"
CURVE_FILE = "loss_curve.csv"


def format_row(report: LossReport, lr: float) -> str:
    values = (report.mlm, report.trc, report.mrm, report.tgm, report.total, lr)
    return ",".join([str(report.step), *(repr(float(v)) for v in values)])


class LossCurve:
    def __init__(self, path: t.Union[str, Path]) -> None:
        self.path = Path(path)

    def start(self, first_step: int = 0) -> None:
        """Create the file, or keep the rows of steps before `first_step` when resuming."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if first_step == 0 or not self.path.exists():
            if first_step:
                logging.warning(f"Loss curve {self.path} is missing; rows before step {first_step} are lost")
            self.path.write_text(HEADER + "\n", encoding="utf-8")
            return
        rows = [row for row in self.path.read_text(encoding="utf-8").splitlines()[1:] if row]
        kept = [HEADER] + [row for row in rows if int(row.split(",", 1)[0]) < first_step]
        dropped = len(rows) + 1 - len(kept)
        if dropped:
            logging.info(f"Dropping {dropped} loss curve rows past step {first_step}")
        self.path.write_text("\n".join(kept) + "\n", encoding="utf-8")

    def append(self, report: LossReport, lr: float) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(format_row(report, lr) + "\n")

    def rows(self) -> list[dict[str, float]]:
        lines = self.path.read_text(encoding="utf-8").splitlines()
        names = lines[0].split(",")
        return [dict(zip(names, map(float, line.split(",")))) for line in lines[1:] if line]
