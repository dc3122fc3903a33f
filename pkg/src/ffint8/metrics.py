"""Per-epoch metrics rows and their CSV serialization.

The CSV schema is fixed: ``epoch,split,accuracy,mean_loss_pos,
mean_loss_neg,lambda,wall_ms``. Fields that do not apply to a row are
written empty. Floats are serialized with repr so a rerun under the
same seed reproduces the file byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

METRICS_HEADER = "epoch,split,accuracy,mean_loss_pos,mean_loss_neg,lambda,wall_ms"


@dataclass
class MetricsRow:
    epoch: int
    split: str  # "train" | "test"
    accuracy: float | None = None
    mean_loss_pos: float | None = None
    mean_loss_neg: float | None = None
    lambda_: float | None = None
    wall_ms: float = 0.0
    counter_delta: dict[str, int] | None = None  # not serialized


def _cell(v: float | None) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def test_accuracies(self) -> list[tuple[int, float]]:
        return [(r.epoch, r.accuracy) for r in self.rows if r.split == "test"]

    def to_csv_text(self) -> str:
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.epoch),
                        r.split,
                        _cell(r.accuracy),
                        _cell(r.mean_loss_pos),
                        _cell(r.mean_loss_neg),
                        _cell(r.lambda_),
                        _cell(r.wall_ms),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())
