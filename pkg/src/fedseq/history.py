"""Per-round accuracy records shared by every training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field


@dataclass(frozen=True)
class RoundRecord:
    round: int
    equivalent_round: float
    test_accuracy: float
    aggregated: bool


@dataclass
class TrainHistory:
    algorithm: str
    records: list[RoundRecord] = field(default_factory=list)
    diverged: bool = False

    def add(self, round_idx: int, accuracy: float, aggregated: bool,
            superclient_epochs: int = 1) -> None:
        self.records.append(
            RoundRecord(round_idx, round_idx / superclient_epochs, accuracy, aggregated)
        )

    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "equivalent_round", "test_accuracy", "aggregation_flag"])
            for r in self.records:
                writer.writerow(
                    [r.round, repr(r.equivalent_round), repr(r.test_accuracy), int(r.aggregated)]
                )

    @staticmethod
    def from_csv(path, algorithm: str = "") -> "TrainHistory":
        history = TrainHistory(algorithm)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                history.records.append(
                    RoundRecord(
                        int(row["round"]),
                        float(row["equivalent_round"]),
                        float(row["test_accuracy"]),
                        bool(int(row["aggregation_flag"])),
                    )
                )
        return history
