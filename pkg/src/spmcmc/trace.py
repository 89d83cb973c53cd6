"""Per-iteration records of a run and their CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

CSV_COLUMNS = ("j", "action", "ksd", "n_eval", "elapsed_s", "jump_sq", "chain_disp_sq")


@dataclass
class TraceRecord:
    j: int
    action: str  # "add", "remove" or "update"
    point: Optional[np.ndarray]
    ksd: float
    n_eval: int
    elapsed_s: float
    jump_sq: float = math.nan
    chain_disp_sq: float = math.nan
    index: Optional[int] = None  # position removed, or position of the added point
    candidate_scores: Optional[np.ndarray] = None
    chosen: Optional[int] = None


@dataclass
class ExperimentTrace:
    method: str = ""
    records: list[TraceRecord] = field(default_factory=list)
    # full point sets keyed by record position, for methods that move every point
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    # iterations whose first candidate batch had nothing admissible and was redrawn
    retries: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def adds(self) -> list[TraceRecord]:
        return [r for r in self.records if r.action == "add"]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def point_sets(self, every: int = 1, final: bool = True) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(record_position, points)`` every ``every`` records (and at the end).

        Greedy traces are replayed from their add/remove actions; traces of methods
        that move all points use the stored snapshots.
        """
        if self.snapshots:
            keys = sorted(self.snapshots)
            for pos in keys:
                yield pos, self.snapshots[pos]
            return
        current: list[np.ndarray] = []
        last = len(self.records) - 1
        for pos, rec in enumerate(self.records):
            if rec.action == "add":
                if rec.index is None or rec.index == len(current):
                    current.append(rec.point)
                else:
                    current.insert(rec.index, rec.point)
            elif rec.action == "remove":
                current.pop(rec.index)
            if (pos + 1) % every == 0 or (final and pos == last):
                yield pos, np.array(current)

    def to_csv(self, path):
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow(
                    [
                        r.j,
                        r.action,
                        repr(float(r.ksd)),
                        r.n_eval,
                        repr(float(r.elapsed_s)),
                        repr(float(r.jump_sq)),
                        repr(float(r.chain_disp_sq)),
                    ]
                )


def read_trace_csv(path) -> list[dict]:
    out = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "j": int(row["j"]),
                    "action": row["action"],
                    "ksd": float(row["ksd"]),
                    "n_eval": int(row["n_eval"]),
                    "elapsed_s": float(row["elapsed_s"]),
                    "jump_sq": float(row["jump_sq"]),
                    "chain_disp_sq": float(row["chain_disp_sq"]),
                }
            )
    return out
