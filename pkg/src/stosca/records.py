"""Per-run training logs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOG_HEADER = ("iteration", "objective", "wall_ms")


@dataclass
class RunRecord:
    optimizer: str
    seed: int
    iterations: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    initial_objective: float = float("nan")
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""

    def add(self, iteration: int, objective: float, wall_ms: float):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("iterations must be strictly increasing")
        self.iterations.append(int(iteration))
        self.objectives.append(float(objective))
        self.wall_ms.append(float(wall_ms))

    def __len__(self):
        return len(self.iterations)

    @property
    def final_objective(self) -> float:
        return self.objectives[-1] if self.objectives else self.initial_objective

    @property
    def run_id(self) -> str:
        return f"{self.optimizer}_seed{self.seed}"

    def write(self, directory) -> Path:
        """Write ``<run_id>.csv`` (the log) and ``<run_id>.json`` (metadata)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.run_id}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for row in zip(self.iterations, self.objectives, self.wall_ms):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        meta = {k: v for k, v in asdict(self).items() if k not in ("iterations", "objectives", "wall_ms")}
        (directory / f"{self.run_id}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, csv_path) -> "RunRecord":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        rec = cls(**meta)
        with csv_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != LOG_HEADER:
                raise ValueError(f"{csv_path}: unexpected header {header}")
            for it, obj, ms in reader:
                rec.add(int(it), float(obj), float(ms))
        return rec

    def objective_array(self) -> np.ndarray:
        return np.asarray(self.objectives, dtype=float)
