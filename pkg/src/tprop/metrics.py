"""Metric records written as JSON lines and CSV side by side."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import StateError

PHASES = ("train", "eval", "jmc", "gmp", "thm1")


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    wall_time: float
    phase: str
    epoch: int
    step: int
    layer: Optional[int]
    name: str
    value: float

    @property
    def key(self) -> tuple:
        return (self.run_id, self.phase, self.epoch, self.step, self.layer, self.name)


FIELDS = [f.name for f in fields(MetricRecord)]


def _json_value(v: float):
    return v if math.isfinite(v) else str(v)


class MetricSink:
    """Collects records, refuses duplicate keys and mirrors them to files in ``out_dir``."""

    def __init__(self, run_id: str, out_dir=None, echo: bool = False):
        self.run_id = run_id
        self.records: list[MetricRecord] = []
        self._keys: set = set()
        self._start = time.perf_counter()
        self.echo = echo
        self._jsonl = self._csv = self._writer = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            self._jsonl = open(out / "metrics.jsonl", "w")
            self._csv = open(out / "metrics.csv", "w", newline="")
            self._writer = csv.writer(self._csv)
            self._writer.writerow(FIELDS)

    def emit(self, phase: str, epoch: int, step: int, layer: Optional[int], name: str, value: float) -> MetricRecord:
        if phase not in PHASES:
            raise ValueError(f"unknown metric phase {phase!r}")
        rec = MetricRecord(self.run_id, time.perf_counter() - self._start, phase, int(epoch), int(step),
                           None if layer is None else int(layer), name, float(value))
        if rec.key in self._keys:
            raise StateError(f"duplicate metric {rec.key}")
        self._keys.add(rec.key)
        self.records.append(rec)
        if self._jsonl:
            row = asdict(rec)
            row["value"] = _json_value(rec.value)
            self._jsonl.write(json.dumps(row) + "\n")
            self._writer.writerow(["" if v is None else v for v in (getattr(rec, f) for f in FIELDS)])
        if self.echo:
            where = "" if layer is None else f" layer {layer}"
            print(f"[{phase}] epoch {epoch} step {step}{where} {name} = {value:.6g}", flush=True)
        return rec

    def close(self) -> None:
        for f in (self._jsonl, self._csv):
            if f:
                f.close()
        self._jsonl = self._csv = None


def read_jsonl(path) -> list[MetricRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        row = json.loads(line)
        row["value"] = float(row["value"])
        out.append(MetricRecord(**row))
    return out


def read_csv(path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricRecord(row["run_id"], float(row["wall_time"]), row["phase"], int(row["epoch"]),
                                    int(row["step"]), None if row["layer"] == "" else int(row["layer"]),
                                    row["name"], float(row["value"])))
    return out
