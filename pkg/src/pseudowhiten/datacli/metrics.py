"""Newline-delimited JSON metrics stream, one record per line.

Records carry a logical sequence number rather than a wall clock so that two
runs with the same configuration and seed produce byte-identical streams.
The reader tolerates a truncated final line (interrupted run) with a warning.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Mapping

__all__ = ["MetricsIOError", "MetricsRecord", "MetricsWriter", "read_metrics"]


class MetricsIOError(RuntimeError):
    """Stream write failed; message reports the last durable epoch."""


@dataclass
class MetricsRecord:
    run_id: str
    seq: int  # logical timestamp, monotone per stream
    phase: str  # ae_pretrain | train | probe | eval
    block_id: int
    epoch: int
    step: int
    values: dict[str, float]
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "run_id": self.run_id,
                "seq": self.seq,
                "phase": self.phase,
                "block_id": self.block_id,
                "epoch": self.epoch,
                "step": self.step,
                "values": {k: self.values[k] for k in sorted(self.values)},
                "config_hash": self.config_hash,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        obj = json.loads(line)
        return cls(
            run_id=obj["run_id"],
            seq=obj["seq"],
            phase=obj["phase"],
            block_id=obj["block_id"],
            epoch=obj["epoch"],
            step=obj["step"],
            values=obj["values"],
            config_hash=obj["config_hash"],
        )

    def sort_key(self) -> tuple[int, int, int]:
        return (self.block_id, self.epoch, self.step)


class MetricsWriter:
    """Append-only writer for one run's stream; flushed on every record."""

    def __init__(self, path, run_id: str, config_hash: str):
        self.path = path
        self.run_id = run_id
        self.config_hash = config_hash
        self._fh = open(path, "w")
        self._seq = 0
        self._last_durable_epoch: int | None = None

    def write(self, phase: str, block_id: int, epoch: int, step: int, values: Mapping[str, float]) -> MetricsRecord:
        record = MetricsRecord(
            run_id=self.run_id,
            seq=self._seq,
            phase=phase,
            block_id=int(block_id),
            epoch=int(epoch),
            step=int(step),
            values={k: float(v) for k, v in values.items()},
            config_hash=self.config_hash,
        )
        try:
            self._fh.write(record.to_json() + "\n")
            self._fh.flush()
        except OSError as exc:
            raise MetricsIOError(
                f"metrics write failed ({exc}); last durable epoch: {self._last_durable_epoch}"
            ) from exc
        self._seq += 1
        self._last_durable_epoch = record.epoch
        return record

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path) -> list[MetricsRecord]:
    """Parse a stream; a truncated final line is dropped with a warning."""
    records: list[MetricsRecord] = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    for i, line in enumerate(lines):
        if not line:
            continue
        try:
            records.append(MetricsRecord.from_json(line))
        except (json.JSONDecodeError, KeyError) as exc:
            if i == len(lines) - 1:
                warnings.warn(f"{path}: dropping truncated final line ({exc})")
            else:
                raise MetricsIOError(f"{path}: corrupt record on line {i + 1}: {exc}") from exc
    return records
