"""Append-only JSON-lines metrics stream."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

WALL_CLOCK_FIELDS = ("wall_clock",)


@dataclass
class MetricsRecord:
    run_id: str
    seq: int
    epoch: int
    split: str
    attack: str
    accuracy: float | None
    loss: float | None
    epsilon: float
    wall_clock: float
    fingerprint: str = ""
    phase: str = ""


class MetricsLog:
    """Thread-safe, append-only metrics sink.

    Records are kept in memory and, when ``path`` is given, appended to a
    JSON-lines file as they arrive. Sequence numbers are strictly increasing.
    """

    def __init__(self, path=None, run_id: str = "run", fingerprint: str = ""):
        self.path = Path(path) if path else None
        self.run_id = run_id
        self.fingerprint = fingerprint
        self.records: list[MetricsRecord] = []
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.records.append(MetricsRecord(**json.loads(line)))

    def emit(self, epoch, split, attack="clean", accuracy=None, loss=None, epsilon=0.0, phase="") -> MetricsRecord:
        with self._lock:
            rec = MetricsRecord(
                run_id=self.run_id,
                seq=(self.records[-1].seq + 1) if self.records else 0,
                epoch=int(epoch),
                split=split,
                attack=attack,
                accuracy=None if accuracy is None else float(accuracy),
                loss=None if loss is None else float(loss),
                epsilon=float(epsilon),
                wall_clock=round(time.perf_counter() - self._t0, 6),
                fingerprint=self.fingerprint,
                phase=phase,
            )
            self.records.append(rec)
            if self.path:
                with self.path.open("a") as f:
                    f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            return rec

    def truncate_after(self, epoch: int, phase: str) -> None:
        """Drop records of ``phase`` past ``epoch`` (used when resuming)."""
        with self._lock:
            keep = [r for r in self.records if not (r.phase == phase and r.epoch > epoch)]
            if len(keep) != len(self.records):
                self.records = keep
                if self.path:
                    self.path.write_text("".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in keep))


def strip_wall_clock(records) -> list[dict]:
    out = []
    for r in records:
        d = asdict(r) if not isinstance(r, dict) else dict(r)
        for k in WALL_CLOCK_FIELDS:
            d.pop(k, None)
        out.append(d)
    return out
