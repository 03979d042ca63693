"""Plain-text tables, CSV series and static plots."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Sequence


def fmt(value, digits: int = 2, percent: bool = True) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{100 * value:.{digits}f}" if percent else f"{value:.4g}"
    return str(value)


def render_table(header: Sequence[str], rows: Sequence[Sequence], title: str | None = None) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"  # noqa: E731
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    out = [line(cells[0]), rule] + [line(r) for r in cells[1:]]
    if title:
        out.insert(0, title)
    return "\n".join(out) + "\n"


def write_jsonl(path, records: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def replace_records(path, key: str, value, records: Sequence[dict]) -> None:
    """Rewrite ``path`` with every record whose ``key`` equals ``value`` replaced by ``records``."""
    kept = [r for r in read_jsonl(path) if r.get(key) != value]
    write_jsonl(path, kept + list(records))


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_series_csv(path, columns: dict[str, Sequence]) -> None:
    """Write equally long columns as a CSV file (first column is the x axis)."""
    names = list(columns)
    lengths = {len(columns[n]) for n in names}
    if len(lengths) != 1:
        raise ValueError("all series must have the same length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_series_csv(path) -> dict[str, list[float]]:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    names, body = rows[0], rows[1:]
    return {n: [float(r[i]) for r in body] for i, n in enumerate(names)}


def plot_series(path, x: Sequence[float], ys: dict[str, Sequence[float]], xlabel: str, ylabel: str,
                title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, y in ys.items():
        ax.plot(x, y, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
