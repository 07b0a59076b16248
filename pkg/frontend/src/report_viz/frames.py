"""Validated in-memory views of the exported CSV files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path


class FrameError(ValueError):
    """Malformed or invariant-violating input file."""


@dataclass(frozen=True)
class MetricsRow:
    step: int
    split: str
    pl: str
    loss: float
    lr: float


@dataclass(frozen=True)
class RoutingRow:
    layer: int
    pl: str
    expert: int
    count: int
    row_fraction: float


def _read_csv(path: str | Path, header: list[str]) -> list[tuple[int, list[str]]]:
    path = Path(path)
    if not path.exists():
        raise FrameError(f"missing input file: {path}")
    with open(path, encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FrameError(f"{path}: empty file")
    if rows[0] != header:
        raise FrameError(f"{path}: line 1: expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FrameError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        out.append((lineno, row))
    return out


class MetricsFrame:
    """Rows of (step, split, pl, loss, lr) from one training metrics CSV."""

    HEADER = ["step", "split", "pl", "loss", "lr"]

    def __init__(self, rows: list[MetricsRow]):
        self.rows = rows
        last: dict[tuple[str, str], int] = {}
        for r in rows:
            key = (r.split, r.pl)
            if key in last and r.step < last[key]:
                raise FrameError(
                    f"steps not nondecreasing for series {key}: {last[key]} then {r.step}"
                )
            last[key] = r.step

    @classmethod
    def load(cls, path: str | Path) -> "MetricsFrame":
        rows = []
        for lineno, row in _read_csv(path, cls.HEADER):
            try:
                rows.append(MetricsRow(int(row[0]), row[1], row[2], float(row[3]), float(row[4])))
            except ValueError as e:
                raise FrameError(f"{path}: line {lineno}: {e}") from e
        return cls(rows)

    def series(self, split: str, pl: str) -> tuple[list[int], list[float]]:
        pts = [(r.step, r.loss) for r in self.rows if r.split == split and r.pl == pl]
        return [s for s, _ in pts], [v for _, v in pts]

    def pls(self, split: str) -> list[str]:
        return sorted({r.pl for r in self.rows if r.split == split})


class RoutingFrame:
    """Rows of (layer, pl, expert, count, row_fraction) from a routing CSV."""

    HEADER = ["layer", "pl", "expert", "count", "row_fraction"]

    def __init__(self, rows: list[RoutingRow]):
        self.rows = rows
        sums: dict[tuple[int, str], float] = {}
        for r in rows:
            sums[(r.layer, r.pl)] = sums.get((r.layer, r.pl), 0.0) + r.row_fraction
        for key, s in sums.items():
            if abs(s - 1.0) > 1e-6:
                raise FrameError(f"row fractions for (layer, pl)={key} sum to {s!r}, not 1")

    @classmethod
    def load(cls, path: str | Path) -> "RoutingFrame":
        rows = []
        for lineno, row in _read_csv(path, cls.HEADER):
            try:
                rows.append(
                    RoutingRow(int(row[0]), row[1], int(row[2]), int(row[3]), float(row[4]))
                )
            except ValueError as e:
                raise FrameError(f"{path}: line {lineno}: {e}") from e
        return cls(rows)

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.rows})

    def pls(self) -> list[str]:
        return sorted({r.pl for r in self.rows})

    def matrix(self, layer: int, n_experts: int):
        import numpy as np

        pls = self.pls()
        m = np.zeros((len(pls), n_experts))
        for r in self.rows:
            if r.layer == layer:
                m[pls.index(r.pl), r.expert] = r.row_fraction
        return pls, m
