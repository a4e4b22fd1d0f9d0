"""Per-iteration trace rows, their CSV form, and convergence analysis.

A trace file has the header ``iter,nodeId,value`` and one row per node per
iteration; ``value`` is the node's local data in canonical codec text,
CSV-quoted when it contains commas.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Any, Iterable

from fedbed import codec
from fedbed.errors import DecodeError, TraceFormatError

HEADER = ("iter", "nodeId", "value")
DEFAULT_TOLERANCE = 0.02


@dataclass(frozen=True)
class TraceRow:
    iter: int
    node_id: int
    value: Any


def format_trace(rows: Iterable[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow((r.iter, r.node_id, codec.dumps_value(r.value)))
    return buf.getvalue()


def write_trace(path, rows: Iterable[TraceRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_trace(rows))


def _int_field(text, what, where):
    try:
        v = int(text)
    except ValueError:
        raise TraceFormatError(f"{where}: {what} {text!r} is not an integer") from None
    return v


def read_trace(path) -> list[TraceRow]:
    """Parse one trace file. Raises TraceFormatError naming file and line."""
    name = os.fspath(path)
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            where = f"{name}:{lineno}"
            if lineno == 1:
                if tuple(rec) != HEADER:
                    raise TraceFormatError(f"{where}: expected header {','.join(HEADER)}")
                continue
            if len(rec) != 3:
                raise TraceFormatError(f"{where}: expected 3 fields, got {len(rec)}")
            it = _int_field(rec[0], "iter", where)
            node = _int_field(rec[1], "nodeId", where)
            if it < 1 or node < 0:
                raise TraceFormatError(f"{where}: iter must be >= 1 and nodeId >= 0")
            try:
                value = codec.loads_value(rec[2])
            except DecodeError as exc:
                raise TraceFormatError(f"{where}: bad value: {exc}") from None
            rows.append(TraceRow(it, node, value))
    return rows


def merge_traces(files: Iterable) -> list[TraceRow]:
    """Rows of all files sorted by (iter, nodeId)."""
    rows = []
    for f in files:
        rows.extend(read_trace(f))
    rows.sort(key=lambda r: (r.iter, r.node_id))
    return rows


@dataclass(frozen=True)
class ConvergenceResult:
    reference_value: float
    converged_iteration: int | None
    tolerance: float = DEFAULT_TOLERANCE

    def summary(self) -> str:
        k = "none" if self.converged_iteration is None else self.converged_iteration
        return f"converged_iteration={k} reference={self.reference_value!r} tolerance={self.tolerance!r}"


def scalar(value) -> float:
    """The number inside a numeric value or single-element numeric list."""
    if isinstance(value, list) and len(value) == 1:
        value = value[0]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"trace value {value!r} is not a number or single-element list")
    return float(value)


def _table(rows):
    by_iter: dict[int, dict[int, float]] = {}
    for r in rows:
        cell = by_iter.setdefault(r.iter, {})
        if r.node_id in cell:
            raise TraceFormatError(f"duplicate row for iter {r.iter}, node {r.node_id}")
        cell[r.node_id] = scalar(r.value)
    if not by_iter:
        raise TraceFormatError("empty trace")
    iters = sorted(by_iter)
    if iters != list(range(1, len(iters) + 1)):
        raise TraceFormatError(f"iterations are not contiguous from 1: {iters}")
    nodes = set(by_iter[1])
    for it in iters:
        if set(by_iter[it]) != nodes:
            raise TraceFormatError(f"iteration {it} does not cover nodes {sorted(nodes)}")
    return [by_iter[it] for it in iters]


def convergence_point(rows: Iterable[TraceRow], tolerance: float = DEFAULT_TOLERANCE) -> ConvergenceResult:
    """Earliest iteration from which every node stays within ``tolerance`` of the reference.

    The reference is the mean over nodes of the final-iteration values.
    """
    table = _table(list(rows))
    final = table[-1]
    ref = math.fsum(final.values()) / len(final)
    k = None
    for idx in range(len(table) - 1, -1, -1):
        if all(abs(v - ref) < tolerance for v in table[idx].values()):
            k = idx + 1
        else:
            break
    return ConvergenceResult(ref, k, tolerance)


def is_model_trace(rows: Iterable[TraceRow]) -> bool:
    """True when every value is a single-element numeric list."""
    return all(
        isinstance(r.value, list)
        and len(r.value) == 1
        and isinstance(r.value[0], (int, float))
        and not isinstance(r.value[0], bool)
        for r in rows
    )

