"""Event-trace records shared by the simulators and the metrics aggregator.

A record is ``(cycle, src, unit, kind, addr, payload)`` where ``payload`` is a
tuple of ints whose meaning depends on ``(unit, kind)``; see
``docs/trace_schema.md``.  ``src`` is a PE index for PE units, a slice index for
``cache``, and -1 for global components.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple


class TraceRecord(NamedTuple):
    cycle: int
    src: int
    unit: str
    kind: str
    addr: int
    payload: tuple = ()


class TraceFormatError(Exception):
    pass


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    enabled: bool = True

    def emit(self, cycle: int, src: int, unit: str, kind: str, addr: int = 0, payload: tuple = ()) -> None:
        self.records.append(TraceRecord(cycle, src, unit, kind, addr, payload))

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def canonical(self) -> list[TraceRecord]:
        """Records in a total order independent of component evaluation order."""
        return sorted(self.records)

    def dumps(self) -> str:
        buf = io.StringIO()
        for r in self.canonical():
            buf.write(f"{r.cycle},{r.src},{r.unit},{r.kind},{r.addr},{' '.join(map(str, r.payload))}\n")
        return buf.getvalue()

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def parse_trace(text: str) -> Trace:
    trace = Trace()
    for n, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise TraceFormatError(f"line {n}: expected 6 fields")
        cyc, src, unit, kind, addr, pay = parts
        trace.records.append(
            TraceRecord(int(cyc), int(src), unit, kind, int(addr), tuple(int(p) for p in pay.split()))
        )
    return trace


def load_trace(path: str | Path) -> Trace:
    return parse_trace(Path(path).read_text())
