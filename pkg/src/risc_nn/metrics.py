"""Trace aggregation, energy proxy and reports.

``aggregate`` folds a trace into :class:`EventCounters`; counters are plain
sums, so sharded aggregation followed by :meth:`EventCounters.merge` gives the
same result as a single pass.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .config import EnergyWeights, HardwareConfig
from .trace import Trace, TraceRecord

NETWORKS = ("memory", "interpe", "control")
UNITS = ("ld", "cal", "flow", "st", "loader")
DRAM_KINDS = ("data", "inst", "table")


class TruncatedTrace(Exception):
    pass


@dataclass
class EventCounters:
    n_pes: int
    simd: int
    opm_banks: int
    cycles: int = 0
    macs: np.ndarray = None  # lane MACs per PE
    cal: np.ndarray = None  # CAL instructions fetched (prereads included)
    preread: np.ndarray = None
    ld: np.ndarray = None
    st: np.ndarray = None
    copy: np.ndarray = None
    activate: np.ndarray = None
    iram_reads: np.ndarray = None
    opm_reads: np.ndarray = None  # (pe, bank)
    opm_writes: np.ndarray = None
    busy: dict[str, np.ndarray] = field(default_factory=dict)
    flits: dict[str, int] = field(default_factory=dict)
    flit_hops: dict[str, int] = field(default_factory=dict)
    messages: dict[str, int] = field(default_factory=dict)
    cache_hits: int = 0
    cache_merges: int = 0
    cache_misses: int = 0
    cache_writebacks: int = 0
    cache_flushes: int = 0
    inst_cache_lookups: int = 0
    dram_read_bytes: dict[str, int] = field(default_factory=dict)
    dram_write_bytes: int = 0
    iterations: list[tuple[int, int, int]] = field(default_factory=list)  # (task, iter, end cycle)
    mac_events: list[tuple[int, int]] = field(default_factory=list)  # (cycle, lane MACs) per CAL stage
    cal_spans: list[tuple[int, int]] = field(default_factory=list)  # (start, end) per CAL stage

    def __post_init__(self):
        n, b = self.n_pes, self.opm_banks
        for name in ("macs", "cal", "preread", "ld", "st", "copy", "activate", "iram_reads"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))
        for name in ("opm_reads", "opm_writes"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((n, b), dtype=np.int64))
        for u in UNITS:
            self.busy.setdefault(u, np.zeros(n, dtype=np.int64))
        for net in NETWORKS:
            self.flits.setdefault(net, 0)
            self.flit_hops.setdefault(net, 0)
            self.messages.setdefault(net, 0)
        for k in DRAM_KINDS:
            self.dram_read_bytes.setdefault(k, 0)

    # -- derived
    @property
    def total_macs(self) -> int:
        return int(self.macs.sum())

    @property
    def cache_accesses(self) -> int:
        return self.cache_hits + self.cache_merges + self.cache_misses

    @property
    def hit_rate(self) -> float:
        """Hits over accesses; a merge into an outstanding miss counts as a hit."""
        acc = self.cache_accesses
        return (self.cache_hits + self.cache_merges) / acc if acc else 0.0

    @property
    def offchip_read_bytes(self) -> int:
        return self.dram_read_bytes["data"] + self.dram_read_bytes["table"]

    @property
    def dynamic_cal(self) -> int:
        return int(self.cal.sum())

    def utilization(self) -> float:
        if not self.cycles:
            return 0.0
        return self.total_macs / (self.cycles * self.n_pes * self.simd)

    def steady_window(self) -> tuple[int, int] | None:
        """Cycles spanned by iterations >= 2 of the last task, if it iterates."""
        if not self.iterations:
            return None
        last = max(t for t, _, _ in self.iterations)
        ends = sorted((i, c) for t, i, c in self.iterations if t == last)
        if len(ends) < 2:
            return None
        return ends[0][1], ends[-1][1]

    def steady_utilization(self) -> float | None:
        win = self.steady_window()
        if win is None:
            return None
        lo, hi = win
        if hi <= lo:
            return None
        macs = sum(m for c, m in self.mac_events if lo <= c < hi)
        return macs / ((hi - lo) * self.n_pes * self.simd)

    def cal_active_cycles(self) -> int:
        """Cycles during which at least one CAL unit is busy."""
        total, reach = 0, -1
        for lo, hi in sorted(self.cal_spans):
            if hi <= reach:
                continue
            total += hi - max(lo, reach)
            reach = hi
        return total

    def merge(self, other: "EventCounters") -> "EventCounters":
        out = EventCounters(self.n_pes, self.simd, self.opm_banks, max(self.cycles, other.cycles))
        for name in ("macs", "cal", "preread", "ld", "st", "copy", "activate", "iram_reads", "opm_reads",
                     "opm_writes"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        for u in UNITS:
            out.busy[u] = self.busy[u] + other.busy[u]
        for d in ("flits", "flit_hops", "messages", "dram_read_bytes"):
            a, b = getattr(self, d), getattr(other, d)
            setattr(out, d, {k: a[k] + b[k] for k in a})
        for name in ("cache_hits", "cache_merges", "cache_misses", "cache_writebacks", "cache_flushes",
                     "inst_cache_lookups", "dram_write_bytes"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.iterations = sorted(self.iterations + other.iterations)
        out.mac_events = sorted(self.mac_events + other.mac_events)
        out.cal_spans = sorted(self.cal_spans + other.cal_spans)
        return out


def aggregate(
    trace: Trace | Iterable[TraceRecord],
    cfg: HardwareConfig | None = None,
    *,
    require_end: bool = True,
) -> EventCounters:
    cfg = cfg or HardwareConfig()
    c = EventCounters(cfg.n_pes, cfg.simd, cfg.opm_banks)
    nb = cfg.opm_banks
    seen_end = False
    inst_ranges: list[tuple[int, int]] = []
    access_addrs: list[int] = []
    for r in trace:
        unit, kind, pe, p = r.unit, r.kind, r.src, r.payload
        if unit == "cal":
            if kind == "stage":
                n, _arith, npre, nmac, dur = p[:5]
                c.cal[pe] += n
                c.preread[pe] += npre
                c.iram_reads[pe] += n
                c.macs[pe] += nmac * cfg.simd
                c.mac_events.append((r.cycle, nmac * cfg.simd))
                c.opm_reads[pe] += np.asarray(p[5 : 5 + nb], dtype=np.int64)
                c.opm_writes[pe] += np.asarray(p[5 + nb : 5 + 2 * nb], dtype=np.int64)
                c.busy["cal"][pe] += dur
                c.cal_spans.append((r.cycle, r.cycle + dur))
        elif unit == "ld":
            if kind == "issue":
                c.ld[pe] += 1
                c.iram_reads[pe] += 1
            elif kind == "end":
                c.busy["ld"][pe] += r.cycle - p[0]
        elif unit == "flow":
            if kind == "copy":
                c.copy[pe] += 1
                c.iram_reads[pe] += 1
                c.opm_reads[pe, p[1]] += 1
            elif kind == "activate":
                c.activate[pe] += 1
            elif kind == "end":
                c.busy["flow"][pe] += r.cycle - p[0]
        elif unit == "st":
            if kind == "issue":
                c.st[pe] += 1
                c.iram_reads[pe] += 1
                c.opm_reads[pe, p[1]] += 1
            elif kind == "end":
                c.busy["st"][pe] += r.cycle - p[0]
        elif unit == "opm" and kind == "write":
            c.opm_writes[pe, p[0]] += 1
        elif unit == "loader" and kind.endswith("_done"):
            c.busy["loader"][pe] += r.cycle - p[1]
        elif unit == "loader" and kind == "dma":
            inst_ranges.append((r.addr, r.addr + 8 * p[0]))
        elif unit == "noc":
            c.flits[kind] += p[0]
            c.flit_hops[kind] += p[0] * max(p[1], 1)
            c.messages[kind] += 1
        elif unit == "cache":
            if kind == "access":
                if p[0] == 1:
                    c.cache_hits += 1
                elif p[0] == 2:
                    c.cache_merges += 1
                else:
                    c.cache_misses += 1
                access_addrs.append(r.addr)
            elif kind == "writeback":
                c.cache_writebacks += 1
            elif kind == "flush":
                # end-of-run write-back of dirty lines still reaches DRAM
                c.cache_flushes += 1
                c.dram_write_bytes += cfg.cache_block
        elif unit == "dram":
            if kind == "read":
                c.dram_read_bytes[DRAM_KINDS[p[1]]] += p[0]
            elif kind == "write":
                c.dram_write_bytes += p[0]
        elif unit == "host":
            if kind == "iteration":
                c.iterations.append((r.addr, p[0], r.cycle))
            elif kind == "end":
                c.cycles = p[0]
                seen_end = True
    if require_end and not seen_end and len(c.iterations) + int(c.cal.sum()) > 0:
        raise TruncatedTrace("trace has no host end record")
    if inst_ranges and access_addrs:
        addrs = np.asarray(access_addrs)
        hit = np.zeros(len(addrs), dtype=bool)
        for lo, hi in set(inst_ranges):
            hit |= (addrs >= lo) & (addrs < hi)
        c.inst_cache_lookups = int(hit.sum())
    c.iterations.sort()
    c.mac_events.sort()
    c.cal_spans.sort()
    return c


def sparse_speedup_prediction(dense: EventCounters, sparse: EventCounters) -> float:
    """Expected fractional cycle saving: pruned CAL fraction scaled by the share
    of dense wall time during which CAL work is in flight."""
    if not dense.dynamic_cal or not dense.cycles:
        return 0.0
    pruned = 1 - sparse.dynamic_cal / dense.dynamic_cal
    return pruned * dense.cal_active_cycles() / dense.cycles


# -- energy ---------------------------------------------------------------------

COMPONENTS = ("mac", "opm", "iram", "issue", "ctrl_msg", "noc", "cache", "dram_data", "dram_inst")
CONTROL_COMPONENTS = ("iram", "issue", "ctrl_msg", "dram_inst")


@dataclass(frozen=True)
class EnergyModel:
    """Linear proxy: datapath and Operand-RAM weights apply per 16-bit lane,
    control weights per instruction or message."""

    weights: EnergyWeights = field(default_factory=EnergyWeights)

    def breakdown(self, c: EventCounters) -> dict[str, float]:
        w = self.weights
        issued = int(c.cal.sum() + c.ld.sum() + c.st.sum() + c.copy.sum())
        lanes = c.simd
        return {
            "mac": w.mac * c.total_macs,
            "opm": lanes * (w.opm_read * int(c.opm_reads.sum()) + w.opm_write * int(c.opm_writes.sum())),
            "iram": w.iram_read * int(c.iram_reads.sum()),
            "issue": w.control * issued,
            "ctrl_msg": w.control_message * c.messages["control"],
            "noc": w.flit_hop_memory * c.flit_hops["memory"] + w.flit_hop_interpe * c.flit_hops["interpe"]
            + w.flit_hop_control * c.flit_hops["control"],
            "cache": w.cache_hit * (c.cache_hits + c.cache_merges) + w.cache_miss * c.cache_misses,
            "dram_data": w.dram_byte * (c.offchip_read_bytes + c.dram_write_bytes),
            "dram_inst": w.dram_byte * c.dram_read_bytes["inst"],
        }

    def total(self, c: EventCounters) -> float:
        return sum(self.breakdown(c).values())

    def control_share(self, c: EventCounters) -> float:
        b = self.breakdown(c)
        tot = sum(b.values())
        return sum(b[k] for k in CONTROL_COMPONENTS) / tot if tot else 0.0


# -- reports ------------------------------------------------------------------------


def summary(c: EventCounters, cfg: HardwareConfig | None = None, model: EnergyModel | None = None) -> dict:
    cfg = cfg or HardwareConfig()
    model = model or EnergyModel(cfg.energy)
    energy = model.breakdown(c)
    ops = 2 * c.total_macs
    steady = c.steady_utilization()
    return {
        "cycles": c.cycles,
        "macs": c.total_macs,
        "utilization": round(c.utilization(), 6),
        "steady_utilization": None if steady is None else round(steady, 6),
        "gops": round(ops / c.cycles * cfg.clock_ghz, 3) if c.cycles else 0.0,
        "peak_tops": round(cfg.peak_ops_per_cycle * cfg.clock_ghz / 1000, 3),
        "dynamic_cal": c.dynamic_cal,
        "ld": int(c.ld.sum()),
        "st": int(c.st.sum()),
        "copy": int(c.copy.sum()),
        **{f"flits_{n}": c.flits[n] for n in NETWORKS},
        **{f"flit_hops_{n}": c.flit_hops[n] for n in NETWORKS},
        "offchip_read_bytes": c.offchip_read_bytes,
        "inst_read_bytes": c.dram_read_bytes["inst"],
        "dram_write_bytes": c.dram_write_bytes,
        "cache_accesses": c.cache_accesses,
        "cache_hit_rate": round(c.hit_rate, 6),
        "inst_cache_lookups": c.inst_cache_lookups,
        **{f"energy_{k}": round(v, 3) for k, v in energy.items()},
        "energy_total": round(sum(energy.values()), 3),
        "control_share": round(model.control_share(c), 6),
        "max_busy_fraction": round(
            max((float(b.max()) for b in c.busy.values()), default=0.0) / c.cycles, 6
        ) if c.cycles else 0.0,
    }


def report(
    counters: EventCounters | Mapping[str, EventCounters],
    cfg: HardwareConfig | None = None,
    model: EnergyModel | None = None,
    fmt: str = "human",
) -> str:
    """One row per labelled run (a single counter set gets the label ``run``)."""
    if isinstance(counters, EventCounters):
        counters = {"run": counters}
    rows = {label: summary(c, cfg, model) for label, c in counters.items()}
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=False) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        keys = list(next(iter(rows.values())).keys()) if rows else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + keys)
        for label, row in rows.items():
            w.writerow([label] + ["" if row[k] is None else row[k] for k in keys])
        return buf.getvalue()
    if fmt != "human":
        raise ValueError(f"unknown report format {fmt!r}")
    out = []
    for label, row in rows.items():
        out.append(f"== {label}")
        width = max(len(k) for k in row)
        for k, v in row.items():
            out.append(f"  {k:<{width}}  {v}")
    return "\n".join(out) + "\n"
