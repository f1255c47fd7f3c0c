import csv
import dataclasses
import io
import json

import pytest

from risc_nn.config import EnergyWeights, HardwareConfig
from risc_nn.kernels import lower_cisc
from risc_nn.metrics import (
    COMPONENTS,
    EnergyModel,
    EventCounters,
    TruncatedTrace,
    aggregate,
    report,
    sparse_speedup_prediction,
    summary,
)
from risc_nn.trace import Trace, parse_trace
from risc_nn.uncore import host_run

CFG = HardwareConfig()


@pytest.fixture(scope="module")
def run():
    res = host_run(lower_cisc("MMM", "8x8", seed=1).translate(CFG))
    return res, aggregate(res.trace, CFG)


def test_counters_are_consistent(run):
    res, c = run
    assert c.cycles == res.cycles
    assert c.total_macs == 8 * 8 * 8  # one lane MAC per scalar product
    assert 0 < c.utilization() <= 1
    assert 0 <= c.hit_rate <= 1
    assert c.cal_active_cycles() <= c.cycles


def test_energy_is_linear_in_weights(run):
    _, c = run
    base = EnergyModel(EnergyWeights()).breakdown(c)
    assert set(base) == set(COMPONENTS)
    zero = EnergyWeights(**{f.name: 0.0 for f in dataclasses.fields(EnergyWeights)})
    assert EnergyModel(zero).total(c) == 0
    doubled = EnergyModel(dataclasses.replace(EnergyWeights(), dram_byte=40.0)).breakdown(c)
    for k in COMPONENTS:
        factor = 2 if k in ("dram_data", "dram_inst") else 1
        assert doubled[k] == pytest.approx(factor * base[k])
    assert 0 < EnergyModel().control_share(c) < 1


def test_merge_adds_counts(run):
    _, c = run
    m = c.merge(c)
    assert m.total_macs == 2 * c.total_macs
    assert m.cache_misses == 2 * c.cache_misses
    assert m.flits == {k: 2 * v for k, v in c.flits.items()}
    assert m.cycles == c.cycles


def test_cal_active_cycles_is_a_union():
    c = EventCounters(4, 8, 16)
    c.cal_spans = [(0, 10), (5, 12), (20, 25), (21, 22)]
    assert c.cal_active_cycles() == 17


def test_sparse_prediction_scales_with_pruning():
    dense, sparse = EventCounters(1, 8, 16, cycles=100), EventCounters(1, 8, 16, cycles=80)
    dense.cal[0], sparse.cal[0] = 100, 40
    dense.cal_spans = [(0, 50)]
    assert sparse_speedup_prediction(dense, sparse) == pytest.approx(0.6 * 0.5)


def test_truncated_trace_is_rejected(run):
    res, _ = run
    cut = Trace()
    for r in res.trace:
        if r.unit == "host" and r.kind == "end":
            continue
        cut.emit(r.cycle, r.src, r.unit, r.kind, r.addr, r.payload)
    with pytest.raises(TruncatedTrace):
        aggregate(cut, CFG)
    aggregate(cut, CFG, require_end=False)


def test_trace_roundtrip_preserves_counters(run):
    res, c = run
    again = aggregate(parse_trace(res.trace.dumps()), CFG)
    assert summary(again, CFG) == summary(c, CFG)


def test_report_formats(run):
    _, c = run
    rows = json.loads(report({"a": c, "b": c}, CFG, fmt="json"))
    assert rows["a"] == rows["b"] and rows["a"]["macs"] == c.total_macs
    table = list(csv.DictReader(io.StringIO(report(c, CFG, fmt="csv"))))
    assert table[0]["label"] == "run" and int(table[0]["cycles"]) == c.cycles
    human = report(c, CFG)
    assert human.startswith("== run") and "energy_total" in human
    with pytest.raises(ValueError):
        report(c, CFG, fmt="xml")
