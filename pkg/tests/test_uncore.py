import numpy as np
import pytest

from risc_nn.config import ConfigError, HardwareConfig
from risc_nn.graph import parse_graph
from risc_nn.kernels import LOOKUP_IDS, build_activation_table, conv_kernel, lower_cisc
from risc_nn.metrics import aggregate
from risc_nn.translator import translate
from risc_nn.uncore import CacheSlice, DeadlockDetected, Dram, UnregisteredTable, host_run, slice_of

CFG = HardwareConfig()


def test_dram_latency_and_bandwidth():
    d = Dram(latency=40, bytes_per_cycle=16)
    assert d.request(0, 16) == 41
    assert d.request(0, 64) == 45  # queued behind the first transfer
    assert d.request(100, 16) == 141


def test_cache_lru_and_writeback():
    cfg = HardwareConfig(cache_bytes=8 * 2 * 64, cache_ways=2)  # one set of 2 ways per slice
    s = CacheSlice(0, cfg)
    assert s.n_sets == 1
    a, b, c = 0, 8, 16  # blocks mapping to slice 0
    assert not s.lookup(a)
    assert s.install(a) is None
    s.mark_dirty(a)
    s.install(b)
    assert s.lookup(a)  # a becomes most recent
    assert s.install(c) is None  # evicts clean b
    assert not s.lookup(b)
    assert s.install(b) == a  # evicts dirty a
    assert s.dirty_blocks() == []


def test_slice_interleave():
    assert [slice_of(a, CFG) for a in (0, 64, 128, 64 * 8)] == [0, 1, 2, 0]


def _run(src, cfg=CFG, **kw):
    prog = translate(parse_graph(src), cfg, **kw)
    return prog, host_run(prog)


ADD = """
region in 80
data in 0 1 2 3 4 5 6 7 8
data in 32 10 20 30 40 50 60 70 80
data in 48 1 1 1 1 1 1 1 1
region out 32 output=1
class add
  LD $x, @a
  LD $y, @b
  ADD $x, $y, $z
  ST $z, @c
end
task main ld=in st=out
instance e add pe=9 x=$0 y=$1 z=$2 a=@0 b=@32 c=@0
"""


def test_single_block_end_to_end():
    prog, res = _run(ADD)
    assert list(res.read_region("out")[:8]) == [11, 22, 33, 44, 55, 66, 77, 88]
    c = aggregate(res.trace, CFG)
    assert c.ld.sum() == 2 and c.st.sum() == 1
    assert c.cache_misses >= 1 and c.flits["memory"] > 0
    # the write-allocated output line is flushed at the end
    assert c.dram_write_bytes == 64


def _with_fillers(pe):
    # logical PEs are packed in order, so fill the others to pin the adder's position
    filler = "class f\n  ADD $q, $q, $q\nend\n" + "".join(
        f"instance f{k} f pe={k} q=$0\n" for k in range(64) if k != pe
    )
    return ADD.replace("pe=9", f"pe={pe}") + filler


def test_latency_increases_with_distance():
    cfg = CFG.replace(cache_slices=1, cache_bytes=1 << 16)  # the only slice sits at router (0, 0)
    near = aggregate(_run(_with_fillers(0), cfg)[1].trace, cfg)
    far = aggregate(_run(_with_fillers(63), cfg)[1].trace, cfg)
    assert far.flit_hops["memory"] > near.flit_hops["memory"]


def test_iterations_rebase_addresses():
    src = ADD.replace("task main ld=in st=out", "task main ld=in st=out iter=2 ldstride=16 ststride=16")
    src = src.replace("region out 32", "region out 64")
    _, res = _run(src)
    out = res.read_region("out")
    assert list(out[:8]) == [11, 22, 33, 44, 55, 66, 77, 88]
    assert list(out[8:16]) == [1] * 8  # second iteration reads bytes 16.. and 48..
    assert [(t, i) for t, i, _ in res.iterations] == [(0, 0), (0, 1)]


def test_lookup_store_and_missing_table():
    src = ADD.replace("ST $z, @c", f"ST $z, @c, lookup={LOOKUP_IDS['relu']}").replace("ADD $x, $y, $z", "SUB $x, $y, $z")
    prog = translate(parse_graph(src), CFG, tables={LOOKUP_IDS["relu"]: build_activation_table("relu")})
    res = host_run(prog)
    assert list(res.read_region("out")[:8]) == [0] * 8
    c = aggregate(res.trace, CFG)
    assert c.dram_read_bytes["table"] > 0
    with pytest.raises(UnregisteredTable):
        host_run(translate(parse_graph(src), CFG))


def test_deadlock_detected_by_watchdog():
    with pytest.raises(DeadlockDetected) as exc:
        _run(ADD, CFG.replace(dram_latency=500, watchdog=100))
    assert exc.value.stuck


@pytest.mark.parametrize("order", ["descending", "random"])
def test_evaluation_order_does_not_change_trace(order):
    k = lower_cisc("MMM", "8x8", seed=1)
    prog = k.translate(CFG)
    base = host_run(prog)
    other = host_run(prog, eval_order=order, seed=5)
    assert other.trace.dumps() == base.trace.dumps()
    assert np.array_equal(other.memory, base.memory)


def test_instruction_fetch_bypasses_cache():
    k = conv_kernel("conv12", "all_reuse")
    res = host_run(k.translate(CFG))
    c = aggregate(res.trace, CFG)
    assert c.dram_read_bytes["inst"] > 0
    assert c.inst_cache_lookups == 0


def test_busy_accounting_bounded():
    k = lower_cisc("MMV", "8x8", seed=2)
    res = host_run(k.translate(CFG))
    c = aggregate(res.trace, CFG)
    for unit, busy in c.busy.items():
        assert busy.max() <= c.cycles, unit
    assert 0 <= c.utilization() <= 1


def test_more_memory_controllers_add_bandwidth():
    k = lower_cisc("VAV", "512", seed=4)
    one = host_run(k.translate(CFG))
    cfg2 = CFG.replace(mem_controllers=2)
    two = host_run(k.translate(cfg2))
    assert not k.mismatches(two.read_region)
    assert two.cycles <= one.cycles
    with pytest.raises(ConfigError):
        CFG.replace(mem_controllers=3)
