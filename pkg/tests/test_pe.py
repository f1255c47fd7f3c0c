import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risc_nn import _core_py
from risc_nn.config import HardwareConfig
from risc_nn.isa import Instruction, Opcode
from risc_nn.kernels import lower_cisc
from risc_nn.pe import CAL_LATENCY, CalPipeline, PortConflict, lane_op, plan_cal, run_pipeline
from risc_nn.uncore import host_run

try:
    from risc_nn import _core
except ImportError:
    _core = None

ARITH = [Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.MAX, Opcode.MIN, Opcode.MADD]


def u16(*vals):
    return np.array(vals, dtype=np.int64).astype(np.int16).view(np.uint16)


def test_lane_op_wraps():
    a, b = u16(32767, -32768, 300), u16(1, -1, 300)
    assert list(lane_op(Opcode.ADD, a, b, a).view(np.int16)) == [-32768, 32767, 600]
    assert list(lane_op(Opcode.MUL, a, b, a).view(np.int16)) == [32767, -32768, (90000 + 32768) % 65536 - 32768]
    assert list(lane_op(Opcode.MAX, a, b, a).view(np.int16)) == [32767, -1, 300]
    assert list(lane_op(Opcode.MADD, b, b, a).view(np.int16)) == [-32768, -32767, (90300 + 32768) % 65536 - 32768]


def test_lane_op_saturating_accumulate():
    a = u16(300, -300)
    assert list(lane_op(Opcode.MUL, a, a, a, acc32=True).view(np.int16)) == [32767, 32767]
    assert list(lane_op(Opcode.SUB, a, u16(1, 1), a, acc32=True).view(np.int16)) == [299, -301]
    with pytest.raises(ValueError):
        lane_op(Opcode.COPY, a, a, a)


def _random_program(rng, n, addrs=6):
    insts = []
    for _ in range(n):
        op = ARITH[rng.integers(len(ARITH))]
        f0, f1, f2 = (int(x) for x in rng.integers(0, addrs, 3))
        insts.append(Instruction(op, f0, f1, f2))
    return insts


def _sequential(opm, insts, acc32=False):
    for i in insts:
        opm[i.f2] = lane_op(i.op, opm[i.f0], opm[i.f1], opm[i.f2], acc32)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.booleans())
def test_pipeline_matches_sequential_semantics(seed, n, acc32):
    """Forwarding and writeback-before-read make back-to-back RAW chains exact."""
    rng = np.random.default_rng(seed)
    insts = _random_program(rng, n)
    init = rng.integers(0, 1 << 16, size=(6, 4), dtype=np.uint16)
    want = init.copy()
    _sequential(want, insts, acc32)
    got = init.copy()
    cycles = run_pipeline(got, insts, acc32)
    assert np.array_equal(got, want)
    assert cycles == n + CAL_LATENCY


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_cal_exec_backends_match(backend):
    if backend == "cython" and _core is None:
        pytest.skip("compiled core not built")
    fn = _core_py.cal_exec if backend == "python" else _core.cal_exec
    rng = np.random.default_rng(7)
    insts = _random_program(rng, 200, addrs=16)
    insts.insert(5, Instruction(Opcode.PREREAD0, 3, 0, 0))
    for acc32 in (False, True):
        init = rng.integers(0, 1 << 16, size=(16, 8), dtype=np.uint16)
        want = init.copy()
        _sequential(want, [i for i in insts if i.op in ARITH], acc32)
        got = init.copy()
        ops = np.array([int(i.op) for i in insts], dtype=np.int32)
        f = [np.array([getattr(i, k) for i in insts], dtype=np.int32) for k in ("f0", "f1", "f2")]
        macs = fn(got, ops, *f, acc32)
        assert np.array_equal(got, want)
        assert macs == 8 * sum(i.op in (Opcode.MUL, Opcode.MADD) for i in insts)


def test_preread_register_feeds_next_read_once():
    opm = np.zeros((40, 2), dtype=np.uint16)
    opm[0] = 5
    opm[16] = 7
    insts = [
        Instruction(Opcode.PREREAD0, 0, 0, 0),
        Instruction(Opcode.ADD, 0, 16, 32),  # uses the preread value of $0
        Instruction(Opcode.ADD, 32, 16, 0),  # overwrites $0 = 19
        Instruction(Opcode.PREREAD0, 0, 0, 0),  # latches the forwarded 19
        Instruction(Opcode.ADD, 0, 16, 33),
    ]
    run_pipeline(opm, insts)
    assert list(opm[33]) == [26, 26]


def test_plan_counts_banks_and_detects_conflicts():
    iram = [
        Instruction(Opcode.PREREAD0, 0, 0, 0),
        Instruction(Opcode.MADD, 0, 16, 33),
        Instruction(Opcode.ADD, 1, 2, 3),
    ]
    plan = plan_cal(iram, 0, 3, 512, 16)
    assert plan.n == 3 and plan.n_preread == 1 and plan.n_mac_insts == 1 and plan.n_arith == 2
    assert plan.read_banks[1] == (0, 1)  # $0 comes from the preread register
    assert plan.duration == 3 + CAL_LATENCY
    assert sum(plan.writes_per_bank) == 2
    with pytest.raises(PortConflict):
        plan_cal([Instruction(Opcode.ADD, 0, 16, 1)], 0, 1, 512, 16)


def test_plan_follows_sparse_increments():
    iram = [Instruction(Opcode.ADD, 1, 2, 3, sparse_pc_inc=3)] + [Instruction(Opcode.ADD, 1, 2, 3)] * 3
    plan = plan_cal(iram, 0, 4, 512, 16)
    assert plan.pcs == [0, 3]


def test_bulk_and_cycle_models_agree():
    k = lower_cisc("MMM", "8x8", seed=3)
    runs = {}
    for model in ("bulk", "cycle"):
        cfg = HardwareConfig(cal_model=model)
        res = host_run(k.translate(cfg))
        assert not k.mismatches(res.read_region)
        runs[model] = res
    assert runs["bulk"].cycles == runs["cycle"].cycles
    assert runs["bulk"].trace.dumps() == runs["cycle"].trace.dumps()


def test_pipeline_step_by_step_stages():
    opm = np.zeros((4, 1), dtype=np.uint16)
    opm[0] = 2
    pipe = CalPipeline(opm, [Instruction(Opcode.ADD, 0, 0, 1)])
    pipe.step()
    assert pipe.rd is not None and not pipe.done
    pipe.step()
    pipe.step()
    assert opm[1, 0] == 0  # result not yet written back
    pipe.step()
    assert opm[1, 0] == 4 and pipe.done
