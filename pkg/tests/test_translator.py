import pytest

from risc_nn.config import HardwareConfig
from risc_nn.graph import GraphError, parse_graph
from risc_nn.isa import Instruction, Opcode, Stage, decode
from risc_nn.translator import (
    CTRL_BITS,
    CapacityExceeded,
    OperandCapacityExceeded,
    SkipDistanceOverflow,
    TranslationError,
    assemble_descriptor,
    bridge_skips,
    check_skips,
    compute_sparse_vectors,
    decode_enable,
    decode_fragment,
    decode_sparse_chunk,
    enable_payload,
    init_fragments,
    insert_prereads,
    opm_bank,
    residual_conflicts,
    skip_increments,
    sparse_chunks,
    translate,
)

CFG = HardwareConfig()

GRAPH = """
region in 256
region out 64 output=1
class mac
  LD $w, @x
  LD $a, @y
  MUL $w, $a, $acc
  MADD $w, $a, $acc
  COPY $acc, $acc, %peer
  ST $acc, @z
end
class sink
  ST $acc, @z
end
task main ld=in st=out
instance m0 mac pe=0 w=$0 a=$1 acc=$2 x=@0 y=@16 z=@0 peer=%1
instance s1 sink pe=1 acc=$2 z=@16
edge m0 s1
"""


def test_translate_places_and_links():
    prog = translate(parse_graph(GRAPH), CFG)
    by = prog.by_name()
    m0, s1 = by["m0"], by["s1"]
    assert (m0.pe, s1.pe) == (0, 1)
    assert m0.successors == ((s1.pe, s1.slot),) and s1.pred_count == 1
    # stage program counters partition the image
    assert m0.stage_start[0] == 0 and m0.stage_end[3] == m0.stage_start[0] + len(prog.images["m0"])
    copy = prog.images["m0"][m0.stage_start[2] - m0.iram_start]
    assert copy.op is Opcode.COPY and copy.f2 == 1
    # COPY destination is the sink's physical address for its `acc`
    st = prog.images["s1"][0]
    assert copy.f1 == st.f0
    counts = prog.static_counts()
    assert counts["LD"] == 2 and counts["ST"] == 2 and counts["COPY"] == 1 and counts["ExeBlocks"] == 2


def test_instruction_images_are_in_dram():
    prog = translate(parse_graph(GRAPH), CFG)
    d = prog.by_name()["m0"]
    words = []
    for k in range(len(prog.images["m0"])):
        a = d.inst_dram_addr + 8 * k
        words.append(sum(prog.dram.get(a + 2 * h, 0) << (16 * h) for h in range(4)))
    assert [decode(w) for w in words] == prog.images["m0"]
    assert all(base % 4096 == 0 for base, _ in prog.regions.values())


def test_operands_spread_over_role_banks():
    prog = translate(parse_graph(GRAPH), CFG)
    mul = next(i for i in prog.images["m0"] if i.op is Opcode.MUL)
    banks = {opm_bank(a, CFG) for a in (mul.f0, mul.f1, mul.f2)}
    assert len(banks) == 3


def test_preread_insertion_resolves_conflicts():
    # all three operands in bank 0
    body = [Instruction(Opcode.MADD, 0, 16, 32), Instruction(Opcode.ADD, 1, 17, 2)]
    out, origin = insert_prereads(body, CFG)
    ops = [i.op for i in out]
    assert ops == [Opcode.PREREAD0, Opcode.PREREAD1, Opcode.MADD, Opcode.PREREAD0, Opcode.ADD]
    assert origin == [0, 0, 0, 1, 1]
    assert residual_conflicts(out, CFG) == []
    assert residual_conflicts(body, CFG) == [0, 1]


def test_preread_register_is_one_shot():
    body = [
        Instruction(Opcode.PREREAD0, 0, 0, 0),
        Instruction(Opcode.ADD, 0, 16, 1),
        Instruction(Opcode.ADD, 0, 16, 2),  # register already consumed
    ]
    assert residual_conflicts(body, CFG) == [2]


def test_skip_increments_and_bridging():
    bits = [1, 0, 0, 1, 0]
    assert skip_increments(bits) == [3, 0, 0, 2, 0]
    long = [1] + [0] * 300 + [1]
    with pytest.raises(SkipDistanceOverflow):
        check_skips(long)
    bridged = bridge_skips(long)
    check_skips(bridged)
    assert sum(bridged) == 3


def test_sparse_vectors_clear_pruned_madds():
    g = parse_graph(GRAPH.replace("instance m0 mac pe=0", "instance m0 mac pe=0 sparse=1"))
    bits = compute_sparse_vectors(g, {0: {0}})
    assert bits == {"m0": [1, 0]}  # MUL kept, MADD on pruned weight skipped
    prog = translate(g, CFG, sparse_bits=bits)
    assert prog.by_name()["m0"].sparse
    assert sum(prog.sparse_bits["m0"]) == 1
    with pytest.raises(TranslationError):
        translate(g, CFG, sparse_bits={"m0": [1]})


def test_control_messages_roundtrip():
    prog = translate(parse_graph(GRAPH), CFG)
    d = prog.by_name()["m0"]
    frags = init_fragments(d)
    assert all(f < 1 << CTRL_BITS for f in frags)
    decoded = {}
    for f in frags:
        slot, k, data = decode_fragment(f)
        assert slot == d.slot
        decoded[k] = data
    back = assemble_descriptor(d.pe, d.name, decoded)
    for field in ("priority", "task_id", "pred_count", "stage_start", "stage_end", "inst_dram_addr", "successors"):
        assert getattr(back, field) == getattr(d, field)
    assert decode_enable(enable_payload(3, 0x1000, 0xFFFF0000)) == (3, 0x1000, 0xFFFF0000)
    bits = [1, 0] * 100
    chunks = sparse_chunks(2, bits)
    assert all(c < 1 << CTRL_BITS for c in chunks)
    got = [b for c in chunks for b in decode_sparse_chunk(c)[2]]
    assert got == bits


def test_control_script_order():
    prog = translate(parse_graph(GRAPH), CFG)
    kinds = [r.kind for r in prog.script]
    assert kinds[-1] == "enable" and set(kinds[:-1]) == {"init"}
    assert [r.time for r in prog.script] == list(range(len(kinds)))


def test_capacity_errors():
    big = "region r 16\ntask main ld=r st=r\nclass c\n" + "  ADD $a, $a, $a\n" * 5000 + "end\ninstance i c pe=0 a=$0\n"
    with pytest.raises(CapacityExceeded):
        translate(parse_graph(big), CFG)
    many = "region r 16\ntask main ld=r st=r\nclass c\n" + "".join(
        f"  ADD ${'a'}+{k}, $a, $a\n" for k in range(0, 2100)
    ) + "end\ninstance i c pe=0 a=$0\n"
    with pytest.raises(OperandCapacityExceeded):
        translate(parse_graph(many), CFG.replace(iram_banks=64))
    slots = "region r 16\ntask main ld=r st=r\nclass c\n  ADD 0, 0, 0\nend\n" + "".join(
        f"instance i{k} c pe=0\n" for k in range(33)
    )
    with pytest.raises(CapacityExceeded):
        translate(parse_graph(slots), CFG)


def test_invalid_graph_refused():
    g = parse_graph(GRAPH)
    g.add_edge("s1", "m0")
    with pytest.raises(GraphError):
        translate(g, CFG)


def test_logical_pes_wrap_onto_the_mesh():
    src = "region r 16\ntask main ld=r st=r\nclass c\n  ADD 0, 0, 0\nend\n" + "".join(
        f"instance i{k} c pe={k}\n" for k in range(70)
    )
    prog = translate(parse_graph(src), CFG)
    by = prog.by_name()
    assert by["i64"].pe == 0 and by["i64"].slot == 1
    assert all(i.stage is Stage.CAL for i in prog.images["i0"])
