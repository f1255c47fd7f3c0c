import pytest

from risc_nn.graph import (
    Dram,
    ExeBlockClass,
    ExecutionGraph,
    GraphError,
    GraphSyntaxError,
    Opm,
    Pe,
    Region,
    Task,
    TypeMismatch,
    UnboundParameter,
    dump_graph,
    instantiate,
    parse_graph,
    parse_template,
    validate_graph,
)
from risc_nn.isa import Opcode, StageOrderError

SRC = """
region in 64
data in 0 1 2 3
region out 32 output=1
class add
  LD $a, @x
  LD $b, @y
  ADD $a, $b, $c
  COPY $c, $c, %dst
  ST $c, @z
end
task main ld=in st=out iter=2 ldstride=16 ststride=16
instance a0 add pe=0 a=$0 b=$1 c=$2 x=@0 y=@32 z=@0 dst=%1
instance a1 add pe=1 prio=5 a=$0 b=$1 c=$3 x=@16 y=@48 z=@16 dst=%0
edge a0 a1
"""


def test_parse_and_expand():
    g = parse_graph(SRC)
    assert list(g.regions) == ["in", "out"] and g.outputs == ["out"]
    assert g.regions["in"].data == {0: 1, 2: 2, 4: 3}
    a0 = g.instances["a0"]
    assert [i.op for i in a0.body] == [Opcode.LD, Opcode.LD, Opcode.ADD, Opcode.COPY, Opcode.ST]
    assert a0.body[1].dram_offset == 32
    assert a0.body[3].f2 == 1
    assert g.instances["a1"].priority == 5
    assert g.task("main").iterations == 2 and g.task("main").ld_stride == 16
    assert g.predecessor_counts() == {"a0": 0, "a1": 1}
    assert validate_graph(g) == []


def test_dump_roundtrip():
    g = parse_graph(SRC)
    g2 = parse_graph(dump_graph(g))
    assert {n: i.body for n, i in g2.instances.items()} == {n: i.body for n, i in g.instances.items()}
    assert g2.edges == g.edges and g2.outputs == g.outputs
    assert g2.regions["in"].data == g.regions["in"].data


def test_template_offsets_and_lookup():
    t = parse_template("ST $acc+2, @out+0x10, lookup=2", "t")
    cls = ExeBlockClass("c", [t])
    (inst,) = instantiate(cls, {"acc": Opm(5), "out": Dram(0x20)}, name="i").body
    assert (inst.f0, inst.dram_offset, inst.lookup_type) == (7, 0x30, 2)


def test_unbound_and_mismatched_parameters():
    cls = ExeBlockClass("c", [parse_template("ADD $a, $b, $c", "t")])
    with pytest.raises(UnboundParameter):
        instantiate(cls, {"a": Opm(0), "b": Opm(1)}, name="i")
    with pytest.raises(TypeMismatch):
        instantiate(cls, {"a": Opm(0), "b": Pe(1), "c": Opm(2)}, name="i")
    with pytest.raises(TypeMismatch):
        ExeBlockClass("d", [parse_template("COPY $a, $b, @c", "t")])


def test_class_stage_order():
    with pytest.raises(StageOrderError):
        ExeBlockClass("c", [parse_template("ST $a, @b", "t"), parse_template("LD $a, @b", "t")])


def test_duplicates_rejected():
    g = parse_graph(SRC)
    with pytest.raises(GraphError):
        g.add_instance(instantiate(g.classes["add"], dict(g.instances["a0"].bindings), name="a0"))
    with pytest.raises(GraphError):
        Task("t", "in", "out", iterations=0)


@pytest.mark.parametrize(
    "text, needle",
    [
        ("bogus 1", "unknown directive"),
        ("class c\n  ADD 1, 2, 3\n", "missing 'end'"),
        ("class c\n  FOO 1, 2, 3\nend", "unknown mnemonic"),
        ("class c\n  ADD 1, 2, ?\nend", "bad operand"),
        ("instance i nope", "unknown class"),
        ("task t ld=in oops", "key=value"),
    ],
)
def test_syntax_errors_have_locations(text, needle):
    with pytest.raises(GraphSyntaxError) as exc:
        parse_graph(text, source="g.txt")
    assert needle in str(exc.value) and "g.txt:" in str(exc.value)


def _kinds(g):
    return {d.kind for d in validate_graph(g)}


def test_validation_diagnostics():
    g = parse_graph(SRC)
    g.add_edge("a1", "a0")
    assert "CycleDetected" in _kinds(g)

    g = parse_graph(SRC)
    g.tasks.append(Task("other", "in", "nowhere"))
    g.instances["a1"].task = "other"
    assert {"UnknownRegion", "CrossTaskEdge"} <= _kinds(g)

    g = parse_graph(SRC)
    g.instances["a1"].logical_pe = 4
    assert "UnknownCopyTarget" in _kinds(g)

    g = parse_graph(SRC)
    for k in range(4):
        g.add_instance(instantiate(g.classes["add"], dict(g.instances["a1"].bindings), name=f"x{k}", logical_pe=1))
        g.add_edge("a0", f"x{k}")
    assert "TooManySuccessors" in _kinds(g)

    g = parse_graph(SRC)
    g.add_edge("a0", "ghost")
    assert "UnknownInstance" in _kinds(g)


def test_include(tmp_path):
    (tmp_path / "lib.g").write_text("class add1\n  ADD $a, $a, $a\nend\n")
    main = tmp_path / "main.g"
    main.write_text("include lib.g\ninclude lib.g\nregion r 16\ntask main ld=r st=r\ninstance i add1 pe=0 a=$3\n")
    from risc_nn.graph import load_graph

    g = load_graph(main)
    assert g.instances["i"].body[0].f2 == 3


def test_manual_construction():
    g = ExecutionGraph()
    g.add_region(Region("r", 32))
    g.tasks.append(Task("main", "r", "r"))
    cls = ExeBlockClass("c", [parse_template("LD $a, @x", "t")])
    inst = g.add_instance(instantiate(cls, {"a": Opm(0), "x": Dram(0)}, name="i", logical_pe=0))
    assert inst.priority == 0
    assert g.members("main") == [inst] and g.logical_pes() == {0}
    ranges = inst.stage_ranges()
    assert ranges[list(ranges)[0]] == (0, 1)
