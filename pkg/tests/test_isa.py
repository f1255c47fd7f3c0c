import random

import pytest
from hypothesis import given, strategies as st

from risc_nn.isa import (
    AsmSyntaxError,
    ImageFormatError,
    Instruction,
    InvalidOpcode,
    MalformedCtrl,
    Opcode,
    Stage,
    StageOrderError,
    assemble,
    decode,
    disassemble,
    encode,
    pack_image,
    split_offset,
    unpack_image,
)


def test_opcode_values_are_fixed():
    assert [int(o) for o in Opcode] == list(range(11))
    assert Opcode.ST == 0xA


def test_word_layout():
    w = encode(Instruction(Opcode.MADD, 1, 2, 3, sparse_pc_inc=5))
    assert w >> 60 == 6
    assert (w >> 44) & 0xFFFF == 1
    assert (w >> 28) & 0xFFFF == 2
    assert (w >> 12) & 0xFFFF == 3
    assert (w >> 4) & 0xFF == 5
    assert w & 0xF == 0


@given(
    st.sampled_from(list(Opcode)),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFF),
    st.integers(0, 0xF),
)
def test_roundtrip_property(op, f0, f1, f2, inc, lookup):
    if op is not Opcode.ST:
        lookup = 0
    inst = Instruction(op, f0, f1, f2, inc, lookup)
    assert decode(encode(inst)) == inst


@pytest.mark.parametrize("nibble", [0xB, 0xC, 0xD, 0xE, 0xF])
def test_invalid_opcodes_rejected(nibble):
    with pytest.raises(InvalidOpcode):
        decode(nibble << 60)


def test_lookup_only_on_store():
    with pytest.raises(MalformedCtrl):
        Instruction(Opcode.ADD, 0, 0, 0, lookup_type=2)
    with pytest.raises(MalformedCtrl):
        decode((int(Opcode.LD) << 60) | 3)


def test_field_width_checks():
    with pytest.raises(ValueError):
        Instruction(Opcode.ADD, 1 << 16, 0, 0)
    with pytest.raises(ValueError):
        Instruction(Opcode.ADD, 0, 0, 0, sparse_pc_inc=256)
    with pytest.raises(ValueError):
        decode(1 << 64)


def test_dram_offset_split():
    hi, lo = split_offset(0x12345678)
    assert Instruction(Opcode.LD, 0, hi, lo).dram_offset == 0x12345678
    with pytest.raises(ValueError):
        split_offset(1 << 32)


def test_assemble_disassemble_roundtrip():
    src = """
    LD 0, 0, 16        # load
    MADD 0, 1, 2, inc=3
    COPY 2, 7, 5
    ST 2, 0, 32, lookup=2
    """
    insts = assemble(src)
    assert [i.stage for i in insts] == [Stage.LD, Stage.CAL, Stage.FLOW, Stage.ST]
    assert insts[1].sparse_pc_inc == 3 and insts[3].lookup_type == 2
    assert assemble(disassemble(insts)) == insts


@pytest.mark.parametrize(
    "line",
    ["FOO 1, 2, 3", "ADD 1, 2", "ADD 1, 2, x", "ADD 1, 2, 3, bogus=1", "ADD 1, inc=2, 3", "ADD 1, 2, 70000"],
)
def test_assembler_errors_carry_line(line):
    with pytest.raises(AsmSyntaxError) as exc:
        assemble("LD 0, 0, 0\n" + line)
    assert "2" in str(exc.value)


def test_stage_order_enforced():
    with pytest.raises(StageOrderError):
        assemble("ADD 0, 1, 2\nLD 0, 0, 0")


def test_binary_image_roundtrip():
    rng = random.Random(3)
    insts = [Instruction(Opcode.LD, rng.randrange(1 << 16), 0, rng.randrange(1 << 16)) for _ in range(10)]
    insts.append(Instruction(Opcode.ST, 4, 0, 8, lookup_type=1))
    assert unpack_image(pack_image(insts)) == insts


def test_image_format_errors():
    data = pack_image([Instruction(Opcode.ADD, 1, 2, 3)])
    with pytest.raises(ImageFormatError):
        unpack_image(b"XXXX" + data[4:])
    with pytest.raises(ImageFormatError):
        unpack_image(data[:-1])
