"""Very-RISC instruction set: opcodes, 64-bit encoding, assembly text, program images.

Word layout (bit 63 is the MSB)::

    [op 63..60 | f0 59..44 | f1 43..28 | f2 27..12 | ctrl 11..0]
    ctrl = [sparse_pc_inc 11..4 | lookup_type 3..0]
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence


class IsaError(Exception):
    pass


class InvalidOpcode(IsaError):
    pass


class MalformedCtrl(IsaError):
    pass


class AsmSyntaxError(IsaError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class StageOrderError(IsaError):
    pass


class ImageFormatError(IsaError):
    pass


class Opcode(IntEnum):
    LD = 0x0
    ADD = 0x1
    SUB = 0x2
    MUL = 0x3
    MAX = 0x4
    MIN = 0x5
    MADD = 0x6
    PREREAD0 = 0x7
    PREREAD1 = 0x8
    COPY = 0x9
    ST = 0xA


class Stage(IntEnum):
    LD = 0
    CAL = 1
    FLOW = 2
    ST = 3


STAGE_OF = {
    Opcode.LD: Stage.LD,
    Opcode.ADD: Stage.CAL,
    Opcode.SUB: Stage.CAL,
    Opcode.MUL: Stage.CAL,
    Opcode.MAX: Stage.CAL,
    Opcode.MIN: Stage.CAL,
    Opcode.MADD: Stage.CAL,
    Opcode.PREREAD0: Stage.CAL,
    Opcode.PREREAD1: Stage.CAL,
    Opcode.COPY: Stage.FLOW,
    Opcode.ST: Stage.ST,
}

# opcodes whose f0/f1 fields are OPM reads during the CAL READ stage
CAL_ARITH = frozenset(
    {Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.MAX, Opcode.MIN, Opcode.MADD}
)

_MASK16 = 0xFFFF


def stage(op: Opcode) -> Stage:
    return STAGE_OF[Opcode(op)]


@dataclass(frozen=True, init=False)
class Instruction:
    op: Opcode
    f0: int = 0
    f1: int = 0
    f2: int = 0
    sparse_pc_inc: int = 1
    lookup_type: int = 0

    # hand-written so construction is one dict update (hot in decode and translation)
    def __init__(self, op, f0: int = 0, f1: int = 0, f2: int = 0, sparse_pc_inc: int = 1, lookup_type: int = 0):
        if type(op) is not Opcode:
            op = Opcode(op)
        if not (0 <= f0 <= _MASK16 and 0 <= f1 <= _MASK16 and 0 <= f2 <= _MASK16):
            for name, v in (("f0", f0), ("f1", f1), ("f2", f2)):
                if not 0 <= v <= _MASK16:
                    raise ValueError(f"{name}={v} does not fit in 16 bits")
        if not 0 <= sparse_pc_inc <= 0xFF:
            raise ValueError(f"sparse_pc_inc={sparse_pc_inc} does not fit in 8 bits")
        if not 0 <= lookup_type <= 0xF:
            raise ValueError(f"lookup_type={lookup_type} does not fit in 4 bits")
        if lookup_type and op is not Opcode.ST:
            raise MalformedCtrl(f"lookup_type={lookup_type} on {op.name}")
        self.__dict__.update(op=op, f0=f0, f1=f1, f2=f2, sparse_pc_inc=sparse_pc_inc, lookup_type=lookup_type)

    @property
    def stage(self) -> Stage:
        return STAGE_OF[self.op]

    @property
    def dram_offset(self) -> int:
        """32-bit offset for LD/ST: f1 is the high half, f2 the low half."""
        return (self.f1 << 16) | self.f2

    def with_inc(self, inc: int) -> "Instruction":
        return Instruction(self.op, self.f0, self.f1, self.f2, inc, self.lookup_type)


def split_offset(offset: int) -> tuple[int, int]:
    if not 0 <= offset <= 0xFFFFFFFF:
        raise ValueError(f"DRAM offset {offset:#x} does not fit in 32 bits")
    return offset >> 16, offset & _MASK16


def encode(inst: Instruction) -> int:
    ctrl = (inst.sparse_pc_inc << 4) | inst.lookup_type
    return (
        (int(inst.op) << 60)
        | (inst.f0 << 44)
        | (inst.f1 << 28)
        | (inst.f2 << 12)
        | ctrl
    )


_BY_NIBBLE = {int(op): op for op in Opcode}


def decode(word: int) -> Instruction:
    if not 0 <= word < 1 << 64:
        raise ValueError("word must be an unsigned 64-bit integer")
    opbits = word >> 60
    op = _BY_NIBBLE.get(opbits)
    if op is None:
        raise InvalidOpcode(f"invalid opcode nibble {opbits:#x}")
    lookup = word & 0xF
    if lookup and op is not Opcode.ST:
        raise MalformedCtrl(f"lookup_type={lookup} on {op.name}")
    # every field is in range by construction, so skip __post_init__
    inst = object.__new__(Instruction)
    inst.__dict__.update(
        op=op,
        f0=(word >> 44) & _MASK16,
        f1=(word >> 28) & _MASK16,
        f2=(word >> 12) & _MASK16,
        sparse_pc_inc=(word >> 4) & 0xFF,
        lookup_type=lookup,
    )
    return inst


# -- assembly text ---------------------------------------------------------

_LINE = re.compile(r"^([A-Za-z][A-Za-z0-9]*)\s+(.*)$")


def _parse_int(tok: str, lineno: int) -> int:
    tok = tok.strip()
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmSyntaxError(lineno, f"bad literal {tok!r}") from None


def parse_line(text: str, lineno: int = 1) -> Instruction | None:
    """Parse one assembly line; returns None for blank/comment lines."""
    body = text.split("#", 1)[0].strip()
    if not body:
        return None
    m = _LINE.match(body)
    if not m:
        raise AsmSyntaxError(lineno, f"cannot parse {body!r}")
    mnemonic, rest = m.group(1).upper(), m.group(2)
    try:
        op = Opcode[mnemonic]
    except KeyError:
        raise AsmSyntaxError(lineno, f"unknown mnemonic {mnemonic!r}") from None
    parts = [p.strip() for p in rest.split(",")]
    fields: list[int] = []
    opts: dict[str, int] = {}
    for p in parts:
        if "=" in p:
            key, val = (s.strip().lower() for s in p.split("=", 1))
            if key not in ("lookup", "inc"):
                raise AsmSyntaxError(lineno, f"unknown option {key!r}")
            opts[key] = _parse_int(val, lineno)
        elif opts:
            raise AsmSyntaxError(lineno, "operand field after option")
        else:
            fields.append(_parse_int(p, lineno))
    if len(fields) != 3:
        raise AsmSyntaxError(lineno, f"{mnemonic} needs 3 fields, got {len(fields)}")
    try:
        return Instruction(
            op, *fields, sparse_pc_inc=opts.get("inc", 1), lookup_type=opts.get("lookup", 0)
        )
    except (ValueError, MalformedCtrl) as exc:
        raise AsmSyntaxError(lineno, str(exc)) from None


def check_stage_order(insts: Sequence[Instruction]) -> None:
    last = Stage.LD
    for i, inst in enumerate(insts):
        if inst.stage < last:
            raise StageOrderError(
                f"instruction {i} ({inst.op.name}) in stage {inst.stage.name} "
                f"follows stage {last.name}"
            )
        last = inst.stage


def assemble(text: str) -> list[Instruction]:
    insts = []
    for lineno, line in enumerate(text.splitlines(), 1):
        inst = parse_line(line, lineno)
        if inst is not None:
            insts.append(inst)
    check_stage_order(insts)
    return insts


def format_instruction(inst: Instruction) -> str:
    s = f"{inst.op.name} {inst.f0}, {inst.f1}, {inst.f2}"
    if inst.lookup_type:
        s += f", lookup={inst.lookup_type}"
    if inst.sparse_pc_inc != 1:
        s += f", inc={inst.sparse_pc_inc}"
    return s


def disassemble(insts: Iterable[Instruction]) -> str:
    return "".join(format_instruction(i) + "\n" for i in insts)


# -- binary program image ----------------------------------------------------

IMAGE_MAGIC = b"RNN1"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def pack_image(insts: Sequence[Instruction]) -> bytes:
    header = _HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, len(insts), 0)
    words = struct.pack(f"<{len(insts)}Q", *(encode(i) for i in insts))
    return header + words


def unpack_image(data: bytes) -> list[Instruction]:
    if len(data) < _HEADER.size:
        raise ImageFormatError("image shorter than header")
    magic, version, count, _ = _HEADER.unpack_from(data)
    if magic != IMAGE_MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise ImageFormatError(f"unsupported image version {version}")
    if len(data) != _HEADER.size + 8 * count:
        raise ImageFormatError(f"expected {count} words, image size {len(data)}")
    words = struct.unpack_from(f"<{count}Q", data, _HEADER.size)
    return [decode(w) for w in words]
