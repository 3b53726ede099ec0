"""Toy fixed-length instruction set with a 128-bit encoding.

Layout of one instruction word (bit 0 is the least significant bit of ``lo``)::

    0-7     opcode
    8-12    destination register
    13      predicate present
    14-18   predicate register
    19      predicate negated
    20-37   three source slots of 6 bits: [is_immediate:1][register:5]
    38-39   number of sources
    40-71   32-bit immediate
    72-104  reserved, must be zero
    105-108 reuse flags
    109-114 wait barrier mask
    115-117 read barrier (7 = none)
    118-120 write barrier (7 = none)
    121     yield
    122-125 stall cycles
    126-127 reserved, must be zero

The immediate field covers bytes 5..8 of the little-endian word, which is
what :data:`IMM_BYTE_OFFSET` exposes for code patching.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

NUM_REGS = 32
WORD_BYTES = 16
IMM_BYTE_OFFSET = 5
BARRIER_NONE = 7

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

VFBIN_MAGIC = b"VF01"
VFBIN_HEADER = struct.Struct("<4sIII")


class IsaError(ValueError):
    pass


class InvalidRegister(IsaError):
    pass


class ImmediateOutOfRange(IsaError):
    pass


class UnknownOpcode(IsaError):
    pass


class InvalidEncoding(IsaError):
    """Reserved or inconsistent bits in an otherwise known opcode."""


class FieldOverflow(IsaError):
    pass


class AsmSyntaxError(IsaError):
    def __init__(self, message: str, column: int):
        super().__init__(f"column {column}: {message}")
        self.column = column


class BadMagic(IsaError):
    pass


class Opcode(enum.IntEnum):
    NOP = 0x00
    IMAD = 0x01
    LEA_HI = 0x02
    SHF_L = 0x03
    SHF_R = 0x04
    LOP_XOR = 0x05
    LOP_AND = 0x06
    IADD = 0x07
    MOV = 0x08
    LDG = 0x10
    STG = 0x11
    STC = 0x12
    ATOM_ADD = 0x13
    BAR_SYNC = 0x20
    BRA = 0x21
    LEPC = 0x22
    ICINV = 0x23


# Operand shapes. "alu3"/"alu2"/"alu1": dst plus that many free sources.
# "load": dst, [Ra(+imm)]. "store": [Ra(+imm)], Rb. "branch": one source.
_SHAPE = {
    Opcode.NOP: "none",
    Opcode.IMAD: "alu3",
    Opcode.LEA_HI: "alu3",
    Opcode.SHF_L: "alu2",
    Opcode.SHF_R: "alu2",
    Opcode.LOP_XOR: "alu2",
    Opcode.LOP_AND: "alu2",
    Opcode.IADD: "alu2",
    Opcode.MOV: "alu1",
    Opcode.LDG: "load",
    Opcode.STG: "store",
    Opcode.STC: "store",
    Opcode.ATOM_ADD: "store",
    Opcode.BAR_SYNC: "none",
    Opcode.BRA: "branch",
    Opcode.LEPC: "dst",
    Opcode.ICINV: "none",
}

MNEMONIC = {
    Opcode.NOP: "NOP",
    Opcode.IMAD: "IMAD.U32",
    Opcode.LEA_HI: "LEA.HI",
    Opcode.SHF_L: "SHF.L",
    Opcode.SHF_R: "SHF.R",
    Opcode.LOP_XOR: "LOP.XOR",
    Opcode.LOP_AND: "LOP.AND",
    Opcode.IADD: "IADD",
    Opcode.MOV: "MOV",
    Opcode.LDG: "LDG",
    Opcode.STG: "STG",
    Opcode.STC: "STC",
    Opcode.ATOM_ADD: "ATOM.ADD",
    Opcode.BAR_SYNC: "BAR.SYNC",
    Opcode.BRA: "BRA",
    Opcode.LEPC: "LEPC",
    Opcode.ICINV: "ICINV",
}

_BY_MNEMONIC = {}
for _op, _m in MNEMONIC.items():
    _BY_MNEMONIC[_m] = _op
    _BY_MNEMONIC[_op.name] = _op
    _BY_MNEMONIC[_m.replace(".", "_")] = _op
_BY_MNEMONIC["IMAD"] = Opcode.IMAD

FMA_OPS = frozenset({Opcode.IMAD})
ALU_OPS = frozenset(
    {Opcode.LEA_HI, Opcode.SHF_L, Opcode.SHF_R, Opcode.LOP_XOR,
     Opcode.LOP_AND, Opcode.IADD, Opcode.MOV, Opcode.LEPC}
)


@dataclass(frozen=True)
class Reg:
    n: int

    def __post_init__(self):
        if not isinstance(self.n, int) or not 0 <= self.n < NUM_REGS:
            raise InvalidRegister(f"register id {self.n!r} outside 0..{NUM_REGS - 1}")


@dataclass(frozen=True)
class Imm:
    value: int

    def __post_init__(self):
        if not isinstance(self.value, int) or not -(1 << 31) <= self.value <= MASK32:
            raise ImmediateOutOfRange(f"immediate {self.value!r} does not fit 32 bits")
        object.__setattr__(self, "value", self.value & MASK32)

    @property
    def signed(self) -> int:
        return self.value - (1 << 32) if self.value & 0x80000000 else self.value


Operand = Union[Reg, Imm]


@dataclass(frozen=True)
class Pred:
    reg: int
    negate: bool = False

    def __post_init__(self):
        if not 0 <= self.reg < NUM_REGS:
            raise InvalidRegister(f"predicate register {self.reg} outside 0..31")


@dataclass(frozen=True)
class ControlInfo:
    reuse: int = 0
    wait_mask: int = 0
    read_barrier: int = BARRIER_NONE
    write_barrier: int = BARRIER_NONE
    yield_flag: int = 0
    stall: int = 0

    WIDTHS = {"reuse": 4, "wait_mask": 6, "read_barrier": 3,
              "write_barrier": 3, "yield_flag": 1, "stall": 4}

    def __post_init__(self):
        for name, width in self.WIDTHS.items():
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < (1 << width):
                raise FieldOverflow(f"{name}={v!r} does not fit {width} bits")

    def pack(self) -> int:
        """21-bit control payload, reuse in the low bits.

        Barrier indices are stored as (index + 1) mod 8 so that "no barrier"
        packs to zero and a default ControlInfo is an all-zero field.
        """
        return (self.reuse | self.wait_mask << 4 | ((self.read_barrier + 1) & 7) << 10
                | ((self.write_barrier + 1) & 7) << 13 | self.yield_flag << 16
                | self.stall << 17)

    @classmethod
    def unpack(cls, bits: int) -> "ControlInfo":
        return cls(bits & 0xF, bits >> 4 & 0x3F, ((bits >> 10 & 7) - 1) & 7,
                   ((bits >> 13 & 7) - 1) & 7, bits >> 16 & 1, bits >> 17 & 0xF)


CONTROL_SHIFT = 105
CONTROL_BITS = 21


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: int = 0
    srcs: tuple = ()
    pred: Optional[Pred] = None
    control: ControlInfo = field(default_factory=ControlInfo)

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        object.__setattr__(self, "srcs", tuple(self.srcs))
        if not isinstance(self.dst, int) or not 0 <= self.dst < NUM_REGS:
            raise InvalidRegister(f"destination register {self.dst!r} outside 0..31")
        _check_shape(self.opcode, self.dst, self.srcs)

    @property
    def imm(self) -> Optional[Imm]:
        for s in self.srcs:
            if isinstance(s, Imm):
                return s
        return None

    @property
    def writes_register(self) -> bool:
        return _SHAPE[self.opcode] in ("alu3", "alu2", "alu1", "load", "dst")

    @property
    def registers(self) -> set:
        """All register ids read or written."""
        regs = {s.n for s in self.srcs if isinstance(s, Reg)}
        if self.writes_register:
            regs.add(self.dst)
        if self.pred is not None:
            regs.add(self.pred.reg)
        return regs

    def replace(self, **changes) -> "Instruction":
        d = dict(opcode=self.opcode, dst=self.dst, srcs=self.srcs,
                 pred=self.pred, control=self.control)
        d.update(changes)
        return Instruction(**d)


def _check_shape(op: Opcode, dst: int, srcs: Sequence[Operand]) -> None:
    shape = _SHAPE[op]
    n = len(srcs)
    if any(not isinstance(s, (Reg, Imm)) for s in srcs):
        raise IsaError("operands must be Reg or Imm")
    if sum(isinstance(s, Imm) for s in srcs) > 1:
        raise IsaError("at most one immediate operand")
    ok = True
    if shape in ("alu3", "alu2", "alu1"):
        ok = n == {"alu3": 3, "alu2": 2, "alu1": 1}[shape]
    elif shape == "load":
        ok = n in (1, 2) and isinstance(srcs[0], Reg) and (n == 1 or isinstance(srcs[1], Imm))
    elif shape == "store":
        ok = (n in (2, 3) and isinstance(srcs[0], Reg) and isinstance(srcs[1], Reg)
              and (n == 2 or isinstance(srcs[2], Imm)))
    elif shape == "branch":
        ok = n == 1
    else:
        ok = n == 0
    if not ok:
        raise IsaError(f"bad operands for {op.name}: {srcs!r}")
    if shape in ("none", "store", "branch") and dst != 0:
        raise IsaError(f"{op.name} has no destination register")


@dataclass(frozen=True)
class Word128:
    lo: int
    hi: int

    def __post_init__(self):
        if not (0 <= self.lo <= MASK64 and 0 <= self.hi <= MASK64):
            raise ValueError("Word128 halves must be 64-bit unsigned")

    def to_bytes(self) -> bytes:
        return struct.pack("<QQ", self.lo, self.hi)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Word128":
        lo, hi = struct.unpack("<QQ", raw)
        return cls(lo, hi)

    def as_int(self) -> int:
        return self.lo | self.hi << 64

    @classmethod
    def from_int(cls, v: int) -> "Word128":
        return cls(v & MASK64, v >> 64 & MASK64)


def encode(instr: Instruction) -> Word128:
    v = int(instr.opcode) | instr.dst << 8
    if instr.pred is not None:
        v |= 1 << 13 | instr.pred.reg << 14 | int(instr.pred.negate) << 19
    for i, s in enumerate(instr.srcs):
        if isinstance(s, Imm):
            v |= 1 << (20 + 6 * i)
            v |= s.value << 40
        else:
            v |= s.n << (21 + 6 * i)
    v |= len(instr.srcs) << 38
    v |= instr.control.pack() << CONTROL_SHIFT
    return Word128.from_int(v)


_RESERVED = ((1 << (CONTROL_SHIFT - 72)) - 1) << 72 | 0b11 << 126


def decode(word: Word128) -> Instruction:
    v = word.as_int()
    try:
        op = Opcode(v & 0xFF)
    except ValueError:
        raise UnknownOpcode(f"opcode 0x{v & 0xFF:02x} is not assigned") from None
    if v & _RESERVED:
        raise InvalidEncoding("reserved bits set")
    nsrc = v >> 38 & 3
    srcs = []
    has_imm = False
    for i in range(3):
        slot = v >> (20 + 6 * i) & 0x3F
        if i >= nsrc:
            if slot:
                raise InvalidEncoding(f"unused source slot {i} not zero")
            continue
        if slot & 1:
            if slot >> 1:
                raise InvalidEncoding("immediate slot carries a register id")
            if has_imm:
                raise InvalidEncoding("two immediate operands")
            has_imm = True
            srcs.append(Imm(v >> 40 & MASK32))
        else:
            srcs.append(Reg(slot >> 1))
    if not has_imm and v >> 40 & MASK32:
        raise InvalidEncoding("immediate field set without an immediate operand")
    pred = None
    if v >> 13 & 1:
        pred = Pred(v >> 14 & 0x1F, bool(v >> 19 & 1))
    elif v >> 14 & 0x3F:
        raise InvalidEncoding("predicate bits set without a predicate")
    control = ControlInfo.unpack(v >> CONTROL_SHIFT & ((1 << CONTROL_BITS) - 1))
    try:
        return Instruction(op, v >> 8 & 0x1F, tuple(srcs), pred, control)
    except IsaError as exc:
        if isinstance(exc, (InvalidRegister, ImmediateOutOfRange)):
            raise
        raise InvalidEncoding(str(exc)) from None


# ---------------------------------------------------------------- assembly


def _fmt_imm(v: Imm, signed: bool = False) -> str:
    return str(v.signed) if signed else str(v.value)


def _fmt_mem(base: Reg, off: Optional[Imm]) -> str:
    if off is None:
        return f"[R{base.n}]"
    return f"[R{base.n}+0x{off.value:x}]"


def _fmt_operand(s: Operand) -> str:
    return f"R{s.n}" if isinstance(s, Reg) else _fmt_imm(s)


def emit_control(c: ControlInfo) -> str:
    mask = "".join(str(i) if c.wait_mask >> i & 1 else "." for i in range(6))
    rb = "." if c.read_barrier == BARRIER_NONE else str(c.read_barrier)
    wb = "." if c.write_barrier == BARRIER_NONE else str(c.write_barrier)
    text = f"B{mask}|R{rb}|W{wb}|Y{c.yield_flag}|S{c.stall:X}|"
    if c.reuse:
        text += f"U{c.reuse:X}|"
    return text


def emit_asm(instr: Instruction) -> str:
    op = instr.opcode
    shape = _SHAPE[op]
    s = instr.srcs
    if shape in ("alu3", "alu2", "alu1"):
        ops = ", ".join([f"R{instr.dst}"] + [_fmt_operand(x) for x in s])
    elif shape == "load":
        ops = f"R{instr.dst}, " + _fmt_mem(s[0], s[1] if len(s) > 1 else None)
    elif shape == "store":
        ops = _fmt_mem(s[0], s[2] if len(s) > 2 else None) + f", R{s[1].n}"
    elif shape == "branch":
        ops = f"R{s[0].n}" if isinstance(s[0], Reg) else _fmt_imm(s[0], signed=True)
    elif shape == "dst":
        ops = f"R{instr.dst}"
    else:
        ops = ""
    guard = ""
    if instr.pred is not None:
        guard = f"@{'!' if instr.pred.negate else ''}R{instr.pred.reg} "
    body = MNEMONIC[op] + (" " + ops if ops else "")
    return f"{emit_control(instr.control)} {guard}{body};"


_CONTROL_RE = re.compile(
    r"B(?P<B>[^|]{6})\|R(?P<R>[^|])\|W(?P<W>[^|])\|Y(?P<Y>[^|])\|S(?P<S>[^|])\|(?:U(?P<U>[^|])\|)?"
)


def _parse_control(line: str) -> tuple:
    m = _CONTROL_RE.match(line)
    if not m:
        raise AsmSyntaxError("expected control prefix B......|R.|W.|Y.|S.|", 1)
    mask = 0
    for i, ch in enumerate(m.group("B")):
        if ch == ".":
            continue
        if not ch.isdigit():
            raise AsmSyntaxError(f"bad wait mask character {ch!r}", m.start("B") + i + 1)
        if int(ch) != i:
            raise AsmSyntaxError(f"wait mask digit {ch} at position {i}", m.start("B") + i + 1)
        mask |= 1 << i

    def barrier(name: str) -> int:
        ch = m.group(name)
        if ch == ".":
            return BARRIER_NONE
        if not ch.isdigit():
            raise AsmSyntaxError(f"bad barrier {ch!r}", m.start(name) + 1)
        if int(ch) > 7:
            raise FieldOverflow(f"barrier index {ch} exceeds 7")
        return int(ch)

    y = m.group("Y")
    if y not in ("0", "1"):
        raise AsmSyntaxError(f"yield must be 0 or 1, got {y!r}", m.start("Y") + 1)
    hexdigits = "0123456789abcdefABCDEF"
    st = m.group("S")
    if st not in hexdigits:
        raise AsmSyntaxError(f"stall must be a hex digit, got {st!r}", m.start("S") + 1)
    reuse = 0
    if m.group("U") is not None:
        if m.group("U") not in hexdigits:
            raise AsmSyntaxError("reuse must be a hex digit", m.start("U") + 1)
        reuse = int(m.group("U"), 16)
    ctrl = ControlInfo(reuse, mask, barrier("R"), barrier("W"), int(y), int(st, 16))
    return ctrl, m.end()


_TOKEN_RE = re.compile(r"\s*(\[[^\]]*\]|[^,\s;][^,;]*?)\s*(?=,|;|$)")
_REG_RE = re.compile(r"R(\d+)$")
_INT_RE = re.compile(r"[+-]?(0[xX][0-9a-fA-F]+|\d+)$")


def _parse_int(text: str, col: int) -> int:
    t = text.strip()
    if not _INT_RE.match(t):
        raise AsmSyntaxError(f"bad integer {t!r}", col)
    v = int(t, 16) if "x" in t.lower() else int(t, 10)
    if not -(1 << 31) <= v <= MASK32:
        raise FieldOverflow(f"immediate {t} does not fit 32 bits")
    return v


def _parse_reg(text: str, col: int) -> Reg:
    m = _REG_RE.match(text.strip())
    if not m:
        raise AsmSyntaxError(f"expected register, got {text.strip()!r}", col)
    n = int(m.group(1))
    if n >= NUM_REGS:
        raise FieldOverflow(f"register R{n} exceeds R{NUM_REGS - 1}")
    return Reg(n)


def _parse_operand(text: str, col: int) -> Operand:
    t = text.strip()
    if t.startswith("R"):
        return _parse_reg(t, col)
    return Imm(_parse_int(t, col))


def _parse_mem(text: str, col: int) -> tuple:
    t = text.strip()
    if not (t.startswith("[") and t.endswith("]")):
        raise AsmSyntaxError(f"expected memory operand, got {t!r}", col)
    inner = t[1:-1].replace(" ", "")
    m = re.match(r"(R\d+)(?:([+-])(.+))?$", inner)
    if not m:
        raise AsmSyntaxError(f"bad memory operand {t!r}", col)
    base = _parse_reg(m.group(1), col)
    if m.group(2) is None:
        return base, None
    v = _parse_int(m.group(3), col)
    return base, Imm(-v if m.group(2) == "-" else v)


def parse_asm(line: str) -> Instruction:
    text = line.rstrip("\n")
    control, pos = _parse_control(text)
    rest = text[pos:]
    if not rest.startswith(" "):
        raise AsmSyntaxError("expected a space after the control prefix", pos + 1)
    stripped = rest.strip()
    col0 = pos + 1 + (len(rest) - len(rest.lstrip()))
    if not stripped.endswith(";"):
        raise AsmSyntaxError("missing terminating ';'", len(text) + 1)
    stripped = stripped[:-1].rstrip()
    pred = None
    if stripped.startswith("@"):
        m = re.match(r"@(!?)(R\d+)\s+", stripped)
        if not m:
            raise AsmSyntaxError("bad predicate guard", col0)
        pred = Pred(_parse_reg(m.group(2), col0 + 1).n, m.group(1) == "!")
        col0 += m.end()
        stripped = stripped[m.end():]
    parts = stripped.split(None, 1)
    if not parts:
        raise AsmSyntaxError("missing opcode", col0)
    op = _BY_MNEMONIC.get(parts[0])
    if op is None:
        raise AsmSyntaxError(f"unknown mnemonic {parts[0]!r}", col0)
    operand_text = parts[1] if len(parts) > 1 else ""
    ocol = col0 + len(parts[0]) + 1
    toks = [t.strip() for t in operand_text.split(",")] if operand_text.strip() else []
    if any(t == "" for t in toks):
        raise AsmSyntaxError("empty operand", ocol)
    shape = _SHAPE[op]
    dst = 0
    try:
        if shape in ("alu3", "alu2", "alu1"):
            want = {"alu3": 4, "alu2": 3, "alu1": 2}[shape]
            if len(toks) != want:
                raise AsmSyntaxError(f"{parts[0]} takes {want} operands", ocol)
            dst = _parse_reg(toks[0], ocol).n
            srcs = tuple(_parse_operand(t, ocol) for t in toks[1:])
        elif shape == "load":
            if len(toks) != 2:
                raise AsmSyntaxError("LDG takes Rd, [Ra]", ocol)
            dst = _parse_reg(toks[0], ocol).n
            base, off = _parse_mem(toks[1], ocol)
            srcs = (base,) if off is None else (base, off)
        elif shape == "store":
            if len(toks) != 2:
                raise AsmSyntaxError(f"{parts[0]} takes [Ra], Rb", ocol)
            base, off = _parse_mem(toks[0], ocol)
            val = _parse_reg(toks[1], ocol)
            srcs = (base, val) if off is None else (base, val, off)
        elif shape == "branch":
            if len(toks) != 1:
                raise AsmSyntaxError("BRA takes one target", ocol)
            srcs = (_parse_operand(toks[0], ocol),)
        elif shape == "dst":
            if len(toks) != 1:
                raise AsmSyntaxError(f"{parts[0]} takes Rd", ocol)
            dst = _parse_reg(toks[0], ocol).n
            srcs = ()
        else:
            if toks:
                raise AsmSyntaxError(f"{parts[0]} takes no operands", ocol)
            srcs = ()
        return Instruction(op, dst, srcs, pred, control)
    except (AsmSyntaxError, FieldOverflow):
        raise
    except (InvalidRegister, ImmediateOutOfRange) as exc:
        raise FieldOverflow(str(exc)) from None
    except IsaError as exc:
        raise AsmSyntaxError(str(exc), ocol) from None


def assemble(lines: Iterable[str]) -> list:
    """Parse a listing; blank lines and '#' comments are skipped."""
    out = []
    for line in lines:
        s = line.strip()
        if s and not s.startswith("#"):
            out.append(parse_asm(s))
    return out


def disassemble(program: Iterable[Instruction]) -> str:
    return "\n".join(emit_asm(i) for i in program) + "\n"


# ---------------------------------------------------------------- images


def pack_words(words: Iterable[Word128]) -> bytes:
    return b"".join(w.to_bytes() for w in words)


def write_vfbin(body: bytes, entry: int, code_words: int) -> bytes:
    """Wrap a raw little-endian word stream (length multiple of 16) in a .vfbin header."""
    if len(body) % WORD_BYTES:
        raise ValueError("image body must be a whole number of 16-byte words")
    n = len(body) // WORD_BYTES
    if not 0 <= entry <= code_words <= n:
        raise ValueError("entry/code_words outside the image")
    return VFBIN_HEADER.pack(VFBIN_MAGIC, n, entry, code_words) + body


@dataclass(frozen=True)
class VfbinHeader:
    word_count: int
    entry: int
    code_words: int


def read_vfbin(blob: bytes) -> tuple:
    """Return (header, body bytes)."""
    if len(blob) < VFBIN_HEADER.size:
        raise BadMagic("image shorter than its header")
    magic, n, entry, code_words = VFBIN_HEADER.unpack_from(blob)
    if magic != VFBIN_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    body = blob[VFBIN_HEADER.size:]
    if len(body) != n * WORD_BYTES:
        raise ValueError(f"header declares {n} words, body has {len(body) / WORD_BYTES}")
    if not 0 <= entry <= code_words <= n:
        raise ValueError("entry/code_words outside the image")
    return VfbinHeader(n, entry, code_words), body
