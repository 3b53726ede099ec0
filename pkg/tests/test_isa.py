import pytest
from hypothesis import given, strategies as st

from gpuattest import isa
from gpuattest.isa import ControlInfo, Imm, Instruction, Opcode as Op, Reg, Word128

from .strategies import controls, instructions

SASS_LINE = "B......|R.|W.|Y1|S1| IMAD.U32 R28, R28, 2048, R28;"


def control_field(word: Word128) -> int:
    return word.as_int() >> isa.CONTROL_SHIFT & ((1 << isa.CONTROL_BITS) - 1)


def test_nop_zero_control_encodes_zero_field():
    assert control_field(isa.encode(Instruction(Op.NOP))) == 0


def test_nop_decodes_to_nop():
    assert isa.decode(isa.encode(Instruction(Op.NOP))) == Instruction(Op.NOP)


def test_imad_with_yield_and_stall_round_trips():
    ins = Instruction(Op.IMAD, 28, (Reg(28), Imm(2048), Reg(28)),
                      control=ControlInfo(yield_flag=1, stall=1))
    assert isa.decode(isa.encode(ins)) == ins


def test_unknown_opcode():
    with pytest.raises(isa.UnknownOpcode):
        isa.decode(Word128(0xFF, 0))


def test_reserved_bits_rejected():
    w = isa.encode(Instruction(Op.NOP)).as_int() | 1 << 80
    with pytest.raises(isa.InvalidEncoding):
        isa.decode(Word128.from_int(w))


@pytest.mark.parametrize("n", [-1, 32])
def test_invalid_register(n):
    with pytest.raises(isa.InvalidRegister):
        Reg(n)


def test_immediate_out_of_range():
    with pytest.raises(isa.ImmediateOutOfRange):
        Imm(1 << 32)


def test_two_immediates_rejected():
    with pytest.raises(isa.IsaError):
        Instruction(Op.IADD, 1, (Imm(1), Imm(2)))


def test_store_has_no_destination():
    with pytest.raises(isa.IsaError):
        Instruction(Op.STC, 3, (Reg(1), Reg(2)))


def test_parse_sass_style_imad():
    ins = isa.parse_asm(SASS_LINE)
    assert ins.opcode is Op.IMAD and ins.dst == 28
    assert ins.srcs == (Reg(28), Imm(2048), Reg(28))
    c = ins.control
    assert (c.yield_flag, c.stall, c.wait_mask) == (1, 1, 0)
    assert c.read_barrier == c.write_barrier == isa.BARRIER_NONE


def test_parse_barriers():
    ins = isa.parse_asm("B012...|R3|W4|Y0|S2| LDG R5, [R6];")
    c = ins.control
    assert c.wait_mask == 0b111
    assert (c.read_barrier, c.write_barrier, c.stall) == (3, 4, 2)
    assert ins.srcs == (Reg(6),) and ins.dst == 5


def test_yield_must_be_binary():
    with pytest.raises(isa.AsmSyntaxError) as e:
        isa.parse_asm("B......|R.|W.|Y2|S1| NOP;")
    assert e.value.column == SASS_LINE.index("Y") + 2


def test_missing_semicolon_reports_column():
    with pytest.raises(isa.AsmSyntaxError) as e:
        isa.parse_asm("B......|R.|W.|Y0|S0| NOP")
    assert e.value.column > 20


def test_register_overflow_in_text():
    with pytest.raises(isa.FieldOverflow):
        isa.parse_asm("B......|R.|W.|Y0|S0| MOV R32, 1;")


def test_emit_nop():
    assert isa.emit_asm(Instruction(Op.NOP)) == "B......|R.|W.|Y0|S0| NOP;"


def test_sass_line_round_trips():
    assert isa.emit_asm(isa.parse_asm(SASS_LINE)) == SASS_LINE


def test_all_opcodes_encode_distinctly():
    words = {isa.encode(Instruction(op, 0, _minimal_srcs(op))).as_int() & 0xFF for op in Op}
    assert len(words) == len(Op)


def _minimal_srcs(op):
    shape = isa._SHAPE[op]
    return {"alu3": (Reg(0),) * 3, "alu2": (Reg(0),) * 2, "alu1": (Reg(0),),
            "load": (Reg(0),), "store": (Reg(0), Reg(0)), "branch": (Imm(0),)}.get(shape, ())


@pytest.mark.parametrize("bit", range(isa.CONTROL_BITS))
def test_control_bit_changes_one_field(bit):
    base = ControlInfo()
    flipped = ControlInfo.unpack(base.pack() ^ 1 << bit)
    changed = [f for f in ControlInfo.WIDTHS if getattr(base, f) != getattr(flipped, f)]
    assert len(changed) == 1


@given(instructions())
def test_encode_decode_round_trip(ins):
    assert isa.decode(isa.encode(ins)) == ins


@given(instructions())
def test_emit_parse_round_trip(ins):
    assert isa.parse_asm(isa.emit_asm(ins)) == ins


@given(controls)
def test_control_pack_is_21_bits(c):
    assert 0 <= c.pack() < 1 << isa.CONTROL_BITS
    assert ControlInfo.unpack(c.pack()) == c


@given(st.integers(0, (1 << 128) - 1))
def test_decode_then_encode_is_identity_on_valid_words(v):
    try:
        ins = isa.decode(Word128.from_int(v))
    except isa.IsaError:
        return
    assert isa.encode(ins).as_int() == v


def test_vfbin_round_trip():
    body = isa.pack_words(isa.encode(i) for i in [Instruction(Op.NOP)] * 3)
    hdr, got = isa.read_vfbin(isa.write_vfbin(body, 1, 2))
    assert (hdr.word_count, hdr.entry, hdr.code_words) == (3, 1, 2) and got == body


def test_vfbin_bad_magic():
    blob = bytearray(isa.write_vfbin(b"", 0, 0))
    blob[0:4] = b"XXXX"
    with pytest.raises(isa.BadMagic):
        isa.read_vfbin(bytes(blob))


def test_assemble_skips_comments():
    prog = isa.assemble(["# header", "", "B......|R.|W.|Y0|S0| NOP;"])
    assert prog == [Instruction(Op.NOP)]
    assert isa.assemble(isa.disassemble(prog).splitlines()) == prog
