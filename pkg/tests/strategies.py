"""Hypothesis strategies for instructions and small kernel geometries."""

from hypothesis import strategies as st

from gpuattest import isa
from gpuattest.isa import ControlInfo, Imm, Instruction, Opcode as Op, Pred, Reg

regs = st.integers(0, isa.NUM_REGS - 1).map(Reg)
imms = st.integers(0, isa.MASK32).map(Imm)

controls = st.builds(
    ControlInfo,
    reuse=st.integers(0, 15),
    wait_mask=st.integers(0, 63),
    read_barrier=st.integers(0, 7),
    write_barrier=st.integers(0, 7),
    yield_flag=st.integers(0, 1),
    stall=st.integers(0, 15),
)

preds = st.none() | st.builds(Pred, st.integers(0, 31), st.booleans())

ALU = {Op.IMAD: 3, Op.LEA_HI: 3, Op.SHF_L: 2, Op.SHF_R: 2, Op.LOP_XOR: 2,
       Op.LOP_AND: 2, Op.IADD: 2, Op.MOV: 1}


@st.composite
def alu_sources(draw, n):
    srcs = draw(st.lists(regs, min_size=n, max_size=n))
    if draw(st.booleans()):
        srcs[draw(st.integers(0, n - 1))] = draw(imms)
    return tuple(srcs)


@st.composite
def instructions(draw):
    op = draw(st.sampled_from(list(Op)))
    pred, control = draw(preds), draw(controls)
    dst, srcs = 0, ()
    if op in ALU:
        dst, srcs = draw(regs).n, draw(alu_sources(ALU[op]))
    elif op is Op.LDG:
        dst = draw(regs).n
        srcs = (draw(regs),) + ((draw(imms),) if draw(st.booleans()) else ())
    elif op in (Op.STG, Op.STC, Op.ATOM_ADD):
        srcs = (draw(regs), draw(regs)) + ((draw(imms),) if draw(st.booleans()) else ())
    elif op is Op.BRA:
        srcs = (draw(regs | imms),)
    elif op is Op.LEPC:
        dst = draw(regs).n
    return Instruction(op, dst, srcs, pred, control)


def random_instruction(rng) -> Instruction:
    """Plain-RNG counterpart of ``instructions()`` for large fixed-size batches."""
    r = lambda: Reg(int(rng.integers(0, isa.NUM_REGS)))
    imm = lambda: Imm(int(rng.integers(0, isa.MASK32 + 1)))
    coin = lambda: bool(rng.integers(0, 2))
    op = Op(int(rng.choice([int(o) for o in Op])))
    pred = Pred(int(rng.integers(0, 32)), coin()) if coin() else None
    control = ControlInfo(*(int(rng.integers(0, hi)) for hi in (16, 64, 8, 8, 2, 16)))
    dst, srcs = 0, ()
    if op in ALU:
        dst, n = r().n, ALU[op]
        srcs = [r() for _ in range(n)]
        if coin():
            srcs[int(rng.integers(0, n))] = imm()
        srcs = tuple(srcs)
    elif op is Op.LDG:
        dst = r().n
        srcs = (r(),) + ((imm(),) if coin() else ())
    elif op in (Op.STG, Op.STC, Op.ATOM_ADD):
        srcs = (r(), r()) + ((imm(),) if coin() else ())
    elif op is Op.BRA:
        srcs = (r() if coin() else imm(),)
    elif op is Op.LEPC:
        dst = r().n
    return Instruction(op, dst, srcs, pred, control)
