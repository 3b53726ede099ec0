"""Verification function: program generator and host-side reference.

The generated kernel has four parts laid out in one buffer:

    [site table][init | loop body | epilog][pseudo-random fill]

The site table holds one 128-byte line per thread block.  Its first word is
``LEA.HI R0, R0, R0, #N`` (``x += x >> N``) followed by a branch back into
the loop; the loop rewrites N from the running checksum each iteration when
self-modification is enabled.

Every loop block performs one pseudo-random 32-bit load from the buffer.
Addresses in the site table are taken relative to the block's own site line,
so blocks never observe each other's patches and the host can predict every
value read.  The reference in this module evaluates the same abstract plan
the emitter lowers to instructions, with numpy instead of the simulator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import isa
from .challenge import Challenge
from .device.config import A100, DeviceConfig
from .device.machine import (BUF_BASE, PARAM_ITER, PARAM_NONCE, RESULT_BLOCK_BASE,
                             RESULT_GRID, SEED_BASE)
from .isa import Imm, Instruction, Opcode as Op, Pred, Reg

NUM_ACC = 22
R_C, R_DP, R_CI, R_ADDR, R_WORD, R_X, R_BLKOFF, R_LEAD, R_T, R_BSH = range(22, 32)

XS_SHIFTS = (12, 25, 27)
XS_MUL = 2685821657736338717
XS_DEFAULT_SEED = 0x9E3779B97F4A7C15
GOLD = 0x61C88647          # fold multiplier, kept below 2**31 so the immediate is not sign-extended
SITE_LINE_WORDS = 8        # 128-byte line of 16-byte instructions
SITE_DATA_WORDS = 32       # the same line seen as 32-bit data words

M64 = isa.MASK64
FMA, ALU, NEUTRAL = "fma", "alu", "neutral"


class LayoutOverflow(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------- PRNG


def xorshift(x: int) -> int:
    a, b, c = XS_SHIFTS
    x ^= x >> a
    x = (x ^ (x << b)) & M64
    x ^= x >> c
    return x


def xorshift_star(x: int) -> tuple:
    """One xorshift64* step: (new state, output)."""
    x = xorshift(x)
    return x, (x * XS_MUL) & M64


class XorShiftStar:
    def __init__(self, seed: int):
        self.state = (seed & M64) or XS_DEFAULT_SEED

    def next(self) -> int:
        self.state, out = xorshift_star(self.state)
        return out

    def below(self, n: int) -> int:
        return self.next() % n


def fill_bytes(seed: int, nbytes: int) -> bytes:
    rng = XorShiftStar(seed)
    n = (nbytes + 7) // 8
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = rng.next()
    return out.tobytes()[:nbytes]


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Topology:
    num_blocks: int
    warps_per_block: int
    warp_size: int = 32

    @property
    def threads(self) -> int:
        return self.num_blocks * self.warps_per_block * self.warp_size


@dataclass(frozen=True)
class VFParams:
    """Shape of the generated kernel.

    ``body_instructions`` counts the loop from its first instruction to the
    back-edge branch, inclusive. ``unroll`` is the number of load blocks per
    iteration. The geometry fields fix the launch the image is built for,
    since every block owns a site line. ``nop_padding`` NOPs are added at the
    top of the loop after layout (the adversarial-NOP profile).
    """

    buffer_bytes: int = 524288
    body_instructions: int = 428
    unroll: int = 7
    iterations: int = 100_000
    self_modifying: bool = False
    inner_iterations: int = 0
    inner_instructions: int = 0
    icache_bytes: int = 131072
    min_load_gap: int = 38
    num_sms: int = 108
    blocks_per_sm: int = 2
    warps_per_block: int = 32
    warp_size: int = 32
    nop_padding: int = 0

    def __post_init__(self):
        b = self.buffer_bytes
        if b < 4096 or b & (b - 1):
            raise ValueError("buffer_bytes must be a power of two >= 4096")
        if self.unroll < 1 or self.iterations < 1 or self.body_instructions < 1:
            raise ValueError("unroll, iterations and body_instructions must be positive")
        if (self.inner_iterations > 0) != (self.inner_instructions > 0):
            raise ValueError("inner_iterations and inner_instructions go together")
        if self.inner_instructions and self.inner_instructions < 4:
            raise ValueError("inner loop needs at least 4 instructions")
        if self.nop_padding < 0 or (self.nop_padding and self.self_modifying):
            raise ValueError("nop_padding must be >= 0 and needs a non-self-modifying body")
        if self.self_modifying and self.body_instructions * isa.WORD_BYTES <= self.icache_bytes:
            raise ValueError("a self-modifying body must be larger than the instruction cache")
        for name in ("num_sms", "blocks_per_sm", "warps_per_block", "warp_size", "min_load_gap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.site_words * 2 > self.data_words:
            raise ValueError("buffer too small for the per-block site table")

    @property
    def num_blocks(self) -> int:
        return self.num_sms * self.blocks_per_sm

    @property
    def topology(self) -> Topology:
        return Topology(self.num_blocks, self.warps_per_block, self.warp_size)

    @property
    def data_words(self) -> int:
        return self.buffer_bytes // 4

    @property
    def site_words(self) -> int:
        """32-bit words reserved for site lines, rounded up to a power of two."""
        n = SITE_DATA_WORDS * self.num_blocks
        return 1 << (n - 1).bit_length()

    def device_config(self, base: DeviceConfig = A100, **changes) -> DeviceConfig:
        """A device config whose launch geometry and icache size match these params."""
        d = dict(num_sms=self.num_sms, blocks_per_sm=self.blocks_per_sm,
                 max_warps_per_sm=self.blocks_per_sm * self.warps_per_block,
                 warp_size=self.warp_size, l2_icache_bytes=self.icache_bytes)
        d.update(changes)
        return base.with_(**d)

    def with_(self, **changes) -> "VFParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VFParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown VF parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "VFParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


PROFILES = {
    "exp1": VFParams(),
    "exp2": VFParams(nop_padding=1),
    "exp3": VFParams(body_instructions=8342, unroll=16, iterations=1000, self_modifying=True),
    "exp4": VFParams(body_instructions=8342, unroll=16, iterations=1000, self_modifying=True,
                     inner_iterations=5000, inner_instructions=216),
}


def self_modify_immediate(checksum: int) -> int:
    """Shift amount patched into ``x += x >> N``."""
    return checksum & 31


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class Item:
    """One instruction slot before linking; ``target`` names a relative branch label."""

    instr: Instruction
    role: str = ""
    label: Optional[str] = None
    target: Optional[str] = None


def link(items: Sequence[Item]) -> list:
    labels = {}
    for i, it in enumerate(items):
        if it.label is not None:
            if it.label in labels:
                raise ValueError(f"duplicate label {it.label}")
            labels[it.label] = i
    out = []
    for i, it in enumerate(items):
        ins = it.instr
        if it.target is not None:
            ins = ins.replace(srcs=(Imm(labels[it.target] - (i + 1)),))
        out.append(ins)
    return out


def label_index(items: Sequence[Item], label: str) -> int:
    for i, it in enumerate(items):
        if it.label == label:
            return i
    raise KeyError(label)


@dataclass(frozen=True)
class Layout:
    """Word offsets inside the image (relative to its first word)."""

    entry: int
    loop_start: int
    loop_end: int          # one past the back-edge branch
    epilog_start: int
    code_words: int
    site_words: int        # 32-bit data words covered by the site table
    sites: tuple           # first word of each block's site line
    shift_k1: int
    shift_k2: int

    @property
    def body_range(self) -> range:
        return range(self.loop_start, self.loop_end)


@dataclass(frozen=True)
class VFImage:
    params: VFParams
    fill_seed: int
    data: bytes
    layout: Layout
    items: tuple
    plan: tuple
    inner_plan: tuple

    @property
    def entry(self) -> int:
        return self.layout.entry

    @property
    def code_words(self) -> int:
        return self.layout.code_words

    def to_vfbin(self) -> bytes:
        return isa.write_vfbin(self.data, self.layout.entry, self.layout.code_words)

    def instructions(self) -> list:
        return link(self.items)

    def fast_forward(self) -> tuple:
        """(absolute loop pc, counter register) for timing-only fast-forward."""
        return (BUF_BASE // isa.WORD_BYTES + self.layout.loop_start, R_CI)

    def dump_asm(self) -> str:
        lines = []
        for i, ins in enumerate(self.instructions()):
            lines.append(f"/*{i:05x}*/ {isa.emit_asm(ins)}")
        return "\n".join(lines) + "\n"


def _ins(op, dst=0, *srcs, pred=None) -> Instruction:
    return Instruction(op, dst, tuple(Reg(s) if isinstance(s, int) else s for s in srcs), pred)


def _pipe(ins: Instruction) -> str:
    if ins.opcode in isa.FMA_OPS:
        return FMA
    if ins.opcode in isa.ALU_OPS:
        return ALU
    return NEUTRAL


class _Emitter:
    """Lowers plan steps to instructions, inserting busy work so FMA and ALU alternate."""

    def __init__(self, rng: XorShiftStar):
        self.rng = rng
        self.items = []
        self.plan = []
        self.last = None
        self.prev_dst = 0

    def raw(self, ins: Instruction, role: str, label=None, target=None):
        self.items.append(Item(ins, role, label, target))
        p = _pipe(ins)
        if p != NEUTRAL:
            self.last = p

    def emit(self, ins: Instruction, role: str, label=None, target=None):
        p = _pipe(ins)
        if p != NEUTRAL and p == self.last:
            self.busy(ALU if p == FMA else FMA, self.plan)
        self.raw(ins, role, label, target)

    def busy(self, pipe: str, plan: list):
        r = self.rng
        a = self.prev_dst if r.below(2) else r.below(NUM_ACC)
        d, c = r.below(NUM_ACC), r.below(NUM_ACC)
        if pipe == FMA:
            s = 1 + r.below(30)
            self.raw(_ins(Op.IMAD, d, a, Imm(1 << s), c), "busy")
            plan.append(("fma", d, a, s, c))
        else:
            if r.below(4) == 0:
                self.raw(_ins(Op.LEA_HI, d, a, c, R_BSH), "busy")
                plan.append(("lea", d, a, c, -1))
            else:
                t = 1 + r.below(63)
                self.raw(_ins(Op.LEA_HI, d, a, c, Imm(t)), "busy")
                plan.append(("lea", d, a, c, t))
        self.prev_dst = d


def _site_line(block: int, ret: str) -> list:
    return ([Item(_ins(Op.LEA_HI, 0, 0, 0, Imm(0)), "site", label=f"site{block}"),
             Item(_ins(Op.BRA, 0, Imm(0)), "site", target=ret)]
            + [Item(Instruction(Op.NOP), "site_pad") for _ in range(SITE_LINE_WORDS - 2)])


def _init(em: _Emitter, k1: int, k2: int):
    raw = em.raw
    raw(_ins(Op.MOV, R_LEAD, 2), "init", label="entry")
    raw(_ins(Op.SHF_L, R_BLKOFF, 1, Imm(7)), "init")
    raw(_ins(Op.MOV, R_BSH, Imm(k2)), "init")
    raw(_ins(Op.IMAD, R_BSH, 1, Imm(k1), R_BSH), "init")
    raw(_ins(Op.SHF_R, R_BSH, R_BSH, Imm(3)), "init")
    raw(_ins(Op.LOP_AND, R_BSH, R_BSH, Imm(31)), "init")
    # 64-bit seed of this SM, then spread it over threads
    raw(_ins(Op.MOV, R_ADDR, Imm(SEED_BASE)), "init")
    raw(_ins(Op.IMAD, R_ADDR, 0, Imm(8), R_ADDR), "init")
    raw(_ins(Op.LDG, R_WORD, R_ADDR), "init")
    raw(_ins(Op.LDG, R_T, R_ADDR, Imm(4)), "init")
    raw(_ins(Op.SHF_L, R_T, R_T, Imm(32)), "init")
    raw(_ins(Op.IADD, R_X, R_T, R_WORD), "init")
    raw(_ins(Op.IMAD, R_X, 4, Imm(GOLD), R_X), "init")
    raw(_ins(Op.MOV, R_ADDR, Imm(PARAM_ITER)), "init")
    raw(_ins(Op.LDG, R_CI, R_ADDR), "init")
    mhi, mlo = XS_MUL >> 32, XS_MUL & isa.MASK32
    for dst in list(range(NUM_ACC)) + [R_C]:
        _xorshift(raw, "init")
        # dst = X * XS_MUL with 32-bit immediates: X*lo + ((X << 32) * hi)
        raw(_ins(Op.SHF_L, R_T, R_X, Imm(32)), "init")
        raw(_ins(Op.IMAD, R_T, R_T, Imm(mhi - 1), R_T), "init")
        raw(_ins(Op.IMAD, dst, R_X, Imm(mlo), R_T), "init")
    raw(_ins(Op.MOV, R_ADDR, Imm(PARAM_NONCE)), "init")
    raw(_ins(Op.LDG, R_WORD, R_ADDR), "init")
    raw(_ins(Op.LDG, R_T, R_ADDR, Imm(4)), "init")
    raw(_ins(Op.SHF_L, R_T, R_T, Imm(32)), "init")
    raw(_ins(Op.IADD, R_WORD, R_T, R_WORD), "init")
    raw(_ins(Op.LOP_XOR, R_C, R_C, R_WORD), "init")
    raw(_ins(Op.MOV, R_DP, Imm(BUF_BASE)), "init")


def _xorshift(put, role: str):
    a, b, c = XS_SHIFTS
    put(_ins(Op.SHF_R, R_T, R_X, Imm(a)), role)
    put(_ins(Op.LOP_XOR, R_X, R_X, R_T), role)
    put(_ins(Op.SHF_L, R_T, R_X, Imm(b)), role)
    put(_ins(Op.LOP_XOR, R_X, R_X, R_T), role)
    put(_ins(Op.SHF_R, R_T, R_X, Imm(c)), role)
    put(_ins(Op.LOP_XOR, R_X, R_X, R_T), role)


def _view(em: _Emitter, u: int, mask: int, log2s: int):
    e = em.emit
    q, nq = Pred(R_WORD), Pred(R_WORD, True)
    e(_ins(Op.LOP_AND, R_ADDR, R_C, Imm(mask)), "view", label="loop" if u == 0 else None)
    e(_ins(Op.SHF_R, R_WORD, R_ADDR, Imm(log2s)), "view")
    e(_ins(Op.IMAD, R_ADDR, R_ADDR, Imm(4), R_DP, pred=q), "view")
    e(_ins(Op.LOP_AND, R_ADDR, R_ADDR, Imm(31), pred=nq), "view")
    e(_ins(Op.IMAD, R_ADDR, R_ADDR, Imm(4), R_BLKOFF, pred=nq), "view")
    e(_ins(Op.IADD, R_ADDR, R_ADDR, R_DP, pred=nq), "view")
    e(_ins(Op.LDG, R_WORD, R_ADDR), "ldg")
    em.plan.append(("view",))


def _body(em: _Emitter, p: VFParams, extra: list, mix_shifts: list):
    e = em.emit
    mask = p.data_words - 1
    log2s = p.site_words.bit_length() - 1
    for u in range(p.unroll):
        _view(em, u, mask, log2s)
        ldg_at = len(em.items) - 1
        if u == 0:
            e(_ins(Op.IADD, R_CI, R_CI, Imm(-1)), "counter")
            em.plan.append(("dec",))
            _xorshift(e, "prng")
            em.plan.append(("prng",))
        while len(em.items) - ldg_at - 1 < p.min_load_gap + extra[u]:
            em.busy(ALU if em.last == FMA else FMA, em.plan)
        e(_ins(Op.IADD, R_C, R_C, R_WORD), "fold")
        em.plan.append(("c_word",))
        e(_ins(Op.IMAD, R_C, R_ADDR, Imm(1), R_C), "fold")
        em.plan.append(("c_addr",))
        e(_ins(Op.LOP_XOR, R_C, R_C, R_CI), "fold")
        em.plan.append(("c_ctr",))
        e(_ins(Op.IMAD, R_C, R_X, Imm(GOLD), R_C), "fold")
        em.plan.append(("c_prng",))
        e(_ins(Op.LEA_HI, R_C, R_C, R_C, Imm(mix_shifts[u])), "fold")
        em.plan.append(("c_mix", mix_shifts[u]))
        for i in range(u, NUM_ACC, p.unroll):
            e(_ins(Op.LOP_XOR, R_C, R_C, i), "fold")
            em.plan.append(("c_acc", i))
    if p.inner_iterations:
        e(_ins(Op.MOV, R_T, Imm(p.inner_iterations)), "inner")
        inner = []
        for k in range(p.inner_instructions - 2):
            pipe = ALU if em.last == FMA else FMA
            em.busy(pipe, inner)
            if k == 0:
                em.items[-1] = replace(em.items[-1], label="inner", role="inner")
            else:
                em.items[-1] = replace(em.items[-1], role="inner")
        em.raw(_ins(Op.IADD, R_T, R_T, Imm(-1)), "inner")
        em.raw(_ins(Op.BRA, 0, Imm(0), pred=Pred(R_T)), "inner", target="inner")
        em.plan.append(("inner", p.inner_iterations, tuple(inner)))
    if p.self_modifying:
        e(_ins(Op.IADD, R_T, R_DP, R_BLKOFF), "smc")
        e(_ins(Op.SHF_R, R_T, R_T, Imm(4)), "smc")
        e(_ins(Op.LOP_AND, R_WORD, R_C, Imm(31)), "smc")
        e(Instruction(Op.BAR_SYNC), "smc")
        e(_ins(Op.STC, 0, R_T, R_WORD, pred=Pred(R_LEAD, True)), "smc")
        e(Instruction(Op.BAR_SYNC), "smc")
        e(_ins(Op.BRA, 0, R_T), "smc")
        em.last = ALU      # the site executes LEA.HI
        em.plan.append(("smc",))


def _lower(p: VFParams, fill_seed: int, extra: list, tail: Optional[int]):
    """Emit the whole program; ``tail`` busy ops precede the back-edge (None: minimal)."""
    rng = XorShiftStar(fill_seed)
    k1 = rng.below(1 << 30) | 1
    k2 = rng.below(1 << 31)
    mix = [1 + rng.below(40) for _ in range(p.unroll)]
    em = _Emitter(rng)
    for b in range(p.num_blocks):
        em.items.extend(_site_line(b, "ret" if p.self_modifying else "loop"))
    site_code_words = p.site_words // 4
    em.items.extend(Item(Instruction(Op.NOP), "site_pad") for _ in range(site_code_words - len(em.items)))
    _init(em, k1, k2)
    em.last = None
    em.plan = []
    start = len(em.items)
    _body(em, p, extra, mix)
    pre = len(em.items) - start
    if tail is None:
        tail = 1 if em.last == ALU else 0
    # alternate backwards from an FMA just before the branch so the loop wraps cleanly
    for k in range(tail):
        em.busy(FMA if (tail - 1 - k) % 2 == 0 else ALU, em.plan)
    em.raw(_ins(Op.BRA, 0, Imm(0), pred=Pred(R_CI)), "backedge", target="loop")
    if p.self_modifying:
        # the site branches back to the first instruction after BRA R30
        j = max(i for i, it in enumerate(em.items) if it.role == "smc") + 1
        em.items[j] = replace(em.items[j], label="ret")
    end = len(em.items)
    for i in range(NUM_ACC):
        em.raw(_ins(Op.LOP_XOR, R_C, R_C, i), "epilog")
    em.raw(_ins(Op.SHF_R, R_T, R_BLKOFF, Imm(4)), "epilog")
    em.raw(_ins(Op.IADD, R_T, R_T, Imm(RESULT_BLOCK_BASE)), "epilog")
    em.raw(_ins(Op.ATOM_ADD, 0, R_T, R_C), "epilog")
    em.raw(_ins(Op.MOV, R_ADDR, Imm(RESULT_GRID)), "epilog")
    em.raw(_ins(Op.ATOM_ADD, 0, R_ADDR, R_C), "epilog")
    return em, start, end, pre, k1, k2


def _spread(want: int, parts: int) -> list:
    return [want // parts + (1 if u < want % parts else 0) for u in range(parts)]


def build_vf(params: VFParams, fill_seed: int = 0) -> VFImage:
    """Generate the kernel image; byte-deterministic in (params, fill_seed)."""
    p = params
    n = p.body_instructions
    extra = [0] * p.unroll
    em, start, end, pre, k1, k2 = _lower(p, fill_seed, extra, None)
    if end - start > n:
        raise LayoutOverflow(f"loop needs at least {end - start} instructions, body allows {n}")
    # grow the load gaps until the minimal tail lands on n, then let the tail absorb the rest
    want = n - (end - start)
    best = (extra, pre)
    for _ in range(12):
        if end - start == n:
            break
        extra = _spread(want, p.unroll)
        em, start, end, pre, k1, k2 = _lower(p, fill_seed, extra, None)
        if pre + 1 <= n and pre >= best[1]:
            best = (extra, pre)
        want = max(0, want + n - (end - start))
    if end - start != n:
        extra, pre = best
        em, start, end, pre, k1, k2 = _lower(p, fill_seed, extra, n - 1 - pre)
    if end - start != n:
        raise LayoutOverflow(f"cannot lay out a loop of exactly {n} instructions")
    words = isa.pack_words(isa.encode(i) for i in link(em.items))
    if len(words) > p.buffer_bytes:
        raise LayoutOverflow(f"code of {len(words)} bytes exceeds the {p.buffer_bytes}-byte buffer")
    data = words + fill_bytes(fill_seed ^ 0xA5A5A5A5A5A5A5A5, p.buffer_bytes - len(words))
    layout = Layout(entry=label_index(em.items, "entry"), loop_start=start, loop_end=end,
                    epilog_start=end, code_words=len(em.items), site_words=p.site_words,
                    sites=tuple(b * SITE_LINE_WORDS for b in range(p.num_blocks)),
                    shift_k1=k1, shift_k2=k2)
    inner = next((op[2] for op in em.plan if op[0] == "inner"), ())
    img = VFImage(p, fill_seed, data, layout, tuple(em.items), tuple(em.plan), inner)
    if p.nop_padding:
        items = list(img.items)
        at = label_index(items, "loop") + 1
        items[at:at] = [Item(isa.Instruction(isa.Opcode.NOP), "pad")] * p.nop_padding
        img = relink(img, items)
    return img


def relink(image: VFImage, items: Sequence[Item], body_end: Optional[int] = None) -> VFImage:
    """Rebuild an image from edited items, keeping the original fill after the code."""
    words = isa.pack_words(isa.encode(i) for i in link(items))
    if len(words) > image.params.buffer_bytes:
        raise LayoutOverflow("edited code does not fit the buffer")
    data = words + image.data[len(words):]
    lay = image.layout
    start = label_index(items, "loop")
    end = body_end if body_end is not None else next(
        i for i, it in enumerate(items) if it.role == "backedge") + 1
    layout = replace(lay, entry=label_index(items, "entry"), loop_start=start, loop_end=end,
                     epilog_start=end, code_words=len(items))
    return replace(image, data=data, layout=layout, items=tuple(items))


# ---------------------------------------------------------------- reference


def _xs_vec(x: np.ndarray) -> np.ndarray:
    a, b, c = (np.uint64(s) for s in XS_SHIFTS)
    x = x ^ (x >> a)
    x = x ^ (x << b)
    return x ^ (x >> c)


# plan steps as integer rows for the compiled loop: (kind, a, b, c, d)
K_FMA, K_LEA, K_VIEW, K_DEC, K_PRNG, K_WORD, K_ADDR, K_CTR, K_XPRNG, K_MIX, K_ACC, K_INNER, K_SMC = range(13)
_KINDS = {"view": K_VIEW, "dec": K_DEC, "prng": K_PRNG, "c_word": K_WORD, "c_addr": K_ADDR,
          "c_ctr": K_CTR, "c_prng": K_XPRNG, "smc": K_SMC}


def _encode_plan(plan) -> np.ndarray:
    rows = []
    for op in plan:
        k = op[0]
        if k == "fma":
            rows.append((K_FMA, op[1], op[2], op[3], op[4]))
        elif k == "lea":
            rows.append((K_LEA, op[1], op[2], op[3], op[4]))
        elif k == "c_mix":
            rows.append((K_MIX, op[1], 0, 0, 0))
        elif k == "c_acc":
            rows.append((K_ACC, op[1], 0, 0, 0))
        elif k == "inner":
            rows.append((K_INNER, op[1], 0, 0, 0))
        elif k in _KINDS:
            rows.append((_KINDS[k], 0, 0, 0, 0))
        else:
            raise ValueError(f"unknown plan step {k!r}")
    return np.array(rows, dtype=np.int64).reshape(-1, 5)


@njit(cache=True)
def _rshift(x, n):
    if n >= 64:
        return np.uint64(0)
    return x >> np.uint64(n)


@njit(cache=True)
def _busy(op, acc, bsh, blk, nt):
    d, a = op[1], op[2]
    if op[0] == K_FMA:
        # (kind, d, a, shift, c): d = (a << shift) + c
        s, c = op[3], op[4]
        for t in range(nt):
            acc[d, t] = (acc[a, t] << np.uint64(s)) + acc[c, t]
    else:
        # (kind, d, a, c, shift): d = c + (a >> shift); shift < 0 picks the per-block constant
        c, s = op[3], op[4]
        for t in range(nt):
            sh = bsh[blk[t]] if s < 0 else s
            acc[d, t] = acc[c, t] + _rshift(acc[a, t], sh)


@njit(cache=True)
def _reference_loop(plan, inner, acc, c, x, blk, bsh, blkoff, buf32, site, leaders,
                    ci, w_mask, log2s, dp, gold):
    nt = c.shape[0]
    word = np.zeros(nt, dtype=np.uint64)
    addr = np.zeros(nt, dtype=np.uint64)
    nb = np.zeros(leaders.shape[0], dtype=np.uint64)
    while True:
        for i in range(plan.shape[0]):
            op = plan[i]
            k = op[0]
            if k == K_FMA or k == K_LEA:
                _busy(op, acc, bsh, blk, nt)
            elif k == K_VIEW:
                for t in range(nt):
                    idx = c[t] & w_mask
                    if (idx >> log2s) == 0:
                        low = idx & np.uint64(31)
                        addr[t] = dp + blkoff[t] + low * np.uint64(4)
                        word[t] = np.uint64(site[blk[t], np.int64(low)])
                    else:
                        addr[t] = dp + idx * np.uint64(4)
                        word[t] = np.uint64(buf32[np.int64(idx)])
            elif k == K_DEC:
                ci = ci - np.uint64(1)
            elif k == K_PRNG:
                for t in range(nt):
                    v = x[t]
                    v ^= v >> np.uint64(12)
                    v ^= v << np.uint64(25)
                    v ^= v >> np.uint64(27)
                    x[t] = v
            elif k == K_WORD:
                for t in range(nt):
                    c[t] += word[t]
            elif k == K_ADDR:
                for t in range(nt):
                    c[t] += addr[t]
            elif k == K_CTR:
                for t in range(nt):
                    c[t] ^= ci
            elif k == K_XPRNG:
                for t in range(nt):
                    c[t] += x[t] * gold
            elif k == K_MIX:
                for t in range(nt):
                    c[t] += _rshift(c[t], op[1])
            elif k == K_ACC:
                for t in range(nt):
                    c[t] ^= acc[op[1], t]
            elif k == K_INNER:
                for _ in range(op[1]):
                    for j in range(inner.shape[0]):
                        _busy(inner[j], acc, bsh, blk, nt)
            elif k == K_SMC:
                for b in range(leaders.shape[0]):
                    n = c[leaders[b]] & np.uint64(31)
                    nb[b] = n
                    # immediate bytes 5..8 of the site's first word
                    site[b, 1] = (site[b, 1] & np.uint32(0xFF)) | np.uint32(n << np.uint64(8))
                    site[b, 2] = site[b, 2] & np.uint32(0xFFFFFF00)
                for t in range(nt):
                    acc[0, t] += acc[0, t] >> nb[blk[t]]
        if ci == 0:
            break
    return c


@dataclass(frozen=True)
class ReferenceResult:
    checksum: int
    per_block: list
    per_sm: list
    per_thread: np.ndarray


def reference_run(image: VFImage, challenge: Challenge) -> ReferenceResult:
    """Evaluate the kernel's plan on the host for every launched thread."""
    p = image.params
    lay = image.layout
    if len(challenge.seeds) < p.num_sms:
        raise ValueError(f"challenge carries {len(challenge.seeds)} seeds for {p.num_sms} SMs")
    u64 = np.uint64
    topo = p.topology
    nthreads = topo.threads
    tpb = p.warps_per_block * p.warp_size
    tid = np.arange(nthreads, dtype=np.uint64)
    blk = np.arange(nthreads) // tpb
    sm = blk // p.blocks_per_sm
    blkoff = blk.astype(np.uint64) * u64(128)
    bids = np.arange(p.num_blocks, dtype=np.uint64)
    bsh = (((bids * u64(lay.shift_k1) + u64(lay.shift_k2)) >> u64(3)) & u64(31)).astype(np.int64)
    seeds = np.array([s & M64 for s in challenge.seeds[:p.num_sms]], dtype=np.uint64)
    x = seeds[sm] + tid * u64(GOLD)
    acc = np.empty((NUM_ACC, nthreads), dtype=np.uint64)
    for i in range(NUM_ACC):
        x = _xs_vec(x)
        acc[i] = x * u64(XS_MUL)
    x = _xs_vec(x)
    c = (x * u64(XS_MUL)) ^ u64(challenge.nonce & M64)
    buf32 = np.frombuffer(image.data, dtype=np.uint32)
    # each block sees its own site line as 32 data words
    site = np.stack([buf32[s * 4:s * 4 + SITE_DATA_WORDS] for s in lay.sites]).astype(np.uint32)
    leaders = np.arange(p.num_blocks, dtype=np.int64) * tpb
    c = _reference_loop(_encode_plan(image.plan), _encode_plan(image.inner_plan), acc, c, x,
                        blk.astype(np.int64), bsh, blkoff, buf32, site, leaders,
                        u64(challenge.iterations & isa.MASK32), u64(p.data_words - 1),
                        u64(p.site_words.bit_length() - 1), u64(BUF_BASE), u64(GOLD))
    for i in range(NUM_ACC):
        c = c ^ acc[i]
    per_block = [aggregate(c[b * tpb:(b + 1) * tpb], Topology(1, p.warps_per_block, p.warp_size))
                 for b in range(p.num_blocks)]
    per_sm = [sum(per_block[s * p.blocks_per_sm:(s + 1) * p.blocks_per_sm]) & M64
              for s in range(p.num_sms)]
    return ReferenceResult(aggregate(c, topo), per_block, per_sm, c)


def checksum_reference(image: VFImage, challenge: Challenge) -> int:
    """Expected grid checksum of ``image`` under ``challenge``."""
    return reference_run(image, challenge).checksum


def aggregate(per_thread, topology: Topology) -> int:
    """Pairwise tree sum within each warp, then over warps of a block, then over blocks."""
    v = np.asarray(per_thread, dtype=np.uint64)
    if v.ndim != 1 or len(v) != topology.threads:
        raise ShapeMismatch(f"expected {topology.threads} thread values, got {v.shape}")
    v = v.reshape(topology.num_blocks, topology.warps_per_block, topology.warp_size)
    v = _tree(v)                                   # per warp
    v = _tree(v)                                   # per block
    return int(v.sum(dtype=np.uint64)) & M64       # grid (atomic adds)


def _tree(v: np.ndarray) -> np.ndarray:
    while v.shape[-1] > 1:
        if v.shape[-1] % 2:
            v = np.concatenate([v, np.zeros(v.shape[:-1] + (1,), dtype=np.uint64)], axis=-1)
        v = v[..., 0::2] + v[..., 1::2]
    return v[..., 0]
