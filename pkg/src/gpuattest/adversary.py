"""Attacks on the attestation and whether the verifier catches them.

Each attack turns an honest image and machine state into an attacked setup
that runs under the same simulator and cost model as the honest prover.
Copies of the kernel live in the spare space after the image; they finish
by jumping to the end of the original code, which is where warps halt.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

from . import isa, vf
from .challenge import Challenge
from .device import machine
from .isa import Imm, Instruction, Opcode as Op, Pred, Reg
from .sake import authenticate_kernel
from .verifier import Reason, Verdict, Verifier

SUBST_MASK = 0x2A5A5A5A     # bit 31 clear so the restoring XOR immediate is not sign-extended


class Unsupported(ValueError):
    pass


class Variant(str, enum.Enum):
    NOP_INJECT = "nop_inject"
    MEMCOPY_B = "memcopy_b"
    MEMCOPY_C = "memcopy_c"
    MEMCOPY_D = "memcopy_d"
    DATA_SUBSTITUTION = "data_substitution"
    PROXY = "proxy"
    PARALLEL_TAKEOVER = "parallel_takeover"
    TOCTOU_SWAP = "toctou_swap"
    PRECOMPUTE_REPLAY = "precompute_replay"


@dataclass(frozen=True)
class AttackSpec:
    """An attack and its parameters.

    ``count`` is the number of injected NOPs, ``words`` the buffer word
    indices a substitution attack modifies, ``latency`` the one-way proxy
    delay in cycles, ``warps``/``spin`` the size and duration of a takeover
    block.
    """

    variant: Variant
    count: int = 1
    words: tuple = ()
    latency: int = 0
    warps: int = 1
    spin: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "words", tuple(int(w) for w in self.words))
        if self.count < 0 or self.latency < 0 or self.spin < 1:
            raise Unsupported("count, latency and spin must be non-negative")
        v = self.variant
        if v is Variant.NOP_INJECT and self.count < 1:
            raise Unsupported("nop_inject needs at least one NOP")
        if v is Variant.DATA_SUBSTITUTION and not self.words:
            raise Unsupported("data_substitution needs a non-empty word set")
        if v is Variant.PARALLEL_TAKEOVER and self.warps < 1:
            raise Unsupported("parallel_takeover needs at least one warp")

    def to_dict(self) -> dict:
        d = {"variant": self.variant.value}
        if self.variant is Variant.NOP_INJECT:
            d["count"] = self.count
        elif self.variant is Variant.DATA_SUBSTITUTION:
            d["words"] = list(self.words)
        elif self.variant is Variant.PROXY:
            d["latency"] = self.latency
        elif self.variant is Variant.PARALLEL_TAKEOVER:
            d.update(warps=self.warps, spin=self.spin)
        return d


def nop_inject(count: int = 1) -> AttackSpec:
    return AttackSpec(Variant.NOP_INJECT, count=count)


@dataclass
class AttackedSetup:
    spec: AttackSpec
    image: vf.VFImage               # the honest image the verifier measures
    honest: machine.MachineState
    state: machine.MachineState     # what the prover actually runs
    launch: Optional[machine.Launch] = None
    fast_forward: Optional[tuple] = None
    extra_latency: int = 0
    body_instructions: int = 0
    kernel: bytes = b""
    swapped_kernel: bytes = b""

    @property
    def honest_fast_forward(self) -> Optional[tuple]:
        return None if self.image.params.self_modifying else self.image.fast_forward()


@dataclass(frozen=True)
class DetectionReport:
    attack: AttackSpec
    honest_cycles: int
    attacked_cycles: int
    overhead_per_iteration: float
    checksum_correct: Optional[bool]
    verdict: Verdict

    @property
    def detected(self) -> bool:
        return not self.verdict.accepted

    def to_dict(self) -> dict:
        return {
            "attack": self.attack.to_dict(),
            "honest_cycles": self.honest_cycles,
            "attacked_cycles": self.attacked_cycles,
            "overhead_per_iteration": self.overhead_per_iteration,
            "checksum_correct": self.checksum_correct,
            "verdict": self.verdict.reason.value,
            "detected": self.detected,
        }


# ---------------------------------------------------------------- program edits


def _find(items, pred) -> int:
    for i, it in enumerate(items):
        if pred(it):
            return i
    raise Unsupported("kernel does not have the expected shape")


def _item(ins: Instruction) -> vf.Item:
    return vf.Item(ins, "attack")


def _set_dp(items: list, base: int) -> None:
    i = _find(items, lambda it: it.instr.opcode == Op.MOV and it.instr.dst == vf.R_DP)
    items[i] = replace(items[i], instr=items[i].instr.replace(srcs=(Imm(base),)))


def _smc_store(items) -> int:
    return _find(items, lambda it: it.role == "smc" and it.instr.opcode == Op.STC)


def _smc_jump(items) -> int:
    return _find(items, lambda it: it.role == "smc" and it.instr.opcode == Op.BRA)


def _shadow_site(items: list, delta_words: int) -> None:
    """Patch the copy's own site as well and branch into the copy."""
    st = _smc_store(items)
    ins = items[st].instr
    items.insert(st + 1, _item(ins.replace(srcs=(Reg(vf.R_T), Reg(vf.R_WORD), Imm(delta_words)))))
    j = _smc_jump(items)
    items.insert(j, _item(Instruction(Op.IADD, vf.R_T, (Reg(vf.R_T), Imm(delta_words)))))


def _halt_jump(items: list, code_end: int) -> None:
    items.append(_item(Instruction(Op.MOV, vf.R_T, (Imm(code_end),))))
    items.append(_item(Instruction(Op.BRA, 0, (Reg(vf.R_T),))))


def _after_each(items: list, role: str, make) -> list:
    out = []
    for it in items:
        out.append(it)
        if it.role == role:
            out.extend(make(it))
    return out


def _before_each(items: list, role: str, make) -> list:
    out = []
    for it in items:
        if it.role == role:
            out.extend(make(it))
        out.append(it)
    return out


def _encode(items) -> bytes:
    return isa.pack_words(isa.encode(i) for i in vf.link(items))


def _place(state: machine.MachineState, blob: bytes) -> int:
    """Copy ``blob`` into the spare space; returns its byte address."""
    base = (state.spare_base() + 127) // 128 * 128
    if base + len(blob) > len(state.memory):
        raise Unsupported("no spare memory for a relocated copy")
    state.memory[base:base + len(blob)] = bytearray(blob)
    return base


def _body_len(items) -> int:
    start = vf.label_index(items, "loop")
    end = _find(items, lambda it: it.role == "backedge") + 1
    return end - start


def _loop_ff(image: vf.VFImage, items, base_word: int) -> Optional[tuple]:
    if image.params.self_modifying:
        return None
    return (base_word + vf.label_index(items, "loop"), vf.R_CI)


def _relocated(image, honest, items, shadow: bool):
    """Run edited ``items`` from the spare space with DP on the original buffer."""
    state = honest.copy()
    base = (state.spare_base() + 127) // 128 * 128
    delta = base // isa.WORD_BYTES - state.code_base
    items = list(items)
    if shadow and image.params.self_modifying:
        _shadow_site(items, delta)
    _halt_jump(items, state.code_end)
    _place(state, _encode(items))
    entry = base // isa.WORD_BYTES + vf.label_index(items, "entry")
    launch = machine.Launch(tuple((state.config.warps_per_block, entry)
                                  for _ in range(state.config.blocks_per_sm)))
    return state, launch, _loop_ff(image, items, base // isa.WORD_BYTES), _body_len(items)


# ---------------------------------------------------------------- attacks


def _nop(image, honest, spec):
    items = list(image.items)
    at = vf.label_index(items, "loop") + 1
    items[at:at] = [_item(Instruction(Op.NOP)) for _ in range(spec.count)]
    attacked = vf.relink(image, items)
    state = machine.load_image(attacked, honest.config)
    return dict(state=state, fast_forward=None if image.params.self_modifying
                else attacked.fast_forward(), body_instructions=_body_len(items))


def _memcopy_b(image, honest, spec):
    # the copy is the altered kernel: here it differs only in where it runs
    state, launch, ff, n = _relocated(image, honest, image.items, shadow=True)
    return dict(state=state, launch=launch, fast_forward=ff, body_instructions=n)


def _memcopy_c(image, honest, spec):
    """Original location runs, loads come from a pristine copy of the buffer."""
    state = honest.copy()
    pristine = bytes(state.memory[state.buffer_base:state.buffer_base + state.data_size])
    copy = _place(state, pristine)
    delta = copy - state.buffer_base
    items = list(image.items)
    _set_dp(items, copy)
    # undo the address term so only the relocation of DP would show
    items = _after_each(items, "fold", lambda it: (
        [_item(Instruction(Op.IADD, vf.R_C, (Reg(vf.R_C), Imm(-delta))))]
        if it.instr.opcode == Op.IMAD and Reg(vf.R_ADDR) in it.instr.srcs else []))
    if image.params.self_modifying:
        # STC patches the measured copy; execution stays at the original site
        j = _smc_jump(items)
        items.insert(j, _item(Instruction(Op.IADD, vf.R_T, (Reg(vf.R_T),
                                                            Imm(-delta // isa.WORD_BYTES)))))
    code = _encode(items)
    if len(code) > state.data_size:
        raise Unsupported("edited code does not fit the buffer")
    b = state.buffer_base
    state.memory[b:b + len(code)] = bytearray(code)
    state = machine.load_image(isa.write_vfbin(bytes(state.memory[b:b + state.data_size]),
                                               vf.label_index(items, "entry"), len(items)),
                               honest.config)
    state.memory[copy:copy + len(pristine)] = bytearray(pristine)
    return dict(state=state, fast_forward=_loop_ff(image, items, state.code_base),
                body_instructions=_body_len(items))


def _memcopy_d(image, honest, spec):
    """The whole buffer, code and data, runs and is measured at the copy."""
    state = honest.copy()
    base = (state.spare_base() + 127) // 128 * 128
    items = list(image.items)
    _set_dp(items, base)
    _halt_jump(items, state.code_end)
    code = _encode(items)
    rest = bytes(state.memory[state.buffer_base + len(code):state.buffer_base + state.data_size])
    _place(state, code + rest)
    entry = base // isa.WORD_BYTES + vf.label_index(items, "entry")
    launch = machine.Launch(tuple((state.config.warps_per_block, entry)
                                  for _ in range(state.config.blocks_per_sm)))
    return dict(state=state, launch=launch,
                fast_forward=_loop_ff(image, items, base // isa.WORD_BYTES),
                body_instructions=_body_len(items))


def _data_substitution(image, honest, spec):
    """Modify buffer words and run a shimmed copy that restores them on every load."""
    state = honest.copy()
    b = state.buffer_base
    n_words = state.data_size // 4
    targets = []
    for w in spec.words:
        if not 0 <= w < n_words:
            raise Unsupported(f"word {w} outside the buffer")
        a = b + 4 * w
        v = int.from_bytes(bytes(state.memory[a:a + 4]), "little") ^ SUBST_MASK
        state.memory[a:a + 4] = bytearray(v.to_bytes(4, "little"))
        targets.append(a)

    def shim(_):
        out = []
        for a in targets:
            out.append(_item(Instruction(Op.LOP_XOR, vf.R_T, (Reg(vf.R_ADDR), Imm(a)))))
            out.append(_item(Instruction(Op.LOP_XOR, vf.R_WORD, (Reg(vf.R_WORD), Imm(SUBST_MASK)),
                                         pred=Pred(vf.R_T, True))))
        return out

    items = _before_each(list(image.items), "fold", lambda it: shim(it)
                         if it.instr.opcode == Op.IADD and Reg(vf.R_WORD) in it.instr.srcs else [])
    state, launch, ff, n = _relocated(image, state, items, shadow=True)
    return dict(state=state, launch=launch, fast_forward=ff, body_instructions=n)


def _takeover(image, honest, spec):
    """An adversary block launched ahead of the kernel on every SM."""
    cfg = honest.config
    if spec.warps > cfg.max_warps_per_sm:
        raise Unsupported("takeover block larger than an SM")
    state = honest.copy()
    t = vf.R_T
    prog = [
        vf.Item(Instruction(Op.MOV, t, (Imm(spec.spin),)), "attack", label="entry"),
        vf.Item(Instruction(Op.IMAD, 5, (Reg(5), Imm(3), Reg(6))), "attack", label="spin"),
        vf.Item(Instruction(Op.IADD, t, (Reg(t), Imm(-1))), "attack"),
        vf.Item(Instruction(Op.BRA, 0, (Imm(0),), Pred(t)), "attack", target="spin"),
    ]
    _halt_jump(prog, state.code_end)
    base = _place(state, _encode(prog))
    adv = (spec.warps, base // isa.WORD_BYTES)
    launch = machine.Launch((adv,) + tuple((cfg.warps_per_block, None)
                                           for _ in range(cfg.blocks_per_sm)), guests=(0,))
    return dict(state=state, launch=launch, body_instructions=image.params.body_instructions)


def _default_kernel() -> bytes:
    prog = [Instruction(Op.IMAD, 1, (Reg(1), Imm(3), Reg(2))), Instruction(Op.NOP)]
    return isa.pack_words(isa.encode(i) for i in prog)


def apply_attack(image: vf.VFImage, state: machine.MachineState, spec: AttackSpec,
                 kernel: Optional[bytes] = None) -> AttackedSetup:
    """Build the prover-side setup of ``spec`` against the honest ``state``."""
    v = spec.variant
    base = dict(state=state, fast_forward=None if image.params.self_modifying
                else image.fast_forward(), body_instructions=image.params.body_instructions)
    if v is Variant.NOP_INJECT:
        base.update(_nop(image, state, spec))
    elif v is Variant.MEMCOPY_B:
        base.update(_memcopy_b(image, state, spec))
    elif v is Variant.MEMCOPY_C:
        base.update(_memcopy_c(image, state, spec))
    elif v is Variant.MEMCOPY_D:
        base.update(_memcopy_d(image, state, spec))
    elif v is Variant.DATA_SUBSTITUTION:
        base.update(_data_substitution(image, state, spec))
    elif v is Variant.PARALLEL_TAKEOVER:
        base.update(_takeover(image, state, spec))
        base["fast_forward"] = None
    elif v is Variant.PROXY:
        base["extra_latency"] = 2 * spec.latency
    setup = AttackedSetup(spec, image, state, **base)
    if v is Variant.TOCTOU_SWAP:
        setup.kernel = kernel if kernel is not None else _default_kernel()
        swapped = bytearray(setup.kernel)
        swapped[0] ^= 1
        setup.swapped_kernel = bytes(swapped)
    return setup


# ---------------------------------------------------------------- evaluation


def _run(state, challenge, launch, ff, functional, jitter_seed):
    return machine.run(state, challenge, timing_only=not functional, launch=launch,
                       fast_forward=None if functional else ff, jitter_seed=jitter_seed,
                       raise_on_trap=False)


def evaluate(setup: AttackedSetup, verifier: Verifier, *, functional: bool = False,
             jitter_seed: Optional[int] = None, honest_cycles: Optional[int] = None) -> DetectionReport:
    """Run the attacked prover under a fresh challenge and let ``verifier`` judge it.

    Timing-only runs (``functional=False``) produce no checksum: the verdict
    then rests on time alone and ``checksum_correct`` is None. The honest
    run uses the same challenge and noise seed unless ``honest_cycles`` is
    given.
    """
    spec = setup.spec
    ch = verifier.challenge()
    iters = ch.iterations
    if honest_cycles is None:
        honest = _run(setup.honest, ch, None, setup.honest_fast_forward, functional, jitter_seed)
        honest_cycles = honest.cycles
    want = verifier.expected(ch) if (functional and verifier.expected) else None

    if spec.variant is Variant.PRECOMPUTE_REPLAY:
        # answer with a pair recorded in an earlier session of the same verifier
        r = _run(setup.state, ch, None, setup.fast_forward, functional, jitter_seed)
        verifier.check(ch, r.checksum if functional else None, r.cycles,
                               check_value=functional)
        stale = verifier.challenge()
        verdict = verifier.check(ch, r.checksum if functional else None, r.cycles,
                               check_value=functional)
        verifier.outstanding.pop(stale.nonce, None)
        return DetectionReport(spec, honest_cycles, r.cycles, 0.0,
                               (r.checksum == want) if want is not None else None, verdict)

    if spec.variant is Variant.TOCTOU_SWAP:
        r = _run(setup.state, ch, None, setup.fast_forward, functional, jitter_seed)
        nonce = hashlib.sha256(ch.nonce.to_bytes(8, "little")).digest()
        expected_h = authenticate_kernel(nonce, setup.kernel)
        # the kernel entry follows the epilog directly, so the only window for
        # the swap is before the hash: the device hashes the swapped code
        got_h = authenticate_kernel(nonce, setup.swapped_kernel)
        verdict = verifier.check(ch, r.checksum if functional else None, r.cycles,
                               check_value=functional)
        if got_h != expected_h:
            verdict = Verdict(False, Reason.CHECKSUM_MISMATCH, r.cycles, verdict.expected,
                              verdict.received)
        return DetectionReport(spec, honest_cycles, r.cycles, 0.0,
                               (r.checksum == want) if want is not None else None, verdict)

    r = _run(setup.state, ch, setup.launch, setup.fast_forward, functional, jitter_seed)
    elapsed = r.cycles + setup.extra_latency
    response = r.checksum if functional else None
    verdict = verifier.check(ch, response, elapsed, check_value=functional)
    correct = (response == want) if want is not None else None
    return DetectionReport(spec, honest_cycles, elapsed, (elapsed - honest_cycles) / iters,
                           correct, verdict)
