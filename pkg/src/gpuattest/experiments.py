"""Experiment kernels and runners: latency hiding, timing noise, profiles, user kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from . import isa, vf
from .challenge import Challenge
from .device import machine
from .device.config import A100, DeviceConfig
from .isa import Imm, Instruction, Opcode as Op, Pred, Reg
from .verifier import ChallengeSource, jitter_seed_for

LATENCY_OVERHEAD = 4        # a lone warp's loop period is global_mem_latency + 4 cycles


def _fill(k: int, base: int = 8) -> Instruction:
    """Independent busy instruction, FMA on even k and ALU on odd k."""
    d, a = base + k % 8, base + (k + 1) % 8
    if k % 2 == 0:
        return Instruction(Op.IMAD, d, (Reg(a), Imm(3), Reg(16)))
    return Instruction(Op.LEA_HI, d, (Reg(a), Reg(17), Imm(3)))


# ---------------------------------------------------------------- latency hiding


def latency_kernel(x: int, iterations: int, addr: int = 0x40) -> list:
    """Loop of exactly ``x`` instructions with one load whose value closes the loop.

    Body: LDG, counter decrement, x - 4 independent fillers, the consumer of
    the load (which also feeds the next address) and the back-edge.
    """
    if x < 4:
        raise ValueError("the loop needs at least 4 instructions")
    body = [Instruction(Op.LDG, 5, (Reg(6),)), Instruction(Op.IADD, 24, (Reg(24), Imm(-1)))]
    body += [_fill(k) for k in range(x - 4)]
    body.append(Instruction(Op.IMAD, 6, (Reg(5), Imm(0), Reg(6))))
    body.append(Instruction(Op.BRA, 0, (Imm(-(len(body) + 1)),), Pred(24)))
    return [Instruction(Op.MOV, 6, (Imm(addr),)), Instruction(Op.MOV, 24, (Imm(iterations),))] + body


def latency_config(y: int, base: DeviceConfig = A100) -> DeviceConfig:
    """One SM, one block at full occupancy, memory latency ``y``."""
    return base.with_(num_sms=1, blocks_per_sm=1, global_mem_latency=y, mem_jitter=0)


def loop_cycles(x: int, iterations: int, cfg: DeviceConfig, warps: int) -> int:
    state = machine.load_image(machine.program_image(latency_kernel(x, iterations)), cfg)
    return machine.run(state, None, timing_only=True, launch=machine.Launch(((warps, None),))).cycles


@dataclass(frozen=True)
class LatencyPoint:
    x: int
    y: int
    warps: int
    lone_period: float
    cycles_per_iteration: float

    @property
    def bound(self) -> int:
        return self.x * (self.warps // 4 - 1)

    def to_dict(self) -> dict:
        return {"X": self.x, "Y": self.y, "warps": self.warps, "lone_period": self.lone_period,
                "cycles_per_iteration": self.cycles_per_iteration}


def latency_law(x: int, y: int, base: DeviceConfig = A100, i0: int = 40, i1: int = 80) -> LatencyPoint:
    """Steady-state cycles per loop iteration per warp slot for totals (X, Y).

    Y is the load's overhead (the memory latency). The start-up transient
    cancels in the difference of two iteration counts; the result is
    normalized by the warps sharing one scheduler.
    """
    cfg = latency_config(y, base)
    warps = cfg.max_warps_per_sm
    per_sched = warps // cfg.sched_width
    lone = (loop_cycles(x, i1, cfg, 1) - loop_cycles(x, i0, cfg, 1)) / (i1 - i0)
    full = (loop_cycles(x, i1, cfg, warps) - loop_cycles(x, i0, cfg, warps)) / (i1 - i0)
    return LatencyPoint(x, y, warps, lone, full / per_sched)


def latency_grid(xs=(4, 6, 8), multiples=(1, 8, 15, 16), base: DeviceConfig = A100) -> list:
    return [latency_law(x, m * x, base) for x in xs for m in multiples]


# ---------------------------------------------------------------- timing noise


def jitter_chain(loads: int = 48, addr: int = 0x40) -> list:
    """A single warp walking a chain of dependent loads; runtime sums the jitter draws."""
    prog = [Instruction(Op.MOV, 6, (Imm(addr),))]
    for _ in range(loads):
        prog.append(Instruction(Op.LDG, 5, (Reg(6),)))
        prog.append(Instruction(Op.IMAD, 6, (Reg(5), Imm(0), Reg(6))))
    return prog


def jitter_chain_cycles(runs: int, seed: int, loads: int = 48, jitter: int = 250) -> list:
    cfg = A100.with_(num_sms=1, blocks_per_sm=1, mem_jitter=jitter)
    state = machine.load_image(machine.program_image(jitter_chain(loads)), cfg)
    launch = machine.Launch(((1, None),))
    return [machine.run(state, None, timing_only=True, launch=launch,
                        jitter_seed=jitter_seed_for(seed, i)).cycles for i in range(runs)]


# ---------------------------------------------------------------- profiles


@dataclass(frozen=True)
class ProfileResult:
    profile: str
    cycles: int
    utilization: float
    icache_share: float
    stalls: dict
    iterations: int

    def to_dict(self) -> dict:
        return {"profile": self.profile, "cycles": self.cycles, "utilization": self.utilization,
                "icache_share": self.icache_share, "stalls": self.stalls,
                "iterations": self.iterations}


def profile_run(name: str, *, num_sms: int = 1, iterations: Optional[int] = None,
                fill_seed: int = 0, seed: int = 0, base: DeviceConfig = A100,
                params: Optional[vf.VFParams] = None) -> ProfileResult:
    """Timing-only run of a built-in profile on ``num_sms`` SMs.

    Every SM runs the same kernel, so utilization on one SM is the
    utilization of the whole device.
    """
    p = (params or vf.PROFILES[name]).with_(num_sms=num_sms)
    if iterations is not None:
        p = p.with_(iterations=iterations)
    img = vf.build_vf(p, fill_seed)
    cfg = p.device_config(base)
    state = machine.load_image(img, cfg)
    ch = ChallengeSource(seed, num_sms, p.iterations).next()
    ff = None if p.self_modifying else img.fast_forward()
    r = machine.run(state, ch, timing_only=True, fast_forward=ff)
    return ProfileResult(name, r.cycles, r.utilization, machine.hazard_share(r, "icache"),
                         machine.stall_report(r), p.iterations)


# ---------------------------------------------------------------- user kernels

KERNEL_MACS_PER_ITERATION = 16
KERNEL_DATA_MASK = 0xFFC        # loads stay in the first 4 KiB of the buffer
KERNEL_CYCLE_BUDGET = 10 ** 12


def matmul_kernel(trips: int) -> list:
    """Register-tiled multiply-accumulate loop (4x4 tile per thread per step).

    Two loads per step feed the next step's 16 multiply-accumulates, so the
    load latency is covered by a whole iteration. ``trips = 0`` is an empty
    kernel.
    """
    if trips <= 0:
        return []
    base = machine.BUF_BASE
    items = [
        vf.Item(Instruction(Op.MOV, 24, (Imm(trips),))),
        vf.Item(Instruction(Op.LOP_AND, 6, (Reg(4), Imm(KERNEL_DATA_MASK)))),
        vf.Item(Instruction(Op.SHF_L, 7, (Reg(4), Imm(3)))),
        vf.Item(Instruction(Op.LOP_AND, 7, (Reg(7), Imm(KERNEL_DATA_MASK)))),
        vf.Item(Instruction(Op.LDG, 8, (Reg(6), Imm(base)))),
        vf.Item(Instruction(Op.LDG, 9, (Reg(7), Imm(base)))),
        vf.Item(Instruction(Op.LDG, 10, (Reg(6), Imm(base))), label="kloop"),
        vf.Item(Instruction(Op.LDG, 11, (Reg(7), Imm(base)))),
    ]
    for k in range(KERNEL_MACS_PER_ITERATION // 2):
        a = 12 + k
        items.append(vf.Item(Instruction(Op.IMAD, a, (Reg(8), Reg(9), Reg(a)))))
        items.append(vf.Item(Instruction(Op.LEA_HI, a, (Reg(9), Reg(a), Imm(1)))))
    # loop control keeps the FMA/ALU alternation of the multiply-accumulates
    items += [
        vf.Item(Instruction(Op.IMAD, 8, (Reg(10), Imm(1), Reg(20)))),
        vf.Item(Instruction(Op.IADD, 6, (Reg(6), Imm(4)))),
        vf.Item(Instruction(Op.IMAD, 9, (Reg(11), Imm(1), Reg(20)))),
        vf.Item(Instruction(Op.LOP_AND, 6, (Reg(6), Imm(KERNEL_DATA_MASK)))),
        vf.Item(Instruction(Op.IMAD, 7, (Reg(6), Imm(8), Reg(21)))),
        vf.Item(Instruction(Op.LOP_AND, 7, (Reg(7), Imm(KERNEL_DATA_MASK)))),
        vf.Item(Instruction(Op.IMAD, 19, (Reg(8), Reg(9), Reg(19)))),
        vf.Item(Instruction(Op.IADD, 24, (Reg(24), Imm(-1)))),
        vf.Item(Instruction(Op.BRA, 0, (Imm(0),), Pred(24)), target="kloop"),
    ]
    return items


def kernel_trips(n: int, config: DeviceConfig) -> int:
    """Loop trips per thread for an n x n x n product spread over every launched thread."""
    return math.ceil(n ** 3 / (config.threads * KERNEL_MACS_PER_ITERATION)) if n > 0 else 0


@dataclass(frozen=True)
class KernelBench:
    size: int
    baseline_cycles: int
    vf_cycles: int
    combined_cycles: int
    verification_cycles: int

    @property
    def protected_kernel_cycles(self) -> int:
        return self.combined_cycles - self.vf_cycles

    @property
    def relative_difference(self) -> float:
        if self.baseline_cycles == 0:
            return 0.0 if self.protected_kernel_cycles == 0 else math.inf
        return abs(self.protected_kernel_cycles - self.baseline_cycles) / self.baseline_cycles

    def to_dict(self) -> dict:
        return {"size": self.size, "baseline_cycles": self.baseline_cycles,
                "protected_kernel_cycles": self.protected_kernel_cycles,
                "vf_cycles": self.vf_cycles, "combined_cycles": self.combined_cycles,
                "verification_cycles": self.verification_cycles,
                "relative_difference": self.relative_difference}


def _with_kernel(image: vf.VFImage, kernel: list) -> bytes:
    """The kernel image with the user kernel inlined after the epilog."""
    items = list(image.items) + kernel
    words = isa.pack_words(isa.encode(i) for i in vf.link(items))
    data = words + image.data[len(words):]
    return isa.write_vfbin(data, image.entry, len(items))


def _kernel_ff(code_base: int, items: list, offset: int) -> Optional[tuple]:
    if not items:
        return None
    return (code_base + offset + vf.label_index(items, "kloop"), 24)


def kernel_bench(size: int, *, params: Optional[vf.VFParams] = None, num_sms: int = 1,
                 vf_iterations: int = 200, seed: int = 0, fill_seed: int = 0,
                 base: DeviceConfig = A100) -> KernelBench:
    """Compare a user kernel run alone with the same kernel launched inline after the VF.

    The protected kernel time is the combined run minus a VF-only run under
    the same challenge. The VF runs a short iteration count here; its full
    cost is reported separately as ``verification_cycles``.
    """
    p = (params or vf.PROFILES["exp1"]).with_(num_sms=num_sms)
    cfg = p.device_config(base).with_(cycle_budget=KERNEL_CYCLE_BUDGET)
    kernel = matmul_kernel(kernel_trips(size, cfg))
    short = p.with_(iterations=vf_iterations)
    img = vf.build_vf(short, fill_seed)
    ch = ChallengeSource(seed, num_sms, vf_iterations).next()

    words = isa.pack_words(isa.encode(i) for i in vf.link(kernel))
    if kernel:
        alone = machine.load_image(isa.write_vfbin(words, 0, len(kernel)), cfg)
        baseline = machine.run(alone, None, timing_only=True,
                               fast_forward=_kernel_ff(alone.code_base, kernel, 0)).cycles
    else:
        baseline = 0

    st_vf = machine.load_image(img, cfg)
    vf_only = machine.run(st_vf, ch, timing_only=True).cycles
    if kernel:
        st_all = machine.load_image(_with_kernel(img, kernel), cfg)
        combined = machine.run(st_all, ch, timing_only=True,
                               fast_forward=_kernel_ff(st_all.code_base, kernel,
                                                       img.code_words)).cycles
    else:
        combined = vf_only

    full = p.with_(iterations=vf.PROFILES["exp1"].iterations if params is None else p.iterations)
    fimg = vf.build_vf(full, fill_seed)
    fst = machine.load_image(fimg, cfg)
    fch = Challenge(ch.seeds, full.iterations, ch.nonce)
    verification = machine.run(fst, fch, timing_only=True,
                               fast_forward=None if full.self_modifying else fimg.fast_forward()).cycles
    return KernelBench(size, baseline, vf_only, combined, verification)
