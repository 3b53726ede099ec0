"""Machine state, kernel launch and run results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import isa
from ..challenge import Challenge
from . import engine as E
from .config import DeviceConfig

# memory map (bytes)
PARAM_ITER = 0x0
PARAM_NONCE = 0x8
RESULT_GRID = 0x40
SEED_BASE = 0x100
RESULT_BLOCK_BASE = 0x2100
BUF_BASE = 0x10000
MAX_SMS = (RESULT_BLOCK_BASE - SEED_BASE) // 8
MAX_BLOCKS = (BUF_BASE - RESULT_BLOCK_BASE) // 8
MAX_IMAGE_BYTES = 1 << 26

# launch ABI: registers preset per thread
ABI_SM = 0
ABI_BLOCK = 1
ABI_WARP_IN_BLOCK = 2
ABI_LANE = 3
ABI_THREAD = 4

STALL_NAMES = ("icache", "memory", "pipeline", "none")


class DeviceError(RuntimeError):
    pass


class ImageTooLarge(DeviceError):
    pass


class OutOfRange(DeviceError):
    pass


class Trap(DeviceError):
    def __init__(self, pc: int, kind: str, warp: int = -1):
        super().__init__(f"trap ({kind}) at pc {pc} in warp {warp}")
        self.pc = pc
        self.kind = kind
        self.warp = warp


class NonTermination(DeviceError):
    pass


@dataclass
class MachineState:
    config: DeviceConfig
    memory: np.ndarray          # uint8, whole address space
    code_base: int              # word index of image word 0
    entry: int                  # absolute word index of the entry point
    code_end: int               # absolute word index where warps halt
    image_words: int
    line_slot: np.ndarray
    tags: np.ndarray
    head: np.ndarray
    count: np.ndarray
    craw: np.ndarray
    cycle: int = 0

    @property
    def data_size(self) -> int:
        """Bytes of the loaded image (the measured region)."""
        return self.image_words * isa.WORD_BYTES

    @property
    def code_words(self) -> int:
        return self.code_end - self.code_base

    @property
    def buffer_base(self) -> int:
        return self.code_base * isa.WORD_BYTES

    def spare_base(self) -> int:
        """First byte after the image, free for relocated copies."""
        return self.buffer_base + self.data_size

    def copy(self) -> "MachineState":
        return MachineState(
            self.config, self.memory.copy(), self.code_base, self.entry, self.code_end,
            self.image_words, self.line_slot.copy(), self.tags.copy(), self.head.copy(),
            self.count.copy(), self.craw.copy(), self.cycle,
        )

    def read_word(self, addr: int) -> isa.Word128:
        b = addr * isa.WORD_BYTES
        return isa.Word128.from_bytes(bytes(self.memory[b:b + isa.WORD_BYTES]))

    def write_word(self, addr: int, word: isa.Word128) -> None:
        """Raw store of a whole word at absolute word index ``addr`` (no cache effect)."""
        b = addr * isa.WORD_BYTES
        self.memory[b:b + isa.WORD_BYTES] = np.frombuffer(word.to_bytes(), dtype=np.uint8)

    def u64(self, byte_addr: int) -> int:
        return int(self.memory[byte_addr:byte_addr + 8].view(np.uint64)[0])


@dataclass
class RunResult:
    checksum: int
    per_sm: list
    per_block: list
    cycles: int
    issued: int
    useful_issued: int
    sm_idle: np.ndarray                 # (num_sms, 4) idle issue slots by cause
    warp_stalls: np.ndarray             # (warps, 4) hazard cycles charged per warp
    icache_misses: int
    stale_fetches: int
    spill_ops: int
    ff_skipped: int
    ff_period: int
    num_sms: int
    sched_width: int
    memory: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def slots(self) -> int:
        return self.cycles * self.sched_width * self.num_sms

    @property
    def utilization(self) -> float:
        """Useful issue slots over all issue slots of the run."""
        return self.useful_issued / self.slots if self.slots else 0.0

    def seconds(self, clock_hz: float) -> float:
        return self.cycles / clock_hz

    def to_dict(self) -> dict:
        return {
            "checksum": self.checksum,
            "per_sm": self.per_sm,
            "cycles": self.cycles,
            "issued": self.issued,
            "useful_issued": self.useful_issued,
            "utilization": self.utilization,
            "stalls": stall_report(self),
            "warp_stalls": {n: int(self.warp_stalls[:, i].sum()) for i, n in enumerate(STALL_NAMES[:3])},
            "icache_misses": self.icache_misses,
            "stale_fetches": self.stale_fetches,
            "spill_ops": self.spill_ops,
            "fast_forward_cycles": self.ff_skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _as_vfbin(image) -> bytes:
    if hasattr(image, "to_vfbin"):
        return image.to_vfbin()
    return bytes(image)


def load_image(image, config: DeviceConfig, spare_bytes: Optional[int] = None) -> MachineState:
    """Place a .vfbin image at BUF_BASE and warm the instruction caches from its entry."""
    blob = _as_vfbin(image)
    header, body = isa.read_vfbin(blob)
    if len(body) > MAX_IMAGE_BYTES:
        raise ImageTooLarge(f"image of {len(body)} bytes exceeds {MAX_IMAGE_BYTES}")
    if config.num_sms > MAX_SMS or config.num_sms * config.blocks_per_sm > MAX_BLOCKS:
        raise ImageTooLarge("parameter block cannot describe this many SMs/blocks")
    if header.entry > header.code_words or (header.code_words and header.entry == header.code_words
                                            and header.word_count == 0):
        raise ValueError("entry outside code region")
    if spare_bytes is None:
        spare_bytes = 2 * len(body) + 4096
    total = BUF_BASE + len(body) + spare_bytes
    total = (total + 127) // 128 * 128
    mem = np.zeros(total, dtype=np.uint8)
    mem[BUF_BASE:BUF_BASE + len(body)] = np.frombuffer(body, dtype=np.uint8)
    code_base = BUF_BASE // isa.WORD_BYTES
    line_words = config.icache_line_bytes // isa.WORD_BYTES
    cap = config.l2_icache_bytes // config.icache_line_bytes
    nlines = total // config.icache_line_bytes
    ns = config.num_sms
    line_slot = np.full((ns, nlines), -1, dtype=np.int64)
    tags = np.full((ns, cap), -1, dtype=np.int64)
    head = np.zeros(ns, dtype=np.int64)
    count = np.zeros(ns, dtype=np.int64)
    craw = np.zeros((ns, cap, line_words, 2), dtype=np.uint64)
    if line_words != 8:
        raise DeviceError("the engine models 128-byte icache lines only")
    state = MachineState(config, mem, code_base, code_base + header.entry,
                         code_base + header.code_words, header.word_count,
                         line_slot, tags, head, count, craw)
    end = code_base + header.code_words
    if end > state.entry:
        E.warm_icache(state.entry // line_words, (end + line_words - 1) // line_words, ns,
                      mem.view(np.uint64), line_slot, tags, head, count, craw, cap, line_words)
    return state


def write_code(state: MachineState, addr: int, value: int, field: str = "imm") -> None:
    """Patch the immediate field of image word ``addr`` in backing memory only.

    Cached copies keep the old encoding until their line is evicted or an
    ICINV runs, exactly like an STC from inside the kernel.
    """
    if field != "imm":
        raise ValueError(f"unsupported field {field!r}")
    if not 0 <= addr < state.code_words:
        raise OutOfRange(f"code word {addr} outside code region of {state.code_words} words")
    if not 0 <= value <= isa.MASK32:
        raise OutOfRange("value must be a 32-bit unsigned integer")
    b = (state.code_base + addr) * isa.WORD_BYTES + isa.IMM_BYTE_OFFSET
    state.memory[b:b + 4] = np.frombuffer(int(value).to_bytes(4, "little"), dtype=np.uint8)


@dataclass(frozen=True)
class Launch:
    """Thread blocks per SM, in launch order: (warps, entry word or None for the image entry).

    ``guests`` lists positions in ``blocks`` that share the SM without being
    part of the kernel's grid: their block and thread ids come after every
    regular block, so the regular blocks see the same ids as in a plain launch.
    """

    blocks: tuple
    guests: tuple = ()

    @classmethod
    def full(cls, config: DeviceConfig) -> "Launch":
        return cls(tuple((config.warps_per_block, None) for _ in range(config.blocks_per_sm)))


def _build_tables(state: MachineState, launch: Launch, lanes: int):
    cfg = state.config
    ns = cfg.num_sms
    width = cfg.sched_width
    wsm, wsp, wblk, wpc = [], [], [], []
    bsm, bfirst, bnw = [], [], []
    sm_blocks = np.zeros((ns, len(launch.blocks)), dtype=np.int64)
    guests = set(launch.guests)
    order = ([(s, j) for s in range(ns) for j in range(len(launch.blocks)) if j not in guests]
             + [(s, j) for s in range(ns) for j in sorted(guests)])
    abi_block, abi_warp0, n = {}, {}, 0
    for i, (s, j) in enumerate(order):
        abi_block[s, j] = i
        abi_warp0[s, j] = n
        n += launch.blocks[j][0]
    abi, ordinal, abi_bids = [], [], []
    for s in range(ns):
        slot = 0
        for j, (nwarps, entry) in enumerate(launch.blocks):
            bid = len(bsm)
            sm_blocks[s, j] = bid
            abi_bids.append(abi_block[s, j])
            bsm.append(s)
            bfirst.append(len(wsm))
            bnw.append(nwarps)
            start = state.entry if entry is None else entry
            for k in range(nwarps):
                wsm.append(s)
                wsp.append(slot % width)
                wblk.append(bid)
                wpc.append(start)
                abi.append((s, abi_block[s, j], k))
                ordinal.append(abi_warp0[s, j] + k)
                slot += 1
    nw = len(wsm)
    sp_lists = [[[] for _ in range(width)] for _ in range(ns)]
    for w in range(nw):
        sp_lists[wsm[w]][wsp[w]].append(w)
    kmax = max(1, max(len(x) for row in sp_lists for x in row))
    sp_list = np.zeros((ns, width, kmax), dtype=np.int64)
    sp_n = np.zeros((ns, width), dtype=np.int64)
    for s in range(ns):
        for p in range(width):
            sp_n[s, p] = len(sp_lists[s][p])
            sp_list[s, p, :len(sp_lists[s][p])] = sp_lists[s][p]
    regs = np.zeros((nw, 32, lanes), dtype=np.uint64)
    if nw:
        a = np.array(abi, dtype=np.uint64)
        lane = np.arange(lanes, dtype=np.uint64)
        regs[:, ABI_SM, :] = a[:, 0:1]
        regs[:, ABI_BLOCK, :] = a[:, 1:2]
        regs[:, ABI_WARP_IN_BLOCK, :] = a[:, 2:3]
        regs[:, ABI_LANE, :] = lane[None, :]
        # global thread id counts every lane of every warp in launch order
        regs[:, ABI_THREAD, :] = (np.array(ordinal, dtype=np.uint64)[:, None]
                                  * np.uint64(cfg.warp_size) + lane[None, :])
    arr = lambda x: np.array(x, dtype=np.int64)
    return (arr(wsm), arr(wsp), arr(wblk), arr(wpc), np.zeros(nw, dtype=np.int64),
            arr(bsm), arr(bfirst), arr(bnw), sm_blocks,
            np.full(ns, len(launch.blocks), dtype=np.int64), sp_list, sp_n, regs, abi_bids)


def write_challenge(mem: np.ndarray, challenge: Challenge, num_sms: int) -> None:
    if len(challenge.seeds) < num_sms:
        raise ValueError(f"challenge carries {len(challenge.seeds)} seeds for {num_sms} SMs")
    m64 = mem.view(np.uint64)
    m64[PARAM_ITER // 8] = challenge.iterations
    m64[PARAM_NONCE // 8] = challenge.nonce & isa.MASK64
    m64[SEED_BASE // 8:SEED_BASE // 8 + num_sms] = np.array(challenge.seeds[:num_sms], dtype=np.uint64)


def run(state: MachineState, challenge: Optional[Challenge] = None, *,
        timing_only: bool = False, launch: Optional[Launch] = None,
        fast_forward: Optional[tuple] = None, keep_memory: bool = False,
        raise_on_trap: bool = True, jitter_seed: Optional[int] = None) -> RunResult:
    """Execute the loaded image on every SM and return outputs plus timing.

    The state is not modified: the run works on copies of memory and caches.
    ``timing_only`` simulates lane 0 only; control flow in the kernels used
    here is warp-uniform so cycle counts are unchanged, but outputs are not
    meaningful. ``fast_forward=(loop_pc, counter_reg)`` enables exact
    skipping of repeated loop periods in timing-only runs (absolute pc).
    ``jitter_seed`` overrides the config's seed for the memory-latency noise.
    """
    cfg = state.config
    launch = launch or Launch.full(cfg)
    lanes = 1 if timing_only else cfg.warp_size
    mem = state.memory.copy()
    if challenge is not None:
        write_challenge(mem, challenge, cfg.num_sms)
    tables = _build_tables(state, launch, lanes)
    line_slot, tags, head, count, craw = (state.line_slot.copy(), state.tags.copy(),
                                          state.head.copy(), state.count.copy(), state.craw.copy())
    c = np.zeros(E.NCFG, dtype=np.int64)
    c[E.C_NUM_SMS] = cfg.num_sms
    c[E.C_WIDTH] = cfg.sched_width
    c[E.C_FMA_LAT] = cfg.fma_dispatch_latency
    c[E.C_ALU_LAT] = cfg.alu_dispatch_latency
    c[E.C_RAW_LAT] = cfg.raw_dependency_latency
    c[E.C_MEM_LAT] = cfg.global_mem_latency
    c[E.C_JITTER] = cfg.mem_jitter
    c[E.C_REG_LAT] = cfg.register_access_latency
    c[E.C_SHM_LAT] = cfg.shared_mem_latency
    c[E.C_RPT] = cfg.regs_per_thread
    c[E.C_CAP] = cfg.l2_icache_bytes // cfg.icache_line_bytes
    c[E.C_PENALTY] = cfg.icache_fetch_penalty
    c[E.C_BUDGET] = cfg.cycle_budget
    c[E.C_SEED] = (cfg.jitter_seed if jitter_seed is None else jitter_seed) & ((1 << 63) - 1)
    c[E.C_LANES] = lanes
    c[E.C_FF_PC] = -1
    c[E.C_FF_REG] = 0
    c[E.C_FF_MARGIN] = 3
    if fast_forward is not None and timing_only:
        c[E.C_FF_PC], c[E.C_FF_REG] = fast_forward
    c[E.C_CODE_END] = state.code_end
    c[E.C_CAPACITY] = cfg.max_warps_per_sm
    ns = cfg.num_sms
    nw = len(tables[0])
    sm_issued = np.zeros(ns, dtype=np.int64)
    sm_useful = np.zeros(ns, dtype=np.int64)
    sm_idle = np.zeros((ns, 4), dtype=np.int64)
    w_stall = np.zeros((nw, 4), dtype=np.int64)
    sm_imiss = np.zeros(ns, dtype=np.int64)
    sm_stale = np.zeros(ns, dtype=np.int64)
    w_issued = np.zeros(nw, dtype=np.int64)
    info = np.zeros(E.NINFO, dtype=np.int64)
    (wsm, wsp, wblk, wpc, wstatus, bsm, bfirst, bnw, sm_blocks, sm_nblocks,
     sp_list, sp_n, regs, abi_bids) = tables
    if np.all(wpc == state.code_end):
        # nothing to execute: every warp starts at the halt address
        return RunResult(checksum=0, per_sm=[0] * ns, per_block=[0] * len(bsm), cycles=0,
                         issued=0, useful_issued=0, sm_idle=sm_idle, warp_stalls=w_stall,
                         icache_misses=0, stale_fetches=0, spill_ops=0, ff_skipped=0,
                         ff_period=0, num_sms=ns, sched_width=cfg.sched_width,
                         memory=mem if keep_memory else None)
    E.simulate(mem, mem.view(np.uint32), mem.view(np.uint64), c,
               wsm, wsp, wblk, wpc, wstatus, bsm, bfirst, bnw, sm_blocks, sm_nblocks,
               sp_list, sp_n, regs, line_slot, tags, head, count, craw,
               E._SHAPES, E._PIPES,
               sm_issued, sm_useful, sm_idle, w_stall, sm_imiss, sm_stale, w_issued, info)
    status = int(info[E.I_STATUS])
    if status == E.R_BUDGET:
        raise NonTermination(f"cycle budget {cfg.cycle_budget} exhausted")
    if status != E.R_OK and raise_on_trap:
        kind = {E.R_TRAP_ILLEGAL: "illegal instruction", E.R_TRAP_FETCH: "fetch out of range",
                E.R_TRAP_DATA: "data access out of range"}[status]
        raise Trap(int(info[E.I_TRAP_PC]), kind, int(info[E.I_TRAP_WARP]))
    cycles = int(info[E.I_CYCLES])
    # slots after an SM's last issue (pipeline drain) are idle with no warp to blame
    sm_idle[:, STALL_NAMES.index("none")] += (cycles * cfg.sched_width - sm_issued
                                              - sm_idle.sum(axis=1))
    m64 = mem.view(np.uint64)
    nblocks = len(bsm)
    per_block = [int(x) for x in m64[RESULT_BLOCK_BASE // 8:RESULT_BLOCK_BASE // 8 + nblocks]]
    per_sm = [0] * ns
    for bid, s in enumerate(bsm):
        per_sm[s] = (per_sm[s] + per_block[abi_bids[bid]]) & isa.MASK64
    return RunResult(
        checksum=int(m64[RESULT_GRID // 8]), per_sm=per_sm, per_block=per_block,
        cycles=cycles, issued=int(sm_issued.sum()),
        useful_issued=int(sm_useful.sum()), sm_idle=sm_idle, warp_stalls=w_stall,
        icache_misses=int(sm_imiss.sum()), stale_fetches=int(sm_stale.sum()),
        spill_ops=int(info[E.I_SPILL_OPS]), ff_skipped=int(info[E.I_FF_SKIPPED]),
        ff_period=int(info[E.I_FF_PERIOD]), num_sms=ns, sched_width=cfg.sched_width,
        memory=mem if keep_memory else None,
    )


def stall_report(result: RunResult) -> dict:
    """Idle issue slots partitioned by cause; the parts sum to all idle slots."""
    totals = result.sm_idle.sum(axis=0)
    return {name: int(totals[i]) for i, name in enumerate(STALL_NAMES)}


def hazard_share(result: RunResult, kind: str = "icache") -> float:
    """Share of ``kind`` among hazard stalls (icache + memory + pipeline)."""
    rep = stall_report(result)
    hazard = rep["icache"] + rep["memory"] + rep["pipeline"]
    return rep[kind] / hazard if hazard else 0.0


def program_image(program: Sequence, data: bytes = b"", entry: int = 0) -> bytes:
    """Assemble a list of Instructions (or asm lines) into a .vfbin blob."""
    instrs = [isa.parse_asm(x) if isinstance(x, str) else x for x in program]
    body = isa.pack_words(isa.encode(i) for i in instrs)
    pad = (-len(data)) % isa.WORD_BYTES
    return isa.write_vfbin(body + data + b"\0" * pad, entry, len(instrs))
