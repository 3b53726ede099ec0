"""Cycle-level warp scheduler and functional core, compiled with numba.

Everything here works on flat numpy arrays so the hot loop stays in machine
code. ``machine.py`` owns the arrays and translates results back into Python
objects. Memory is passed three times (uint8/uint32/uint64 views of one
buffer) so word, load and atomic accesses need no byte shuffling.
"""

import numpy as np
from numba import njit

# decoded instruction fields
F_OP = 0
F_DST = 1
F_PRED = 2
F_PREG = 3
F_PNEG = 4
F_NSRC = 5
F_K0 = 6       # source kinds 6..8: 0 register, 1 immediate
F_R0 = 9       # source registers 9..11
F_IMM = 12     # sign-extended immediate
F_WAIT = 13
F_RBAR = 14
F_WBAR = 15
F_STALL = 16
F_VALID = 17
F_PIPE = 18
F_WRITES = 19
NF = 20

# opcodes (mirror isa.Opcode)
OP_NOP = 0x00
OP_IMAD = 0x01
OP_LEA_HI = 0x02
OP_SHF_L = 0x03
OP_SHF_R = 0x04
OP_LOP_XOR = 0x05
OP_LOP_AND = 0x06
OP_IADD = 0x07
OP_MOV = 0x08
OP_LDG = 0x10
OP_STG = 0x11
OP_STC = 0x12
OP_ATOM_ADD = 0x13
OP_BAR_SYNC = 0x20
OP_BRA = 0x21
OP_LEPC = 0x22
OP_ICINV = 0x23

PIPE_ALU = 0
PIPE_FMA = 1
PIPE_LSU = 2
PIPE_CTRL = 3
NPIPE = 4

# shape codes
SH_NONE = 0
SH_ALU3 = 1
SH_ALU2 = 2
SH_ALU1 = 3
SH_LOAD = 4
SH_STORE = 5
SH_BRANCH = 6
SH_DST = 7

# cfg indices
C_NUM_SMS = 0
C_WIDTH = 1
C_FMA_LAT = 2
C_ALU_LAT = 3
C_RAW_LAT = 4
C_MEM_LAT = 5
C_JITTER = 6
C_REG_LAT = 7
C_SHM_LAT = 8
C_RPT = 9
C_CAP = 10
C_PENALTY = 11
C_BUDGET = 12
C_SEED = 13
C_LANES = 14
C_FF_PC = 15
C_FF_REG = 16
C_CODE_END = 17
C_CAPACITY = 18
C_FF_MARGIN = 19
NCFG = 20

# stall categories
ST_ICACHE = 0
ST_MEMORY = 1
ST_PIPE = 2
ST_NONE = 3

# result status
R_OK = 0
R_TRAP_ILLEGAL = 1
R_TRAP_FETCH = 2
R_TRAP_DATA = 3
R_BUDGET = 4

# info slots
I_STATUS = 0
I_TRAP_PC = 1
I_TRAP_WARP = 2
I_CYCLES = 3
I_FF_SKIPPED = 4
I_FF_PERIOD = 5
I_LAST_ISSUE = 6
I_SPILL_OPS = 7
NINFO = 8

BIG = np.int64(1) << np.int64(62)

_SHAPES = np.zeros(256, dtype=np.int64) - 1
_PIPES = np.zeros(256, dtype=np.int64)
for _op, _sh, _pp in (
    (OP_NOP, SH_NONE, PIPE_CTRL), (OP_IMAD, SH_ALU3, PIPE_FMA), (OP_LEA_HI, SH_ALU3, PIPE_ALU),
    (OP_SHF_L, SH_ALU2, PIPE_ALU), (OP_SHF_R, SH_ALU2, PIPE_ALU), (OP_LOP_XOR, SH_ALU2, PIPE_ALU),
    (OP_LOP_AND, SH_ALU2, PIPE_ALU), (OP_IADD, SH_ALU2, PIPE_ALU), (OP_MOV, SH_ALU1, PIPE_ALU),
    (OP_LDG, SH_LOAD, PIPE_LSU), (OP_STG, SH_STORE, PIPE_LSU), (OP_STC, SH_STORE, PIPE_LSU),
    (OP_ATOM_ADD, SH_STORE, PIPE_LSU), (OP_BAR_SYNC, SH_NONE, PIPE_CTRL),
    (OP_BRA, SH_BRANCH, PIPE_CTRL), (OP_LEPC, SH_DST, PIPE_ALU), (OP_ICINV, SH_NONE, PIPE_CTRL),
):
    _SHAPES[_op] = _sh
    _PIPES[_op] = _pp


@njit(cache=True)
def decode_into(lo, hi, out, shapes, pipes):
    """Decode one word into ``out``; F_VALID is 0 for anything decode() rejects."""
    a = np.int64(lo)
    b = np.int64(hi)
    for i in range(NF):
        out[i] = 0
    op = a & 0xFF
    out[F_OP] = op
    sh = shapes[op]
    if sh < 0:
        return
    # reserved: bits 72-104 -> hi bits 8..40, bits 126-127 -> hi bits 62..63
    if (b >> 8) & ((np.int64(1) << 33) - 1):
        return
    if (b >> 62) & 3:
        return
    dst = (a >> 8) & 0x1F
    haspred = (a >> 13) & 1
    nsrc = (a >> 38) & 3
    imm = ((a >> 40) & 0xFFFFFF) | ((b & 0xFF) << 24)
    if haspred == 0 and (a >> 14) & 0x3F:
        return
    nimm = 0
    for i in range(3):
        slot = (a >> (20 + 6 * i)) & 0x3F
        if i >= nsrc:
            if slot:
                return
            continue
        if slot & 1:
            if slot >> 1:
                return
            nimm += 1
            out[F_K0 + i] = 1
        else:
            out[F_R0 + i] = slot >> 1
    k0 = out[F_K0]
    k1 = out[F_K0 + 1]
    k2 = out[F_K0 + 2]
    if nimm > 1:
        return
    if nimm == 0 and imm != 0:
        return
    # operand shape
    ok = False
    if sh == SH_ALU3:
        ok = nsrc == 3
    elif sh == SH_ALU2:
        ok = nsrc == 2
    elif sh == SH_ALU1:
        ok = nsrc == 1
    elif sh == SH_LOAD:
        ok = (nsrc == 1 or nsrc == 2) and k0 == 0 and (nsrc == 1 or k1 == 1)
    elif sh == SH_STORE:
        ok = ((nsrc == 2 or nsrc == 3) and k0 == 0 and k1 == 0
              and (nsrc == 2 or k2 == 1))
    elif sh == SH_BRANCH:
        ok = nsrc == 1
    else:
        ok = nsrc == 0
    if not ok:
        return
    if (sh == SH_NONE or sh == SH_STORE or sh == SH_BRANCH) and dst != 0:
        return
    if imm & 0x80000000:
        imm = imm - (np.int64(1) << 32)
    ctrl = (b >> 41) & 0x1FFFFF
    out[F_DST] = dst
    out[F_PRED] = haspred
    out[F_PREG] = (a >> 14) & 0x1F
    out[F_PNEG] = (a >> 19) & 1
    out[F_NSRC] = nsrc
    out[F_IMM] = imm
    out[F_WAIT] = (ctrl >> 4) & 0x3F
    out[F_RBAR] = (((ctrl >> 10) & 7) - 1) & 7
    out[F_WBAR] = (((ctrl >> 13) & 7) - 1) & 7
    out[F_STALL] = (ctrl >> 17) & 0xF
    out[F_PIPE] = pipes[op]
    out[F_WRITES] = 1 if (sh == SH_ALU3 or sh == SH_ALU2 or sh == SH_ALU1
                          or sh == SH_LOAD or sh == SH_DST) else 0
    out[F_VALID] = 1


@njit(cache=True, inline="always")
def _shr(x, n):
    # shift amounts of 64 or more flush to zero instead of wrapping
    if n >= np.uint64(64):
        return np.uint64(0)
    return x >> n


@njit(cache=True, inline="always")
def _shl(x, n):
    if n >= np.uint64(64):
        return np.uint64(0)
    return x << n


@njit(cache=True)
def _mix(x):
    x = np.uint64(x)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


@njit(cache=True)
def jitter_draw(seed, warp, seq, span):
    if span <= 0:
        return 0
    h = _mix(np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
             ^ _mix(np.uint64(warp) + np.uint64(0x632BE59BD9B4E019))
             ^ _mix(np.uint64(seq) * np.uint64(0xD6E8FEB86659FD93) + np.uint64(1)))
    return np.int64(h % np.uint64(span + 1))


@njit(cache=True)
def icache_insert(sm, line, mem64, line_slot, tags, head, count, craw, cap, line_words):
    if line_slot[sm, line] >= 0:
        return
    if count[sm] == cap:
        slot = head[sm]
        old = tags[sm, slot]
        line_slot[sm, old] = -1
        head[sm] = (slot + 1) % cap
    else:
        slot = (head[sm] + count[sm]) % cap
        count[sm] += 1
    tags[sm, slot] = line
    line_slot[sm, line] = slot
    base = line * line_words
    for k in range(line_words):
        craw[sm, slot, k, 0] = mem64[2 * (base + k)]
        craw[sm, slot, k, 1] = mem64[2 * (base + k) + 1]


@njit(cache=True)
def icache_clear(sm, line_slot, tags, head, count, cap):
    for i in range(count[sm]):
        slot = (head[sm] + i) % cap
        line_slot[sm, tags[sm, slot]] = -1
        tags[sm, slot] = -1
    head[sm] = 0
    count[sm] = 0


@njit(cache=True)
def warm_icache(first_line, last_line, num_sms, mem64, line_slot, tags, head, count,
                craw, cap, line_words):
    for sm in range(num_sms):
        n = 0
        for line in range(first_line, last_line):
            if n >= cap:
                break
            icache_insert(sm, line, mem64, line_slot, tags, head, count, craw, cap, line_words)
            n += 1


@njit(cache=True)
def simulate(mem8, mem32, mem64, cfg,
             w_sm, w_sp, w_blk, w_pc, w_status,
             b_sm, b_first, b_nw, sm_blocks, sm_nblocks,
             sp_list, sp_n,
             regs,
             line_slot, tags, head, count, craw,
             shapes, pipes,
             sm_issued, sm_useful, sm_idle, w_stall, sm_imiss, sm_stale, w_issued,
             info):
    num_sms = cfg[C_NUM_SMS]
    width = cfg[C_WIDTH]
    raw_lat = cfg[C_RAW_LAT]
    mem_lat = cfg[C_MEM_LAT]
    jit = cfg[C_JITTER]
    reg_lat = cfg[C_REG_LAT]
    shm_lat = cfg[C_SHM_LAT]
    rpt = cfg[C_RPT]
    cap = cfg[C_CAP]
    penalty = cfg[C_PENALTY]
    budget = cfg[C_BUDGET]
    seed = cfg[C_SEED]
    lanes = cfg[C_LANES]
    ff_pc = cfg[C_FF_PC]
    ff_reg = cfg[C_FF_REG]
    ff_margin = cfg[C_FF_MARGIN]
    code_end = cfg[C_CODE_END]
    capacity = cfg[C_CAPACITY]
    line_words = 8
    nwords = mem64.shape[0] // 2
    nbytes = mem8.shape[0]
    nw = w_sm.shape[0]
    nb = b_sm.shape[0]
    max_lat = mem_lat + jit

    disp = np.zeros(NPIPE, dtype=np.int64)
    disp[PIPE_ALU] = cfg[C_ALU_LAT]
    disp[PIPE_FMA] = cfg[C_FMA_LAT]
    disp[PIPE_LSU] = 1
    disp[PIPE_CTRL] = 1

    # per-warp timing state
    next_issue = np.zeros(nw, dtype=np.int64)
    reg_ready = np.zeros((nw, 32), dtype=np.int64)
    reg_mem = np.zeros((nw, 32), dtype=np.int64)       # 1 if pending value comes from memory
    load_issue = np.zeros((nw, 32), dtype=np.int64)
    sb_ready = np.zeros((nw, 6), dtype=np.int64)
    sb_mem = np.zeros((nw, 6), dtype=np.int64)
    sb_issue = np.zeros((nw, 6), dtype=np.int64)
    cur = np.zeros((nw, NF), dtype=np.int64)
    cur_valid = np.zeros(nw, dtype=np.int64)
    fetch_wait = np.zeros(nw, dtype=np.int64) - 1
    spill_left = np.zeros(nw, dtype=np.int64) - 1
    load_seq = np.zeros(nw, dtype=np.int64)
    bar_since = np.zeros(nw, dtype=np.int64)
    acct_until = np.zeros(nw, dtype=np.int64)

    rr = np.zeros((num_sms, width), dtype=np.int64)
    port_free = np.zeros((num_sms, width, NPIPE), dtype=np.int64)

    b_state = np.zeros(nb, dtype=np.int64)     # 0 pending, 1 resident, 2 done
    b_arrived = np.zeros(nb, dtype=np.int64)
    b_live = np.zeros(nb, dtype=np.int64)
    sm_free = np.zeros(num_sms, dtype=np.int64) + capacity
    sm_nextb = np.zeros(num_sms, dtype=np.int64)

    maxpend = nw + 1
    pend_line = np.zeros((num_sms, maxpend), dtype=np.int64)
    pend_time = np.zeros((num_sms, maxpend), dtype=np.int64)
    pend_n = np.zeros(num_sms, dtype=np.int64)

    gval = np.zeros(lanes, dtype=np.int64)
    tmp = np.zeros(NF, dtype=np.int64)

    # fast-forward bookkeeping
    ff_on = ff_pc >= 0 and lanes == 1
    nsnap = 6
    snap_len = nw * 48 + num_sms * width * (NPIPE + 1) + nb * 3 + num_sms * 2 + 4
    snaps = np.zeros((nsnap, snap_len), dtype=np.int64)
    snap_t = np.zeros(nsnap, dtype=np.int64)
    snap_ctr = np.zeros((nsnap, nw), dtype=np.int64)
    snap_seq = np.zeros((nsnap, nw), dtype=np.int64)
    snap_wiss = np.zeros((nsnap, nw), dtype=np.int64)
    snap_wst = np.zeros((nsnap, nw, 4), dtype=np.int64)
    snap_smi = np.zeros((nsnap, num_sms, 8), dtype=np.int64)
    snap_slack = np.zeros(nsnap, dtype=np.int64)
    snap_count = 0
    min_slack = BIG
    cur_snap = np.zeros(snap_len, dtype=np.int64)

    # admit initial blocks
    live_warps = 0
    for s in range(num_sms):
        while sm_nextb[s] < sm_nblocks[s]:
            bid = sm_blocks[s, sm_nextb[s]]
            if b_nw[bid] > sm_free[s]:
                break
            sm_free[s] -= b_nw[bid]
            b_state[bid] = 1
            b_live[bid] = b_nw[bid]
            for k in range(b_nw[bid]):
                w_status[b_first[bid] + k] = 1
            live_warps += b_nw[bid]
            sm_nextb[s] += 1
    for bid in range(nb):
        if b_state[bid] == 0:
            live_warps += 0
    pending_blocks = 0
    for bid in range(nb):
        if b_state[bid] == 0:
            pending_blocks += 1

    now = np.int64(0)
    last_issue = np.int64(-1)
    max_comp = np.int64(0)
    spill_ops = np.int64(0)
    status = R_OK
    ff_done = False

    while live_warps > 0 or pending_blocks > 0:
        if now > budget:
            status = R_BUDGET
            break
        # line fills arriving now
        for s in range(num_sms):
            i = 0
            while i < pend_n[s]:
                if pend_time[s, i] <= now:
                    icache_insert(s, pend_line[s, i], mem64, line_slot, tags, head, count,
                                  craw, cap, line_words)
                    pend_n[s] -= 1
                    pend_line[s, i] = pend_line[s, pend_n[s]]
                    pend_time[s, i] = pend_time[s, pend_n[s]]
                else:
                    i += 1
        any_issue = False
        next_event = BIG
        for s in range(num_sms):
            for p in range(width):
                n = sp_n[s, p]
                issued_w = -1
                best_t = BIG
                best_r = ST_NONE
                for k in range(n):
                    idx = (rr[s, p] + k) % n
                    w = sp_list[s, p, idx]
                    st = w_status[w]
                    if st != 1:
                        if st == 2 and best_t == BIG:
                            best_r = ST_PIPE
                        continue
                    # find why (and until when) the warp cannot issue
                    t_block = np.int64(0)
                    reason = ST_NONE
                    if next_issue[w] > now:
                        t_block = next_issue[w]
                        reason = ST_PIPE
                    elif cur_valid[w] == 0:
                        pc = w_pc[w]
                        if pc < 0 or pc >= nwords:
                            status = R_TRAP_FETCH
                            info[I_TRAP_PC] = pc
                            info[I_TRAP_WARP] = w
                            break
                        line = pc // line_words
                        slot = line_slot[s, line]
                        if slot >= 0:
                            kk = pc - line * line_words
                            lo = craw[s, slot, kk, 0]
                            hi = craw[s, slot, kk, 1]
                            if lo != mem64[2 * pc] or hi != mem64[2 * pc + 1]:
                                sm_stale[s] += 1
                            decode_into(lo, hi, tmp, shapes, pipes)
                            for f in range(NF):
                                cur[w, f] = tmp[f]
                            cur_valid[w] = 1
                            fetch_wait[w] = -1
                            if tmp[F_VALID] == 0:
                                status = R_TRAP_ILLEGAL
                                info[I_TRAP_PC] = pc
                                info[I_TRAP_WARP] = w
                                break
                        else:
                            if fetch_wait[w] < 0:
                                arr = -1
                                for q in range(pend_n[s]):
                                    if pend_line[s, q] == line:
                                        arr = pend_time[s, q]
                                if arr < 0:
                                    arr = now + penalty
                                    pend_line[s, pend_n[s]] = line
                                    pend_time[s, pend_n[s]] = arr
                                    pend_n[s] += 1
                                    sm_imiss[s] += 1
                                fetch_wait[w] = arr
                            t_block = fetch_wait[w]
                            if t_block <= now:
                                t_block = now + 1
                            reason = ST_ICACHE
                    if t_block == 0:
                        c = cur[w]
                        # operand readiness
                        t_op = np.int64(0)
                        r_op = ST_PIPE
                        if c[F_PRED] == 1:
                            r = c[F_PREG]
                            if reg_ready[w, r] > t_op:
                                t_op = reg_ready[w, r]
                                r_op = ST_MEMORY if reg_mem[w, r] == 1 else ST_PIPE
                        for i in range(c[F_NSRC]):
                            if c[F_K0 + i] == 0:
                                r = c[F_R0 + i]
                                if reg_ready[w, r] > t_op:
                                    t_op = reg_ready[w, r]
                                    r_op = ST_MEMORY if reg_mem[w, r] == 1 else ST_PIPE
                        wm = c[F_WAIT]
                        if wm:
                            for bb in range(6):
                                if (wm >> bb) & 1 and sb_ready[w, bb] > t_op:
                                    t_op = sb_ready[w, bb]
                                    r_op = ST_MEMORY if sb_mem[w, bb] == 1 else ST_PIPE
                        if t_op > now:
                            t_block = t_op
                            reason = r_op
                        else:
                            pf = port_free[s, p, c[F_PIPE]]
                            if pf > now:
                                t_block = pf
                                reason = ST_NONE
                    if t_block > now:
                        # blocked: charge the warp for the hazard once
                        if reason != ST_NONE and t_block > acct_until[w]:
                            start = acct_until[w] if acct_until[w] > now else now
                            w_stall[w, reason] += t_block - start
                            acct_until[w] = t_block
                        if t_block < best_t or (t_block == best_t and reason < best_r):
                            best_t = t_block
                            best_r = reason
                        continue
                    issued_w = w
                    rr[s, p] = (idx + 1) % n
                    break
                if status != R_OK:
                    break
                if issued_w < 0:
                    sm_idle[s, best_r] += 1
                    if best_t < next_event:
                        next_event = best_t
                    continue
                # ---------------------------------------------------- issue
                w = issued_w
                c = cur[w]
                any_issue = True
                sm_issued[s] += 1
                last_issue = now
                # register spilling: one shared-memory access per spilled register
                if spill_left[w] == -1:
                    nsp = 0
                    if c[F_WRITES] == 1 and c[F_DST] >= rpt:
                        nsp += 1
                    for i in range(c[F_NSRC]):
                        if c[F_K0 + i] == 0 and c[F_R0 + i] >= rpt:
                            nsp += 1
                    if c[F_PRED] == 1 and c[F_PREG] >= rpt:
                        nsp += 1
                    spill_left[w] = nsp
                if spill_left[w] > 0:
                    spill_left[w] -= 1
                    spill_ops += 1
                    port_free[s, p, PIPE_LSU] = now + 1
                    if spill_left[w] == 0:
                        next_issue[w] = now + shm_lat
                        spill_left[w] = -2
                        if now + shm_lat > acct_until[w]:
                            w_stall[w, ST_MEMORY] += shm_lat - 1
                            acct_until[w] = now + shm_lat
                    else:
                        next_issue[w] = now + 1
                    continue
                spill_left[w] = -1
                sm_useful[s] += 1
                w_issued[w] += 1
                op = c[F_OP]
                pc = w_pc[w]
                npc = pc + 1
                # guards
                haspred = c[F_PRED] == 1
                preg = c[F_PREG]
                pneg = c[F_PNEG] == 1
                for l in range(lanes):
                    if haspred:
                        g = regs[w, preg, l] != 0
                        if pneg:
                            g = not g
                        gval[l] = 1 if g else 0
                    else:
                        gval[l] = 1
                lat = raw_lat
                is_mem = 0
                nsrc = c[F_NSRC]
                k0 = c[F_K0]
                k1 = c[F_K0 + 1]
                k2 = c[F_K0 + 2]
                r0 = c[F_R0]
                r1 = c[F_R0 + 1]
                r2 = c[F_R0 + 2]
                immu = np.uint64(c[F_IMM])
                d = c[F_DST]
                if op == OP_IMAD or op == OP_LEA_HI:
                    for l in range(lanes):
                        if gval[l] == 0:
                            continue
                        x = immu if k0 == 1 else regs[w, r0, l]
                        y = immu if k1 == 1 else regs[w, r1, l]
                        z = immu if k2 == 1 else regs[w, r2, l]
                        if op == OP_IMAD:
                            regs[w, d, l] = x * y + z
                        else:
                            regs[w, d, l] = y + _shr(x, z)
                elif op == OP_SHF_L or op == OP_SHF_R or op == OP_LOP_XOR \
                        or op == OP_LOP_AND or op == OP_IADD:
                    for l in range(lanes):
                        if gval[l] == 0:
                            continue
                        x = immu if k0 == 1 else regs[w, r0, l]
                        y = immu if k1 == 1 else regs[w, r1, l]
                        if op == OP_SHF_L:
                            regs[w, d, l] = _shl(x, y)
                        elif op == OP_SHF_R:
                            regs[w, d, l] = _shr(x, y)
                        elif op == OP_LOP_XOR:
                            regs[w, d, l] = x ^ y
                        elif op == OP_LOP_AND:
                            regs[w, d, l] = x & y
                        else:
                            regs[w, d, l] = x + y
                elif op == OP_MOV:
                    for l in range(lanes):
                        if gval[l] == 1:
                            regs[w, d, l] = immu if k0 == 1 else regs[w, r0, l]
                elif op == OP_LEPC:
                    for l in range(lanes):
                        if gval[l] == 1:
                            regs[w, d, l] = np.uint64(pc)
                elif op == OP_LDG:
                    off = immu if nsrc == 2 else np.uint64(0)
                    lim = np.uint64(nbytes - 4)
                    for l in range(lanes):
                        if gval[l] == 0:
                            continue
                        addr = regs[w, r0, l] + off
                        if addr & np.uint64(3) or addr > lim:
                            status = R_TRAP_DATA
                            break
                        regs[w, d, l] = np.uint64(mem32[np.int64(addr >> np.uint64(2))])
                    lat = mem_lat + jitter_draw(seed, w, load_seq[w], jit)
                    load_seq[w] += 1
                    is_mem = 1
                elif op == OP_STG or op == OP_STC or op == OP_ATOM_ADD:
                    off = immu if nsrc == 3 else np.uint64(0)
                    if op == OP_STC:
                        for l in range(lanes):
                            if gval[l] == 0:
                                continue
                            waddr = regs[w, r0, l] + off
                            if waddr >= np.uint64(nwords):
                                status = R_TRAP_DATA
                                break
                            v = regs[w, r1, l]
                            bo = np.int64(waddr) * 16 + 5
                            for j in range(4):
                                mem8[bo + j] = np.uint8((v >> np.uint64(8 * j)) & np.uint64(0xFF))
                            break
                    elif op == OP_STG:
                        lim = np.uint64(nbytes - 4)
                        for l in range(lanes - 1, -1, -1):
                            if gval[l] == 0:
                                continue
                            addr = regs[w, r0, l] + off
                            if addr & np.uint64(3) or addr > lim:
                                status = R_TRAP_DATA
                                break
                            mem32[np.int64(addr >> np.uint64(2))] = np.uint32(
                                regs[w, r1, l] & np.uint64(0xFFFFFFFF))
                    else:
                        lim = np.uint64(nbytes - 8)
                        for l in range(lanes):
                            if gval[l] == 0:
                                continue
                            addr = regs[w, r0, l] + off
                            if addr & np.uint64(7) or addr > lim:
                                status = R_TRAP_DATA
                                break
                            ai = np.int64(addr >> np.uint64(3))
                            mem64[ai] = mem64[ai] + regs[w, r1, l]
                elif op == OP_BRA:
                    if gval[0] == 1:
                        if k0 == 1:
                            npc = pc + 1 + c[F_IMM]
                        else:
                            npc = np.int64(regs[w, r0, 0])
                elif op == OP_ICINV:
                    icache_clear(s, line_slot, tags, head, count, cap)
                if status != R_OK:
                    info[I_TRAP_PC] = pc
                    info[I_TRAP_WARP] = w
                    break
                comp = now + lat
                # memory-latency slack for the fast-forward validity check
                if ff_on:
                    if c[F_PRED] == 1 and reg_mem[w, c[F_PREG]] == 1:
                        sl = now - load_issue[w, c[F_PREG]]
                        if sl < min_slack:
                            min_slack = sl
                    for i in range(c[F_NSRC]):
                        if c[F_K0 + i] == 0 and reg_mem[w, c[F_R0 + i]] == 1:
                            sl = now - load_issue[w, c[F_R0 + i]]
                            if sl < min_slack:
                                min_slack = sl
                    wm = c[F_WAIT]
                    for bb in range(6):
                        if (wm >> bb) & 1 and sb_mem[w, bb] == 1:
                            sl = now - sb_issue[w, bb]
                            if sl < min_slack:
                                min_slack = sl
                # consumed memory values are no longer pending
                if c[F_PRED] == 1:
                    reg_mem[w, c[F_PREG]] = 0
                for i in range(c[F_NSRC]):
                    if c[F_K0 + i] == 0:
                        reg_mem[w, c[F_R0 + i]] = 0
                wm = c[F_WAIT]
                for bb in range(6):
                    if (wm >> bb) & 1:
                        sb_mem[w, bb] = 0
                if c[F_WRITES] == 1:
                    d = c[F_DST]
                    reg_ready[w, d] = comp
                    reg_mem[w, d] = is_mem
                    load_issue[w, d] = now
                if c[F_WBAR] != 7:
                    sb_ready[w, c[F_WBAR]] = comp
                    sb_mem[w, c[F_WBAR]] = is_mem
                    sb_issue[w, c[F_WBAR]] = now
                if c[F_RBAR] != 7:
                    sb_ready[w, c[F_RBAR]] = now + reg_lat
                    sb_mem[w, c[F_RBAR]] = 0
                if comp > max_comp:
                    max_comp = comp
                port_free[s, p, c[F_PIPE]] = now + disp[c[F_PIPE]]
                stall = c[F_STALL]
                next_issue[w] = now + (stall if stall > 1 else 1)
                cur_valid[w] = 0
                w_pc[w] = npc
                bid = w_blk[w]
                if npc == code_end:
                    w_status[w] = 3
                    live_warps -= 1
                    b_live[bid] -= 1
                    if b_live[bid] == 0:
                        b_state[bid] = 2
                        sm_free[s] += b_nw[bid]
                        while sm_nextb[s] < sm_nblocks[s]:
                            nbid = sm_blocks[s, sm_nextb[s]]
                            if b_nw[nbid] > sm_free[s]:
                                break
                            sm_free[s] -= b_nw[nbid]
                            b_state[nbid] = 1
                            b_live[nbid] = b_nw[nbid]
                            for k in range(b_nw[nbid]):
                                w_status[b_first[nbid] + k] = 1
                                next_issue[b_first[nbid] + k] = now + 1
                                acct_until[b_first[nbid] + k] = now + 1
                            live_warps += b_nw[nbid]
                            pending_blocks -= 1
                            sm_nextb[s] += 1
                elif op == OP_BAR_SYNC:
                    w_status[w] = 2
                    bar_since[w] = now
                    b_arrived[bid] += 1
                if b_state[bid] == 1 and b_arrived[bid] > 0 and b_arrived[bid] >= b_live[bid]:
                    for k in range(b_nw[bid]):
                        ww = b_first[bid] + k
                        if w_status[ww] == 2:
                            w_status[ww] = 1
                            next_issue[ww] = now + 1
                            if now > acct_until[ww]:
                                start = bar_since[ww] if bar_since[ww] > acct_until[ww] else acct_until[ww]
                                w_stall[ww, ST_PIPE] += now + 1 - start - 1
                                acct_until[ww] = now + 1
                    b_arrived[bid] = 0
                # ------------------------------------------ fast-forward probe
                if ff_on and not ff_done and w == 0 and pc == ff_pc:
                    # canonical timing state relative to now
                    q = 0
                    for ww in range(nw):
                        cur_snap[q] = w_status[ww]
                        cur_snap[q + 1] = w_pc[ww]
                        cur_snap[q + 2] = cur_valid[ww]
                        cur_snap[q + 3] = next_issue[ww] - now if next_issue[ww] > now else 0
                        cur_snap[q + 4] = fetch_wait[ww] - now if fetch_wait[ww] > now else 0
                        cur_snap[q + 5] = spill_left[ww]
                        cur_snap[q + 6] = bar_since[ww] - now if w_status[ww] == 2 else 0
                        cur_snap[q + 7] = 0
                        q += 8
                        for r in range(32):
                            # a load older than the worst-case latency is complete whatever it drew
                            if reg_mem[ww, r] == 1 and now - load_issue[ww, r] < max_lat:
                                cur_snap[q + r] = -(now - load_issue[ww, r]) - 1
                            else:
                                cur_snap[q + r] = reg_ready[ww, r] - now if reg_ready[ww, r] > now else 0
                        q += 32
                        for bb in range(6):
                            if sb_mem[ww, bb] == 1 and now - sb_issue[ww, bb] < max_lat:
                                cur_snap[q + bb] = -(now - sb_issue[ww, bb]) - 1
                            else:
                                cur_snap[q + bb] = sb_ready[ww, bb] - now if sb_ready[ww, bb] > now else 0
                        q += 6
                        cur_snap[q] = 0
                        cur_snap[q + 1] = 0
                        q += 2
                    for ss in range(num_sms):
                        for pp in range(width):
                            cur_snap[q] = rr[ss, pp]
                            q += 1
                            for pi in range(NPIPE):
                                cur_snap[q] = port_free[ss, pp, pi] - now if port_free[ss, pp, pi] > now else 0
                                q += 1
                    for bb in range(nb):
                        cur_snap[q] = b_state[bb]
                        cur_snap[q + 1] = b_arrived[bb]
                        cur_snap[q + 2] = b_live[bb]
                        q += 3
                    for ss in range(num_sms):
                        cur_snap[q] = count[ss]
                        cur_snap[q + 1] = pend_n[ss]
                        q += 2
                    cur_snap[q] = 0
                    # the icache must also be quiescent: no misses since the match
                    match = -1
                    for j in range(min(snap_count, nsnap)):
                        same = True
                        for t in range(snap_len):
                            if snaps[j, t] != cur_snap[t]:
                                same = False
                                break
                        if same:
                            match = j
                            break
                    slot_j = snap_count % nsnap
                    if match >= 0:
                        period = now - snap_t[match]
                        quiet = True
                        for ss in range(num_sms):
                            if sm_imiss[ss] != snap_smi[match, ss, 4] or pend_n[ss] != 0:
                                quiet = False
                        if quiet and snap_slack[match] >= max_lat and min_slack >= max_lat and period > 0:
                            # iterations of the counter per period, per warp
                            kmax = BIG
                            ok = True
                            for ww in range(nw):
                                if w_status[ww] == 3:
                                    continue
                                dctr = np.int64(snap_ctr[match, ww]) - np.int64(regs[ww, ff_reg, 0])
                                if dctr <= 0:
                                    ok = False
                                    break
                                left = np.int64(regs[ww, ff_reg, 0]) - ff_margin * dctr
                                kk = left // dctr
                                if kk < kmax:
                                    kmax = kk
                            if ok and kmax > 0 and kmax < BIG:
                                skip = kmax * period
                                for ww in range(nw):
                                    dctr = np.int64(snap_ctr[match, ww]) - np.int64(regs[ww, ff_reg, 0])
                                    regs[ww, ff_reg, 0] = np.uint64(np.int64(regs[ww, ff_reg, 0]) - kmax * dctr)
                                    load_seq[ww] += kmax * (load_seq[ww] - snap_seq[match, ww])
                                    w_issued[ww] += kmax * (w_issued[ww] - snap_wiss[match, ww])
                                    for rsn in range(4):
                                        w_stall[ww, rsn] += kmax * (w_stall[ww, rsn] - snap_wst[match, ww, rsn])
                                    next_issue[ww] += skip
                                    acct_until[ww] += skip
                                    bar_since[ww] += skip
                                    if fetch_wait[ww] >= 0:
                                        fetch_wait[ww] += skip
                                    for r in range(32):
                                        reg_ready[ww, r] += skip
                                        load_issue[ww, r] += skip
                                    for bb in range(6):
                                        sb_ready[ww, bb] += skip
                                        sb_issue[ww, bb] += skip
                                for ss in range(num_sms):
                                    sm_issued[ss] += kmax * (sm_issued[ss] - snap_smi[match, ss, 0])
                                    sm_useful[ss] += kmax * (sm_useful[ss] - snap_smi[match, ss, 1])
                                    sm_stale[ss] += kmax * (sm_stale[ss] - snap_smi[match, ss, 5])
                                    for pp in range(width):
                                        for pi in range(NPIPE):
                                            port_free[ss, pp, pi] += skip
                                    for qq in range(pend_n[ss]):
                                        pend_time[ss, qq] += skip
                                for ss in range(num_sms):
                                    for rsn in range(4):
                                        sm_idle[ss, rsn] += kmax * (sm_idle[ss, rsn] - snaps_idle(snap_smi, match, ss, rsn))
                                now += skip
                                last_issue += skip
                                max_comp += skip
                                info[I_FF_SKIPPED] = skip
                                info[I_FF_PERIOD] = period
                                ff_done = True
                    if not ff_done:
                        for t in range(snap_len):
                            snaps[slot_j, t] = cur_snap[t]
                        snap_t[slot_j] = now
                        snap_slack[slot_j] = min_slack
                        for ww in range(nw):
                            snap_ctr[slot_j, ww] = np.int64(regs[ww, ff_reg, 0])
                            snap_seq[slot_j, ww] = load_seq[ww]
                            snap_wiss[slot_j, ww] = w_issued[ww]
                            for rsn in range(4):
                                snap_wst[slot_j, ww, rsn] = w_stall[ww, rsn]
                        for ss in range(num_sms):
                            snap_smi[slot_j, ss, 0] = sm_issued[ss]
                            snap_smi[slot_j, ss, 1] = sm_useful[ss]
                            snap_smi[slot_j, ss, 2] = sm_idle[ss, 0]
                            snap_smi[slot_j, ss, 3] = sm_idle[ss, 1]
                            snap_smi[slot_j, ss, 4] = sm_imiss[ss]
                            snap_smi[slot_j, ss, 5] = sm_stale[ss]
                            snap_smi[slot_j, ss, 6] = sm_idle[ss, 2]
                            snap_smi[slot_j, ss, 7] = sm_idle[ss, 3]
                        snap_count += 1
                        min_slack = BIG
            if status != R_OK:
                break
        if status != R_OK:
            break
        if any_issue or next_event == BIG:
            now += 1
        else:
            # nothing can issue before next_event: charge the skipped slots
            gap = next_event - now - 1
            if gap > 0:
                _charge_gap(sm_idle, gap, num_sms, width, sp_n, sp_list, w_status,
                            next_issue, cur_valid, fetch_wait, reg_ready, reg_mem, cur,
                            sb_ready, sb_mem, port_free, now)
            now = next_event
    end = last_issue + 1
    if max_comp > end:
        end = max_comp
    if status == R_OK and end < 0:
        end = 0
    info[I_STATUS] = status
    info[I_CYCLES] = end if status == R_OK else now
    info[I_LAST_ISSUE] = last_issue
    info[I_SPILL_OPS] = spill_ops


@njit(cache=True)
def snaps_idle(snap_smi, j, s, rsn):
    if rsn == 0:
        return snap_smi[j, s, 2]
    if rsn == 1:
        return snap_smi[j, s, 3]
    if rsn == 2:
        return snap_smi[j, s, 6]
    return snap_smi[j, s, 7]


@njit(cache=True)
def _charge_gap(sm_idle, gap, num_sms, width, sp_n, sp_list, w_status,
                next_issue, cur_valid, fetch_wait, reg_ready, reg_mem, cur,
                sb_ready, sb_mem, port_free, now):
    """Attribute ``gap`` idle cycles per sub-partition to the earliest blocker's cause."""
    t = now + 1
    for s in range(num_sms):
        for p in range(width):
            best_t = BIG
            best_r = ST_NONE
            for k in range(sp_n[s, p]):
                w = sp_list[s, p, k]
                st = w_status[w]
                if st != 1:
                    if st == 2 and best_t == BIG:
                        best_r = ST_PIPE
                    continue
                tb = np.int64(0)
                r = ST_NONE
                if next_issue[w] > t:
                    tb = next_issue[w]
                    r = ST_PIPE
                elif cur_valid[w] == 0:
                    tb = fetch_wait[w]
                    r = ST_ICACHE
                else:
                    c = cur[w]
                    if c[F_PRED] == 1 and reg_ready[w, c[F_PREG]] > tb:
                        tb = reg_ready[w, c[F_PREG]]
                        r = ST_MEMORY if reg_mem[w, c[F_PREG]] == 1 else ST_PIPE
                    for i in range(c[F_NSRC]):
                        if c[F_K0 + i] == 0:
                            rg = c[F_R0 + i]
                            if reg_ready[w, rg] > tb:
                                tb = reg_ready[w, rg]
                                r = ST_MEMORY if reg_mem[w, rg] == 1 else ST_PIPE
                    wm = c[F_WAIT]
                    for bb in range(6):
                        if (wm >> bb) & 1 and sb_ready[w, bb] > tb:
                            tb = sb_ready[w, bb]
                            r = ST_MEMORY if sb_mem[w, bb] == 1 else ST_PIPE
                    if tb <= t:
                        pf = port_free[s, p, c[F_PIPE]]
                        if pf > tb:
                            tb = pf
                            r = ST_NONE
                if tb < best_t or (tb == best_t and r < best_r):
                    best_t = tb
                    best_r = r
            sm_idle[s, best_r] += gap
