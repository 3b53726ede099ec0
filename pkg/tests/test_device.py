import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpuattest import experiments, isa
from gpuattest.device import (A100, ConfigError, CostModel, DeviceConfig, Launch, NonTermination,
                              OutOfRange, Trap, load_image, load_profile, program_image, run,
                              stall_report, write_code)
from gpuattest.isa import Imm, Instruction, Opcode as Op, Reg

ONE_SM = A100.with_(num_sms=1, blocks_per_sm=1)
ONE_WARP = Launch(((1, None),))


def imads(n):
    return [Instruction(Op.IMAD, 1 + k % 8, (Reg(20), Imm(3), Reg(21))) for k in range(n)]


def run_prog(prog, cfg=ONE_SM, warps=1, **kw):
    return run(load_image(program_image(prog), cfg), None, launch=Launch(((warps, None),)), **kw)


def test_defaults_match_documented_part():
    assert (A100.num_sms, A100.max_warps_per_sm, A100.sched_width) == (108, 64, 4)
    assert A100.regs_per_sm == 65536 and A100.l2_icache_bytes == 131072
    assert A100.threads == 2 * 1024 * 108 == 221184


@pytest.mark.parametrize("field,value", [("num_sms", 0), ("global_mem_latency", -1),
                                         ("regs_per_thread", 64)])
def test_invalid_config(field, value):
    with pytest.raises(ConfigError):
        A100.with_(**{field: value})


def test_hiding_bound():
    assert A100.hiding_bound == 15
    assert CostModel(1, 15).hidden(A100) and not CostModel(1, 16).hidden(A100)
    assert CostModel.for_instruction("LDG", A100) == CostModel(1, 250)
    assert CostModel.for_instruction("IMAD", A100) == CostModel(1, 0)


def test_load_profile_toml_and_json(tmp_path):
    t = tmp_path / "a.toml"
    t.write_text("[device]\nnum_sms = 4\nglobal_mem_latency = 300\n")
    assert load_profile(t) == A100.with_(num_sms=4, global_mem_latency=300)
    j = tmp_path / "a.json"
    j.write_text(json.dumps({"num_sms": 2}))
    assert load_profile(j).num_sms == 2
    with pytest.raises(ConfigError):
        load_profile(tmp_path / "missing.toml")
    bad = tmp_path / "b.json"
    bad.write_text(json.dumps({"warp_count": 2}))
    with pytest.raises(ConfigError):
        load_profile(bad)


def test_empty_program_starts_at_cycle_zero():
    st_ = load_image(program_image([]), ONE_SM)
    assert st_.cycle == 0
    assert run(st_, None, launch=ONE_WARP).cycles == 0


def test_buffer_size_is_image_size():
    from gpuattest import vf
    img = vf.build_vf(vf.PROFILES["exp1"].with_(num_sms=1))
    assert load_image(img, ONE_SM).data_size == 524288


def test_corrupt_magic():
    blob = bytearray(program_image(imads(1)))
    blob[:4] = b"ABCD"
    with pytest.raises(isa.BadMagic):
        load_image(bytes(blob), ONE_SM)


@pytest.mark.parametrize("fma", [2, 3])
def test_independent_imads_closed_form(fma):
    cfg = ONE_SM.with_(fma_dispatch_latency=fma)
    drain = run_prog(imads(1), cfg).cycles - fma
    for n in (2, 7, 40):
        assert run_prog(imads(n), cfg).cycles == n * fma + drain


def test_straight_line_imads_have_no_hazard_stalls():
    rep = stall_report(run_prog(imads(30)))
    assert rep["icache"] == rep["memory"] == rep["pipeline"] == 0


def _load_then_busy():
    prog = [Instruction(Op.MOV, 6, (Imm(0x40),)), Instruction(Op.LDG, 5, (Reg(6),))]
    for k in range(30):
        prog.append(experiments._fill(k))
    prog.append(Instruction(Op.IMAD, 6, (Reg(5), Imm(0), Reg(6))))
    return prog


def test_memory_latency_hidden_by_64_warps():
    r = run_prog(_load_then_busy(), warps=64)
    assert stall_report(r)["memory"] == 0


def test_lone_warp_exposes_memory_latency():
    prog = [Instruction(Op.MOV, 6, (Imm(0x40),))]
    for _ in range(4):
        prog += [Instruction(Op.LDG, 5, (Reg(6),)), Instruction(Op.IMAD, 6, (Reg(5), Imm(0), Reg(6)))]
    r = run_prog(prog)
    per_load = stall_report(r)["memory"] / 4
    assert abs(per_load - A100.global_mem_latency) <= 2


def test_run_is_deterministic():
    prog = _load_then_busy()
    a, b = run_prog(prog, warps=8), run_prog(prog, warps=8)
    assert a.cycles == b.cycles and a.checksum == b.checksum
    assert np.array_equal(a.sm_idle, b.sm_idle)


def test_jitter_changes_timing_only_through_seed():
    cfg = ONE_SM.with_(mem_jitter=250)
    prog = _load_then_busy()
    state = load_image(program_image(prog), cfg)
    c = [run(state, None, launch=ONE_WARP, jitter_seed=s).cycles for s in (1, 1, 2)]
    assert c[0] == c[1] != c[2]
    assert 0 <= c[0] - run_prog(prog).cycles <= 250


STORE = "B......|R.|W.|Y0|S0| STG [R8+0x40], R7;"


def test_patch_without_eviction_keeps_old_immediate():
    st_ = load_image(program_image(["B......|R.|W.|Y0|S0| MOV R7, 5;", STORE]), ONE_SM)
    write_code(st_, 0, 9)
    r = run(st_, None, launch=ONE_WARP, keep_memory=True)
    assert int(r.memory[0x40]) == 5


def test_patch_then_icinv_uses_new_immediate():
    prog = ["B......|R.|W.|Y0|S0| ICINV;", "B......|R.|W.|Y0|S0| MOV R7, 5;", STORE]
    st_ = load_image(program_image(prog), ONE_SM)
    write_code(st_, 1, 9)
    r = run(st_, None, launch=ONE_WARP, keep_memory=True)
    assert int(r.memory[0x40]) == 9


def test_patch_out_of_range():
    st_ = load_image(program_image(imads(2)), ONE_SM)
    with pytest.raises(OutOfRange):
        write_code(st_, 2, 1)


def test_out_of_bounds_load_traps():
    prog = [Instruction(Op.MOV, 6, (Imm(0x7FFFFFF0),)), Instruction(Op.LDG, 5, (Reg(6),))]
    with pytest.raises(Trap):
        run_prog(prog)


def test_cycle_budget():
    loop = [Instruction(Op.BRA, 0, (Imm(-1),))]
    with pytest.raises(NonTermination):
        run_prog(loop, ONE_SM.with_(cycle_budget=10_000))


def test_spilled_register_costs_shared_memory_latency():
    prog = [Instruction(Op.IMAD, 31, (Reg(31), Imm(3), Reg(2))) for _ in range(10)]
    base = run_prog(prog)
    spilled = run_prog(prog, ONE_SM.with_(regs_per_thread=31))
    assert base.spill_ops == 0 and spilled.spill_ops == 20
    assert spilled.cycles - base.cycles >= 10 * A100.shared_mem_latency


def test_stall_partition_sums_to_idle_slots():
    r = run_prog(_load_then_busy(), warps=5)
    assert sum(stall_report(r).values()) == r.slots - r.issued


def test_run_result_json():
    d = json.loads(run_prog(imads(3)).to_json())
    assert d["cycles"] == 8 and set(d["stalls"]) == {"icache", "memory", "pipeline", "none"}


straight = st.lists(
    st.tuples(st.sampled_from([Op.IMAD, Op.LEA_HI, Op.IADD, Op.NOP]), st.integers(1, 6),
              st.integers(1, 6)), min_size=1, max_size=25)


def _build(spec):
    out = []
    for op, d, a in spec:
        if op is Op.NOP:
            out.append(Instruction(Op.NOP))
        elif op is Op.IADD:
            out.append(Instruction(op, d, (Reg(a), Imm(1))))
        else:
            out.append(Instruction(op, d, (Reg(a), Reg(d), Imm(1) if op is Op.LEA_HI else Reg(a))))
    return out


@settings(max_examples=40)
@given(straight, st.integers(0, 25), st.sampled_from([Op.IMAD, Op.LEA_HI, Op.NOP]))
def test_inserting_an_instruction_never_decreases_cycles(spec, at, op):
    prog = _build(spec)
    extra = _build([(op, 2, 3)])[0]
    longer = prog[:at] + [extra] + prog[at:]
    assert run_prog(longer).cycles >= run_prog(prog).cycles
