import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from gpuattest import isa, vf
from gpuattest.challenge import Challenge
from gpuattest.device import load_image, run
from gpuattest.isa import Opcode as Op
from gpuattest.verifier import ChallengeSource

TINY = vf.VFParams(buffer_bytes=16384, body_instructions=120, unroll=1, iterations=20,
                   num_sms=1, blocks_per_sm=1, warps_per_block=1)
SMALL = vf.VFParams(buffer_bytes=65536, iterations=50, num_sms=1, blocks_per_sm=2,
                    warps_per_block=4)
SELF_MOD = vf.VFParams(buffer_bytes=65536, body_instructions=320, unroll=2, iterations=30,
                       self_modifying=True, icache_bytes=4096, num_sms=1, blocks_per_sm=2,
                       warps_per_block=2)


def device_checksum(img, ch):
    return run(load_image(img, img.params.device_config()), ch).checksum


def challenge(p, seed=0):
    return ChallengeSource(seed, p.num_sms, p.iterations).next()


def body(img):
    return [img.items[i] for i in img.layout.body_range]


def test_default_profile_body_and_determinism():
    p = vf.PROFILES["exp1"]
    a, b = vf.build_vf(p, 7), vf.build_vf(p, 7)
    assert a.layout.loop_end - a.layout.loop_start == 428
    assert a.to_vfbin() == b.to_vfbin()
    assert len(a.data) == 524288


def test_fill_seed_changes_image():
    assert vf.build_vf(TINY, 1).data != vf.build_vf(TINY, 2).data


def test_self_modifying_profile_overflows_icache():
    p = vf.PROFILES["exp3"]
    img = vf.build_vf(p)
    assert len(body(img)) == 8342
    assert len(body(img)) * isa.WORD_BYTES > p.icache_bytes


def test_too_small_body_rejected():
    with pytest.raises(vf.LayoutOverflow):
        vf.build_vf(TINY.with_(body_instructions=20))


def test_self_modifying_must_exceed_icache():
    with pytest.raises(ValueError):
        vf.VFParams(self_modifying=True, body_instructions=100, icache_bytes=131072)


def test_body_alternates_pipelines():
    pipes = [vf._pipe(it.instr) for it in body(vf.build_vf(vf.PROFILES["exp1"]))]
    busy = [p for p in pipes if p in ("fma", "alu")]
    assert sum(a == b for a, b in zip(busy, busy[1:])) == 0


def test_one_load_per_unrolled_block():
    for p in (vf.PROFILES["exp1"], SMALL.with_(unroll=3)):
        loads = [it for it in body(vf.build_vf(p)) if it.instr.opcode == Op.LDG]
        assert len(loads) == p.unroll


def test_one_patch_site_per_block_when_self_modifying():
    img = vf.build_vf(SELF_MOD)
    stores = [it for it in body(img) if it.instr.opcode == Op.STC]
    assert len(stores) == 1          # each block's leader patches its own site line
    assert len(img.layout.sites) == SELF_MOD.num_blocks
    assert len(set(img.layout.sites)) == SELF_MOD.num_blocks


def test_program_uses_exactly_32_registers():
    regs = set()
    for ins in vf.build_vf(vf.PROFILES["exp1"]).instructions():
        regs |= ins.registers
    assert regs == set(range(32))


def test_every_generated_word_decodes():
    img = vf.build_vf(SELF_MOD)
    words = [isa.Word128.from_bytes(img.data[i:i + 16])
             for i in range(0, img.code_words * 16, 16)]
    assert [isa.decode(w) for w in words] == img.instructions()


@pytest.mark.parametrize("p", [TINY, SMALL, SELF_MOD,
                               SMALL.with_(inner_iterations=3, inner_instructions=8)],
                         ids=["tiny", "small", "self_mod", "inner"])
def test_reference_matches_device(p):
    img = vf.build_vf(p, 3)
    for seed in range(2):
        ch = challenge(p, seed)
        assert vf.checksum_reference(img, ch) == device_checksum(img, ch)


def test_per_block_results_match():
    img = vf.build_vf(SMALL, 1)
    ch = challenge(SMALL)
    ref = vf.reference_run(img, ch)
    r = run(load_image(img, SMALL.device_config()), ch)
    assert ref.per_block == r.per_block and ref.per_sm == r.per_sm


def test_distinct_challenges_give_distinct_checksums():
    img = vf.build_vf(TINY)
    src = ChallengeSource(5, 1, TINY.iterations)
    values = {vf.checksum_reference(img, src.next()) for _ in range(10_000)}
    assert len(values) == 10_000


def test_data_byte_flips_are_usually_detected():
    p = TINY.with_(iterations=200)
    img = vf.build_vf(p)
    ch = challenge(p)
    honest = vf.checksum_reference(img, ch)
    rng = np.random.default_rng(0)
    start = img.code_words * isa.WORD_BYTES
    changed = 0
    for _ in range(50):
        data = bytearray(img.data)
        data[int(rng.integers(start, len(data)))] ^= 1 << int(rng.integers(0, 8))
        changed += vf.checksum_reference(dataclasses.replace(img, data=bytes(data)), ch) != honest
    assert changed / 50 >= 1 - 0.83


def _fold_pairs(img):
    """Adjacent checksum updates whose operations do not commute."""
    folds = [i for i in img.layout.body_range if img.items[i].role == "fold"]
    kind = lambda op: "add" if op in (Op.IADD, Op.IMAD) else op
    return [(a, b) for a, b in zip(folds, folds[1:])
            if kind(img.items[a].instr.opcode) != kind(img.items[b].instr.opcode)]


def test_swapping_ordered_updates_changes_checksum():
    rng = np.random.default_rng(1)
    swaps = 0
    for fill in range(40):
        img = vf.build_vf(TINY.with_(unroll=1 + fill % 2, body_instructions=200), fill)
        ch = challenge(img.params, fill)
        honest = device_checksum(img, ch)
        pairs = _fold_pairs(img)
        for k in rng.choice(len(pairs), size=min(3, len(pairs)), replace=False):
            a, b = pairs[k]
            items = list(img.items)
            items[a], items[b] = items[b], items[a]
            assert device_checksum(vf.relink(img, items), ch) != honest
            swaps += 1
    assert swaps >= 100


def test_spilling_one_register_slows_every_iteration():
    p = SMALL.with_(iterations=40)
    img = vf.build_vf(p)
    ch = challenge(p)
    cfg = p.device_config()

    def per_iter(c):
        st_ = load_image(img, c)
        a = run(st_, Challenge(ch.seeds, 20, ch.nonce)).cycles
        return (run(st_, ch).cycles - a) / 20

    assert per_iter(cfg.with_(regs_per_thread=31)) > per_iter(cfg) + 1


def test_aggregate_counts_every_thread():
    topo = vf.VFParams().topology
    assert vf.aggregate(np.ones(topo.threads, dtype=np.uint64), topo) == 221184


def test_aggregate_single_thread_is_identity():
    assert vf.aggregate([12345], vf.Topology(1, 1, 1)) == 12345


def test_aggregate_shape_mismatch():
    with pytest.raises(vf.ShapeMismatch):
        vf.aggregate([1, 2, 3], vf.Topology(1, 1, 2))


@given(st.lists(st.integers(0, (1 << 64) - 1), min_size=24, max_size=24))
def test_aggregate_equals_flat_modular_sum(values):
    assert vf.aggregate(values, vf.Topology(2, 3, 4)) == sum(values) % (1 << 64)


def test_self_modify_immediate_examples():
    assert vf.self_modify_immediate(0) == 0
    assert vf.self_modify_immediate(0x2A) == 10


def test_shift_amounts_are_uniform():
    img = vf.build_vf(SMALL.with_(warps_per_block=32))
    src = ChallengeSource(3, 1, SMALL.iterations)
    ns = np.concatenate([vf.reference_run(img, src.next()).per_thread for _ in range(50)])
    hist = np.bincount([vf.self_modify_immediate(int(c)) for c in ns], minlength=32)
    assert len(ns) >= 100_000
    assert chisquare(hist).pvalue > 0.01


def test_xorshift_star_is_the_published_generator():
    # 64-bit xorshift* with (12, 25, 27) and multiplier 2685821657736338717
    x = 1
    x ^= x >> 12
    x ^= (x << 25) & (2**64 - 1)
    x ^= x >> 27
    state, out = vf.xorshift_star(1)
    assert state == x and out == x * 2685821657736338717 % 2**64


def test_params_json_round_trip(tmp_path):
    path = tmp_path / "p.json"
    import json
    path.write_text(json.dumps(SMALL.to_dict()))
    assert vf.VFParams.from_json(path) == SMALL
    with pytest.raises(ValueError):
        vf.VFParams.from_dict({"bogus": 1})


def test_adversarial_nop_profile_has_429_instructions():
    img = vf.build_vf(vf.PROFILES["exp2"])
    assert img.layout.loop_end - img.layout.loop_start == 429
    p = TINY.with_(nop_padding=2)
    padded = vf.build_vf(p)
    ch = challenge(p)
    assert vf.checksum_reference(padded, ch) == device_checksum(padded, ch)
    assert vf.checksum_reference(padded, ch) != vf.checksum_reference(vf.build_vf(TINY), ch)


def test_nop_padding_rejected_on_self_modifying_body():
    with pytest.raises(ValueError):
        SELF_MOD.with_(nop_padding=1)
