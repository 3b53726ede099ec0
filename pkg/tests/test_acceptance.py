"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed in the terminal
summary of every pytest run that includes this module.
"""

import random
import time
from decimal import ROUND_HALF_UP, Decimal, getcontext

import numpy as np
import pytest

from gpuattest import adversary as A, experiments as E, isa, sake as S, trng, verifier as V, vf
from gpuattest.challenge import Challenge
from gpuattest.device import machine as M

from .strategies import random_instruction

RESULTS = {}

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def test_01_codec_round_trip():
    rng = np.random.default_rng(1)
    program = [random_instruction(rng) for _ in range(100_000)]
    t = time.perf_counter()
    bad = sum(isa.decode(isa.encode(i)) != i or isa.parse_asm(isa.emit_asm(i)) != i
              for i in program)
    dt = time.perf_counter() - t
    record(1, bad == 0 and dt < 10, f"{bad} failures over 1e5 instructions in {dt:.1f} s")


def _random_params(rng) -> vf.VFParams:
    self_mod = bool(rng.integers(0, 2))
    unroll = int(rng.integers(1, 6))
    inner = int(rng.integers(0, 2))
    low = 300 if self_mod else 70 * unroll + 30
    return vf.VFParams(
        buffer_bytes=int(2 ** rng.integers(15, 18)),
        body_instructions=int(rng.integers(low, 700)), unroll=unroll, iterations=1000,
        self_modifying=self_mod, icache_bytes=4096, num_sms=int(rng.integers(1, 3)),
        blocks_per_sm=int(rng.integers(1, 3)), warps_per_block=int(rng.integers(1, 3)),
        inner_iterations=3 * inner, inner_instructions=8 * inner)


def test_02_reference_matches_simulator():
    rng = np.random.default_rng(2)
    t = time.perf_counter()
    pairs = mismatches = 0
    while pairs < 100:
        p = _random_params(rng)
        try:
            img = vf.build_vf(p, int(rng.integers(0, 2 ** 32)))
        except vf.LayoutOverflow:
            continue
        ch = Challenge(tuple(int(x) for x in rng.integers(0, 2 ** 63, p.num_sms)), 1000,
                       int(rng.integers(0, 2 ** 63)))
        dev = M.run(M.load_image(img, p.device_config()), ch).checksum
        mismatches += dev != vf.checksum_reference(img, ch)
        pairs += 1
    dt = time.perf_counter() - t
    record(2, mismatches == 0 and dt < 120,
           f"{mismatches} mismatches over {pairs} random pairs in {dt:.0f} s")


def test_03_every_body_word_is_self_verified():
    p = vf.PROFILES["exp1"].with_(num_sms=1, blocks_per_sm=1, warps_per_block=4,
                                  iterations=1000)
    img = vf.build_vf(p, 3)
    ch = Challenge((0x1234567,), 1000, 99)
    honest = vf.checksum_reference(img, ch)
    cfg = p.device_config()
    cfg = cfg.with_(cycle_budget=10 * M.run(M.load_image(img, cfg), ch).cycles)
    blob = img.to_vfbin()
    rng = np.random.default_rng(0)
    t = time.perf_counter()
    unchanged = flips = 0
    for w in img.layout.body_range:
        bit = int(rng.integers(0, 72))          # a bit in the opcode, operand or immediate fields
        b = bytearray(blob)
        b[isa.VFBIN_HEADER.size + isa.WORD_BYTES * w + bit // 8] ^= 1 << (bit % 8)
        flips += 1
        try:
            r = M.run(M.load_image(bytes(b), cfg), ch, raise_on_trap=False)
        except M.NonTermination:
            continue                            # no response at all
        unchanged += r.checksum == honest
    dt = time.perf_counter() - t
    record(3, flips == 428 and unchanged == 0 and dt < 300,
           f"{flips - unchanged}/{flips} flips changed the checksum in {dt:.0f} s")


def test_04_single_nop_is_detected():
    t = time.perf_counter()
    p = vf.PROFILES["exp1"].with_(num_sms=1)
    img = vf.build_vf(p, 1)
    cfg = p.device_config(mem_jitter=250)
    st = M.load_image(img, cfg)
    model = V.calibrate(img, 100, config=cfg, seed=11, state=st)
    setup = A.apply_attack(img, st, A.nop_inject(1))
    ver = V.Verifier(model, V.ChallengeSource(99, 1, p.iterations))
    reps = [A.evaluate(setup, ver, jitter_seed=V.jitter_seed_for(5, i)) for i in range(100)]
    rejected = sum(r.detected for r in reps)
    min_extra = min(r.attacked_cycles - r.honest_cycles for r in reps)
    src = V.ChallengeSource(77, 1, p.iterations)
    accepted = sum(V.measure(st, src.next(), functional=False, fast_forward=img.fast_forward(),
                             jitter_seed=V.jitter_seed_for(77, i)).cycles <= model.threshold
                   for i in range(100))
    dt = time.perf_counter() - t
    ok = rejected == 100 and accepted >= 99 and min_extra >= p.iterations and dt < 600
    record(4, ok, f"rejected {rejected}/100, honest accepted {accepted}/100, "
                  f"min extra {min_extra} cycles (I = {p.iterations}), {dt:.0f} s")


def test_05_threshold_arithmetic():
    # symmetric samples scaled so their sample standard deviation is exactly 0.0009
    samples = [0.4941 + d * 0.0009 * np.sqrt(99 / 100) for d in (-1, 1)] * 50
    m = V.TimingModel.from_samples(samples)
    rounded = Decimal(repr(round(m.threshold, 10))).quantize(Decimal("0.0001"), ROUND_HALF_UP)
    ok = abs(m.threshold - 0.49635) < 1e-9 and rounded == Decimal("0.4964")
    record(5, ok, f"threshold {m.threshold:.6f} (t_avg {m.t_avg:.4f}, sigma {m.sigma:.4f})")


def test_06_latency_hiding_law():
    grid = E.latency_grid()
    bad = [(g.x, g.y) for g in grid if
           (g.y <= 15 * g.x and g.cycles_per_iteration != g.x) or
           (g.y == 16 * g.x and not g.cycles_per_iteration > g.x)]
    record(6, len(grid) == 12 and not bad, f"{12 - len(bad)}/12 grid points follow the law")


def test_07_utilization_profiles():
    a = E.profile_run("exp1")
    b = E.profile_run("exp3", iterations=8)
    ok = a.utilization >= 0.98 and 0.70 <= b.utilization <= 0.80 and b.icache_share >= 0.90
    record(7, ok, f"plain {a.utilization:.2%}, self-modifying {b.utilization:.2%} "
                  f"with icache {b.icache_share:.1%} of stalls")


def test_08_inclusion_probability():
    getcontext().prec = 60
    oracle = float((1 - Decimal(1) / Decimal(524288)) ** 100000)
    p = V.inclusion_probability(524288, 100000)
    est, se = V.inclusion_monte_carlo(1024, 2048, 10 ** 6, seed=8)
    exact = V.inclusion_probability(1024, 2048)
    ok = abs(p - 0.8264) <= 1e-4 and abs(p - oracle) < 1e-12 and abs(est - exact) <= 3 * se
    record(8, ok, f"P = {p:.6f} (oracle {oracle:.6f}); Monte-Carlo {est:.5f} vs {exact:.5f} "
                  f"(se {se:.1e}); 0.082 is not (1 - 1/S)^N")


def test_09_key_establishment():
    t = time.perf_counter()
    c = 0xC0FFEE

    def session(tamper=None, rng=None):
        ver, first = S.verifier_start(S.TEST_GROUP, rng, secret=6, expected_c=lambda v2: c)
        dev = S.DeviceEndpoint(lambda v2: (c, 100), rng, secret=15)
        return S.run_protocol(ver, dev, S.Channel(tamper=tamper), first), ver

    (sk_v, sk_d), _ = session(rng=random.Random(0))
    agreed = sk_v == sk_d == pow(5, 6 * 15, 23) == 2
    aborted = total = 0
    for idx in range(6):
        for bit in range(64):
            total += 1
            tamper = lambda i, m, idx=idx, bit=bit: m.flip(bit) if i == idx else m
            try:
                session(tamper, random.Random(bit))
            except S.SakeError:
                aborted += 1
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    msg = bytes.fromhex("6bc1bee22e409f96e93d7e117393172a")
    cmac_ok = (S.aes_cmac(key, b"").hex() == "bb1d6929e95937287fa37d129b756746" and
               S.aes_cmac(key, msg).hex() == "070a16b46b4d4144f79bdd9dd04a287c")
    sha_ok = S.H(bytes(32)).hex() == \
        "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"
    dt = time.perf_counter() - t
    ok = agreed and aborted == total and cmac_ok and sha_ok and dt < 120
    record(9, ok, f"key {sk_v}, {aborted}/{total} tamperings aborted, "
                  f"CMAC {'ok' if cmac_ok else 'bad'}, SHA-256 {'ok' if sha_ok else 'bad'}")


def test_10_memory_copy_attacks():
    p = vf.VFParams(buffer_bytes=65536, body_instructions=320, unroll=2, iterations=100,
                    self_modifying=True, icache_bytes=4096, num_sms=1, blocks_per_sm=1,
                    warps_per_block=8)
    cfg = p.device_config(mem_jitter=250)
    img = vf.build_vf(p, 0)
    st = M.load_image(img, cfg)
    model = V.calibrate(img, 100, config=cfg, seed=11, state=st)
    parts = []
    ok = True
    for variant in ("memcopy_b", "memcopy_c", "memcopy_d"):
        setup = A.apply_attack(img, st, A.AttackSpec(variant))
        ver = V.Verifier(model, V.ChallengeSource(99, 1, p.iterations),
                         expected=lambda ch: vf.checksum_reference(img, ch))
        reps = [A.evaluate(setup, ver, functional=True, jitter_seed=V.jitter_seed_for(7, i))
                for i in range(100)]
        det = sum(r.detected for r in reps)
        reasons = sorted({r.verdict.reason.value for r in reps})
        ok &= det == 100
        parts.append(f"{variant[-1]} {det}/100 ({','.join(reasons)})")
    record(10, ok, "rejected: " + "; ".join(parts))


def test_11_user_kernel_overhead():
    rows = [E.kernel_bench(n) for n in (320, 6400)]
    ok = all(r.relative_difference <= 0.005 for r in rows)
    record(11, ok, "; ".join(f"n={r.size}: {r.relative_difference:.2e} relative, verification "
                             f"{r.verification_cycles} cycles" for r in rows))


def test_12_trng_quality():
    reps = [trng.entropy_report(trng.harvest(4, 65536)) for _ in range(20)]
    entropy = min(r.bits_per_byte for r in reps)
    passed = sum(r.passes() for r in reps)
    record(12, entropy >= 7.99 and passed >= 19,
           f"min {entropy:.4f} bits/byte, {passed}/20 runs pass monobit and chi-square")
