import pytest

from gpuattest import adversary as A, verifier as V, vf
from gpuattest.device import machine

P = vf.VFParams(buffer_bytes=65536, iterations=200, num_sms=1, blocks_per_sm=2,
                warps_per_block=4)
SM = vf.VFParams(buffer_bytes=65536, body_instructions=320, unroll=2, iterations=60,
                 self_modifying=True, icache_bytes=4096, num_sms=1, blocks_per_sm=1,
                 warps_per_block=8)


@pytest.fixture(scope="module")
def plain():
    img = vf.build_vf(P, 0)
    cfg = P.device_config(mem_jitter=250)
    st = machine.load_image(img, cfg)
    return img, st, V.calibrate(img, 30, config=cfg, seed=11, state=st)


@pytest.fixture(scope="module")
def saturated():
    p = vf.PROFILES["exp1"].with_(num_sms=1, iterations=300)
    img = vf.build_vf(p, 0)
    cfg = p.device_config(mem_jitter=250)
    st = machine.load_image(img, cfg)
    return img, st, V.calibrate(img, 30, config=cfg, seed=11, state=st)


@pytest.fixture(scope="module")
def selfmod():
    img = vf.build_vf(SM, 0)
    cfg = SM.device_config(mem_jitter=250)
    st = machine.load_image(img, cfg)
    return img, st, V.calibrate(img, 30, config=cfg, seed=11, state=st)


def _verifier(img, model, seed=99):
    return V.Verifier(model, V.ChallengeSource(seed, img.params.num_sms, img.params.iterations),
                      expected=lambda c: vf.checksum_reference(img, c))


def _evaluate(env, spec, functional, runs=3):
    img, st, model = env
    setup = A.apply_attack(img, st, spec)
    ver = _verifier(img, model)
    return [A.evaluate(setup, ver, functional=functional, jitter_seed=V.jitter_seed_for(7, i))
            for i in range(runs)]




@pytest.mark.parametrize("kwargs", [
    dict(variant="nop_inject", count=0),
    dict(variant="data_substitution"),
    dict(variant="proxy", latency=-1),
    dict(variant="parallel_takeover", warps=0),
])
def test_invalid_specs_raise(kwargs):
    with pytest.raises(A.Unsupported):
        A.AttackSpec(**kwargs)


def test_unknown_variant():
    with pytest.raises(ValueError):
        A.AttackSpec("teleport")


def test_substituted_word_outside_buffer(plain):
    img, st, _ = plain
    with pytest.raises(A.Unsupported):
        A.apply_attack(img, st, A.AttackSpec("data_substitution", words=(10**9,)))


def test_nop_costs_at_least_one_cycle_per_iteration(saturated):
    for rep in _evaluate(saturated, A.nop_inject(1), functional=False):
        assert rep.attacked_cycles - rep.honest_cycles >= 300
        assert rep.detected


def test_nop_changes_the_checksum(plain):
    rep = _evaluate(plain, A.nop_inject(1), functional=True, runs=1)[0]
    assert rep.checksum_correct is False and rep.detected


def test_honest_runs_pass(plain):
    img, st, model = plain
    ver = _verifier(img, model, seed=5)
    accepted = 0
    for i in range(20):
        ch = ver.challenge()
        m = V.measure(st, ch, jitter_seed=V.jitter_seed_for(8, i))
        accepted += ver.check(ch, m.checksum, m.cycles).accepted
    assert accepted >= 19


def test_data_substitution_keeps_checksum_but_is_slow(plain):
    spec = A.AttackSpec("data_substitution", words=(5000,))
    rep = _evaluate(plain, spec, functional=True, runs=1)[0]
    assert rep.checksum_correct is True
    assert rep.detected and rep.verdict.reason is V.Reason.TIMEOUT


def test_proxy_latency_beyond_slack(saturated):
    _, _, model = saturated
    slack = int(model.threshold - model.t_avg)
    far = _evaluate(saturated, A.AttackSpec("proxy", latency=slack + 1), functional=False)
    assert all(r.detected for r in far)


def test_takeover_keeps_checksum_but_is_slow(plain):
    rep = _evaluate(plain, A.AttackSpec("parallel_takeover", warps=1, spin=2000),
                    functional=True, runs=1)[0]
    assert rep.checksum_correct is True and rep.detected


def test_toctou_swap_detected_by_kernel_hash(plain):
    rep = _evaluate(plain, A.AttackSpec("toctou_swap"), functional=True, runs=1)[0]
    assert rep.checksum_correct is True
    assert rep.verdict.reason is V.Reason.CHECKSUM_MISMATCH


def test_precompute_replay_is_stale(plain):
    rep = _evaluate(plain, A.AttackSpec("precompute_replay"), functional=False, runs=1)[0]
    assert rep.verdict.reason is V.Reason.STALE_NONCE


def test_relocated_code_alone_is_invisible_without_self_modification(plain):
    # PC enters the checksum only through the patched immediates
    rep = _evaluate(plain, A.AttackSpec("memcopy_b"), functional=True, runs=1)[0]
    assert rep.checksum_correct is True


@pytest.mark.parametrize("variant", ["memcopy_c", "memcopy_d"])
def test_relocated_data_detected_on_plain_vf(plain, variant):
    reps = _evaluate(plain, A.AttackSpec(variant), functional=True, runs=2)
    assert all(r.detected for r in reps)


def test_memcopy_b_shadowing_costs_time_on_self_modifying_vf(selfmod):
    reps = _evaluate(selfmod, A.AttackSpec("memcopy_b"), functional=True, runs=2)
    assert all(r.checksum_correct and r.verdict.reason is V.Reason.TIMEOUT for r in reps)


@pytest.mark.parametrize("variant", ["memcopy_c", "memcopy_d"])
def test_relocated_dp_changes_checksum(selfmod, variant):
    reps = _evaluate(selfmod, A.AttackSpec(variant), functional=True, runs=2)
    assert all(r.checksum_correct is False and r.detected for r in reps)


def test_report_serializes(saturated):
    d = _evaluate(saturated, A.nop_inject(2), functional=False, runs=1)[0].to_dict()
    assert d["attack"] == {"variant": "nop_inject", "count": 2} and d["detected"]
