import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from gpuattest import sake as S

RFC4493_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
RFC4493_MSG = bytes.fromhex(
    "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e51"
    "30c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710")
RFC4493 = [
    (0, "bb1d6929e95937287fa37d129b756746"),
    (16, "070a16b46b4d4144f79bdd9dd04a287c"),
    (40, "dfa66747de9ae63030ca32611497c827"),
    (64, "51f0bebf7e3b9d92fc49741779363cfe"),
]
C = 0x1234_5678_9ABC_DEF0


@pytest.mark.parametrize("n,tag", RFC4493)
def test_aes_cmac_rfc4493(n, tag):
    assert S.aes_cmac(RFC4493_KEY, RFC4493_MSG[:n]).hex() == tag
    assert S.cmac_verify(RFC4493_KEY, RFC4493_MSG[:n], bytes.fromhex(tag))


def test_sha256_of_32_zero_bytes():
    assert S.H(bytes(32)).hex() == \
        "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"


def test_aes_ctr_sp800_38a_first_block():
    key = RFC4493_KEY
    ctr = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff")
    out = S.aes_ctr(key, ctr, RFC4493_MSG[:16])
    assert out.hex() == "874d6191b620e3261bef6864990db6ce"


def _pair(group=S.TEST_GROUP, a=6, b=15, c=C, cycles=100, bound=None, rng=None):
    ver, first = S.verifier_start(group, rng, secret=a, time_bound=bound,
                                  expected_c=lambda v2: C)
    dev = S.DeviceEndpoint(checksum=lambda v2: (c, cycles), rng=rng, secret=b)
    return ver, dev, first


def test_test_group_key_matches_modpow_oracle():
    ver, dev, first = _pair(rng=random.Random(1))
    sk_v, sk_d = S.run_protocol(ver, dev, S.Channel(latency=3), first)
    assert sk_v == sk_d == pow(5, 6 * 15, 23) == 2


def test_modp2048_agreement():
    rng = random.Random(2)
    ver, first = S.verifier_start(S.MODP_2048, rng, expected_c=lambda v2: C)
    dev = S.DeviceEndpoint(checksum=lambda v2: (C, 10), rng=rng)
    sk_v, sk_d = S.run_protocol(ver, dev, S.Channel(), first)
    assert sk_v == sk_d
    assert sk_v == pow(S.MODP_2048.g, ver.secret * dev.session.secret, S.MODP_2048.p)


@pytest.mark.parametrize("index", range(6))
def test_single_message_tampering_always_aborts(index):
    for bit in range(64):
        ver, dev, first = _pair(rng=random.Random(bit))
        tamper = lambda i, m, b=bit: m.flip(b) if i == index else m
        with pytest.raises(S.SakeError):
            S.run_protocol(ver, dev, S.Channel(tamper=tamper), first)
        assert ver.sk is None


def test_wrong_checksum_fails_first_mac():
    ver, dev, first = _pair(c=C ^ 1, rng=random.Random(0))
    with pytest.raises(S.AbortMac):
        S.run_protocol(ver, dev, S.Channel(), first)


def test_slow_device_aborts_on_timing():
    ver, dev, first = _pair(cycles=2000, bound=S.time_bound(1000.0), rng=random.Random(0))
    with pytest.raises(S.AbortTiming):
        S.run_protocol(ver, dev, S.Channel(), first)
    ver, dev, first = _pair(cycles=1000, bound=S.time_bound(1000.0), rng=random.Random(0))
    assert S.run_protocol(ver, dev, S.Channel(), first)[0] == 2


def test_time_bound_adds_slack():
    assert S.time_bound(100.0) == pytest.approx(105.0)
    assert S.time_bound(100.0, 0.0) == 100.0


def test_out_of_order_message_is_rejected():
    ver, first = S.verifier_start(S.TEST_GROUP, random.Random(0), expected_c=lambda v2: C)
    with pytest.raises(S.ProtocolStateError):
        S.verifier_receive_w0(ver, S.Message(S.MsgType.W0, bytes(32)))
    with pytest.raises(S.ProtocolStateError):
        S.verifier_receive_w2(ver, S.Message(S.MsgType.V1, bytes(48)), 0)


def test_session_cannot_be_reused():
    ver, dev, first = _pair(rng=random.Random(0))
    S.run_protocol(ver, dev, S.Channel(), first)
    with pytest.raises(S.ProtocolStateError):
        S.run_protocol(ver, dev, S.Channel(), first)


def test_chains_are_hash_chains():
    ver, dev, first = _pair(rng=random.Random(0))
    S.run_protocol(ver, dev, S.Channel(), first)
    for x0, x1, x2 in (ver.chain, dev.session.chain):
        assert S.H(x0) == x1 and S.H(x1) == x2


@given(st.sampled_from(list(S.MsgType)), st.binary(max_size=300))
def test_message_wire_round_trip(kind, payload):
    m = S.Message(kind, payload)
    assert S.Message.decode(m.encode()) == m


@pytest.mark.parametrize("blob", [b"", b"\x01\x00\x00", b"\x01\x00\x00\x00\x05ab",
                                  b"\x09\x00\x00\x00\x00"])
def test_malformed_wire_blobs(blob):
    with pytest.raises(S.WireError):
        S.Message.decode(blob)


def test_transcript_dump_is_json():
    import json
    ver, dev, first = _pair(rng=random.Random(0))
    ch = S.Channel(latency=5)
    S.run_protocol(ver, dev, ch, first)
    rows = json.loads(ch.dump())
    assert [r["type"] for r in rows] == [k.name for k in S.ORDER]
    assert [r["t"] for r in rows] == sorted(r["t"] for r in rows)


def test_mac_key_derivation():
    assert S.mac_key(C) == hashlib.sha256(C.to_bytes(8, "little")).digest()[:16]
    assert S.mac_key(b"abc") == hashlib.sha256(b"abc").digest()[:16]


def test_challenge_from_v2_is_deterministic():
    v2 = S.H(b"x")
    a, b = S.challenge_from_v2(v2, 3, 50), S.challenge_from_v2(v2, 3, 50)
    assert a == b and len(a.seeds) == 3 and a.iterations == 50
    assert S.challenge_from_v2(S.H(b"y"), 3, 50) != a


@pytest.mark.parametrize("mode", list(S.Mode))
@given(data=st.binary(max_size=200))
def test_payload_protection_round_trip(mode, data):
    blob = S.protect_payload(2, data, mode, iv=bytes(16))
    assert S.unprotect_payload(2, blob) == data
    if mode is S.Mode.ENCRYPT and len(data) >= 8:
        assert blob[17:17 + len(data)] != data


def test_tampered_payload_is_rejected():
    blob = bytearray(S.protect_payload(2, b"kernel", S.Mode.ENCRYPT))
    blob[20] ^= 1
    with pytest.raises(S.TagMismatch):
        S.unprotect_payload(2, bytes(blob))
    with pytest.raises(S.TagMismatch):
        S.unprotect_payload(3, S.protect_payload(2, b"kernel"))


def test_kernel_authentication_binds_code():
    r = bytes(32)
    assert S.authenticate_kernel(r, b"abc") != S.authenticate_kernel(r, b"abd")
    assert S.authenticate_kernel(r, b"abc") == hashlib.sha256(r + b"abc").digest()


def test_invalid_group():
    with pytest.raises(ValueError):
        S.DhGroup(23, 1, 5)
