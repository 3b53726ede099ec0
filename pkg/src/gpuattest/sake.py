"""Key establishment bootstrapped from the attestation checksum.

The verifier V and the device D each build a three-element hash chain.
D's chain is rooted in the checksum c it computed for V's challenge, so
only a device that ran the genuine kernel in time can authenticate its
first reply. The chains are then revealed one element at a time and the
final Diffie-Hellman exchange yields the shared key.

    V -> D  v2                  (V records t0)
    D -> V  w2, MAC_c(w2)       (V records t1, checks t1 - t0)
    V -> D  v1
    D -> V  w1, k, MAC_w2(k)
    V -> D  v0
    D -> V  w0
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import secrets
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from cryptography.hazmat.primitives import cmac
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .challenge import Challenge

HASH_BYTES = 32
TAG_BYTES = 16
KEY_BYTES = 16
DEFAULT_SLACK = 0.05

# RFC 3526 group 14 (2048-bit MODP), generator 2
MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)


class SakeError(Exception):
    pass


class AbortTiming(SakeError):
    pass


class AbortChainMismatch(SakeError):
    pass


class AbortMac(SakeError):
    pass


class ProtocolStateError(SakeError):
    pass


class TagMismatch(SakeError):
    pass


class WireError(SakeError):
    pass


@dataclass(frozen=True)
class DhGroup:
    p: int
    g: int
    bits: int

    def __post_init__(self):
        if self.p < 5 or not 1 < self.g < self.p - 1 or self.bits < 1:
            raise ValueError("invalid group parameters")

    @property
    def element_bytes(self) -> int:
        """Fixed width of encoded group elements (at least one hash width)."""
        return max(HASH_BYTES, (self.p.bit_length() + 7) // 8)

    def exp(self, base: int, e: int) -> int:
        return pow(base, e, self.p)

    def encode(self, x: int) -> bytes:
        return x.to_bytes(self.element_bytes, "big")

    def decode(self, b: bytes) -> int:
        return int.from_bytes(b, "big")

    def secret(self, rng) -> int:
        while True:
            x = rng.getrandbits(self.bits) % (self.p - 1)
            if x > 1:
                return x


TEST_GROUP = DhGroup(23, 5, 5)
MODP_2048 = DhGroup(MODP_2048_P, 2, 256)


def H(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def mac_key(secret) -> bytes:
    """AES key from a checksum (int) or chain element (bytes): SHA-256(x)[:16]."""
    if isinstance(secret, int):
        secret = secret.to_bytes(8, "little") if secret < 1 << 64 else \
            secret.to_bytes((secret.bit_length() + 7) // 8, "big")
    return H(secret)[:KEY_BYTES]


def aes_cmac(key: bytes, data: bytes) -> bytes:
    c = cmac.CMAC(algorithms.AES(key))
    c.update(data)
    return c.finalize()


def cmac_verify(key: bytes, data: bytes, tag: bytes) -> bool:
    c = cmac.CMAC(algorithms.AES(key))
    c.update(data)
    try:
        c.verify(tag)
    except Exception:
        return False
    return True


def aes_ctr(key: bytes, counter_block: bytes, data: bytes) -> bytes:
    """AES-CTR with an explicit initial 16-byte counter block."""
    enc = Cipher(algorithms.AES(key), modes.CTR(counter_block)).encryptor()
    return enc.update(data) + enc.finalize()


def authenticate_kernel(r: bytes, code: bytes) -> bytes:
    """h = SHA-256(r || code) over the user kernel."""
    return H(bytes(r) + bytes(code))


def challenge_from_v2(v2: bytes, num_sms: int, iterations: int) -> Challenge:
    """Per-SM seeds and nonce derived from the verifier's chain head."""
    seeds = tuple(int.from_bytes(H(v2 + struct.pack("<I", i))[:8], "little")
                  for i in range(num_sms))
    return Challenge(seeds, iterations, int.from_bytes(H(b"nonce" + v2)[:8], "little"))


# ---------------------------------------------------------------- wire format


class MsgType(enum.IntEnum):
    V2 = 1
    W2MAC = 2
    V1 = 3
    W1K = 4
    V0 = 5
    W0 = 6


ORDER = (MsgType.V2, MsgType.W2MAC, MsgType.V1, MsgType.W1K, MsgType.V0, MsgType.W0)


@dataclass(frozen=True)
class Message:
    kind: MsgType
    payload: bytes

    def encode(self) -> bytes:
        """type (1 byte) | payload length (4 bytes, big-endian) | payload."""
        return struct.pack(">BI", int(self.kind), len(self.payload)) + self.payload

    @classmethod
    def decode(cls, blob: bytes) -> "Message":
        if len(blob) < 5:
            raise WireError("truncated header")
        kind, n = struct.unpack(">BI", blob[:5])
        if len(blob) != 5 + n:
            raise WireError("length prefix does not match")
        try:
            return cls(MsgType(kind), bytes(blob[5:]))
        except ValueError:
            raise WireError(f"unknown message type {kind}") from None

    def flip(self, bit: int) -> "Message":
        b = bytearray(self.payload)
        b[bit // 8] ^= 1 << (bit % 8)
        return Message(self.kind, bytes(b))


def _split(payload: bytes, *sizes) -> list:
    if len(payload) != sum(sizes):
        raise WireError("payload has the wrong size")
    out, i = [], 0
    for n in sizes:
        out.append(payload[i:i + n])
        i += n
    return out


class Channel:
    """FIFO between the two parties with a simulated clock in cycles.

    ``tamper(index, message)`` may return a modified message; ``delay(index,
    message)`` adds cycles to its delivery. Index counts messages from 0.
    """

    def __init__(self, latency: int = 0, tamper: Optional[Callable] = None,
                 delay: Optional[Callable] = None):
        self.latency = latency
        self.tamper = tamper
        self.delay = delay
        self.now = 0
        self.queue = deque()
        self.transcript = []
        self.sent = 0

    def send(self, msg: Message) -> None:
        i = self.sent
        self.sent += 1
        if self.tamper is not None:
            msg = self.tamper(i, msg)
        blob = msg.encode()
        self.now += self.latency + (self.delay(i, msg) if self.delay else 0)
        self.transcript.append({"index": i, "type": msg.kind.name, "t": self.now,
                                "hex": blob.hex()})
        self.queue.append(blob)

    def receive(self) -> Message:
        if not self.queue:
            raise ProtocolStateError("no message pending")
        return Message.decode(self.queue.popleft())

    def advance(self, cycles: int) -> None:
        self.now += int(cycles)

    def dump(self) -> str:
        return json.dumps(self.transcript, indent=2)


# ---------------------------------------------------------------- sessions


class Role(str, enum.Enum):
    VERIFIER = "verifier"
    DEVICE = "device"


@dataclass
class SakeSession:
    """One party's protocol state; ``step`` is the index of the next message it handles."""

    role: Role
    group: DhGroup
    secret: int
    chain: tuple                     # (x0, x1, x2) with x1 = H(x0), x2 = H(x1)
    step: int = 0
    peer: dict = field(default_factory=dict)
    c: Optional[int] = None
    t0: Optional[int] = None
    t1: Optional[int] = None
    time_bound: Optional[float] = None
    expected_c: Optional[Callable[[bytes], int]] = None
    sk: Optional[int] = None
    public: Optional[int] = None

    def _expect(self, step: int) -> None:
        if self.step != step:
            raise ProtocolStateError(f"{self.role.value} at step {self.step}, not {step}")


def verifier_start(group: DhGroup, rng=None, *, secret: Optional[int] = None,
                   time_bound: Optional[float] = None,
                   expected_c: Optional[Callable[[bytes], int]] = None,
                   now: int = 0) -> tuple:
    """New verifier session and its first message v2; t0 is taken at ``now``."""
    rng = rng or secrets.SystemRandom()
    a = group.secret(rng) if secret is None else secret
    v0 = group.encode(group.exp(group.g, a))
    v1 = H(v0)
    v2 = H(v1)
    s = SakeSession(Role.VERIFIER, group, a, (v0, v1, v2), step=1, t0=now,
                    time_bound=time_bound, expected_c=expected_c)
    return s, Message(MsgType.V2, v2)


def device_respond(v2: bytes, c: int, rng=None, *, group: DhGroup = TEST_GROUP,
                   r: Optional[bytes] = None) -> tuple:
    """New device session for challenge ``v2`` and checksum ``c``: (session, w2 || MAC_c(w2))."""
    rng = rng or secrets.SystemRandom()
    r = r if r is not None else rng.getrandbits(256).to_bytes(32, "big")
    w0 = H(int(c).to_bytes(8, "little") + r)
    w1 = H(w0)
    w2 = H(w1)
    s = SakeSession(Role.DEVICE, group, group.secret(rng), (w0, w1, w2), step=2, c=int(c))
    s.peer["v2"] = bytes(v2)
    tag = aes_cmac(mac_key(int(c)), w2)
    return s, Message(MsgType.W2MAC, w2 + tag)


def verifier_receive_w2(s: SakeSession, msg: Message, now: int) -> Message:
    s._expect(1)
    if msg.kind != MsgType.W2MAC:
        raise ProtocolStateError(f"expected W2MAC, got {msg.kind.name}")
    s.t1 = now
    if s.time_bound is not None and s.t1 - s.t0 > s.time_bound:
        raise AbortTiming(f"reply after {s.t1 - s.t0} cycles, bound {s.time_bound:.1f}")
    w2, tag = _split(msg.payload, HASH_BYTES, TAG_BYTES)
    if s.expected_c is None:
        raise ProtocolStateError("verifier has no expected checksum")
    s.c = int(s.expected_c(s.chain[2]))
    if not cmac_verify(mac_key(s.c), w2, tag):
        raise AbortMac("MAC over w2 does not verify under the expected checksum")
    s.peer["w2"] = w2
    s.step = 3
    return Message(MsgType.V1, s.chain[1])


def device_receive_v1(s: SakeSession, msg: Message) -> Message:
    s._expect(2)
    if msg.kind != MsgType.V1:
        raise ProtocolStateError(f"expected V1, got {msg.kind.name}")
    v1 = _split(msg.payload, HASH_BYTES)[0]
    if H(v1) != s.peer["v2"]:
        raise AbortChainMismatch("v1 does not hash to v2")
    s.peer["v1"] = v1
    k = s.group.encode(s.group.exp(s.group.g, s.secret))
    s.public = s.group.decode(k)
    tag = aes_cmac(mac_key(s.chain[2]), k)
    s.step = 4
    return Message(MsgType.W1K, s.chain[1] + k + tag)


def verifier_receive_w1k(s: SakeSession, msg: Message) -> Message:
    s._expect(3)
    if msg.kind != MsgType.W1K:
        raise ProtocolStateError(f"expected W1K, got {msg.kind.name}")
    w1, k, tag = _split(msg.payload, HASH_BYTES, s.group.element_bytes, TAG_BYTES)
    # chain consistency first, then the MAC over k
    if H(w1) != s.peer["w2"]:
        raise AbortChainMismatch("w1 does not hash to w2")
    if not cmac_verify(mac_key(s.peer["w2"]), k, tag):
        raise AbortMac("MAC over k does not verify")
    s.peer["w1"] = w1
    s.peer["k"] = s.group.decode(k)
    s.step = 5
    return Message(MsgType.V0, s.chain[0])


def device_receive_v0(s: SakeSession, msg: Message) -> Message:
    s._expect(4)
    if msg.kind != MsgType.V0:
        raise ProtocolStateError(f"expected V0, got {msg.kind.name}")
    v0 = _split(msg.payload, s.group.element_bytes)[0]
    if H(v0) != s.peer["v1"]:
        raise AbortChainMismatch("v0 does not hash to v1")
    s.peer["v0"] = s.group.decode(v0)
    s.sk = s.group.exp(s.peer["v0"], s.secret)
    s.step = 6
    return Message(MsgType.W0, s.chain[0])


def verifier_receive_w0(s: SakeSession, msg: Message) -> int:
    s._expect(5)
    if msg.kind != MsgType.W0:
        raise ProtocolStateError(f"expected W0, got {msg.kind.name}")
    w0 = _split(msg.payload, HASH_BYTES)[0]
    if H(w0) != s.peer["w1"]:
        raise AbortChainMismatch("w0 does not hash to w1")
    s.sk = s.group.exp(s.peer["k"], s.secret)
    s.step = 6
    return s.sk


@dataclass
class DeviceEndpoint:
    """The device side before it has a session: it turns v2 into a checksum.

    ``checksum(v2)`` returns (c, cycles spent computing it).
    """

    checksum: Callable[[bytes], tuple]
    rng: object = None
    secret: Optional[int] = None
    session: Optional[SakeSession] = None


def run_protocol(verifier: SakeSession, device: DeviceEndpoint, channel: Channel,
                 first: Optional[Message] = None) -> tuple:
    """Drive all six messages; returns (sk_V, sk_D) or raises the detecting side's abort.

    ``first`` is the v2 message returned by verifier_start.
    """
    if verifier.step != 1:
        raise ProtocolStateError("verifier session already used")
    verifier.t0 = channel.now
    channel.send(first or Message(MsgType.V2, verifier.chain[2]))
    m = channel.receive()
    if m.kind != MsgType.V2:
        raise ProtocolStateError(f"expected V2, got {m.kind.name}")
    v2 = _split(m.payload, HASH_BYTES)[0]
    c, cycles = device.checksum(v2)
    channel.advance(cycles)
    ds, reply = device_respond(v2, c, device.rng, group=verifier.group)
    if device.secret is not None:
        ds.secret = device.secret
    device.session = ds
    channel.send(reply)
    channel.send(verifier_receive_w2(verifier, channel.receive(), channel.now))
    channel.send(device_receive_v1(ds, channel.receive()))
    channel.send(verifier_receive_w1k(verifier, channel.receive()))
    channel.send(device_receive_v0(ds, channel.receive()))
    sk_v = verifier_receive_w0(verifier, channel.receive())
    return sk_v, ds.sk


def time_bound(threshold: float, slack: float = DEFAULT_SLACK) -> float:
    """Bound on t1 - t0: the attestation threshold plus protocol slack."""
    return threshold * (1.0 + slack)


# ---------------------------------------------------------------- payload protection


class Mode(str, enum.Enum):
    AUTHENTICATE = "authenticate"
    ENCRYPT = "encrypt+authenticate"


def session_keys(sk: int) -> tuple:
    """(encryption key, MAC key) derived from the DH shared secret."""
    raw = sk.to_bytes(max(1, (sk.bit_length() + 7) // 8), "big")
    return H(b"enc" + raw)[:KEY_BYTES], H(b"mac" + raw)[:KEY_BYTES]


def protect_payload(sk: int, data: bytes, mode=Mode.AUTHENTICATE, *,
                    iv: Optional[bytes] = None) -> bytes:
    """Wire blob: mode byte | [16-byte counter block | ciphertext] or data | CMAC tag."""
    mode = Mode(mode)
    ek, mk = session_keys(sk)
    if mode is Mode.AUTHENTICATE:
        body = b"\x01" + bytes(data)
    else:
        iv = iv if iv is not None else os.urandom(16)
        body = b"\x02" + iv + aes_ctr(ek, iv, bytes(data))
    return body + aes_cmac(mk, body)


def unprotect_payload(sk: int, blob: bytes) -> bytes:
    ek, mk = session_keys(sk)
    if len(blob) < 1 + TAG_BYTES:
        raise TagMismatch("blob too short")
    body, tag = blob[:-TAG_BYTES], blob[-TAG_BYTES:]
    if not cmac_verify(mk, body, tag):
        raise TagMismatch("authentication tag does not verify")
    if body[0] == 1:
        return body[1:]
    if body[0] == 2 and len(body) >= 17:
        return aes_ctr(ek, body[1:17], body[17:])
    raise TagMismatch("unknown protection mode")
