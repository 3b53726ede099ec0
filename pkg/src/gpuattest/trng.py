"""Randomness harvested from racing, unsynchronized counter updates.

Worker threads increment shared counters without any locking. Each raw bit
is the parity of the counter value a worker observed, folded with the low
bit of the clock at the moment it observed it; on a single core the
interleaving of the workers only changes at scheduler ticks, and the
execution-time jitter of the contended loop carries most of the noise in
between. Raw bits are von Neumann debiased, packed, and every 64-byte block
is conditioned with SHA-256 into 32 output bytes.

This is the only module with intentional data races.
"""

from __future__ import annotations

import hashlib
import sys
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import chi2

BLOCK_BYTES = 64
MIN_SAMPLE = 1024
CELLS = 8


class InsufficientParallelism(RuntimeError):
    pass


class SampleTooSmall(ValueError):
    pass


def von_neumann(bits: np.ndarray) -> np.ndarray:
    """Keep the first bit of every unequal pair: 01 -> 0, 10 -> 1."""
    n = len(bits) // 2 * 2
    a, b = bits[0:n:2], bits[1:n:2]
    return a[a != b]


def _race(workers: int, samples: int) -> np.ndarray:
    cells = [0] * CELLS
    logs = [None] * workers
    clock = time.perf_counter_ns

    def work(wid: int) -> None:
        out = []
        put = out.append
        k = wid
        for _ in range(samples):
            k = (k + 1) & (CELLS - 1)
            v = cells[k]
            cells[k] = v + 1        # unsynchronized read-modify-write
            put(v ^ clock())
        logs[wid] = out

    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-6)
    try:
        threads = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        sys.setswitchinterval(old)
    raw = np.concatenate([np.array(x, dtype=np.int64) for x in logs])
    return (raw & 1).astype(np.uint8)


def harvest(workers: int, nbytes: int) -> bytes:
    """``nbytes`` conditioned random bytes from ``workers`` racing threads."""
    if workers < 2:
        raise InsufficientParallelism("racing needs at least two workers")
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    out = bytearray()
    pool = np.zeros(0, dtype=np.uint8)
    need_bits = BLOCK_BYTES * 8
    while len(out) < nbytes:
        blocks = -(-(nbytes - len(out)) // 32)
        # about a quarter of raw bits survive debiasing
        per_worker = max(4096, (blocks * need_bits * 4 + need_bits) // workers + 1)
        pool = np.concatenate([pool, von_neumann(_race(workers, per_worker))])
        usable = len(pool) // need_bits * need_bits
        packed = np.packbits(pool[:usable]).tobytes()
        pool = pool[usable:]
        for i in range(0, len(packed), BLOCK_BYTES):
            out += hashlib.sha256(packed[i:i + BLOCK_BYTES]).digest()
    return bytes(out[:nbytes])


@dataclass(frozen=True)
class EntropyReport:
    bits_per_byte: float
    chi_square: float
    p_value: float
    monobit: float          # proportion of one bits
    mean: float
    size: int

    def passes(self, alpha: float = 0.001, monobit_tol: float = 0.01) -> bool:
        return self.p_value > alpha and abs(self.monobit - 0.5) < monobit_tol

    def to_dict(self) -> dict:
        return asdict(self)


def entropy_report(sample: bytes) -> EntropyReport:
    """Shannon estimate over the byte histogram, chi-square against uniform, monobit."""
    if len(sample) < MIN_SAMPLE:
        raise SampleTooSmall(f"need at least {MIN_SAMPLE} bytes, got {len(sample)}")
    a = np.frombuffer(bytes(sample), dtype=np.uint8)
    counts = np.bincount(a, minlength=256).astype(np.float64)
    n = float(len(a))
    p = counts[counts > 0] / n
    h = float(-(p * np.log2(p)).sum())
    expected = n / 256.0
    stat = float(((counts - expected) ** 2 / expected).sum())
    ones = int(np.unpackbits(a).sum())
    return EntropyReport(
        bits_per_byte=min(8.0, max(0.0, h)),
        chi_square=stat,
        p_value=float(chi2.sf(stat, 255)),
        monobit=ones / (8 * n),
        mean=float(a.mean()),
        size=len(a),
    )


def throughput(workers: int = 4, nbytes: int = 65536) -> float:
    """Conditioned bytes per second on this host (reported, not asserted)."""
    t = time.perf_counter()
    harvest(workers, nbytes)
    return nbytes / max(time.perf_counter() - t, 1e-9)


def write_raw_sample(path, workers: int = 4, nbits: int = 1 << 20) -> int:
    """Debiased but unconditioned bits for external test batteries; returns bytes written."""
    bits = np.zeros(0, dtype=np.uint8)
    while len(bits) < nbits:
        bits = np.concatenate([bits, von_neumann(_race(workers, max(4096, nbits // workers)))])
    data = np.packbits(bits[:nbits]).tobytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)
