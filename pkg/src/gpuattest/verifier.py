"""Challenges, timing calibration and accept/reject decisions."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
import statistics
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .challenge import Challenge
from .device import machine
from .device.config import DeviceConfig

SIGMA_FACTOR = 2.5
MIN_CALIBRATION_RUNS = 30
# one-sided normal tail beyond 2.5 sigma; the quantile mode targets the same rate
NORMAL_TAIL = 0.5 * math.erfc(SIGMA_FACTOR / math.sqrt(2))


class CalibrationError(ValueError):
    pass


class Reason(str, enum.Enum):
    OK = "ok"
    CHECKSUM_MISMATCH = "checksum_mismatch"
    TIMEOUT = "timeout"
    STALE_NONCE = "stale_nonce"


class DeterministicRng:
    """SHA-256 in counter mode over a 64-bit seed: reproducible, unpredictable without it."""

    def __init__(self, seed: int):
        self._key = int(seed).to_bytes(8, "little", signed=False)
        self._ctr = 0
        self._buf = b""

    def bytes(self, n: int) -> bytes:
        while len(self._buf) < n:
            block = hashlib.sha256(self._key + self._ctr.to_bytes(8, "little")).digest()
            self._buf += block
            self._ctr += 1
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def u64(self) -> int:
        return int.from_bytes(self.bytes(8), "little")

    def below(self, n: int) -> int:
        return self.u64() % n


class ChallengeSource:
    """Challenge stream for one verifier; nonces are never repeated."""

    def __init__(self, seed: int, num_sms: int, iterations: int):
        self.rng = DeterministicRng(seed)
        self.num_sms = num_sms
        self.iterations = iterations
        self.issued = set()

    def next(self) -> Challenge:
        seeds = tuple(self.rng.u64() for _ in range(self.num_sms))
        nonce = self.rng.u64()
        while nonce in self.issued:
            nonce = self.rng.u64()
        self.issued.add(nonce)
        return Challenge(seeds, self.iterations, nonce)


def generate_challenge(source: ChallengeSource) -> Challenge:
    return source.next()


@dataclass(frozen=True)
class TimingModel:
    """Runtime statistics of honest runs.

    In ``normal`` mode the threshold is ``t_avg + 2.5 * sigma``; ``quantile``
    mode uses the empirical quantile with the same nominal tail mass.
    """

    t_avg: float
    sigma: float
    runs: int
    mode: str = "normal"
    quantile_threshold: Optional[float] = None
    samples: tuple = field(default=(), repr=False, compare=False)

    @property
    def threshold(self) -> float:
        if self.mode == "quantile" and self.quantile_threshold is not None:
            return self.quantile_threshold
        return self.t_avg + SIGMA_FACTOR * self.sigma

    @classmethod
    def from_samples(cls, samples: Sequence[float], mode: str = "normal") -> "TimingModel":
        xs = [float(x) for x in samples]
        if len(xs) < MIN_CALIBRATION_RUNS:
            raise CalibrationError(f"need at least {MIN_CALIBRATION_RUNS} runs, got {len(xs)}")
        if mode not in ("normal", "quantile"):
            raise CalibrationError(f"unknown threshold mode {mode!r}")
        q = float(np.quantile(xs, 1.0 - NORMAL_TAIL)) if mode == "quantile" else None
        return cls(statistics.fmean(xs), statistics.stdev(xs), len(xs), mode, q, tuple(xs))

    def to_dict(self) -> dict:
        return {"t_avg": self.t_avg, "sigma": self.sigma, "threshold": self.threshold,
                "runs": self.runs, "mode": self.mode}


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Reason
    measured: float
    expected: Optional[int]
    received: Optional[int] = None


def verify(response: Optional[int], elapsed: float, expected: Optional[int],
           model: TimingModel) -> Verdict:
    """Accept iff the checksum matches and it arrived within the threshold.

    ``expected=None`` skips the value check (timing-only experiments).
    """
    if expected is not None and response != expected:
        return Verdict(False, Reason.CHECKSUM_MISMATCH, elapsed, expected, response)
    if elapsed > model.threshold:
        return Verdict(False, Reason.TIMEOUT, elapsed, expected, response)
    return Verdict(True, Reason.OK, elapsed, expected, response)


# ---------------------------------------------------------------- measurement


@dataclass(frozen=True)
class Measurement:
    cycles: int
    checksum: Optional[int]
    result: machine.RunResult


def measure(state: machine.MachineState, challenge: Challenge, *, functional: bool = True,
            jitter_seed: Optional[int] = None, fast_forward: Optional[tuple] = None,
            launch: Optional[machine.Launch] = None) -> Measurement:
    """One prover run. Timing-only runs report no checksum; a trap is a missing response."""
    r = machine.run(state, challenge, timing_only=not functional, launch=launch,
                    fast_forward=None if functional else fast_forward,
                    jitter_seed=jitter_seed, raise_on_trap=False)
    checksum = r.checksum if functional else None
    return Measurement(r.cycles, checksum, r)


def jitter_seed_for(seed: int, run: int) -> int:
    return int.from_bytes(hashlib.sha256(f"jitter:{seed}:{run}".encode()).digest()[:7], "little")


def calibrate(image, runs: int = 100, *, config: DeviceConfig, seed: int = 0,
              iterations: Optional[int] = None, mode: str = "normal",
              state: Optional[machine.MachineState] = None) -> TimingModel:
    """Time ``runs`` honest timing-only executions under fresh challenges and noise."""
    if runs < MIN_CALIBRATION_RUNS:
        raise CalibrationError(f"need at least {MIN_CALIBRATION_RUNS} runs, got {runs}")
    state = state or machine.load_image(image, config)
    iters = iterations or image.params.iterations
    src = ChallengeSource(seed, config.num_sms, iters)
    ff = None if image.params.self_modifying else image.fast_forward()
    samples = []
    for i in range(runs):
        m = measure(state, src.next(), functional=False, jitter_seed=jitter_seed_for(seed, i),
                    fast_forward=ff)
        samples.append(m.cycles)
    return TimingModel.from_samples(samples, mode)


class Verifier:
    """A verifier session: issues challenges once and judges the responses.

    ``expected`` maps a challenge to the checksum the prover must return; it
    defaults to no value check.
    """

    def __init__(self, model: TimingModel, source: ChallengeSource,
                 expected: Optional[Callable[[Challenge], int]] = None):
        self.model = model
        self.source = source
        self.expected = expected
        self.outstanding = {}
        self.accepted_nonces = set()

    def challenge(self) -> Challenge:
        ch = self.source.next()
        self.outstanding[ch.nonce] = ch
        return ch

    def check(self, challenge: Challenge, response: Optional[int], elapsed: float, *,
              check_value: bool = True) -> Verdict:
        """Judge one response; ``check_value=False`` is for timing-only runs."""
        pending = self.outstanding.pop(challenge.nonce, None)
        if pending is None or pending != challenge:
            return Verdict(False, Reason.STALE_NONCE, elapsed, None, response)
        want = self.expected(challenge) if (self.expected and check_value) else None
        v = verify(response, elapsed, want, self.model)
        if v.accepted:
            self.accepted_nonces.add(challenge.nonce)
        return v


# ---------------------------------------------------------------- coverage


def inclusion_probability(words: int, accesses: int) -> float:
    """Probability that one word is never read by ``accesses`` uniform reads: (1 - 1/S)^N."""
    if words < 1 or accesses < 0:
        raise ValueError("need S >= 1 and N >= 0")
    if words == 1:
        return 1.0 if accesses == 0 else 0.0
    with localcontext() as ctx:
        ctx.prec = 50
        s = Decimal(words)
        return float((Decimal(accesses) * (1 - 1 / s).ln()).exp())


def inclusion_monte_carlo(words: int, accesses: int, trials: int, seed: int = 0) -> tuple:
    """(estimate, standard error) of never touching a fixed word, by simulation.

    Each trial draws the index of the first read that hits the word; the word
    is missed when that index exceeds ``accesses``.
    """
    rng = np.random.default_rng(seed)
    first_hit = rng.geometric(1.0 / words, size=trials)
    p = float(np.mean(first_hit > accesses))
    return p, math.sqrt(p * (1 - p) / trials)


# ---------------------------------------------------------------- output

CSV_COLUMNS = ("run", "cycles", "checksum", "verdict", "reason")


def append_csv(path, rows: Sequence[dict]) -> None:
    p = Path(path)
    new = not p.exists() or p.stat().st_size == 0
    with p.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)
