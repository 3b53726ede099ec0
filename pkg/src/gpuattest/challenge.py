"""Per-SM challenge handed from the verifier to the device."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Challenge:
    seeds: tuple
    iterations: int
    nonce: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.iterations < 1:
            raise ValueError("iteration count must be >= 1")
        if any(not 0 <= s < 1 << 64 for s in self.seeds):
            raise ValueError("seeds must be 64-bit unsigned")

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "iterations": self.iterations, "nonce": self.nonce}

    @classmethod
    def from_dict(cls, d: dict) -> "Challenge":
        return cls(tuple(d["seeds"]), d["iterations"], d.get("nonce", 0))
