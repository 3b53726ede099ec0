"""X/Y cost model: useful cycles versus overhead the scheduler has to hide."""

from __future__ import annotations

from dataclasses import dataclass

from .config import DeviceConfig


@dataclass(frozen=True)
class CostModel:
    useful: int     # X
    overhead: int   # Y

    def hidden(self, config: DeviceConfig) -> bool:
        return self.overhead <= self.useful * (config.max_warps_per_sm // config.sched_width - 1)

    def cycles_per_iteration(self, config: DeviceConfig) -> float:
        """Per-warp-normalized cycles: X when hidden, otherwise the exposed latency dominates."""
        share = config.max_warps_per_sm // config.sched_width
        return max(float(self.useful), (self.useful + self.overhead) / share)

    @classmethod
    def for_instruction(cls, opcode_name: str, config: DeviceConfig) -> "CostModel":
        if opcode_name == "LDG":
            return cls(1, config.global_mem_latency)
        return cls(1, 0)
