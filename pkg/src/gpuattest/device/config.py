"""Device configuration and profile files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    """Topology and cost parameters of the simulated accelerator.

    Defaults follow an A100-class part. ``mem_jitter`` adds a uniform
    0..mem_jitter cycles to every global load; 250 gives the 250-500 cycle
    range, 0 keeps the simulator exactly deterministic.
    """

    num_sms: int = 108
    max_warps_per_sm: int = 64
    warp_size: int = 32
    sched_width: int = 4
    regs_per_sm: int = 65536
    regs_per_thread: int = 32
    fma_dispatch_latency: int = 2
    alu_dispatch_latency: int = 2
    raw_dependency_latency: int = 4
    global_mem_latency: int = 250
    mem_jitter: int = 0
    jitter_seed: int = 0
    register_access_latency: int = 4
    shared_mem_latency: int = 30
    l0_icache_words: int = 1024
    l2_icache_bytes: int = 131072
    icache_line_bytes: int = 128
    icache_fetch_penalty: int = 80
    blocks_per_sm: int = 2
    cycle_budget: int = 10**9
    clock_hz: float = 1.41e9

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("mem_jitter", "jitter_seed"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be >= 0")
            elif not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v!r}")
        if self.regs_per_thread * self.warp_size * self.max_warps_per_sm > self.regs_per_sm:
            raise ConfigError("register file too small for full occupancy")
        if self.max_warps_per_sm % self.blocks_per_sm:
            raise ConfigError("max_warps_per_sm must be a multiple of blocks_per_sm")
        if self.icache_line_bytes % 16 or self.l2_icache_bytes % self.icache_line_bytes:
            raise ConfigError("icache sizes must be whole 16-byte words and whole lines")

    @property
    def warps_per_block(self) -> int:
        return self.max_warps_per_sm // self.blocks_per_sm

    @property
    def threads(self) -> int:
        return self.num_sms * self.max_warps_per_sm * self.warp_size

    @property
    def hiding_bound(self) -> int:
        """Largest overhead Y hidden behind one useful cycle: X(W/width - 1) with X = 1."""
        return self.max_warps_per_sm // self.sched_width - 1

    def with_(self, **changes) -> "DeviceConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown device fields: {sorted(unknown)}")
        return cls(**d)


A100 = DeviceConfig()


def load_profile(path) -> DeviceConfig:
    """Read a DeviceConfig from a .toml or .json file.

    TOML files may put the fields at top level or under a ``[device]`` table.
    """
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"profile {p} does not exist")
    if p.suffix == ".toml":
        data = tomllib.loads(p.read_text())
    elif p.suffix == ".json":
        data = json.loads(p.read_text())
    else:
        raise ConfigError(f"unsupported profile type {p.suffix!r}")
    if "device" in data and isinstance(data["device"], dict):
        data = data["device"]
    return DeviceConfig.from_dict(data)
