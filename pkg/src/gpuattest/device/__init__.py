"""Deterministic cycle-counting accelerator simulator."""

from .config import A100, ConfigError, DeviceConfig, load_profile
from .machine import (
    BUF_BASE, DeviceError, ImageTooLarge, Launch, MachineState, NonTermination,
    OutOfRange, RunResult, Trap, hazard_share, load_image, program_image, run,
    stall_report, write_code,
)
from .cost import CostModel

__all__ = [
    "A100", "BUF_BASE", "ConfigError", "CostModel", "DeviceConfig", "DeviceError",
    "ImageTooLarge", "Launch", "MachineState", "NonTermination", "OutOfRange",
    "RunResult", "Trap", "hazard_share", "load_image", "load_profile", "program_image",
    "run", "stall_report", "write_code",
]
