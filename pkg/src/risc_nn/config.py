"""Hardware configuration shared by the translator, simulators and reports."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    """Per-event energy in picojoules.  Placeholder values, not physical."""

    mac: float = 1.0
    opm_read: float = 2.0
    opm_write: float = 2.0
    iram_read: float = 3.0
    control: float = 4.0  # control-unit / fetch-decode overhead per issued instruction
    flit_hop_memory: float = 1.5
    flit_hop_interpe: float = 1.5
    flit_hop_control: float = 0.5
    cache_hit: float = 10.0
    cache_miss: float = 20.0
    dram_byte: float = 20.0
    control_message: float = 5.0


@dataclass(frozen=True)
class HardwareConfig:
    mesh_x: int = 8
    mesh_y: int = 8
    simd: int = 8
    iram_banks: int = 8
    iram_words: int = 512
    opm_banks: int = 16
    opm_entries: int = 128
    max_blocks: int = 32
    # memory subsystem
    cache_bytes: int = 1 << 20
    cache_slices: int = 8
    cache_ways: int = 4
    cache_block: int = 64
    cache_hit_latency: int = 2
    dram_latency: int = 40
    dram_bytes_per_cycle: int = 16
    mem_controllers: int = 1  # each owns a DRAM channel and cache_slices / mem_controllers slices
    # execution units
    lsu_window: int = 8
    accumulate32: bool = False  # saturating 32-bit MUL/MADD instead of 16-bit wrap
    cal_model: str = "bulk"  # "bulk" or "cycle"
    clock_ghz: float = 1.887
    watchdog: int = 20000
    energy: EnergyWeights = field(default_factory=EnergyWeights)

    def __post_init__(self):
        if self.cal_model not in ("bulk", "cycle"):
            raise ConfigError(f"cal_model must be 'bulk' or 'cycle', not {self.cal_model!r}")
        for name in ("mesh_x", "mesh_y", "simd", "iram_banks", "iram_words", "opm_banks", "opm_entries",
                     "max_blocks", "cache_slices", "cache_ways", "cache_block", "dram_bytes_per_cycle",
                     "lsu_window", "mem_controllers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.cache_slices % self.mem_controllers:
            raise ConfigError("mem_controllers must divide cache_slices")

    @property
    def n_pes(self) -> int:
        return self.mesh_x * self.mesh_y

    @property
    def entry_bytes(self) -> int:
        return 2 * self.simd

    @property
    def flits_per_entry(self) -> int:
        return max(1, -(-self.entry_bytes // 16))

    @property
    def opm_capacity(self) -> int:
        return self.opm_banks * self.opm_entries

    @property
    def iram_capacity(self) -> int:
        return self.iram_banks * self.iram_words

    @property
    def peak_ops_per_cycle(self) -> int:
        return self.n_pes * self.simd * 2

    def coord(self, pe: int) -> tuple[int, int]:
        return pe % self.mesh_x, pe // self.mesh_x

    def replace(self, **changes: Any) -> "HardwareConfig":
        if "energy" in changes and isinstance(changes["energy"], dict):
            changes["energy"] = dataclasses.replace(self.energy, **changes["energy"])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _apply(cfg: HardwareConfig, table: dict[str, Any], where: str) -> HardwareConfig:
    known = {f.name for f in dataclasses.fields(HardwareConfig)}
    ekeys = {f.name for f in dataclasses.fields(EnergyWeights)}
    for key, val in table.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown hardware key {key!r}")
        if key == "energy":
            bad = set(val) - ekeys
            if bad:
                raise ConfigError(f"{where}: unknown energy key(s) {sorted(bad)}")
    return cfg.replace(**table)


def load_hardware(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> HardwareConfig:
    cfg = HardwareConfig()
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _apply(cfg, data.get("hardware", {}), f"{path} [hardware]")
    if overrides:
        cfg = _apply(cfg, overrides, "overrides")
    return cfg


def dump_hardware(cfg: HardwareConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
