"""System specification: chip resources, composed network dimensions, tech and cost catalogs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

TOPOLOGIES = ("ring", "fully_connected", "switch")

GB = 1e9
MB = 1e6
TB = 1e12

# Floor for the power regression, in kW; the fitted parabola dips below zero
# between roughly 100 and 1330 TFLOPS.
POWER_FLOOR_KW = 0.01


class SystemSpecError(ValueError):
    """Invalid system specification."""


@dataclass(frozen=True)
class ChipSpec:
    name: str
    t_lim: int
    t_flop: float
    s_cap: float
    d_cap: float
    d_bw: float
    power_w: Optional[float] = None
    price_usd: Optional[float] = None
    # Compute grid of one tile (rows, cols), used by the tiling-efficiency model.
    tile_shape: tuple[int, int] = (32, 32)

    @property
    def peak(self) -> float:
        return self.t_lim * self.t_flop

    def validate(self) -> "ChipSpec":
        for f in ("t_lim", "t_flop", "s_cap", "d_cap", "d_bw"):
            if not getattr(self, f) > 0:
                raise SystemSpecError(f"chip {self.name!r}: {f} must be > 0")
        for f in ("power_w", "price_usd"):
            v = getattr(self, f)
            if v is not None and v <= 0:
                raise SystemSpecError(f"chip {self.name!r}: {f} must be > 0 when given")
        if int(self.t_lim) != self.t_lim:
            raise SystemSpecError(f"chip {self.name!r}: t_lim must be an integer")
        if min(self.tile_shape) < 1:
            raise SystemSpecError(f"chip {self.name!r}: tile_shape must be positive")
        return self


@dataclass(frozen=True)
class NetworkDim:
    topology: str
    size: int
    link_bw: float
    hop_latency: float = 0.0

    def validate(self) -> "NetworkDim":
        if self.topology not in TOPOLOGIES:
            raise SystemSpecError(f"unknown topology {self.topology!r}")
        if self.size < 1 or int(self.size) != self.size:
            raise SystemSpecError(f"dim size must be an integer >= 1, got {self.size}")
        if not self.link_bw > 0:
            raise SystemSpecError("link_bw must be > 0")
        if self.hop_latency < 0:
            raise SystemSpecError("hop_latency must be >= 0")
        return self

    def links(self) -> int:
        """Links in one instance of this one-dimensional topology."""
        p = self.size
        if p == 1:
            return 0
        if self.topology == "ring":
            return p
        if self.topology == "fully_connected":
            return p * (p - 1) // 2
        return p  # switch: one uplink per chip


@dataclass(frozen=True)
class SystemSpec:
    chip: ChipSpec
    dims: tuple[NetworkDim, ...]
    tp_dim: Optional[int] = None
    pp_dim: Optional[int] = None
    dp_dim: Optional[int] = None
    memory_tech: Optional[str] = None
    interconnect_tech: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))

    def _size(self, idx: Optional[int]) -> int:
        return 1 if idx is None else self.dims[idx].size

    @property
    def n_tp(self) -> int:
        return self._size(self.tp_dim)

    @property
    def n_pp(self) -> int:
        return self._size(self.pp_dim)

    @property
    def n_dp(self) -> int:
        return self._size(self.dp_dim)

    @property
    def n_chips(self) -> int:
        return math.prod(d.size for d in self.dims)

    def dim_for(self, strategy: str) -> Optional[NetworkDim]:
        idx = {"tp": self.tp_dim, "pp": self.pp_dim, "dp": self.dp_dim}[strategy]
        return None if idx is None else self.dims[idx]

    def validate(self) -> "SystemSpec":
        self.chip.validate()
        if not self.dims:
            raise SystemSpecError("system needs at least one network dim")
        for d in self.dims:
            d.validate()
        assigned = [i for i in (self.tp_dim, self.pp_dim, self.dp_dim) if i is not None]
        for i in assigned:
            if not 0 <= i < len(self.dims):
                raise SystemSpecError(f"dim index {i} out of range for {len(self.dims)} dims")
        if len(set(assigned)) != len(assigned):
            raise SystemSpecError("a network dim can only be assigned to one parallelization strategy")
        if self.n_tp * self.n_pp * self.n_dp != self.n_chips:
            raise SystemSpecError(
                f"dim-size mismatch: n_tp*n_pp*n_dp = {self.n_tp * self.n_pp * self.n_dp} "
                f"but dims hold {self.n_chips} chips"
            )
        return self


@dataclass(frozen=True)
class TechCatalog:
    # name -> {"bandwidth": B/s, "price": $/GB, "power": W/GB}
    memory: dict = field(default_factory=dict)
    # name -> {"bandwidth": B/s, "price": $/link, "power": W/link}
    interconnect: dict = field(default_factory=dict)

    def validate(self) -> "TechCatalog":
        for table in (self.memory, self.interconnect):
            for name, entry in table.items():
                if not entry.get("bandwidth", 0) > 0:
                    raise SystemSpecError(f"tech {name!r}: bandwidth must be > 0")
        return self


# Price and power entries are rough estimates (street prices and datasheet
# figures); bandwidths are the nominal values used in the design-space study.
DEFAULT_TECH = TechCatalog(
    memory={
        "DDR": {"bandwidth": 200 * GB, "price": 3.0, "power": 0.4},
        "HBM": {"bandwidth": 3000 * GB, "price": 15.0, "power": 0.8},
    },
    interconnect={
        "PCIe": {"bandwidth": 25 * GB, "price": 50.0, "power": 5.0},
        "NVLink": {"bandwidth": 900 * GB, "price": 400.0, "power": 20.0},
    },
)


def builtin_chips() -> list[ChipSpec]:
    """H100, TPU v4, SN30 and WSE-2 presets.

    Peak throughput and SRAM come from published vendor figures; tile counts,
    tile shapes, DRAM, power and price are estimates.
    """
    return [
        ChipSpec("H100", 132, 993e12 / 132, 113 * MB, 80 * GB, 3000 * GB,
                 power_w=700.0, price_usd=30000.0, tile_shape=(64, 64)),
        ChipSpec("TPUv4", 8, 275e12 / 8, 160 * MB, 32 * GB, 1200 * GB,
                 power_w=192.0, price_usd=8000.0, tile_shape=(128, 128)),
        ChipSpec("SN30", 1280, 614e12 / 1280, 640 * MB, 1 * TB, 200 * GB,
                 power_w=900.0, price_usd=25000.0, tile_shape=(32, 32)),
        ChipSpec("WSE-2", 850_000, 7500e12 / 850_000, 40 * GB, 12 * TB, 200 * GB,
                 power_w=20000.0, price_usd=2_000_000.0, tile_shape=(1, 1)),
    ]


def sn10_chip(s_cap: float = 320 * MB, d_bw: float = 200 * GB, peak: float = 307.2e12) -> ChipSpec:
    """SN10-like dataflow chip: 640 compute tiles, large DDR."""
    return ChipSpec("SN10", 640, peak / 640, s_cap, 1.5 * TB, d_bw,
                    power_w=600.0, price_usd=20000.0, tile_shape=(32, 32))


def chip_by_name(name: str) -> ChipSpec:
    for c in builtin_chips() + [sn10_chip()]:
        if c.name.lower() == name.lower():
            return c
    raise SystemSpecError(f"unknown chip {name!r}")


def chip_power(peak_tflops: float, floor_kw: float = POWER_FLOOR_KW) -> float:
    """Silicon power in kW from peak TFLOPS via the fitted quadratic."""
    x = peak_tflops
    return max(floor_kw, 3e-7 * x * x - 4.3e-4 * x + 0.04)


def chip_watts(chip: ChipSpec) -> float:
    if chip.power_w is not None:
        return chip.power_w
    return 1000.0 * chip_power(chip.peak / 1e12)


def dim_link_count(sys: SystemSpec) -> list[int]:
    """Total links per dim: links of one 1-D instance times the number of instances."""
    total = sys.n_chips
    return [d.links() * (total // d.size) for d in sys.dims]


def system_cost_power(sys: SystemSpec, catalog: TechCatalog = DEFAULT_TECH) -> dict:
    """Total price (USD) and power (W) of the system."""
    mem = catalog.memory.get(sys.memory_tech) if sys.memory_tech else None
    net = catalog.interconnect.get(sys.interconnect_tech) if sys.interconnect_tech else None
    if sys.memory_tech and mem is None:
        raise SystemSpecError(f"missing catalog entry for memory tech {sys.memory_tech!r}")
    if sys.interconnect_tech and net is None:
        raise SystemSpecError(f"missing catalog entry for interconnect tech {sys.interconnect_tech!r}")
    chip = sys.chip
    if chip.price_usd is None:
        raise SystemSpecError(f"chip {chip.name!r} has no price")
    gb = chip.d_cap / GB
    links = sum(dim_link_count(sys))
    price = sys.n_chips * (chip.price_usd + (mem["price"] * gb if mem else 0.0))
    power = sys.n_chips * (chip_watts(chip) + (mem["power"] * gb if mem else 0.0))
    if net:
        price += links * net["price"]
        power += links * net["power"]
    return {"price_usd": price, "power_w": power}


# --------------------------------------------------------------------------- I/O

_ASSIGN_KEYS = {"tp": "tp_dim", "pp": "pp_dim", "dp": "dp_dim"}


def system_from_dict(data: dict, catalog: TechCatalog = DEFAULT_TECH) -> SystemSpec:
    try:
        c = dict(data["chip"])
        dims_raw = data["dims"]
    except (KeyError, TypeError) as e:
        raise SystemSpecError(f"system file missing field {e}") from None
    tech = data.get("tech") or {}
    mem_name, net_name = tech.get("memory"), tech.get("interconnect")
    if "preset" in c:
        base = chip_by_name(c.pop("preset"))
        chip = replace(base, **{k: (tuple(v) if k == "tile_shape" else v) for k, v in c.items()})
    else:
        try:
            chip = ChipSpec(
                name=c.get("name", "chip"),
                t_lim=int(c["t_lim"]),
                t_flop=float(c["t_flop"]),
                s_cap=float(c["s_cap"]),
                d_cap=float(c["d_cap"]),
                d_bw=float(c.get("d_bw", 0) or 0),
                power_w=c.get("power_w"),
                price_usd=c.get("price_usd"),
                tile_shape=tuple(c.get("tile_shape", (32, 32))),
            )
        except KeyError as e:
            raise SystemSpecError(f"chip missing field {e.args[0]!r}") from None
    if mem_name is not None:
        if mem_name not in catalog.memory:
            raise SystemSpecError(f"missing catalog entry for memory tech {mem_name!r}")
        if not c.get("d_bw"):
            chip = replace(chip, d_bw=catalog.memory[mem_name]["bandwidth"])
    dims = []
    for d in dims_raw:
        bw = d.get("link_bw")
        if bw is None and net_name is not None:
            if net_name not in catalog.interconnect:
                raise SystemSpecError(f"missing catalog entry for interconnect tech {net_name!r}")
            bw = catalog.interconnect[net_name]["bandwidth"]
        if bw is None:
            raise SystemSpecError("dim needs link_bw or a tech.interconnect entry")
        dims.append(NetworkDim(d.get("topology", "ring"), int(d["size"]), float(bw),
                               float(d.get("hop_latency", 0.0))))
    assign = data.get("assign") or {}
    kw = {_ASSIGN_KEYS[k]: v for k, v in assign.items() if k in _ASSIGN_KEYS}
    sys = SystemSpec(chip, tuple(dims), memory_tech=mem_name, interconnect_tech=net_name, **kw)
    declared = {k: data.get(f"n_{k}") for k in ("tp", "pp", "dp")}
    sys.validate()
    for k, v in declared.items():
        if v is not None and int(v) != getattr(sys, f"n_{k}"):
            raise SystemSpecError(
                f"dim-size mismatch: n_{k}={v} declared but assigned dim gives {getattr(sys, f'n_{k}')}"
            )
    return sys


def load_system(path: str | Path, catalog: TechCatalog = DEFAULT_TECH) -> SystemSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SystemSpecError(f"{path}: parse error: {e}") from None
    return system_from_dict(data, catalog)


def system_to_dict(sys: SystemSpec) -> dict:
    c = sys.chip
    chip = {
        "name": c.name, "t_lim": c.t_lim, "t_flop": c.t_flop, "s_cap": c.s_cap,
        "d_cap": c.d_cap, "d_bw": c.d_bw, "tile_shape": list(c.tile_shape),
    }
    if c.power_w is not None:
        chip["power_w"] = c.power_w
    if c.price_usd is not None:
        chip["price_usd"] = c.price_usd
    out = {
        "chip": chip,
        "dims": [
            {"topology": d.topology, "size": d.size, "link_bw": d.link_bw, "hop_latency": d.hop_latency}
            for d in sys.dims
        ],
        "assign": {"tp": sys.tp_dim, "pp": sys.pp_dim, "dp": sys.dp_dim},
    }
    if sys.memory_tech or sys.interconnect_tech:
        out["tech"] = {"memory": sys.memory_tech, "interconnect": sys.interconnect_tech}
    return out


def ring_system(chip: ChipSpec, size: int, link_bw: float, strategy: str = "tp") -> SystemSpec:
    """One ring dim assigned to ``strategy``."""
    kw = {_ASSIGN_KEYS[strategy]: 0}
    return SystemSpec(chip, (NetworkDim("ring", size, link_bw),), **kw).validate()
