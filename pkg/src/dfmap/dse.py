"""Design-space sweeps, performance reports and rooflines."""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import milp
from .flow import FullMapping, optimize_full
from .graph import DataflowGraph, GraphError, generate_workload
from .interchip import TrainingConfig, optimize_interchip
from .system import (
    DEFAULT_TECH,
    ChipSpec,
    NetworkDim,
    SystemSpec,
    SystemSpecError,
    TechCatalog,
    builtin_chips,
    chip_by_name,
    system_cost_power,
)

TOPOLOGY_NAMES = ("2d_torus", "3d_torus", "dragonfly", "dgx1", "dgx2")
TECH_COMBOS = (("DDR", "PCIe"), ("DDR", "NVLink"), ("HBM", "PCIe"), ("HBM", "NVLink"))
STRATEGIES = ("tp", "pp", "dp")


class ConsistencyError(RuntimeError):
    """A report breaks a bound the model guarantees."""


# ------------------------------------------------------------------- reports


@dataclass
class PerfReport:
    throughput: float  # useful FLOP/s of the whole system
    utilization: float
    breakdown: dict  # {"compute", "memory", "network"} fractions of iteration time
    cost_eff: float  # FLOP/s per USD
    power_eff: float  # FLOP/s per W
    oi_mem: float  # FLOP per DRAM byte
    oi_net: float  # FLOP per network byte
    iter_time: float = 0.0
    step_time: float = 0.0
    n_tp: int = 1
    n_pp: int = 1
    n_dp: int = 1
    n_chips: int = 1
    peak: float = 0.0  # per chip
    d_bw: float = 0.0
    n_bw: Optional[float] = None
    status: str = "optimal"
    stages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _attribute(full: FullMapping, stage) -> dict:
    """Split one stage's time over compute/memory/network by each partition's binding term."""
    out = {"compute": 0.0, "memory": 0.0, "network": 0.0}
    im = stage.intra
    if stage.t_p2p > im.objective:
        out["network"] = stage.t_p2p
        return out
    for tc, tm, tn, tcri in zip(im.t_comp, im.t_mem, im.t_net, im.t_cri):
        key = "compute" if tc >= tcri else "memory" if tm >= tcri else "network"
        out[key] += float(tcri)
    return out


def _network_bw(sys: SystemSpec) -> Optional[float]:
    for s in STRATEGIES:
        d = sys.dim_for(s)
        if d is not None and d.size > 1:
            return d.link_bw
    return None


def perf_report(
    g: DataflowGraph, sys: SystemSpec, full: FullMapping, catalog: TechCatalog = DEFAULT_TECH
) -> PerfReport:
    tr = full.training
    mu = tr.microbatches
    chip = sys.chip
    n_chips = sys.n_chips
    T = full.step_time
    it = full.iter_time(sys.n_pp)
    flop = sys.n_dp * mu * sum(g.flops) * tr.flop_mult
    if it <= 0:
        raise ConsistencyError("iteration time is zero")
    thr = flop / it
    # breakdown over the critical stage, scaled to the whole iteration
    crit = max(full.stages, key=lambda s: s.time)
    att = _attribute(full, crit)
    scale = mu * full.bubble(sys.n_pp)
    parts = {k: v * scale for k, v in att.items()}
    parts["network"] += full.inter.dp_time
    total = sum(parts.values())
    breakdown = {k: v / total for k, v in parts.items()} if total > 0 else {"compute": 1.0, "memory": 0.0, "network": 0.0}
    # per-chip averages over the pipeline, per iteration
    mem_s = mu * sum(float(s.intra.t_mem.sum()) for s in full.stages) / sys.n_pp
    net_s = mu * sum(max(float(s.intra.t_net.sum()), s.t_p2p) for s in full.stages) / sys.n_pp
    net_s += full.inter.dp_time
    flop_chip = flop / n_chips
    n_bw = _network_bw(sys)
    oi_mem = flop_chip / (mem_s * chip.d_bw) if mem_s > 0 else math.inf
    oi_net = flop_chip / (net_s * n_bw) if net_s > 0 and n_bw else math.inf
    try:
        cp = system_cost_power(sys, catalog)
        cost_eff = thr / cp["price_usd"]
        power_eff = thr / cp["power_w"]
    except SystemSpecError:
        cost_eff = power_eff = math.nan
    stages = [
        {
            "stage": s.view.stage,
            "kernels": [g.kernels[k].name for k in s.view.kernel_ids],
            "time": s.time,
            "t_p2p": s.t_p2p,
            "partitions": [
                {
                    "kernels": [g.kernels[s.view.kernel_ids[k]].name for k in ks],
                    "t_comp": float(s.intra.t_comp[i]),
                    "t_mem": float(s.intra.t_mem[i]),
                    "t_net": float(s.intra.t_net[i]),
                    "t_cri": float(s.intra.t_cri[i]),
                }
                for i, ks in enumerate(_parts(s.intra.part_of, s.intra.p_max))
            ],
        }
        for s in full.stages
    ]
    return PerfReport(thr, thr / (n_chips * chip.peak), breakdown, cost_eff, power_eff, oi_mem, oi_net,
                      it, T, sys.n_tp, sys.n_pp, sys.n_dp, n_chips, chip.peak, chip.d_bw, n_bw,
                      full.status, stages)


def _parts(part_of, p_max) -> list:
    out = [[] for _ in range(p_max)]
    for k, i in enumerate(part_of):
        out[i].append(k)
    return out


@dataclass
class Roofline:
    peak: float  # FLOP/s per chip
    mem_roof: float  # oi_mem * d_bw
    net_roof: float  # oi_net * n_bw
    bound: float
    achieved: float  # FLOP/s per chip
    regime: str  # "compute", "memory" or "network"
    consistent: bool  # achieved equals the bound within tolerance

    def to_dict(self) -> dict:
        return asdict(self)


def roofline(
    report: PerfReport,
    chip: Optional[ChipSpec] = None,
    sys: Optional[SystemSpec] = None,
    rel_tol: float = 1e-6,
) -> Roofline:
    """Place a report on its chip's roofline.

    Raises ConsistencyError when the achieved throughput lies above the
    min-of-three bound, which the model cannot produce.
    """
    peak = chip.peak if chip is not None else report.peak
    d_bw = chip.d_bw if chip is not None else report.d_bw
    n_bw = _network_bw(sys) if sys is not None else report.n_bw
    mem_roof = report.oi_mem * d_bw
    net_roof = report.oi_net * n_bw if n_bw else math.inf
    roofs = {"compute": peak, "memory": mem_roof, "network": net_roof}
    regime = min(roofs, key=lambda k: (roofs[k], STRATEGY_ORDER[k]))
    bound = roofs[regime]
    achieved = report.throughput / report.n_chips
    if achieved > bound * (1 + rel_tol):
        raise ConsistencyError(f"achieved {achieved:.6g} FLOP/s exceeds the {regime} roof {bound:.6g}")
    return Roofline(peak, mem_roof, net_roof, bound, achieved, regime,
                    abs(achieved - bound) <= rel_tol * bound)


STRATEGY_ORDER = {"compute": 0, "memory": 1, "network": 2}


# ----------------------------------------------------------------- topologies


def balanced_factors(n: int, k: int) -> list[int]:
    """k factors of n, as equal as possible, largest first."""
    if n < 1 or k < 1:
        raise SystemSpecError(f"cannot factor {n} chips into {k} dims")
    best = None
    for combo in _factorizations(n, k):
        key = (max(combo) - min(combo), sorted(combo, reverse=True))
        if best is None or key < best[0]:
            best = (key, sorted(combo, reverse=True))
    if best is None:
        raise SystemSpecError(f"cannot factor {n} chips into {k} dims")
    return best[1]


def _factorizations(n: int, k: int, lo: int = 1):
    if k == 1:
        if n >= lo:
            yield (n,)
        return
    for d in range(lo, int(round(n ** (1 / k))) + 2):
        if n % d == 0:
            for rest in _factorizations(n // d, k - 1, d):
                yield (d,) + rest


def topology_presets(name: str, n_chips: int = 1024, link_bw: float = 25e9) -> list[NetworkDim]:
    """Hierarchical dims of a named topology for ``n_chips`` chips."""
    if name == "2d_torus":
        return [NetworkDim("ring", s, link_bw) for s in balanced_factors(n_chips, 2)]
    if name == "3d_torus":
        return [NetworkDim("ring", s, link_bw) for s in balanced_factors(n_chips, 3)]
    if name == "dragonfly":
        # all-to-all inside a group, all-to-all between groups
        return [NetworkDim("fully_connected", s, link_bw) for s in balanced_factors(n_chips, 2)]
    if name in ("dgx1", "dgx2"):
        node = 8 if name == "dgx1" else 16
        if n_chips % node:
            raise SystemSpecError(f"{n_chips} chips do not fill {name} nodes of {node}")
        dims = [NetworkDim("switch", min(node, n_chips), link_bw)]
        if n_chips > node:
            dims.append(NetworkDim("switch", n_chips // node, link_bw))
        return dims
    raise SystemSpecError(f"unknown topology {name!r}; known: {', '.join(TOPOLOGY_NAMES)}")


# ---------------------------------------------------------------- workloads

# Scaled-down stand-ins for the study's workloads, small enough to solve on a desk.
DESK_WORKLOADS = {
    "gpt": ("gpt", {"batch": 8, "seq": 1024, "hidden": 4096, "heads": 32}, True),
    "dlrm": ("dlrm", {"tables": 4, "mlp_layers": 2, "batch": 4096, "emb_dim": 128,
                      "rows_per_table": 1_000_000, "mlp_width": 1024}, True),
    "hpl": ("hpl", {"n": 8192, "block": 2048}, False),
    "fft": ("fft", {"points": 2**20, "radix": 32}, False),
}


def desk_workload(name: str) -> tuple[DataflowGraph, TrainingConfig]:
    try:
        kind, params, training = DESK_WORKLOADS[name]
    except KeyError:
        raise GraphError(f"unknown workload {name!r}; known: {', '.join(DESK_WORKLOADS)}") from None
    return generate_workload(kind, **params), TrainingConfig() if training else TrainingConfig.inference()


# -------------------------------------------------------------------- points


@dataclass(frozen=True)
class DesignPoint:
    chip: str
    topology: str
    mem_tech: str
    net_tech: str
    workload: str
    n_tp: Optional[int] = None  # None: search the dim-to-strategy assignments
    n_pp: Optional[int] = None
    n_dp: Optional[int] = None
    n_chips: int = 1024


@dataclass(frozen=True)
class SweepConfig:
    inter_p_max: Optional[int] = 4
    intra_p_max: Optional[int] = 3  # retried uncapped when the capped model is infeasible
    menu: str = "coarse"  # "coarse", "pow2" or "default"
    time_limit: float = milp.DEFAULT_TIME_LIMIT
    backend: Optional[str] = None


def pow2_menu(t_lim: int) -> list[int]:
    out, p = [], 1
    while p <= t_lim:
        out.append(p)
        p *= 2
    return out


def coarse_menu(t_lim: int, levels: int = 8) -> list[int]:
    """The whole chip and its successive halves."""
    return sorted({max(1, t_lim >> k) for k in range(levels)})


def sweep_menu(cfg: SweepConfig, t_lim: int) -> Optional[list[int]]:
    if cfg.menu == "coarse":
        return coarse_menu(t_lim)
    if cfg.menu == "pow2":
        return pow2_menu(t_lim)
    if cfg.menu == "default":
        return None
    raise ValueError(f"unknown menu {cfg.menu!r}")


def build_system(dp: DesignPoint, catalog: TechCatalog = DEFAULT_TECH) -> tuple[ChipSpec, list[NetworkDim]]:
    try:
        mem = catalog.memory[dp.mem_tech]
    except KeyError:
        raise SystemSpecError(f"missing catalog entry for memory tech {dp.mem_tech!r}") from None
    try:
        net = catalog.interconnect[dp.net_tech]
    except KeyError:
        raise SystemSpecError(f"missing catalog entry for interconnect tech {dp.net_tech!r}") from None
    base = chip_by_name(dp.chip)
    chip = ChipSpec(base.name, base.t_lim, base.t_flop, base.s_cap, base.d_cap, mem["bandwidth"],
                    base.power_w, base.price_usd, base.tile_shape)
    return chip, topology_presets(dp.topology, dp.n_chips, net["bandwidth"])


def parallel_assignments(dims: Sequence[NetworkDim]) -> list[dict]:
    """Every way to give each dim its own strategy, as {"tp": idx, ...} maps."""
    out = []
    for strat in itertools.permutations(STRATEGIES, len(dims)):
        out.append({s: i for i, s in enumerate(strat)})
    return out


def _systems(dp: DesignPoint, chip, dims, catalog) -> list[SystemSpec]:
    systems, seen = [], set()
    for assign in parallel_assignments(dims):
        sys = SystemSpec(chip, tuple(dims), assign.get("tp"), assign.get("pp"), assign.get("dp"),
                         dp.mem_tech, dp.net_tech).validate()
        want = (dp.n_tp, dp.n_pp, dp.n_dp)
        have = (sys.n_tp, sys.n_pp, sys.n_dp)
        if any(w is not None and w != h for w, h in zip(want, have)):
            continue
        # dims of equal shape make some assignments the same system
        key = tuple(sys.dim_for(st) for st in STRATEGIES)
        if key in seen:
            continue
        seen.add(key)
        systems.append(sys)
    if not systems:
        raise SystemSpecError(
            f"dim-size mismatch: no assignment of dims {[d.size for d in dims]} gives "
            f"n_tp={dp.n_tp}, n_pp={dp.n_pp}, n_dp={dp.n_dp}"
        )
    return systems


_INTRA_CACHE: dict = {}
_INTER_CACHE: dict = {}


def _inter(g, sys, tr, cfg: SweepConfig, key):
    """Inter-chip mappings do not depend on memory, so points differing only there share one."""
    full_key = key + (sys.chip.peak, sys.chip.d_cap, tuple(sys.dim_for(s) for s in STRATEGIES), cfg)
    if full_key not in _INTER_CACHE:
        p_max = min(sys.n_pp, g.n, cfg.inter_p_max or g.n)
        _INTER_CACHE[full_key] = optimize_interchip(g, sys, tr, max(1, p_max), cfg.backend, cfg.time_limit)
    return _INTER_CACHE[full_key]


def optimize_point(g, sys, tr, cfg: SweepConfig, key=()) -> FullMapping:
    inter = _inter(g, sys, tr, cfg, key)
    menu = sweep_menu(cfg, sys.chip.t_lim)
    full = optimize_full(g, sys, tr, None, cfg.intra_p_max, menu, cfg.backend, cfg.time_limit,
                         inter=inter, cache=_INTRA_CACHE)
    if full.status == "infeasible" and full.stages and cfg.intra_p_max is not None:
        full = optimize_full(g, sys, tr, None, None, menu, cfg.backend, cfg.time_limit,
                             inter=inter, cache=_INTRA_CACHE)
    return full


def run_point(dp: DesignPoint, cfg: SweepConfig = SweepConfig(), catalog: TechCatalog = DEFAULT_TECH) -> PerfReport:
    """Best report over the parallelism choices of one design point."""
    g, tr = desk_workload(dp.workload)
    chip, dims = build_system(dp, catalog)
    best = None
    failures = []
    for sys in _systems(dp, chip, dims, catalog):
        full = optimize_point(g, sys, tr, cfg, (dp.workload,))
        if full.status == "infeasible" or not full.stages:
            failures.append(f"tp={sys.n_tp} pp={sys.n_pp} dp={sys.n_dp}: {full.status}"
                            + (f" ({full.binding})" if full.binding else ""))
            continue
        rep = perf_report(g, sys, full, catalog)
        roofline(rep)
        if best is None or rep.throughput > best.throughput * (1 + 1e-12):
            best = rep
    if best is None:
        raise milp.ModelError("no feasible parallelism: " + "; ".join(failures))
    return best


def full_grid(workload: str, n_chips: int = 1024) -> list[DesignPoint]:
    """4 chips x 5 topologies x 4 memory/interconnect combinations."""
    return [
        DesignPoint(c.name, topo, mem, net, workload, n_chips=n_chips)
        for c in builtin_chips()
        for topo in TOPOLOGY_NAMES
        for mem, net in TECH_COMBOS
    ]


CSV_COLUMNS = [
    "workload", "chip", "topology", "mem_tech", "net_tech", "n_tp", "n_pp", "n_dp",
    "throughput_flops", "utilization", "frac_compute", "frac_memory", "frac_network",
    "cost_eff", "power_eff", "oi_mem", "oi_net", "status", "error",
]


def _row(dp: DesignPoint, rep: Optional[PerfReport], error: str) -> list:
    head = [dp.workload, dp.chip, dp.topology, dp.mem_tech, dp.net_tech]
    if rep is None:
        return head + [dp.n_tp or "", dp.n_pp or "", dp.n_dp or ""] + [""] * 9 + ["error", error]
    b = rep.breakdown
    vals = [rep.throughput, rep.utilization, b["compute"], b["memory"], b["network"],
            rep.cost_eff, rep.power_eff, rep.oi_mem, rep.oi_net]
    return head + [rep.n_tp, rep.n_pp, rep.n_dp] + [repr(float(v)) for v in vals] + [rep.status, ""]


def _job(args) -> list:
    dp, cfg, catalog = args
    try:
        return _row(dp, run_point(dp, cfg, catalog), "")
    except Exception as e:  # a failed point becomes a flagged row
        return _row(dp, None, f"{type(e).__name__}: {e}")


def run_sweep(
    grid: Sequence[DesignPoint],
    workers: int = 1,
    cfg: SweepConfig = SweepConfig(),
    catalog: TechCatalog = DEFAULT_TECH,
) -> str:
    """CSV text with one row per point, in grid order."""
    jobs = [(dp, cfg, catalog) for dp in grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_job, jobs))
    else:
        rows = [_job(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def grid_from_dict(data) -> list[DesignPoint]:
    """Grid file: {"points": [...]} or {"full_grid": workload(s)}."""
    points = []
    if isinstance(data, dict) and "full_grid" in data:
        names = data["full_grid"]
        for name in [names] if isinstance(names, str) else names:
            points += full_grid(name, int(data.get("n_chips", 1024)))
        return points
    raw = data["points"] if isinstance(data, dict) else data
    for p in raw:
        try:
            points.append(DesignPoint(**p))
        except TypeError as e:
            raise ValueError(f"bad design point {p!r}: {e}") from None
    return points
