"""Intra-chip level: fuse a chip's kernels into sequential on-chip stages and size their tiles.

Within a stage, compute, DRAM traffic and network traffic overlap, so the
stage takes the largest of the three. Stages run one after another and the
objective is their sum. Tensors between kernels of one stage stream through
SRAM; tensors that cross stages are stored to DRAM by the producer's stage and
loaded by the consumer's stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import milp
from .graph import DataflowGraph, Kernel
from .mapmat import AssignmentMatrices, compact_partitions
from .system import ChipSpec


class IntraError(ValueError):
    """A fixed intra-chip mapping breaks a constraint."""


def _grid(tiles: int) -> tuple[int, int]:
    """Near-square (rows, cols) arrangement of ``tiles`` tiles, rows <= cols."""
    r = int(math.isqrt(tiles))
    while tiles % r:
        r -= 1
    return r, tiles // r


def _pad_eff(dim: int, grid: int) -> float:
    return dim / (math.ceil(dim / grid) * grid)


def utilization_model(k: Kernel, tiles: int, tile_shape: tuple[int, int] = (32, 32)) -> float:
    """Tiling efficiency of a GEMM on ``tiles`` tiles; 1 for other kernels.

    The tiles form a near-square grid; the output (M x N) is cut into blocks
    of that grid's size and the last partial block in each dim is padded. The
    better of the two grid orientations is used.
    """
    if tiles < 1:
        raise IntraError("tiles must be >= 1")
    if k.kind != "gemm" or k.gemm_dims is None:
        return 1.0
    M, _, N = k.gemm_dims
    r, c = _grid(int(tiles))
    R, C = tile_shape
    best = max(
        _pad_eff(M, r * R) * _pad_eff(N, c * C),
        _pad_eff(M, c * R) * _pad_eff(N, r * C),
    )
    return min(1.0, max(best, 1e-12))


def default_tile_menu(t_lim: int, steps: int = 16) -> list[int]:
    """Even fractions of the chip plus small powers of two."""
    menu = {max(1, round(t_lim * k / steps)) for k in range(1, steps + 1)}
    p = 1
    while p < t_lim / steps:
        menu.add(p)
        p *= 2
    return sorted(x for x in menu if 1 <= x <= t_lim)


@dataclass
class IntraChipMapping:
    mats: AssignmentMatrices
    part_of: list
    t_used: list
    u_c: list
    t_comp: np.ndarray
    t_mem: np.ndarray
    t_net: np.ndarray
    t_cri: np.ndarray
    sram_used: np.ndarray
    dram_used: np.ndarray
    status: str = "evaluated"
    binding: Optional[str] = None

    @property
    def objective(self) -> float:
        return float(self.t_cri.sum())

    @property
    def p_max(self) -> int:
        return self.mats.p_max

    def dram_bytes(self, tensor_bytes: Sequence[float], traffic_mult: float = 1.0) -> float:
        """DRAM bytes moved: every cross-stage tensor stored once and loaded once."""
        return traffic_mult * float((self.mats.D.astype(float).T @ np.asarray(tensor_bytes, float)).sum())


def _kernel_time(k: Kernel, tiles: int, chip: ChipSpec) -> tuple[float, float]:
    u = utilization_model(k, tiles, chip.tile_shape)
    if k.flop == 0:
        return 0.0, u
    return k.flop / (tiles * chip.t_flop * u), u


def evaluate_intrachip(
    sub: DataflowGraph,
    chip: ChipSpec,
    part_of: Sequence[int],
    tiles: Sequence[int],
    net_terms: Optional[Sequence[float]] = None,
    p_max: Optional[int] = None,
    resident_bytes: float = 0.0,
    traffic_mult: float = 1.0,
    check: bool = True,
) -> IntraChipMapping:
    """Time vectors of a fixed stage assignment and tile allocation on one chip.

    ``sub`` holds per-chip quantities (FLOP and bytes after sharding).
    ``net_terms`` is the per-kernel network time inherited from the inter-chip
    level; ``resident_bytes`` is parameter storage held in DRAM for every stage.
    """
    n = sub.n
    part_of = [int(x) for x in part_of]
    if len(part_of) != n or len(tiles) != n:
        raise IntraError(f"mapping covers {len(part_of)} kernels / {len(tiles)} tile counts; subgraph has {n}")
    if p_max is None:
        p_max = max(part_of) + 1 if n else 1
    mats = AssignmentMatrices.from_partitions(part_of, p_max, sub.tensors)
    net = np.zeros(n) if net_terms is None else np.asarray(net_terms, float)
    b = np.array(sub.sizes, float)
    A = mats.A.astype(float)
    t_used = [int(t) for t in tiles]
    errors = []
    for k, t in enumerate(t_used):
        if not 1 <= t <= chip.t_lim:
            errors.append(f"tiles: kernel {sub.kernels[k].name!r} gets {t} tiles (allowed 1..{chip.t_lim})")
    if errors:
        raise IntraError("; ".join(errors))
    times, u_c = zip(*(_kernel_time(k, t, chip) for k, t in zip(sub.kernels, t_used))) if n else ((), ())
    t_comp = np.zeros(p_max)
    for k, i in enumerate(part_of):
        t_comp[i] = max(t_comp[i], times[k])
    t_mem = traffic_mult * (mats.D.astype(float).T @ b) / chip.d_bw
    t_net = A.T @ net
    t_cri = np.maximum(np.maximum(t_comp, t_mem), t_net)
    tiles_used = A.T @ np.array(t_used, float)
    sram = mats.B.astype(float).T @ b
    dram = mats.L.astype(float).T @ b + resident_bytes
    if check:
        for i in range(p_max):
            if tiles_used[i] > chip.t_lim:
                errors.append(f"tiles: stage {i} uses {int(tiles_used[i])} > t_lim {chip.t_lim}")
            if sram[i] > chip.s_cap * (1 + 1e-12):
                errors.append(f"sram: stage {i} holds {sram[i]:.4g} B > s_cap {chip.s_cap:.4g} B")
            if dram[i] > chip.d_cap * (1 + 1e-12):
                errors.append(f"dram: stage {i} holds {dram[i]:.4g} B > d_cap {chip.d_cap:.4g} B")
        if errors:
            raise IntraError("; ".join(errors))
    return IntraChipMapping(mats, part_of, t_used, list(u_c), t_comp, t_mem, t_net, t_cri, sram, dram)


def kernel_by_kernel(
    sub: DataflowGraph,
    chip: ChipSpec,
    net_terms=None,
    menu: Optional[Sequence[int]] = None,
    resident_bytes: float = 0.0,
    traffic_mult: float = 1.0,
) -> IntraChipMapping:
    """Non-dataflow execution: every kernel its own stage, in topological order, with its fastest tile count."""
    order = sub.topo_order()
    part_of = [0] * sub.n
    for pos, k in enumerate(order):
        part_of[k] = pos
    menu = sorted(menu or default_tile_menu(chip.t_lim))
    tiles = []
    for k in sub.kernels:
        best = min((x for x in menu if x <= chip.t_lim), key=lambda x: (_kernel_time(k, x, chip)[0], x))
        tiles.append(best)
    return evaluate_intrachip(sub, chip, part_of, tiles, net_terms, max(1, sub.n), resident_bytes, traffic_mult)


# ----------------------------------------------------------------------- model


@dataclass
class IntraProblem:
    sub: DataflowGraph
    chip: ChipSpec
    net: np.ndarray
    menu: list
    entries: list  # per kernel: menu indices kept after dominance pruning
    p_max: int
    resident_bytes: float
    traffic_mult: float
    model: milp.Model
    x: dict = field(default_factory=dict)  # (k, i, e) -> Lin


def _kept_entries(k: Kernel, menu: Sequence[int], chip: ChipSpec) -> list[int]:
    """Menu entries not dominated by a smaller-or-equal tile count that is at least as fast."""
    cand = [(menu[e], _kernel_time(k, menu[e], chip)[0], e) for e in range(len(menu)) if menu[e] <= chip.t_lim]
    cand.sort()
    kept, best = [], math.inf
    for tiles, t, e in cand:
        if t < best:
            kept.append(e)
            best = t
    return kept


def build_intrachip(
    sub: DataflowGraph,
    chip: ChipSpec,
    net_terms: Optional[Sequence[float]] = None,
    p_max: Optional[int] = None,
    menu: Optional[Sequence[int]] = None,
    resident_bytes: float = 0.0,
    traffic_mult: float = 1.0,
    fixed_part: Optional[Sequence[int]] = None,
) -> IntraProblem:
    n = sub.n
    P = p_max or max(1, n)
    menu = sorted(set(int(x) for x in (menu or default_tile_menu(chip.t_lim))))
    net = np.zeros(n) if net_terms is None else np.asarray(net_terms, float)
    b = np.array(sub.sizes, float)
    entries = [_kept_entries(k, menu, chip) for k in sub.kernels]
    for k, es in zip(sub.kernels, entries):
        if not es:
            raise IntraError(f"tiles: no menu entry fits kernel {k.name!r} within t_lim {chip.t_lim}")
    tau = {(k, e): _kernel_time(sub.kernels[k], menu[e], chip)[0] for k in range(n) for e in entries[k]}
    mem_t = traffic_mult * b / chip.d_bw
    scale = max([*tau.values(), *(mem_t * 2), *net, 0.0]) or 1.0

    m = milp.Model("intrachip")
    x = {}
    for k in range(n):
        for i in range(P):
            if fixed_part is not None and fixed_part[k] != i:
                continue
            for e in entries[k]:
                x[k, i, e] = m.var(f"x[{k},{i},{menu[e]}]")
    A = [[milp.lsum(x[k, i, e] for e in entries[k] if (k, i, e) in x) for i in range(P)] for k in range(n)]
    for k in range(n):
        m.eq(milp.lsum(A[k]), 1, "onehot")
    idx = [milp.lsum(i * A[k][i] for i in range(P)) for k in range(n)]
    for t in sub.tensors:
        m.ge(idx[t.dst], idx[t.src], "precedence")
    open_ = [None] * P  # open_[i] = 1 iff partition i holds a kernel
    if fixed_part is None and P > 1:
        # empty partitions only at the end; any solution compacts to this form at equal cost
        for i in range(P):
            open_[i] = m.var(f"open[{i}]")
            for k in range(n):
                if A[k][i].terms:
                    m.le(A[k][i], open_[i], "logic")
            if i:
                m.le(open_[i], open_[i - 1], "logic")
    for i in range(P):
        used = milp.lsum(menu[e] * x[k, i, e] for k in range(n) for e in entries[k] if (k, i, e) in x)
        if used.terms:
            cap = chip.t_lim if open_[i] is None else chip.t_lim * open_[i]
            m.le(used, cap, "tiles")

    t_comp, t_mem, t_net = [], [], []
    for i in range(P):
        tc = m.var(f"tcomp[{i}]", 0.0, milp.INF, "C")
        for k in range(n):
            busy = milp.lsum(tau[k, e] / scale * x[k, i, e] for e in entries[k] if (k, i, e) in x)
            if busy.terms:
                m.ge(tc, busy, "epigraph")
        # tiles of a stage are shared, so tc * t_lim >= sum of tau * tiles
        work = milp.lsum(tau[k, e] * menu[e] / chip.t_lim / scale * x[k, i, e]
                         for k in range(n) for e in entries[k] if (k, i, e) in x)
        if work.terms:
            m.ge(tc, work, "epigraph")
        t_comp.append(tc)
        t_net.append(milp.lsum(net[k] / scale * A[k][i] for k in range(n) if net[k]))
        t_mem.append(milp.Lin())
    sram = [milp.Lin() for _ in range(P)]
    dram = [milp.Lin(None, resident_bytes) for _ in range(P)]
    dram_binds = b.sum() + resident_bytes > chip.d_cap
    for j, t in enumerate(sub.tensors):
        for i in range(P):
            a_s, a_d = A[t.src][i], A[t.dst][i]
            if not a_s.terms and not a_d.terms:
                continue
            both = milp.lin_and(m, a_s, a_d, f"B[{j},{i}]")
            cross = milp.lin_xor(m, a_s, a_d, f"D[{j},{i}]")
            t_mem[i] = t_mem[i] + (mem_t[j] / scale) * cross
            sram[i] = sram[i] + b[j] * both
            if dram_binds and P > 1:
                a_up = milp.lsum(A[t.src][q] for q in range(i + 1))
                a_lo = milp.lsum(A[t.dst][q] for q in range(i))
                span = milp.lin_xor(m, a_up, a_lo, f"span[{j},{i}]")
                live = milp.lin_xor(m, span, both, f"L[{j},{i}]")
                dram[i] = dram[i] + b[j] * live
    for i in range(P):
        if sram[i].terms:
            m.add(sram[i], hi=chip.s_cap, cls="sram")
        if dram_binds or resident_bytes > chip.d_cap:
            m.add(dram[i], hi=chip.d_cap, cls="dram")
    t_cri = []
    for i in range(P):
        z = m.var(f"tcri[{i}]", 0.0, milp.INF, "C")
        for term in (t_comp[i], t_mem[i], t_net[i]):
            m.ge(z, term, "epigraph")
        t_cri.append(z)
    m.minimize(milp.lsum(t_cri), milp.lsum(t_comp + t_mem + t_net))
    return IntraProblem(sub, chip, net, menu, entries, P, resident_bytes, traffic_mult, m, x)


def solve_intrachip(
    problem: IntraProblem,
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
    seed: int = 0,
) -> IntraChipMapping:
    sol = milp.solve(problem.model, backend, time_limit, seed)
    sub, P = problem.sub, problem.p_max
    if sol.x is None:
        z = np.zeros(P)
        mats = AssignmentMatrices.from_partitions([0] * sub.n, P, sub.tensors)
        return IntraChipMapping(mats, [0] * sub.n, [0] * sub.n, [1.0] * sub.n, z, z.copy(), z.copy(), z.copy(),
                                z.copy(), z.copy(), status=sol.status, binding=sol.binding)
    part_of, tiles = [], []
    for k in range(sub.n):
        keys = [key for key in problem.x if key[0] == k]
        k_, i, e = max(keys, key=lambda key: sol.value(problem.x[key]))
        part_of.append(i)
        tiles.append(problem.menu[e])
    part_of = compact_partitions(part_of)
    res = evaluate_intrachip(sub, problem.chip, part_of, tiles, problem.net, None,
                             problem.resident_bytes, problem.traffic_mult)
    res.status = sol.status
    return res


def optimize_intrachip(
    sub: DataflowGraph,
    chip: ChipSpec,
    net_terms=None,
    p_max: Optional[int] = None,
    menu: Optional[Sequence[int]] = None,
    resident_bytes: float = 0.0,
    traffic_mult: float = 1.0,
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
    fixed_part: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> IntraChipMapping:
    prob = build_intrachip(sub, chip, net_terms, p_max, menu, resident_bytes, traffic_mult, fixed_part)
    return solve_intrachip(prob, backend, time_limit, seed)
