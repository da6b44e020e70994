"""Two-level flow: inter-chip mapping, then one intra-chip mapping per pipeline stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import milp
from .graph import DataflowGraph, Kernel, Tensor
from .interchip import (
    InterChipMapping,
    InvalidMapping,
    TrainingConfig,
    _by_kernel,
    evaluate_interchip,
    inter_coeffs,
    mapping_from_dict,
    mapping_to_dict,
    optimize_interchip,
    stage_tensor_bytes,
)
from .intrachip import (
    IntraChipMapping,
    IntraError,
    evaluate_intrachip,
    kernel_by_kernel,
    optimize_intrachip,
)
from .mapmat import list_to_partitions
from .sharding import COL, ROW, get_scheme
from .system import SystemSpec


@dataclass
class StageView:
    """One pipeline stage as seen by a single chip (quantities after sharding)."""

    stage: int
    kernel_ids: list  # ids in the full graph, subgraph order
    sub: DataflowGraph
    net: np.ndarray  # per-kernel network time (s)
    resident: float  # parameter bytes held in DRAM
    traffic_mult: float


def _per_chip_kernel(k: Kernel, scheme_id: str, n_tp: int, training: TrainingConfig) -> Kernel:
    s = get_scheme(scheme_id)
    dims = k.gemm_dims
    if dims is not None and s.gemm_split and n_tp > 1:
        M, K, N = dims
        if s.gemm_split == "M":
            M = math.ceil(M / n_tp)
        elif s.gemm_split == "K":
            K = math.ceil(K / n_tp)
        else:
            N = math.ceil(N / n_tp)
        dims = (M, K, N)
    out = k.out_bytes / n_tp if s.sharded and s.output_layout in (ROW, COL) else k.out_bytes
    return Kernel(k.id, k.name, k.kind, k.flop * training.flop_mult * s.flop_scale(n_tp), dims,
                  k.scheme_ids, k.param_bytes * s.param_scale(n_tp), out)


def stage_views(
    g: DataflowGraph, sys: SystemSpec, inter: InterChipMapping, training: TrainingConfig = TrainingConfig()
) -> list[StageView]:
    coeffs = inter_coeffs(g, sys, training, inter.p_max)
    n_tp = sys.n_tp
    choice = [coeffs.scheme_index(k, s) for k, s in enumerate(inter.schemes)]
    net_full = np.array([coeffs.h_n[k][a] for k, a in enumerate(choice)])
    for j, t in enumerate(g.tensors):
        net_full[t.src] += coeffs.h_m[j][choice[t.src], choice[t.dst]]
    views = []
    for stage, ids in enumerate(inter.partitions()):
        sub, keep, tensor_ids = g.subgraph(ids)
        kernels = [
            replace(_per_chip_kernel(g.kernels[old], inter.schemes[old], n_tp, training), id=new)
            for new, old in enumerate(keep)
        ]
        tensors = [
            Tensor(j, t.src, t.dst, stage_tensor_bytes(g.tensors[tid], get_scheme(inter.schemes[keep[t.src]]), n_tp))
            for j, (t, tid) in enumerate(zip(sub.tensors, tensor_ids))
        ]
        views.append(StageView(stage, keep, DataflowGraph(kernels, tensors), net_full[keep],
                               float(inter.stage_params[stage]), training.mem_mult))
    return views


@dataclass
class StageResult:
    view: StageView
    intra: IntraChipMapping
    t_p2p: float

    @property
    def time(self) -> float:
        return max(self.intra.objective, self.t_p2p)


@dataclass
class FullMapping:
    inter: InterChipMapping
    stages: list
    training: TrainingConfig
    status: str = "optimal"
    binding: Optional[str] = None

    @property
    def step_time(self) -> float:
        return max((s.time for s in self.stages), default=0.0)

    def bubble(self, n_pp: int) -> float:
        mu = self.training.microbatches
        return (mu + n_pp - 1) / mu if self.training.bubble else 1.0

    def iter_time(self, n_pp: int) -> float:
        mu = self.training.microbatches
        return mu * self.step_time * self.bubble(n_pp) + self.inter.dp_time


def _merge_status(statuses: Sequence[str]) -> str:
    for s in ("infeasible", "timeout"):
        if s in statuses:
            return s
    return "optimal" if all(s == "optimal" for s in statuses) else "evaluated"


def optimize_full(
    g: DataflowGraph,
    sys: SystemSpec,
    training: TrainingConfig = TrainingConfig(),
    pp_max: Optional[int] = None,
    intra_p_max: Optional[int] = None,
    menu: Optional[Sequence[int]] = None,
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
    inter: Optional[InterChipMapping] = None,
    cache: Optional[dict] = None,
    seed: int = 0,
) -> FullMapping:
    """Inter-chip solve, then an intra-chip solve for each stage's per-chip subgraph."""
    if inter is None:
        inter = optimize_interchip(g, sys, training, pp_max, backend, time_limit, seed)
    if inter.status in ("infeasible",) or (inter.status == "timeout" and not inter.schemes[0]):
        return FullMapping(inter, [], training, inter.status, inter.binding)
    results = []
    for view in stage_views(g, sys, inter, training):
        if view.sub.n == 0:
            intra = evaluate_intrachip(view.sub, sys.chip, [], [], p_max=1, resident_bytes=view.resident)
            intra.status = "optimal"
        else:
            key = None
            if cache is not None:
                key = _view_key(view, sys, intra_p_max, menu)
                intra = cache.get(key)
            if key is None or intra is None:
                intra = optimize_intrachip(view.sub, sys.chip, view.net, intra_p_max or view.sub.n, menu,
                                           view.resident, view.traffic_mult, backend, time_limit, seed=seed)
                if key is not None:
                    cache[key] = intra
        results.append(StageResult(view, intra, float(inter.t_p2p[view.stage])))
    statuses = [inter.status] + [r.intra.status for r in results]
    binding = inter.binding or next((r.intra.binding for r in results if r.intra.binding), None)
    return FullMapping(inter, results, training, _merge_status(statuses), binding)


def _view_key(view: StageView, sys: SystemSpec, p_max, menu) -> tuple:
    c = sys.chip
    ks = tuple((k.kind, k.flop, k.gemm_dims) for k in view.sub.kernels)
    ts = tuple((t.src, t.dst, t.bytes) for t in view.sub.tensors)
    return (ks, ts, tuple(view.net.tolist()), view.resident, view.traffic_mult,
            (c.t_lim, c.t_flop, c.s_cap, c.d_cap, c.d_bw, c.tile_shape), p_max, tuple(menu or ()))


def evaluate_full(
    g: DataflowGraph,
    sys: SystemSpec,
    part_of: Sequence[int],
    schemes: Sequence[str],
    intra: Sequence[tuple],
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
) -> FullMapping:
    """Evaluate fixed decisions. ``intra[s]`` is (local part_of, local tiles) for stage s, in subgraph order."""
    if p_max is None:
        p_max = max(max(part_of) + 1, min(sys.n_pp, g.n)) if len(part_of) else 1
    inter = evaluate_interchip(g, sys, part_of, schemes, training, p_max)
    views = stage_views(g, sys, inter, training)
    if len(intra) != len(views):
        raise ValueError(f"{len(intra)} intra mappings given for {len(views)} stages")
    results = []
    for view, (lp, lt) in zip(views, intra):
        im = evaluate_intrachip(view.sub, sys.chip, lp, lt, view.net, None, view.resident, view.traffic_mult)
        results.append(StageResult(view, im, float(inter.t_p2p[view.stage])))
    return FullMapping(inter, results, training, "evaluated")


def non_dataflow_full(
    g: DataflowGraph,
    sys: SystemSpec,
    inter: InterChipMapping,
    training: TrainingConfig = TrainingConfig(),
    menu: Optional[Sequence[int]] = None,
) -> FullMapping:
    """Same inter-chip decisions, but every kernel runs as its own on-chip stage."""
    results = []
    for view in stage_views(g, sys, inter, training):
        im = kernel_by_kernel(view.sub, sys.chip, view.net, menu, view.resident, view.traffic_mult)
        results.append(StageResult(view, im, float(inter.t_p2p[view.stage])))
    return FullMapping(inter, results, training, "evaluated")


def local_mapping(full: FullMapping) -> list[tuple]:
    """Per-stage (local part_of, tiles) of a full mapping, the inverse of ``evaluate_full``'s input."""
    return [(list(r.intra.part_of), list(r.intra.t_used)) for r in full.stages]


# ------------------------------------------------------------------ mapping files


def full_mapping_to_dict(g: DataflowGraph, full: FullMapping) -> dict:
    """Inter-chip stages and schemes plus the on-chip partitions and tiles of every stage."""
    names = [k.name for k in g.kernels]
    parts, tiles = [], {}
    for r in full.stages:
        ids = r.view.kernel_ids
        local = [[] for _ in range(r.intra.p_max)]
        for lk, i in enumerate(r.intra.part_of):
            local[i].append(ids[lk])
        parts += [p for p in local if p]
        for lk, t in enumerate(r.intra.t_used):
            tiles[names[ids[lk]]] = int(t)
    out = mapping_to_dict(g, full.inter.part_of, full.inter.schemes, p_max=full.inter.p_max)
    out["intra"] = {"partitions": parts, "tiles": tiles}
    return out


def _intra_groups(g: DataflowGraph, groups) -> list[int]:
    try:
        return list_to_partitions([[int(k) for k in ks] for ks in groups], g.n)
    except (TypeError, ValueError) as e:
        raise InvalidMapping(f"intra partitions: {e}") from None


def full_mapping_from_dict(
    g: DataflowGraph,
    sys: SystemSpec,
    data: dict,
    training: TrainingConfig = TrainingConfig(),
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
) -> FullMapping:
    """Evaluate a mapping file.

    Without an ``intra`` block every kernel gets its own on-chip stage (the
    non-dataflow baseline). Without ``intra.tiles`` the tile split is solved
    for the given partitions.
    """
    if not isinstance(data, dict):
        raise InvalidMapping("mapping must be an object")
    m = mapping_from_dict(g, data)
    schemes = m["schemes"]
    if schemes is None:
        if sys.n_tp > 1:
            raise InvalidMapping("schemes: required when tensor parallelism is used")
        schemes = [(k.scheme_ids or ("replicate",))[0] for k in g.kernels]
    inter = evaluate_interchip(g, sys, m["part_of"], schemes, training, m["p_max"])
    intra = data.get("intra")
    if intra is None:
        return non_dataflow_full(g, sys, inter, training)
    part_of = _intra_groups(g, intra.get("partitions", []))
    for t in g.tensors:
        if part_of[t.dst] < part_of[t.src]:
            raise InvalidMapping(
                f"intra partitions: tensor {g.kernels[t.src].name}->{g.kernels[t.dst].name} flows backwards")
    tiles_raw = intra.get("tiles")
    tiles = _by_kernel(g, tiles_raw, "tiles") if tiles_raw is not None else None
    if tiles is not None and None in tiles:
        raise InvalidMapping(f"tiles: no tile count for kernel {g.kernels[tiles.index(None)].name!r}")
    results, statuses = [], ["evaluated"]
    for view in stage_views(g, sys, inter, training):
        ids = view.kernel_ids
        used = sorted({part_of[k] for k in ids})
        for k in range(g.n):
            if part_of[k] in used and k not in ids:
                raise InvalidMapping(f"intra partitions: kernel {g.kernels[k].name!r} shares a partition across stages")
        local = [used.index(part_of[k]) for k in ids]
        if not ids:
            im = evaluate_intrachip(view.sub, sys.chip, [], [], p_max=1, resident_bytes=view.resident)
        elif tiles is not None:
            try:
                im = evaluate_intrachip(view.sub, sys.chip, local, [int(tiles[k]) for k in ids], view.net, None,
                                        view.resident, view.traffic_mult)
            except IntraError as e:
                raise InvalidMapping(str(e)) from None
        else:
            im = optimize_intrachip(view.sub, sys.chip, view.net, len(used), None, view.resident,
                                    view.traffic_mult, backend, time_limit, fixed_part=local)
            statuses.append(im.status)
        results.append(StageResult(view, im, float(inter.t_p2p[view.stage])))
    status = _merge_status(statuses)
    return FullMapping(inter, results, training, status,
                       next((r.intra.binding for r in results if r.intra.binding), None))
