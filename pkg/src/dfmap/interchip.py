"""Inter-chip level: choose a sharding scheme per kernel and split the graph into pipeline stages.

Per stage i the model charges
    t_comp[i] = sum of per-chip compute of its kernels,
    t_net[i]  = inherent collectives of its kernels + layout conversions of the
                tensors they produce,
    t_p2p[i]  = pipeline transfers of every tensor alive in stage i,
and the stage is bound by the largest of the three (they overlap). The
objective is the slowest stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import milp
from .collectives import CollectiveKind, collective_cost
from .graph import DataflowGraph, Kernel, Tensor
from .mapmat import AssignmentMatrices, check_precedence, list_to_partitions, one_hot, partitions_to_list
from .sharding import COL, ROW, ShardingScheme, conversion_kind, get_scheme
from .system import NetworkDim, SystemSpec


class InvalidMapping(ValueError):
    """A fixed mapping breaks a model constraint."""


@dataclass(frozen=True)
class TrainingConfig:
    """How one iteration relates to the forward graph."""

    backward: bool = True
    flop_mult: float = 3.0  # forward plus a backward pass costing twice the forward
    comm_mult: float = 2.0  # every collective mirrored in the backward pass
    mem_mult: float = 2.0  # activations written forward and read back backward
    microbatches: int = 1
    bubble: bool = False  # scale by (mu + n_pp - 1) / mu for a fill/drain pipeline

    @classmethod
    def inference(cls, microbatches: int = 1) -> "TrainingConfig":
        return cls(False, 1.0, 1.0, 1.0, microbatches, False)

    def to_dict(self) -> dict:
        return {
            "backward": self.backward, "flop_mult": self.flop_mult, "comm_mult": self.comm_mult,
            "mem_mult": self.mem_mult, "microbatches": self.microbatches, "bubble": self.bubble,
        }


def kernel_schemes(k: Kernel, n_tp: int) -> list[ShardingScheme]:
    """Candidate schemes; with one TP chip every scheme costs the same, so keep the first."""
    ids = list(k.scheme_ids) or ["replicate"]
    schemes = [get_scheme(s) for s in ids]
    return schemes if n_tp > 1 else schemes[:1]


def operand_bytes(k: Kernel) -> float:
    """Size of the operand a row-sharded GEMM broadcasts (its weight / second input)."""
    if k.param_bytes:
        return k.param_bytes
    if k.gemm_dims is not None and k.out_bytes:
        M, K, N = k.gemm_dims
        return k.out_bytes / (M * N) * K * N
    return 0.0


def collective_bytes(k: Kernel, s: ShardingScheme) -> float:
    if s.collective_bytes == "output":
        return k.out_bytes
    if s.collective_bytes == "operand":
        return operand_bytes(k)
    return 0.0


def kernel_comm_vector(k: Kernel, tp_dim: Optional[NetworkDim], schemes=None) -> np.ndarray:
    """Inherent collective cost (s) of each candidate scheme of ``k`` on the TP dim."""
    if schemes is None:
        schemes = [get_scheme(s) for s in (k.scheme_ids or ("replicate",))]
    if not schemes:
        raise InvalidMapping(f"kernel {k.name!r} has no sharding schemes")
    c = np.zeros(len(schemes))
    if tp_dim is None or tp_dim.size <= 1:
        return c
    for a, s in enumerate(schemes):
        if s.collective is not None:
            c[a] = collective_cost(s.collective, collective_bytes(k, s), tp_dim)
    return c


def conversion_matrix(
    t: Tensor,
    src_schemes: Sequence[ShardingScheme],
    dst_schemes: Sequence[ShardingScheme],
    tp_dim: Optional[NetworkDim],
) -> np.ndarray:
    """C[a, b]: cost of moving ``t`` from producer scheme a's layout to consumer scheme b's."""
    C = np.zeros((len(src_schemes), len(dst_schemes)))
    if tp_dim is None or tp_dim.size <= 1:
        return C
    for a, sa in enumerate(src_schemes):
        for b, sb in enumerate(dst_schemes):
            kind = conversion_kind(sa.output_layout, sb.input_layout)
            if kind is not None:
                C[a, b] = collective_cost(kind, t.bytes, tp_dim)
    return C


def dp_overhead(g: DataflowGraph, sys: SystemSpec, param_bytes: float) -> float:
    """Gradient all-reduce over the DP dim, charged once per iteration."""
    dim = sys.dim_for("dp")
    if dim is None or sys.n_dp <= 1:
        return 0.0
    return collective_cost(CollectiveKind.all_reduce, param_bytes, dim)


@dataclass
class InterCoeffs:
    """Per-kernel / per-tensor cost tables for one (graph, system, training) triple."""

    schemes: list  # per kernel: list of ShardingScheme
    h_c: list  # per kernel: array over schemes (s)
    h_n: list  # per kernel: array over schemes (s)
    h_m: list  # per tensor: matrix src schemes x dst schemes (s)
    h_p: np.ndarray  # per tensor (s)
    params: list  # per kernel: array over schemes (bytes per chip)
    p_max: int

    def scheme_index(self, k: int, scheme_id: str) -> int:
        for a, s in enumerate(self.schemes[k]):
            if s.id == scheme_id:
                return a
        raise InvalidMapping(f"scheme {scheme_id!r} is not a candidate for kernel {k}")


def inter_coeffs(
    g: DataflowGraph,
    sys: SystemSpec,
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
) -> InterCoeffs:
    n_tp = sys.n_tp
    tp = sys.dim_for("tp")
    pp = sys.dim_for("pp")
    chip = sys.chip
    schemes = [kernel_schemes(k, n_tp) for k in g.kernels]
    h_c, h_n, params = [], [], []
    for k, ss in zip(g.kernels, schemes):
        h_c.append(np.array([k.flop * training.flop_mult * s.flop_scale(n_tp) / chip.peak for s in ss]))
        h_n.append(training.comm_mult * kernel_comm_vector(k, tp, ss))
        params.append(np.array([k.param_bytes * s.param_scale(n_tp) for s in ss]))
    h_m = [
        training.comm_mult * conversion_matrix(t, schemes[t.src], schemes[t.dst], tp) for t in g.tensors
    ]
    if pp is not None and sys.n_pp > 1:
        h_p = np.array([training.comm_mult * collective_cost("p2p", t.bytes, pp) for t in g.tensors])
    else:
        h_p = np.zeros(g.m)
    if p_max is None:
        p_max = max(1, min(sys.n_pp, g.n))
    return InterCoeffs(schemes, h_c, h_n, h_m, h_p, params, p_max)


@dataclass
class InterChipMapping:
    mats: AssignmentMatrices
    part_of: list
    schemes: list  # scheme id per kernel
    t_comp: np.ndarray
    t_net: np.ndarray
    t_p2p: np.ndarray
    t_cri: np.ndarray
    stage_params: np.ndarray  # bytes per chip per stage
    dp_time: float = 0.0
    status: str = "evaluated"
    binding: Optional[str] = None

    @property
    def objective(self) -> float:
        return float(self.t_cri.max()) if self.t_cri.size else 0.0

    @property
    def p_max(self) -> int:
        return self.mats.p_max

    def partitions(self) -> list[list[int]]:
        return partitions_to_list(self.part_of, self.p_max)


def _as_part_of(assignment, n: int, p_max: int) -> list[int]:
    A = np.asarray(assignment)
    if A.ndim == 2:
        return AssignmentMatrices.from_assignment(A, []).partition_of()
    return [int(x) for x in A]


def evaluate_interchip(
    g: DataflowGraph,
    sys: SystemSpec,
    assignment,
    schemes: Sequence[str],
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
    coeffs: Optional[InterCoeffs] = None,
    check_memory: bool = True,
) -> InterChipMapping:
    """Time vectors of a fixed stage assignment (partition index per kernel, or matrix A)."""
    if coeffs is None:
        coeffs = inter_coeffs(g, sys, training, p_max)
    P = coeffs.p_max
    part_of = _as_part_of(assignment, g.n, P)
    if len(part_of) != g.n or len(schemes) != g.n:
        raise InvalidMapping(f"mapping covers {len(part_of)} kernels and {len(schemes)} schemes; graph has {g.n}")
    if P > max(1, sys.n_pp):
        raise InvalidMapping(f"{P} stages exceed the {sys.n_pp} pipeline chips")
    mats = AssignmentMatrices.from_partitions(part_of, P, g.tensors)
    choice = [coeffs.scheme_index(k, s) for k, s in enumerate(schemes)]
    hc = np.array([coeffs.h_c[k][a] for k, a in enumerate(choice)])
    hn = np.array([coeffs.h_n[k][a] for k, a in enumerate(choice)])
    hm = np.array([coeffs.h_m[j][choice[t.src], choice[t.dst]] for j, t in enumerate(g.tensors)])
    pb = np.array([coeffs.params[k][a] for k, a in enumerate(choice)])
    A = mats.A.astype(float)
    t_comp = A.T @ hc
    t_net = A.T @ hn + mats.H.astype(float).T @ hm
    t_p2p = mats.L.astype(float).T @ coeffs.h_p
    t_cri = np.maximum(np.maximum(t_comp, t_net), t_p2p)
    stage_params = A.T @ pb
    if check_memory:
        over = np.flatnonzero(stage_params > sys.chip.d_cap * (1 + 1e-12))
        if over.size:
            raise InvalidMapping(
                f"dram: stage {int(over[0])} holds {stage_params[over[0]]:.4g} B of parameters "
                f"> d_cap {sys.chip.d_cap:.4g} B"
            )
    dp_time = dp_overhead(g, sys, float(stage_params.max())) if training.backward else 0.0
    return InterChipMapping(mats, list(part_of), [coeffs.schemes[k][a].id for k, a in enumerate(choice)],
                            t_comp, t_net, t_p2p, t_cri, stage_params, dp_time)


# ----------------------------------------------------------------------- model


@dataclass
class InterProblem:
    g: DataflowGraph
    sys: SystemSpec
    training: TrainingConfig
    coeffs: InterCoeffs
    model: milp.Model
    w: list  # w[k][i][a]
    scale: float
    # expressions per stage, in scaled seconds
    t_comp: list = field(default_factory=list)
    t_net: list = field(default_factory=list)
    t_p2p: list = field(default_factory=list)


def _time_scale(coeffs: InterCoeffs) -> float:
    vals = [float(np.max(c)) for c in coeffs.h_c if c.size]
    vals += [float(np.max(c)) for c in coeffs.h_n if c.size]
    vals += [float(np.max(c)) for c in coeffs.h_m if c.size]
    vals += [float(np.max(coeffs.h_p))] if coeffs.h_p.size else []
    top = max(vals, default=0.0)
    return top if top > 0 else 1.0


def build_interchip(
    g: DataflowGraph,
    sys: SystemSpec,
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
) -> InterProblem:
    coeffs = inter_coeffs(g, sys, training, p_max)
    P = coeffs.p_max
    scale = _time_scale(coeffs)
    m = milp.Model("interchip")
    # w[k][i][a] = A[k, i] AND s_k[a]; one-hot over (i, a) per kernel
    w = [[[m.var(f"w[{k},{i},{a}]") for a in range(len(coeffs.schemes[k]))] for i in range(P)]
         for k in range(g.n)]
    A = [[milp.lsum(w[k][i]) for i in range(P)] for k in range(g.n)]
    s = [[milp.lsum(w[k][i][a] for i in range(P)) for a in range(len(coeffs.schemes[k]))]
         for k in range(g.n)]
    for k in range(g.n):
        m.eq(milp.lsum(A[k]), 1, "onehot")
    idx = [milp.lsum(i * A[k][i] for i in range(P)) for k in range(g.n)]
    for t in g.tensors:
        m.ge(idx[t.dst], idx[t.src], "precedence")
    if P > 1:
        # empty stages only at the end; dropping an empty stage never adds cost
        prev = None
        for i in range(P):
            o = m.var(f"open[{i}]")
            for k in range(g.n):
                m.le(A[k][i], o, "logic")
            if prev is not None:
                m.le(o, prev, "logic")
            prev = o

    t_comp = [milp.Lin() for _ in range(P)]
    t_net = [milp.Lin() for _ in range(P)]
    t_p2p = [milp.Lin() for _ in range(P)]
    mem = [milp.Lin() for _ in range(P)]
    launches = milp.Lin()  # collectives issued, the last tie-break
    for k in range(g.n):
        for i in range(P):
            for a in range(len(coeffs.schemes[k])):
                t_comp[i] = t_comp[i] + (coeffs.h_c[k][a] / scale) * w[k][i][a]
                if coeffs.h_n[k][a]:
                    t_net[i] = t_net[i] + (coeffs.h_n[k][a] / scale) * w[k][i][a]
                    launches = launches + w[k][i][a]
                if coeffs.params[k][a]:
                    mem[i] = mem[i] + coeffs.params[k][a] * w[k][i][a]
    for j, t in enumerate(g.tensors):
        C = coeffs.h_m[j]
        # conversion cost lands on the producer's stage: H[j, i] * C[s_src, s_dst]
        for i in range(P):
            for a in range(C.shape[0]):
                for b in range(C.shape[1]):
                    if C[a, b]:
                        y = milp.lin_and(m, w[t.src][i][a], s[t.dst][b], f"y[{j},{i},{a},{b}]")
                        t_net[i] = t_net[i] + (C[a, b] / scale) * y
                        launches = launches + y
        if P > 1 and coeffs.h_p[j]:
            for i in range(P):
                a_s = milp.lsum(A[t.src][q] for q in range(i + 1))
                a_t = milp.lsum(A[t.dst][q] for q in range(i))
                both = milp.lin_and(m, A[t.src][i], A[t.dst][i], f"B[{j},{i}]")
                span = milp.lin_xor(m, a_s, a_t, f"span[{j},{i}]")
                live = milp.lin_xor(m, span, both, f"L[{j},{i}]")
                t_p2p[i] = t_p2p[i] + (coeffs.h_p[j] / scale) * live
    for i in range(P):
        if mem[i].terms:
            m.add(mem[i], hi=sys.chip.d_cap, cls="dram")
    terms = [e for i in range(P) for e in (t_comp[i], t_net[i], t_p2p[i]) if e.terms]
    total = milp.lsum(t_comp + t_net + t_p2p)
    milp.minimize_max(m, terms or [milp.Lin()], total, launches)
    return InterProblem(g, sys, training, coeffs, m, w, scale, t_comp, t_net, t_p2p)


def solve_interchip(
    problem: InterProblem,
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
    seed: int = 0,
) -> InterChipMapping:
    sol = milp.solve(problem.model, backend, time_limit, seed)
    g, coeffs = problem.g, problem.coeffs
    P = coeffs.p_max
    if sol.x is None:
        res = _empty_mapping(g, P, sol.status)
        res.binding = sol.binding
        return res
    part_of, schemes = [], []
    for k in range(g.n):
        best = max(
            ((i, a) for i in range(P) for a in range(len(coeffs.schemes[k]))),
            key=lambda ia: sol.value(problem.w[k][ia[0]][ia[1]]),
        )
        part_of.append(best[0])
        schemes.append(coeffs.schemes[k][best[1]].id)
    res = evaluate_interchip(g, problem.sys, part_of, schemes, problem.training, coeffs=coeffs)
    res.status = sol.status
    return res


def _empty_mapping(g: DataflowGraph, P: int, status: str) -> InterChipMapping:
    z = np.zeros(P)
    mats = AssignmentMatrices.from_partitions([0] * g.n, P, g.tensors)
    return InterChipMapping(mats, [0] * g.n, [""] * g.n, z, z.copy(), z.copy(), z.copy(), z.copy(),
                            status=status)


def optimize_interchip(
    g: DataflowGraph,
    sys: SystemSpec,
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
    backend: Optional[str] = None,
    time_limit: float = milp.DEFAULT_TIME_LIMIT,
    seed: int = 0,
) -> InterChipMapping:
    return solve_interchip(build_interchip(g, sys, training, p_max), backend, time_limit, seed)


# ------------------------------------------------------------------ reporting


def count_all_reduces(
    g: DataflowGraph, sys: SystemSpec, schemes: Sequence[str], training: TrainingConfig = TrainingConfig()
) -> dict:
    """All-reduces issued by a scheme choice: inherent ones plus partial-sum conversions."""
    forward = 0
    if sys.n_tp > 1:
        for k, sid in zip(g.kernels, schemes):
            s = get_scheme(sid)
            if s.collective == "all_reduce" and collective_bytes(k, s) > 0:
                forward += 1
        for t in g.tensors:
            kind = conversion_kind(get_scheme(schemes[t.src]).output_layout,
                                   get_scheme(schemes[t.dst]).input_layout)
            if kind == "all_reduce":
                forward += 1
    per_iter = forward * (2 if training.backward else 1)
    return {"forward": forward, "per_iteration": per_iter}


def stage_tensor_bytes(t: Tensor, src_scheme: ShardingScheme, n_tp: int) -> float:
    """Per-chip bytes of a tensor under its producer's output layout."""
    return t.bytes / n_tp if src_scheme.output_layout in (ROW, COL) and src_scheme.sharded else t.bytes


# ------------------------------------------------------------------- mapping I/O


def mapping_to_dict(g: DataflowGraph, part_of, schemes=None, tiles=None, p_max=None) -> dict:
    p_max = p_max or (max(part_of) + 1 if len(part_of) else 1)
    out = {"partitions": partitions_to_list(part_of, p_max)}
    if schemes is not None:
        out["schemes"] = {g.kernels[k].name: s for k, s in enumerate(schemes)}
    if tiles is not None:
        out["tiles"] = {g.kernels[k].name: int(t) for k, t in enumerate(tiles)}
    return out


def _by_kernel(g: DataflowGraph, table: dict, what: str) -> list:
    out = [None] * g.n
    names = {k.name: k.id for k in g.kernels}
    for key, val in table.items():
        if key in names:
            k = names[key]
        else:
            try:
                k = int(key)
            except ValueError:
                raise InvalidMapping(f"{what}: unknown kernel {key!r}") from None
            if not 0 <= k < g.n:
                raise InvalidMapping(f"{what}: kernel id {k} out of range")
        out[k] = val
    return out


def mapping_from_dict(g: DataflowGraph, data: dict) -> dict:
    """Parse a mapping file into part_of, schemes and tiles (None where absent)."""
    if "partitions" not in data:
        raise InvalidMapping("mapping needs a 'partitions' list")
    part_of = list_to_partitions([[int(k) for k in ks] for ks in data["partitions"]], g.n)
    schemes = tiles = None
    if "schemes" in data:
        schemes = _by_kernel(g, data["schemes"], "schemes")
        missing = [g.kernels[k].name for k, s in enumerate(schemes) if s is None]
        if missing:
            raise InvalidMapping(f"schemes: no scheme for kernels {missing}")
    if "tiles" in data:
        tiles = _by_kernel(g, data["tiles"], "tiles")
    check_precedence(part_of, g.tensors)
    return {"part_of": part_of, "p_max": len(data["partitions"]), "schemes": schemes, "tiles": tiles}


def load_mapping(g: DataflowGraph, path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidMapping(f"{path}: parse error: {e}") from None
    return mapping_from_dict(g, data)
