"""Workload dataflow graphs: kernels, tensors, file I/O and built-in generators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

KERNEL_KINDS = (
    "gemm",
    "attention-score",
    "softmax",
    "elementwise",
    "embedding-lookup",
    "fft-stage",
    "lu-stage",
)

# Per-element FLOP for the non-GEMM kernels of the GPT layer.
SOFTMAX_FLOP_PER_ELEM = 5
ADD_FLOP_PER_ELEM = 1


class GraphError(ValueError):
    """Malformed or invalid workload graph."""


@dataclass(frozen=True)
class Kernel:
    id: int
    name: str
    kind: str
    flop: float
    gemm_dims: Optional[tuple[int, int, int]] = None
    scheme_ids: tuple[str, ...] = ()
    # Bytes of resident parameters (weights, embedding tables).
    param_bytes: float = 0.0
    # Bytes of the kernel's full output, before sharding.
    out_bytes: float = 0.0


@dataclass(frozen=True)
class Tensor:
    id: int
    src: int
    dst: int  # a tuple of ids marks a multi-consumer edge before normalize_fanout
    bytes: float


@dataclass(frozen=True)
class DataflowGraph:
    kernels: tuple[Kernel, ...]
    tensors: tuple[Tensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @property
    def n(self) -> int:
        return len(self.kernels)

    @property
    def m(self) -> int:
        return len(self.tensors)

    @property
    def flops(self) -> list[float]:
        return [k.flop for k in self.kernels]

    @property
    def sizes(self) -> list[float]:
        return [t.bytes for t in self.tensors]

    def kernel_by_name(self, name: str) -> Kernel:
        for k in self.kernels:
            if k.name == name:
                return k
        raise KeyError(name)

    def topo_order(self) -> list[int]:
        return topological_order(self.n, [(t.src, t.dst) for t in self.tensors])

    def subgraph(self, kernel_ids: Iterable[int]) -> tuple["DataflowGraph", list[int], list[int]]:
        """Induced subgraph on ``kernel_ids``, reindexed densely.

        Returns the subgraph plus the original kernel and tensor ids in
        subgraph order.
        """
        keep = sorted(set(kernel_ids))
        remap = {old: new for new, old in enumerate(keep)}
        kernels = [
            Kernel(remap[k.id], k.name, k.kind, k.flop, k.gemm_dims, k.scheme_ids, k.param_bytes, k.out_bytes)
            for k in self.kernels
            if k.id in remap
        ]
        tensors, tensor_ids = [], []
        for t in self.tensors:
            if t.src in remap and t.dst in remap:
                tensors.append(Tensor(len(tensors), remap[t.src], remap[t.dst], t.bytes))
                tensor_ids.append(t.id)
        return DataflowGraph(kernels, tensors), keep, tensor_ids

    def to_dict(self) -> dict:
        kernels = []
        for k in self.kernels:
            d = {"name": k.name, "kind": k.kind, "flop": k.flop}
            if k.gemm_dims is not None:
                d["gemm_dims"] = list(k.gemm_dims)
            if k.scheme_ids:
                d["schemes"] = list(k.scheme_ids)
            if k.param_bytes:
                d["param_bytes"] = k.param_bytes
            if k.out_bytes:
                d["out_bytes"] = k.out_bytes
            kernels.append(d)
        tensors = [{"src": t.src, "dst": t.dst, "bytes": t.bytes} for t in self.tensors]
        return {"kernels": kernels, "tensors": tensors}


def topological_order(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    """Kahn's algorithm with smallest-index tie-break; raises on a cycle."""
    import heapq

    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for s, d in edges:
        succ[s].append(d)
        indeg[d] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for d in succ[i]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != n:
        stuck = sorted(set(range(n)) - set(order))
        raise GraphError(f"cycle detected through kernels {stuck}")
    return order


def validate(g: DataflowGraph) -> DataflowGraph:
    names = [k.name for k in g.kernels]
    for i, k in enumerate(g.kernels):
        if k.id != i:
            raise GraphError(f"kernel {k.name!r}: id {k.id} is not dense index {i}")
        if k.kind not in KERNEL_KINDS:
            raise GraphError(f"kernel {k.name!r}: unknown kind {k.kind!r}")
        if not (k.flop >= 0) or math.isinf(k.flop):
            raise GraphError(f"kernel {k.name!r}: flop must be a finite value >= 0")
        if k.param_bytes < 0:
            raise GraphError(f"kernel {k.name!r}: param_bytes must be >= 0")
        if k.gemm_dims is not None:
            if len(k.gemm_dims) != 3 or min(k.gemm_dims) < 1:
                raise GraphError(f"kernel {k.name!r}: gemm_dims must be three positive integers")
    if len(set(names)) != len(names):
        raise GraphError("duplicate kernel names")
    for j, t in enumerate(g.tensors):
        if t.id != j:
            raise GraphError(f"tensor {j}: id {t.id} is not dense index {j}")
        if not isinstance(t.dst, int):
            raise GraphError(f"tensor {j}: multi-consumer edge; call normalize_fanout first")
        for end in (t.src, t.dst):
            if not 0 <= end < g.n:
                raise GraphError(f"tensor {j}: dangling endpoint {end} (graph has {g.n} kernels)")
        if t.src == t.dst:
            raise GraphError(f"tensor {j}: self-loop on kernel {t.src}")
        if not (t.bytes > 0):
            raise GraphError(f"tensor {j}: nonpositive size {t.bytes}")
    g.topo_order()
    return g


def normalize_fanout(g: DataflowGraph) -> DataflowGraph:
    """Replicate every multi-consumer tensor into one tensor per consumer.

    A tensor whose ``dst`` is a sequence of kernel ids is a multi-consumer
    edge; each consumer gets its own copy with identical size. Tensor ids are
    re-densified in order. Idempotent.
    """
    out: list[Tensor] = []
    for t in g.tensors:
        dsts = t.dst if isinstance(t.dst, (tuple, list)) else (t.dst,)
        for d in dsts:
            out.append(Tensor(len(out), t.src, int(d), t.bytes))
    return DataflowGraph(g.kernels, out)


# --------------------------------------------------------------------------- I/O


def default_schemes(kind: str) -> tuple[str, ...]:
    from .sharding import CATALOG_BY_KIND

    return tuple(CATALOG_BY_KIND.get(kind, ()))


def _kernel_from_dict(i: int, d: dict, element_bytes: float) -> Kernel:
    try:
        name = str(d.get("name", f"k{i}"))
        kind = d["kind"]
    except KeyError as e:
        raise GraphError(f"kernel {i}: missing field {e.args[0]!r}") from None
    dims = d.get("gemm_dims")
    if dims is not None:
        dims = tuple(int(x) for x in dims)
    if "flop" in d:
        flop = float(d["flop"])
    elif dims is not None:
        flop = 2.0 * dims[0] * dims[1] * dims[2]
    else:
        raise GraphError(f"kernel {name!r}: needs 'flop' or 'gemm_dims'")
    params = float(d.get("param_bytes", d.get("param_elements", 0) * element_bytes))
    if kind not in KERNEL_KINDS:
        raise GraphError(f"kernel {name!r}: unknown kind {kind!r}")
    out = float(d.get("out_bytes", d.get("out_elements", 0) * element_bytes))
    if not out and dims is not None:
        out = dims[0] * dims[2] * element_bytes
    schemes = tuple(d["schemes"]) if d.get("schemes") else default_schemes(kind)
    return Kernel(i, name, kind, flop, dims, schemes, params, out)


def graph_from_dict(data: dict, element_bytes: float = 2.0) -> DataflowGraph:
    if not isinstance(data, dict) or "kernels" not in data:
        raise GraphError("workload must be an object with a 'kernels' list")
    kernels = [_kernel_from_dict(i, d, element_bytes) for i, d in enumerate(data["kernels"])]
    names = {k.name: k.id for k in kernels}

    def ref(x):
        if isinstance(x, str):
            if x not in names:
                raise GraphError(f"dangling endpoint {x!r}: no such kernel")
            return names[x]
        return int(x)

    tensors = []
    for j, t in enumerate(data.get("tensors", [])):
        try:
            src = ref(t["src"])
            dst = t["dst"]
        except KeyError as e:
            raise GraphError(f"tensor {j}: missing field {e.args[0]!r}") from None
        dst = tuple(ref(x) for x in dst) if isinstance(dst, list) else ref(dst)
        if "bytes" in t:
            nbytes = float(t["bytes"])
        elif "elements" in t:
            nbytes = float(t["elements"]) * element_bytes
        else:
            raise GraphError(f"tensor {j}: needs 'bytes' or 'elements'")
        tensors.append(Tensor(j, src, dst, nbytes))
    g = validate(normalize_fanout(DataflowGraph(kernels, tensors)))
    return _fill_out_bytes(g)


def _fill_out_bytes(g: DataflowGraph) -> DataflowGraph:
    """Kernels without a declared output size take their largest outgoing tensor."""
    biggest = [0.0] * g.n
    for t in g.tensors:
        biggest[t.src] = max(biggest[t.src], t.bytes)
    kernels = [
        k if k.out_bytes else Kernel(k.id, k.name, k.kind, k.flop, k.gemm_dims, k.scheme_ids,
                                     k.param_bytes, biggest[k.id])
        for k in g.kernels
    ]
    return DataflowGraph(kernels, g.tensors)


def load_graph(path: str | Path, element_bytes: float = 2.0) -> DataflowGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise GraphError(f"{path}: parse error: {e}") from None
    return graph_from_dict(data, element_bytes)


def save_graph(g: DataflowGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------- generators


class _Builder:
    def __init__(self, element_bytes: float):
        self.eb = element_bytes
        self.kernels: list[Kernel] = []
        self.tensors: list[Tensor] = []

    def kernel(self, name, kind, flop, out_elems, dims=None, param_elems=0.0) -> int:
        i = len(self.kernels)
        self.kernels.append(Kernel(i, name, kind, float(flop), dims, (), float(param_elems) * self.eb,
                                   float(out_elems) * self.eb))
        return i

    def gemm(self, name, M, K, N, weight=True) -> int:
        return self.kernel(name, "gemm", 2.0 * M * K * N, M * N, (M, K, N), K * N if weight else 0)

    def edge(self, src, dst, elements) -> None:
        self.tensors.append(Tensor(len(self.tensors), src, dst, float(elements) * self.eb))

    def build(self) -> DataflowGraph:
        kernels = [
            Kernel(k.id, k.name, k.kind, k.flop, k.gemm_dims, default_schemes(k.kind), k.param_bytes,
                   k.out_bytes)
            for k in self.kernels
        ]
        return validate(DataflowGraph(kernels, self.tensors))


def _positive(**kw):
    for name, v in kw.items():
        if v is None or v < 1:
            raise GraphError(f"invalid dimension: {name}={v!r} must be >= 1")


def generate_gpt_layer(
    batch: int,
    seq: int,
    hidden: int,
    heads: int,
    ffn_mult: float = 4,
    element_bytes: float = 2.0,
) -> DataflowGraph:
    """Single transformer layer: Q, K, V, MHA1, Softmax, MHA2, Proj, FFN0, FFN1, Add."""
    _positive(batch=batch, seq=seq, hidden=hidden, heads=heads, ffn_mult=ffn_mult)
    if hidden % heads:
        raise GraphError(f"invalid dimension: hidden={hidden} not divisible by heads={heads}")
    b, s, h = batch, seq, hidden
    f = int(round(ffn_mult * h))
    act = b * s * h
    scores = b * heads * s * s
    g = _Builder(element_bytes)
    q = g.gemm("Q", b * s, h, h)
    k = g.gemm("K", b * s, h, h)
    v = g.gemm("V", b * s, h, h)
    mha1 = g.kernel("MHA1", "attention-score", 2.0 * b * s * s * h, scores)
    soft = g.kernel("Softmax", "softmax", SOFTMAX_FLOP_PER_ELEM * scores, scores)
    mha2 = g.kernel("MHA2", "attention-score", 2.0 * b * s * s * h, act)
    proj = g.gemm("Proj", b * s, h, h)
    ffn0 = g.gemm("FFN0", b * s, h, f)
    ffn1 = g.gemm("FFN1", b * s, f, h)
    add = g.kernel("Add", "elementwise", ADD_FLOP_PER_ELEM * act, act)
    g.edge(q, mha1, act)
    g.edge(k, mha1, act)
    g.edge(mha1, soft, scores)
    g.edge(soft, mha2, scores)
    g.edge(v, mha2, act)
    g.edge(mha2, proj, act)
    g.edge(proj, ffn0, act)
    g.edge(ffn0, ffn1, b * s * f)
    g.edge(ffn1, add, act)
    return g.build()


def generate_dlrm(
    tables: int = 1,
    mlp_layers: int = 1,
    batch: int = 1024,
    emb_dim: int = 128,
    rows_per_table: int = 1_000_000,
    lookups: int = 1,
    mlp_width: int = 1024,
    element_bytes: float = 2.0,
) -> DataflowGraph:
    """Embedding lookups -> pairwise feature interaction -> MLP chain."""
    _positive(tables=tables, mlp_layers=mlp_layers, batch=batch, emb_dim=emb_dim,
              rows_per_table=rows_per_table, lookups=lookups, mlp_width=mlp_width)
    g = _Builder(element_bytes)
    embs = [
        g.kernel(f"Emb{t}", "embedding-lookup", batch * lookups * emb_dim, batch * emb_dim,
                 param_elems=rows_per_table * emb_dim)
        for t in range(tables)
    ]
    inter = g.gemm("Interact", batch * tables, emb_dim, tables, weight=False)
    for e in embs:
        g.edge(e, inter, batch * emb_dim)
    prev, width = inter, tables * tables
    for layer in range(mlp_layers):
        cur = g.gemm(f"MLP{layer}", batch, width, mlp_width)
        g.edge(prev, cur, batch * width)
        prev, width = cur, mlp_width
    return g.build()


def lu_panel_flop(m: int, nb: int) -> int:
    """Exact FLOP of unblocked LU on an m x nb panel (divides + multiply-adds)."""
    return sum((m - j - 1) + 2 * (m - j - 1) * (nb - j - 1) for j in range(nb))


def generate_hpl(n: int, block: int, element_bytes: float = 8.0) -> DataflowGraph:
    """Right-looking blocked LU: per block step a panel factorization then a trailing update."""
    _positive(n=n, block=block)
    if n % block:
        raise GraphError(f"invalid dimension: n={n} not divisible by block={block}")
    g = _Builder(element_bytes)
    prev = None
    steps = n // block
    for k in range(steps):
        m = n - k * block
        r = m - block
        panel = g.kernel(f"Panel{k}", "lu-stage", lu_panel_flop(m, block), m * block)
        if prev is not None:
            g.edge(prev, panel, m * block)
        if r == 0:
            break
        # triangular solve for the U row block plus the rank-nb trailing GEMM
        upd_flop = block * (block - 1) * r + 2 * r * block * r
        upd = g.kernel(f"Update{k}", "gemm", upd_flop, r * r, (r, block, r))
        g.edge(panel, upd, m * block)
        prev = upd
    return g.build()


def generate_fft(points: int, radix: int = 2, element_bytes: float = 8.0) -> DataflowGraph:
    """log_radix(points) butterfly stages; every inter-stage tensor needs a transpose."""
    _positive(points=points, radix=radix)
    if radix < 2:
        raise GraphError("invalid dimension: radix must be >= 2")
    stages = round(math.log(points, radix))
    if radix**stages != points:
        raise GraphError(f"invalid dimension: points={points} is not a power of radix={radix}")
    g = _Builder(element_bytes)
    per_stage = 5.0 * points * math.log2(radix)
    prev = None
    for s in range(stages):
        cur = g.kernel(f"FFT{s}", "fft-stage", per_stage, points)
        if prev is not None:
            g.edge(prev, cur, points)
        prev = cur
    return g.build()


def generate_workload(kind: str, **params) -> DataflowGraph:
    if kind == "gpt":
        return generate_gpt_layer(**params)
    if kind == "dlrm":
        return generate_dlrm(**params)
    if kind == "hpl":
        return generate_hpl(**params)
    if kind == "fft":
        return generate_fft(**params)
    raise GraphError(f"unknown workload kind {kind!r}")
