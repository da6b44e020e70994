"""Latency-bandwidth cost models for collectives on 1-D topologies and their compositions.

Notation in the formulas: p chips in the dim, B link bandwidth (bytes/s),
a per-hop latency (s), S the message size in bytes. Bandwidth is assumed
fully usable; no contention factor is applied.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

from .system import NetworkDim


class CollectiveKind(str, Enum):
    all_reduce = "all_reduce"
    all_gather = "all_gather"
    reduce_scatter = "reduce_scatter"
    broadcast = "broadcast"
    all_to_all = "all_to_all"
    p2p = "p2p"


class UnsupportedCollective(ValueError):
    pass


def _ring(kind: CollectiveKind, S: float, p: int, B: float, a: float) -> float:
    if kind is CollectiveKind.all_reduce:
        # reduce-scatter then all-gather, each p-1 steps of S/p
        return 2 * (p - 1) / p * S / B + 2 * (p - 1) * a
    if kind in (CollectiveKind.all_gather, CollectiveKind.reduce_scatter):
        return (p - 1) / p * S / B + (p - 1) * a
    if kind is CollectiveKind.broadcast:
        # pipelined ring: S split into chunks streamed around p-1 hops
        return S * (p - 1) / p / B + (p - 1) * a
    if kind is CollectiveKind.all_to_all:
        # store-and-forward: aggregate hop-bytes over bidirectional links
        return S * (p * p - 1) / (4 * p) / B + (p - 1) * a
    if kind is CollectiveKind.p2p:
        return S / B + a
    raise UnsupportedCollective(f"{kind} on ring")


def _switch(kind: CollectiveKind, S: float, p: int, B: float, a: float) -> float:
    if kind in (CollectiveKind.all_reduce, CollectiveKind.all_gather, CollectiveKind.reduce_scatter):
        # ring algorithm over the switch: one uplink per chip, same steps as a ring
        return _ring(kind, S, p, B, a)
    if kind is CollectiveKind.broadcast:
        return S / B + a
    if kind is CollectiveKind.all_to_all:
        # each chip pushes (p-1)/p of its buffer through its single uplink
        return S * (p - 1) / p / B + a
    if kind is CollectiveKind.p2p:
        return S / B + a
    raise UnsupportedCollective(f"{kind} on switch")


def _fully_connected(kind: CollectiveKind, S: float, p: int, B: float, a: float) -> float:
    if kind in (CollectiveKind.all_gather, CollectiveKind.reduce_scatter):
        # direct exchange: p-1 chunks of S/p in parallel over p-1 links
        return (p - 1) / p * S / (B * (p - 1)) + a
    if kind is CollectiveKind.all_reduce:
        return 2 * ((p - 1) / p * S / (B * (p - 1)) + a)
    if kind is CollectiveKind.broadcast:
        return S / B + a
    if kind is CollectiveKind.all_to_all:
        return S * (p - 1) / p / (B * (p - 1)) + a
    if kind is CollectiveKind.p2p:
        return S / B + a
    raise UnsupportedCollective(f"{kind} on fully_connected")


_TOPO = {"ring": _ring, "switch": _switch, "fully_connected": _fully_connected}


def collective_cost(kind: CollectiveKind | str, nbytes: float, dim: NetworkDim) -> float:
    """Seconds to run one collective of ``nbytes`` over a single network dim."""
    kind = CollectiveKind(kind)
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    if dim.size <= 1 or nbytes == 0:
        return 0.0
    try:
        fn = _TOPO[dim.topology]
    except KeyError:
        raise UnsupportedCollective(f"{kind.value} on unknown topology {dim.topology!r}") from None
    return fn(kind, float(nbytes), dim.size, dim.link_bw, dim.hop_latency)


def hierarchical_cost(kind: CollectiveKind | str, nbytes: float, dims: Sequence[NetworkDim]) -> float:
    """Seconds for a collective spanning several dims, executed as per-dim stages.

    Reduce-scatter and all-gather shrink the message by each prior dim's size;
    all-reduce is reduce-scatter inward followed by all-gather outward.
    Broadcast and all-to-all run each stage on the full message; p2p is bound
    by the slowest dim.
    """
    kind = CollectiveKind(kind)
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be nonempty")
    if nbytes == 0:
        return 0.0
    if kind is CollectiveKind.p2p:
        return nbytes / min(d.link_bw for d in dims) + sum(d.hop_latency for d in dims if d.size > 1)
    if kind in (CollectiveKind.broadcast, CollectiveKind.all_to_all):
        return sum(collective_cost(kind, nbytes, d) for d in dims)
    stages = []
    scale = 1.0
    for d in dims:
        stages.append((d, nbytes / scale))
        scale *= d.size
    if kind is CollectiveKind.reduce_scatter:
        return sum(collective_cost(kind, s, d) for d, s in stages)
    if kind is CollectiveKind.all_gather:
        return sum(collective_cost(kind, s, d) for d, s in reversed(stages))
    rs = sum(collective_cost(CollectiveKind.reduce_scatter, s, d) for d, s in stages)
    ag = sum(collective_cost(CollectiveKind.all_gather, s, d) for d, s in reversed(stages))
    return rs + ag
