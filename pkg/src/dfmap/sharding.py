"""Tensor-parallel sharding schemes and layout-conversion rules.

A scheme fixes how a kernel's work and tensors are split across the TP chips:
the layout it needs on its inputs, the layout it leaves on its output, any
collective it needs internally, and which GEMM dim (if any) gets divided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

ROW = "row_sharded"
COL = "col_sharded"
REP = "replicated"
PSUM = "partial_sum"
LAYOUTS = (ROW, COL, REP, PSUM)


class SchemeError(KeyError):
    pass


@dataclass(frozen=True)
class ShardingScheme:
    id: str
    kernel_kind: str  # "any" for kind-agnostic schemes
    sharded: bool  # work split across the TP chips
    input_layout: str
    output_layout: str
    collective: Optional[str] = None  # CollectiveKind value
    # what the inherent collective moves: "output" bytes or the replicated "operand"
    collective_bytes: str = "none"
    params_sharded: bool = False
    gemm_split: Optional[str] = None  # "M", "K" or "N"

    def flop_scale(self, n_tp: int) -> float:
        return 1.0 / n_tp if self.sharded else 1.0

    def param_scale(self, n_tp: int) -> float:
        return 1.0 / n_tp if self.params_sharded else 1.0


_SCHEMES = [
    ShardingScheme("replicate", "any", False, REP, REP),
    # first operand split by rows, second operand broadcast to every chip
    ShardingScheme("shard_m", "gemm", True, ROW, ROW, "broadcast", "operand", False, "M"),
    # contraction dim split; partial products summed with an all-reduce
    ShardingScheme("shard_k", "gemm", True, COL, REP, "all_reduce", "output", True, "K"),
    # weight split by columns; replicated input, column-sharded output
    ShardingScheme("shard_n", "gemm", True, REP, COL, None, "none", True, "N"),
    ShardingScheme("shard_heads", "attention-score", True, COL, COL),
    ShardingScheme("shard_rows", "softmax", True, ROW, ROW),
    ShardingScheme("ew_row", "elementwise", True, ROW, ROW),
    ShardingScheme("ew_col", "elementwise", True, COL, COL),
    # table split across chips; looked-up rows exchanged all-to-all
    ShardingScheme("shard_table", "embedding-lookup", True, REP, ROW, "all_to_all", "output", True),
    # samples split, every chip holds the full table
    ShardingScheme("shard_batch", "embedding-lookup", True, REP, ROW),
    # every butterfly stage reads columns and writes rows
    ShardingScheme("transpose", "fft-stage", True, COL, ROW),
    # panel rows split; factored panel broadcast to all chips
    ShardingScheme("lu_rows", "lu-stage", True, ROW, REP, "broadcast", "output"),
]

SCHEMES: dict[str, ShardingScheme] = {s.id: s for s in _SCHEMES}

CATALOG_BY_KIND: dict[str, tuple[str, ...]] = {
    "gemm": ("shard_m", "shard_k", "shard_n", "replicate"),
    "attention-score": ("shard_heads", "replicate"),
    "softmax": ("shard_heads", "shard_rows", "replicate"),
    "elementwise": ("ew_row", "ew_col", "replicate"),
    "embedding-lookup": ("shard_table", "shard_batch", "replicate"),
    "fft-stage": ("transpose", "replicate"),
    "lu-stage": ("lu_rows", "replicate"),
}


def get_scheme(scheme_id: str) -> ShardingScheme:
    try:
        return SCHEMES[scheme_id]
    except KeyError:
        raise SchemeError(f"unknown scheme id {scheme_id!r}") from None


def conversion_kind(src_layout: str, dst_layout: str) -> Optional[str]:
    """Collective needed to turn ``src_layout`` into ``dst_layout``, or None if free."""
    if src_layout == dst_layout or dst_layout == PSUM:
        return None
    if src_layout == PSUM:
        return "all_reduce"
    if src_layout == REP:
        return None  # slice locally
    if dst_layout == REP:
        return "all_gather"
    return "all_to_all"  # row <-> col
