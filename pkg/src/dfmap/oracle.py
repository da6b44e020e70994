"""Brute-force reference optima for small instances, scored by the evaluate_* paths."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .graph import DataflowGraph
from .interchip import InterChipMapping, InvalidMapping, TrainingConfig, evaluate_interchip, inter_coeffs
from .intrachip import IntraChipMapping, IntraError, evaluate_intrachip
from .system import ChipSpec, SystemSpec

MAX_ENUMERATION = 10**7


class OracleLimitError(ValueError):
    """Instance too large to enumerate."""


@dataclass(frozen=True)
class OracleLimits:
    max_kernels: int = 6
    max_partitions: int = 3
    max_schemes: int = 2
    max_tile_menu: int = 3
    max_enumeration: int = MAX_ENUMERATION


@dataclass
class OracleResult:
    mapping: object  # InterChipMapping or IntraChipMapping, None when nothing is feasible
    objective: float
    evaluated: int  # candidates scored
    feasible: int


def monotone_assignments(n: int, p: int, tensors) -> list[tuple]:
    """Every stage index vector with dst >= src on each tensor, in lexicographic order."""
    out = []
    for part in itertools.product(range(p), repeat=n):
        if all(part[t.dst] >= part[t.src] for t in tensors):
            out.append(part)
    return out


def _guard(size: float, limits: OracleLimits) -> None:
    if size > limits.max_enumeration:
        raise OracleLimitError(f"limit exceeded: {size:.3g} candidates > {limits.max_enumeration}")


def enumerate_interchip(
    g: DataflowGraph,
    sys: SystemSpec,
    limits: OracleLimits = OracleLimits(),
    training: TrainingConfig = TrainingConfig(),
    p_max: Optional[int] = None,
) -> OracleResult:
    """Exact min over stage assignments x scheme choices of the slowest stage."""
    coeffs = inter_coeffs(g, sys, training, p_max)
    P = coeffs.p_max
    if g.n > limits.max_kernels:
        raise OracleLimitError(f"limit exceeded: {g.n} kernels > {limits.max_kernels}")
    if P > limits.max_partitions:
        raise OracleLimitError(f"limit exceeded: {P} stages > {limits.max_partitions}")
    widest = max((len(s) for s in coeffs.schemes), default=1)
    if widest > limits.max_schemes:
        raise OracleLimitError(f"limit exceeded: {widest} schemes > {limits.max_schemes}")
    _guard(P ** g.n * math.prod(len(s) for s in coeffs.schemes), limits)
    best: Optional[InterChipMapping] = None
    evaluated = feasible = 0
    scheme_sets = [[s.id for s in ss] for ss in coeffs.schemes]
    for part in monotone_assignments(g.n, P, g.tensors):
        for schemes in itertools.product(*scheme_sets):
            evaluated += 1
            try:
                res = evaluate_interchip(g, sys, part, schemes, training, coeffs=coeffs)
            except InvalidMapping:
                continue
            feasible += 1
            if best is None or res.objective < best.objective:
                best = res
    if best is not None:
        best.status = "optimal"
    return OracleResult(best, best.objective if best else math.inf, evaluated, feasible)


def enumerate_intrachip(
    sub: DataflowGraph,
    chip: ChipSpec,
    menu: Sequence[int],
    p_max: int,
    limits: OracleLimits = OracleLimits(),
    net_terms=None,
    resident_bytes: float = 0.0,
    traffic_mult: float = 1.0,
) -> OracleResult:
    """Exact min over on-chip stage assignments x tile menus of the summed critical time."""
    menu = sorted(set(int(x) for x in menu if 1 <= x <= chip.t_lim))
    if sub.n > limits.max_kernels:
        raise OracleLimitError(f"limit exceeded: {sub.n} kernels > {limits.max_kernels}")
    if p_max > limits.max_partitions:
        raise OracleLimitError(f"limit exceeded: {p_max} partitions > {limits.max_partitions}")
    if len(menu) > limits.max_tile_menu:
        raise OracleLimitError(f"limit exceeded: {len(menu)} menu entries > {limits.max_tile_menu}")
    _guard(p_max ** sub.n * len(menu) ** sub.n, limits)
    best: Optional[IntraChipMapping] = None
    evaluated = feasible = 0
    for part in monotone_assignments(sub.n, p_max, sub.tensors):
        for tiles in itertools.product(menu, repeat=sub.n):
            evaluated += 1
            try:
                res = evaluate_intrachip(sub, chip, part, tiles, net_terms, p_max, resident_bytes, traffic_mult)
            except IntraError:
                continue
            feasible += 1
            if best is None or res.objective < best.objective:
                best = res
    if best is not None:
        best.status = "optimal"
    return OracleResult(best, best.objective if best else math.inf, evaluated, feasible)
