"""Small mixed-integer modeling layer with two backends.

``builtin_bb`` is an exact depth-first branch-and-bound that bounds only by
interval propagation over the linear rows (no LP relaxation). It is meant for
desk-scale models where every continuous variable is pinned by its rows once
the integers are fixed (epigraph and linearized-logic auxiliaries), which is
the shape of every model built in this package.

``external`` hands the same model to HiGHS through ``scipy.optimize.milp``.

Both support lexicographic tie-break objectives: each one is minimized among
the optima of the objectives before it.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

INF = math.inf
DEFAULT_TIME_LIMIT = 300.0
BACKENDS = ("builtin_bb", "external")
# constraint classes that define the model's structure; never blamed for infeasibility
STRUCTURAL = ("logic", "epigraph", "onehot", "precedence")


class ModelError(ValueError):
    pass


class UnsupportedModel(ModelError):
    """The builtin solver cannot certify a leaf (free continuous variables)."""


class Lin:
    """Linear expression: sum of coef * var plus a constant."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Optional[dict] = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(x) -> "Lin":
        return x if isinstance(x, Lin) else Lin(None, float(x))

    def copy(self) -> "Lin":
        return Lin(self.terms, self.const)

    def __add__(self, other):
        other = Lin.of(other)
        out = self.copy()
        for v, c in other.terms.items():
            out.terms[v] = out.terms.get(v, 0.0) + c
        out.const += other.const
        return out

    __radd__ = __add__

    def __neg__(self):
        return Lin({v: -c for v, c in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Lin.of(other))

    def __rsub__(self, other):
        return Lin.of(other) - self

    def __mul__(self, k):
        if isinstance(k, Lin):
            raise ModelError("product of two expressions is not linear")
        k = float(k)
        return Lin({v: c * k for v, c in self.terms.items()}, self.const * k)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    def value(self, x: Sequence[float]) -> float:
        return self.const + sum(c * x[v] for v, c in self.terms.items())

    def __repr__(self):
        body = " + ".join(f"{c:g}*x{v}" for v, c in self.terms.items())
        return f"Lin({body} + {self.const:g})"


def lsum(items: Iterable) -> Lin:
    out = Lin()
    for it in items:
        it = Lin.of(it)
        for v, c in it.terms.items():
            out.terms[v] = out.terms.get(v, 0.0) + c
        out.const += it.const
    return out


@dataclass
class Row:
    terms: dict
    lo: float
    hi: float
    cls: str = ""


@dataclass
class Model:
    name: str = "model"
    lb: list = field(default_factory=list)
    ub: list = field(default_factory=list)
    kind: list = field(default_factory=list)  # "B", "I" or "C"
    names: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    objectives: list = field(default_factory=list)  # lexicographic order

    @property
    def n_vars(self) -> int:
        return len(self.lb)

    def var(self, name: str, lb: float = 0.0, ub: float = 1.0, kind: str = "B") -> Lin:
        if kind not in ("B", "I", "C"):
            raise ModelError(f"unknown variable kind {kind!r}")
        if kind == "B":
            lb, ub = max(0.0, lb), min(1.0, ub)
        if lb > ub:
            raise ModelError(f"variable {name}: empty bounds [{lb}, {ub}]")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kind.append(kind)
        self.names.append(name)
        return Lin({len(self.lb) - 1: 1.0})

    def add(self, expr, lo: float = -INF, hi: float = INF, cls: str = "") -> None:
        expr = Lin.of(expr)
        for v in expr.terms:
            if not 0 <= v < self.n_vars:
                raise ModelError(f"constraint references undeclared variable {v}")
        terms = {v: c for v, c in expr.terms.items() if c != 0.0}
        lo, hi = lo - expr.const, hi - expr.const
        if not terms:
            if lo > 1e-9 or hi < -1e-9:
                # constant row that can never hold; keep it so the solver reports infeasible
                self.rows.append(Row({}, lo, hi, cls))
            return
        self.rows.append(Row(terms, lo, hi, cls))

    def le(self, a, b, cls: str = "") -> None:
        self.add(Lin.of(a) - b, hi=0.0, cls=cls)

    def ge(self, a, b, cls: str = "") -> None:
        self.add(Lin.of(a) - b, lo=0.0, cls=cls)

    def eq(self, a, b, cls: str = "") -> None:
        self.add(Lin.of(a) - b, lo=0.0, hi=0.0, cls=cls)

    @property
    def objective(self) -> Optional[Lin]:
        return self.objectives[0] if self.objectives else None

    def minimize(self, expr, *tiebreaks) -> None:
        self.objectives = [Lin.of(e) for e in (expr,) + tiebreaks if e is not None]

    def classes(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.cls and r.cls not in seen:
                seen.append(r.cls)
        return seen

    def without(self, cls: str) -> "Model":
        return Model(self.name, list(self.lb), list(self.ub), list(self.kind), list(self.names),
                     [r for r in self.rows if r.cls != cls], list(self.objectives))

    def to_lp(self) -> str:
        return to_lp(self)


# ----------------------------------------------------------------- linearization


def lin_and(m: Model, x, y, name: str = "and") -> Lin:
    """z = x AND y for 0/1-valued x, y."""
    z = m.var(name, 0.0, 1.0, "C")
    m.le(z, x, "logic")
    m.le(z, y, "logic")
    m.ge(z, Lin.of(x) + y - 1, "logic")
    return z


def lin_xor(m: Model, x, y, name: str = "xor") -> Lin:
    """z = x XOR y for 0/1-valued x, y."""
    z = m.var(name, 0.0, 1.0, "C")
    x, y = Lin.of(x), Lin.of(y)
    m.ge(z, x - y, "logic")
    m.ge(z, y - x, "logic")
    m.le(z, x + y, "logic")
    m.le(z, 2 - x - y, "logic")
    return z


def lin_lookup1(m: Model, c: Sequence[float], s: Sequence[Lin], enforce: bool = True) -> Lin:
    """Entry of ``c`` picked by the one-hot vector ``s``."""
    if len(c) != len(s):
        raise ModelError("lookup vector and selector differ in length")
    if enforce:
        m.eq(lsum(s), 1, "onehot")
    return lsum(float(ci) * si for ci, si in zip(c, s) if ci)


def lin_lookup2(m: Model, C, s_a: Sequence[Lin], s_b: Sequence[Lin], name: str = "y") -> Lin:
    """Entry C[a, b] picked by one-hot rows ``s_a`` and columns ``s_b``."""
    C = np.asarray(C, dtype=float)
    if C.shape != (len(s_a), len(s_b)):
        raise ModelError(f"lookup matrix shape {C.shape} does not match selectors")
    out = Lin()
    for a in range(C.shape[0]):
        for b in range(C.shape[1]):
            if C[a, b]:
                out = out + C[a, b] * lin_and(m, s_a[a], s_b[b], f"{name}[{a},{b}]")
    return out


def lin_max(m: Model, terms: Sequence, name: str = "max") -> Lin:
    """Epigraph variable bounded below by every term; equals the max when minimized."""
    terms = [Lin.of(t) for t in terms]
    if not terms:
        raise ModelError("lin_max of no terms")
    z = m.var(name, -INF, INF, "C")
    for t in terms:
        m.ge(z, t, "epigraph")
    return z


def minimize_max(m: Model, terms: Sequence, *tiebreaks, name: str = "zmax") -> Lin:
    z = lin_max(m, terms, name)
    m.minimize(z, *tiebreaks)
    return z


# ------------------------------------------------------------------------ result


@dataclass
class Solution:
    status: str  # optimal | infeasible | timeout
    x: Optional[np.ndarray]
    objective: Optional[float]
    tiebreaks: tuple = ()  # values of the tie-break objectives
    binding: Optional[str] = None  # constraint class blamed for infeasibility
    nodes: int = 0
    backend: str = ""
    seconds: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def value(self, expr) -> float:
        if self.x is None:
            raise ModelError("no solution values")
        return Lin.of(expr).value(self.x)


def _default_backend(model: Model) -> str:
    env = os.environ.get("DFMAP_SOLVER", "").strip()
    if env:
        if env not in BACKENDS:
            raise ModelError(f"DFMAP_SOLVER={env!r}: expected one of {BACKENDS}")
        return env
    n_int = sum(k != "C" for k in model.kind)
    return "builtin_bb" if n_int <= 40 else "external"


def solve(
    model: Model,
    backend: Optional[str] = None,
    time_limit: float = DEFAULT_TIME_LIMIT,
    seed: int = 0,
    diagnose: bool = True,
) -> Solution:
    """Minimize the objectives of ``model`` in lexicographic order."""
    if model.objective is None:
        raise ModelError("objective not set")
    backend = backend or _default_backend(model)
    t0 = time.perf_counter()
    if backend == "builtin_bb":
        sol = BranchAndBound(model, time_limit).run()
    elif backend == "external":
        sol = _solve_highs(model, time_limit, seed)
    else:
        raise ModelError(f"unknown backend {backend!r}")
    sol.backend = backend
    sol.seconds = time.perf_counter() - t0
    if sol.status == "infeasible" and diagnose:
        sol.binding = _diagnose(model, backend, time_limit, seed)
    return sol


def _diagnose(model: Model, backend: str, time_limit: float, seed: int) -> Optional[str]:
    """First resource constraint class whose removal restores feasibility."""
    for cls in model.classes():
        if cls in STRUCTURAL:
            continue
        relaxed = model.without(cls)
        if solve(relaxed, backend, time_limit, seed, diagnose=False).status != "infeasible":
            return cls
    return None


# ---------------------------------------------------------------- builtin solver


class _Infeasible(Exception):
    pass


class BranchAndBound:
    """Depth-first branch-and-bound with interval bound propagation."""

    def __init__(self, model: Model, time_limit: float = DEFAULT_TIME_LIMIT, tol: float = 1e-9):
        self.m = model
        self.time_limit = time_limit
        self.tol = tol
        n = model.n_vars
        self.is_int = [k != "C" for k in model.kind]
        rows = [(list(r.terms.items()), r.lo, r.hi) for r in model.rows]
        self.objs = [(list(o.terms.items()), o.const) for o in model.objectives]
        # cut row on the primary objective, tightened as incumbents are found
        self.obj_row = len(rows)
        rows.append((self.objs[0][0], -INF, INF))
        self.rows = rows
        self.var_rows: list[list[int]] = [[] for _ in range(n)]
        for ri, (terms, _, _) in enumerate(rows):
            for v, _c in terms:
                self.var_rows[v].append(ri)
        self.order = [v for v in range(n) if self.is_int[v]]
        self.nodes = 0
        self.best_x = None
        self.best: tuple = ()

    @staticmethod
    def _activity(terms, lb, ub):
        """(finite min sum, #-inf terms, finite max sum, #+inf terms)."""
        fmin = fmax = 0.0
        imin = imax = 0
        for v, c in terms:
            if c > 0:
                lo, hi = c * lb[v], c * ub[v]
            else:
                lo, hi = c * ub[v], c * lb[v]
            if lo == -INF:
                imin += 1
            else:
                fmin += lo
            if hi == INF:
                imax += 1
            else:
                fmax += hi
        return fmin, imin, fmax, imax

    def _lower(self, terms, lb, ub) -> float:
        fmin, imin, _, _ = self._activity(terms, lb, ub)
        return -INF if imin else fmin

    def propagate(self, lb, ub, touched: Iterable[int]) -> None:
        queue = list(dict.fromkeys(touched))
        inq = set(queue)
        steps = 0
        while queue:
            ri = queue.pop()
            inq.discard(ri)
            steps += 1
            if steps > 500000:
                break
            terms, rlo, rhi = self.rows[ri]
            if not terms:
                if rlo > 1e-9 or rhi < -1e-9:
                    raise _Infeasible
                continue
            fmin, imin, fmax, imax = self._activity(terms, lb, ub)
            scale = 1e-9 * (1.0 + max(abs(rlo) if rlo > -INF else 0.0, abs(rhi) if rhi < INF else 0.0))
            if (not imin and fmin > rhi + scale) or (not imax and fmax < rlo - scale):
                raise _Infeasible
            for v, c in terms:
                if c > 0:
                    cmin, cmax = c * lb[v], c * ub[v]
                else:
                    cmin, cmax = c * ub[v], c * lb[v]
                # activity of the other terms
                if cmin == -INF:
                    rest_min = fmin if imin == 1 else -INF
                else:
                    rest_min = fmin - cmin if imin == 0 else -INF
                if cmax == INF:
                    rest_max = fmax if imax == 1 else INF
                else:
                    rest_max = fmax - cmax if imax == 0 else INF
                new_lo, new_hi = lb[v], ub[v]
                if rhi < INF and rest_min > -INF:
                    bound = (rhi - rest_min) / c
                    if c > 0:
                        new_hi = min(new_hi, bound)
                    else:
                        new_lo = max(new_lo, bound)
                if rlo > -INF and rest_max < INF:
                    bound = (rlo - rest_max) / c
                    if c > 0:
                        new_lo = max(new_lo, bound)
                    else:
                        new_hi = min(new_hi, bound)
                if self.is_int[v]:
                    if new_lo > -INF:
                        new_lo = float(math.ceil(new_lo - 1e-7))
                    if new_hi < INF:
                        new_hi = float(math.floor(new_hi + 1e-7))
                changed = False
                if new_lo > lb[v] + 1e-12 * (1.0 + abs(new_lo)):
                    lb[v] = new_lo
                    changed = True
                if new_hi < ub[v] - 1e-12 * (1.0 + abs(new_hi)):
                    ub[v] = new_hi
                    changed = True
                if lb[v] > ub[v]:
                    if self.is_int[v] or lb[v] - ub[v] > 1e-9 * (1.0 + abs(lb[v])):
                        raise _Infeasible
                    ub[v] = lb[v]
                if changed:
                    fmin, imin, fmax, imax = self._activity(terms, lb, ub)
                    for r2 in self.var_rows[v]:
                        if r2 != ri and r2 not in inq:
                            inq.add(r2)
                            queue.append(r2)

    # -- search

    def _slack(self, p: float) -> float:
        return self.tol * (1.0 + abs(p))

    def _set_cut(self):
        terms, c0 = self.objs[0]
        p = self.best[0]
        if len(self.objs) == 1:
            hi = p - c0 - self._slack(p)  # only strict improvements survive
        else:
            hi = p - c0 + self._slack(p)  # ties kept for the tie-break objectives
        self.rows[self.obj_row] = (terms, -INF, hi)

    def _prunable(self, lb, ub) -> bool:
        if self.best_x is None:
            return False
        for (terms, c0), b in zip(self.objs, self.best):
            lo = c0 + self._lower(terms, lb, ub)
            if lo < b - self._slack(b):
                return False
            if lo > b + self._slack(b):
                return True
        return True

    def _better(self, vals) -> bool:
        if self.best_x is None:
            return True
        for v, b in zip(vals, self.best):
            if v < b - self._slack(b):
                return True
            if v > b + self._slack(b):
                return False
        return False

    def _leaf(self, lb, ub):
        x = []
        for v in range(len(lb)):
            if self.is_int[v]:
                x.append(float(lb[v]))
            else:
                val = lb[v] if lb[v] > -INF else (ub[v] if ub[v] < INF else 0.0)
                x.append(val)
        for terms, lo, hi in self.rows[: self.obj_row]:
            a = sum(c * x[v] for v, c in terms)
            scale = 1e-7 * (1.0 + abs(a))
            if a < lo - scale or a > hi + scale:
                raise UnsupportedModel(
                    "continuous variables are not pinned by the integer assignment; use the external backend"
                )
        vals = tuple(o.value(x) for o in self.m.objectives)
        if self._better(vals):
            self.best, self.best_x = vals, np.array(x)
            self._set_cut()

    def run(self) -> Solution:
        t0 = time.perf_counter()
        lb, ub = list(map(float, self.m.lb)), list(map(float, self.m.ub))
        try:
            self.propagate(lb, ub, range(len(self.rows)))
        except _Infeasible:
            return Solution("infeasible", None, None, nodes=0)
        stack = [(lb, ub)]
        timed_out = False
        while stack:
            if time.perf_counter() - t0 > self.time_limit:
                timed_out = True
                break
            lb, ub = stack.pop()
            self.nodes += 1
            if self._prunable(lb, ub):
                continue
            branch = next((v for v in self.order if lb[v] < ub[v]), None)
            if branch is None:
                self._leaf(lb, ub)
                continue
            if ub[branch] - lb[branch] <= 1:
                splits = [(ub[branch], ub[branch]), (lb[branch], lb[branch])]
            else:
                mid = math.floor((lb[branch] + ub[branch]) / 2)
                splits = [(mid + 1.0, ub[branch]), (lb[branch], float(mid))]
            children = []
            for lo_v, hi_v in splits:
                clb, cub = list(lb), list(ub)
                clb[branch], cub[branch] = lo_v, hi_v
                try:
                    self.propagate(clb, cub, self.var_rows[branch] + [self.obj_row])
                except _Infeasible:
                    continue
                children.append((clb, cub))
            # depth-first, up branch explored first
            stack.extend(reversed(children))
        if self.best_x is None:
            return Solution("timeout" if timed_out else "infeasible", None, None, nodes=self.nodes)
        return Solution("timeout" if timed_out else "optimal", self.best_x, self.best[0],
                        self.best[1:], nodes=self.nodes)


# ---------------------------------------------------------------- HiGHS adapter


def _solve_highs(model: Model, time_limit: float, seed: int) -> Solution:
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import coo_array

    n = model.n_vars
    rows, cols, vals, lo, hi = [], [], [], [], []
    for i, r in enumerate(model.rows):
        for v, c in r.terms.items():
            rows.append(i)
            cols.append(v)
            vals.append(c)
        lo.append(r.lo)
        hi.append(r.hi)
    if any(not r.terms and (r.lo > 1e-9 or r.hi < -1e-9) for r in model.rows):
        return Solution("infeasible", None, None)
    integrality = np.array([0 if k == "C" else 1 for k in model.kind])
    bounds = Bounds(np.array(model.lb, dtype=float), np.array(model.ub, dtype=float))

    def vec(expr: Lin) -> np.ndarray:
        c = np.zeros(n)
        for v, a in expr.terms.items():
            c[v] += a
        return c

    def run(c, extra=(), limit=time_limit):
        r_, c_, v_, lo_, hi_ = list(rows), list(cols), list(vals), list(lo), list(hi)
        for vec_e, hi_e in extra:
            k = len(lo_)
            for j in np.flatnonzero(vec_e):
                r_.append(k)
                c_.append(int(j))
                v_.append(float(vec_e[j]))
            lo_.append(-INF)
            hi_.append(hi_e)
        cons = []
        if lo_:
            A = coo_array((v_, (r_, c_)), shape=(len(lo_), n)).tocsr()
            cons = [LinearConstraint(A, np.array(lo_), np.array(hi_))]
        opts = {"time_limit": max(1e-3, limit), "mip_rel_gap": 0.0, "disp": False}
        return milp(c, integrality=integrality, bounds=bounds, constraints=cons, options=opts)

    t0 = time.perf_counter()
    objs = [vec(o) for o in model.objectives]
    res = run(objs[0])
    if res.status == 2:
        return Solution("infeasible", None, None)
    if res.x is None:
        status = "timeout" if res.status == 1 else "infeasible"
        return Solution(status, None, None)
    status = "optimal" if res.status == 0 else "timeout"
    x = _round_ints(res.x, model)
    fixed = []  # (vector, cap) rows pinning earlier objectives at their optimum
    for level in range(1, len(objs)):
        if status != "optimal":
            break
        prev = float(objs[level - 1] @ x)
        fixed.append((objs[level - 1], prev + 1e-9 * (1.0 + abs(prev))))
        left = time_limit - (time.perf_counter() - t0)
        res2 = run(objs[level], fixed, left)
        if res2.x is None or res2.status not in (0, 1):
            break
        x = _round_ints(res2.x, model)
        if res2.status == 1:
            status = "timeout"
    vals = [o.value(x) for o in model.objectives]
    return Solution(status, x, vals[0], tuple(vals[1:]))


def _round_ints(x: np.ndarray, model: Model) -> np.ndarray:
    x = np.array(x, dtype=float)
    for v, k in enumerate(model.kind):
        if k != "C":
            x[v] = float(round(x[v]))
    return x


# -------------------------------------------------------------------- LP export


def _lp_name(model: Model, v: int) -> str:
    raw = model.names[v] if v < len(model.names) else f"x{v}"
    safe = "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in raw)
    return f"x{v}_{safe}"


def _lp_expr(model: Model, terms: dict) -> str:
    if not terms:
        return "0 " + _lp_name(model, 0) if model.n_vars else "0"
    parts = []
    for v, c in terms.items():
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {abs(c):.17g} {_lp_name(model, v)}")
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def to_lp(model: Model) -> str:
    """The model in CPLEX LP text format (primary objective only)."""
    if model.objective is None:
        raise ModelError("objective not set")
    out = [f"\\ {model.name}", "Minimize", " obj: " + _lp_expr(model, model.objective.terms), "Subject To"]
    for i, r in enumerate(model.rows):
        body = _lp_expr(model, r.terms)
        tag = f"c{i}" + (f"_{r.cls}" if r.cls else "")
        if r.lo == r.hi:
            out.append(f" {tag}: {body} = {r.lo:.17g}")
            continue
        if r.lo > -INF:
            out.append(f" {tag}_lo: {body} >= {r.lo:.17g}")
        if r.hi < INF:
            out.append(f" {tag}_hi: {body} <= {r.hi:.17g}")
    out.append("Bounds")
    for v in range(model.n_vars):
        lo = "-inf" if model.lb[v] == -INF else f"{model.lb[v]:.17g}"
        hi = "+inf" if model.ub[v] == INF else f"{model.ub[v]:.17g}"
        out.append(f" {lo} <= {_lp_name(model, v)} <= {hi}")
    gens = [_lp_name(model, v) for v, k in enumerate(model.kind) if k == "I"]
    bins = [_lp_name(model, v) for v, k in enumerate(model.kind) if k == "B"]
    if gens:
        out += ["Generals", " " + " ".join(gens)]
    if bins:
        out += ["Binaries", " " + " ".join(bins)]
    out.append("End")
    return "\n".join(out) + "\n"
