import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmap import milp
from dfmap.milp import Model, ModelError, lin_and, lin_lookup2, lin_max, lin_xor, lsum, minimize_max

BACKENDS = ["builtin_bb", "external"]


def knapsack(values, weights, cap):
    m = Model("knap")
    x = [m.var(f"x{i}") for i in range(len(values))]
    m.le(lsum(w * xi for w, xi in zip(weights, x)), cap, "capacity")
    m.minimize(lsum(-v * xi for v, xi in zip(values, x)))
    return m, x


@pytest.mark.parametrize("backend", BACKENDS)
def test_small_knapsack(backend):
    m, x = knapsack([6, 10, 12], [1, 2, 3], 5)
    sol = milp.solve(m, backend)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(-22)
    assert [round(sol.value(v)) for v in x] == [0, 1, 1]


@settings(max_examples=25, deadline=None)
@given(
    items=st.lists(st.tuples(st.integers(1, 20), st.integers(1, 10)), min_size=1, max_size=7),
    cap=st.integers(0, 30),
)
def test_knapsack_matches_enumeration(items, cap):
    values, weights = zip(*items)
    best = min(
        -sum(v for v, c in zip(values, pick) if c)
        for pick in itertools.product((0, 1), repeat=len(items))
        if sum(w for w, c in zip(weights, pick) if c) <= cap
    )
    for backend in BACKENDS:
        m, _ = knapsack(values, weights, cap)
        assert milp.solve(m, backend).objective == pytest.approx(best, abs=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_integer_and_continuous_vars(backend):
    m = Model()
    n = m.var("n", 0, 10, "I")
    y = m.var("y", 0, 100, "C")
    m.ge(2 * n + y, 7.5, "cover")
    m.ge(y, 0.4, "floor")
    m.minimize(3 * n + 2 * y)
    sol = milp.solve(m, backend)
    # n = 3, y = 1.5 -> 12; n = 3.55 is not integral
    assert sol.objective == pytest.approx(12.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_lexicographic_tiebreak(backend):
    m = Model()
    a, b = m.var("a"), m.var("b")
    m.eq(a + b, 1, "choose")
    m.minimize(milp.Lin(), 5 * a + 1 * b)
    sol = milp.solve(m, backend)
    assert round(sol.value(b)) == 1
    assert sol.tiebreaks[0] == pytest.approx(1.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_infeasible_reports_binding_class(backend):
    m = Model()
    x = [m.var(f"x{i}") for i in range(3)]
    m.eq(lsum(x), 1, "onehot")
    m.ge(lsum(x), 2, "capacity")
    m.minimize(lsum(x))
    sol = milp.solve(m, backend)
    assert sol.status == "infeasible"
    assert sol.binding == "capacity"


@pytest.mark.parametrize("backend", BACKENDS)
def test_logic_linearizations(backend):
    for xv, yv in itertools.product((0, 1), repeat=2):
        m = Model()
        x, y = m.var("x"), m.var("y")
        m.eq(x, xv, "fix")
        m.eq(y, yv, "fix")
        z_and, z_xor = lin_and(m, x, y), lin_xor(m, x, y)
        m.minimize(milp.Lin())
        sol = milp.solve(m, backend)
        assert round(sol.value(z_and)) == (xv & yv)
        assert round(sol.value(z_xor)) == (xv ^ yv)


@pytest.mark.parametrize("backend", BACKENDS)
def test_lookup2_and_minimize_max(backend):
    C = [[4.0, 1.0], [2.0, 3.0]]
    m = Model()
    sa, sb = [m.var("a0"), m.var("a1")], [m.var("b0"), m.var("b1")]
    m.eq(lsum(sa), 1, "onehot")
    m.eq(lsum(sb), 1, "onehot")
    m.eq(sa[0], 1, "fix")
    y = lin_lookup2(m, C, sa, sb)
    z = minimize_max(m, [y, 0.5 + 0 * sa[0]])
    sol = milp.solve(m, backend)
    assert sol.objective == pytest.approx(1.0)
    assert sol.value(z) == pytest.approx(1.0)


def test_model_errors():
    m = Model()
    with pytest.raises(ModelError):
        m.var("v", 2, 1, "C")
    with pytest.raises(ModelError):
        m.var("v", kind="X")
    with pytest.raises(ModelError):
        milp.solve(m)
    with pytest.raises(ModelError):
        lin_max(m, [])
    m.var("x")
    m.minimize(milp.Lin({0: 1.0}))
    with pytest.raises(ModelError):
        milp.solve(m, "gurobi")


def test_env_var_selects_backend(monkeypatch):
    m, _ = knapsack([1, 2], [1, 1], 1)
    monkeypatch.setenv("DFMAP_SOLVER", "external")
    assert milp.solve(m).backend == "external"
    monkeypatch.setenv("DFMAP_SOLVER", "builtin_bb")
    assert milp.solve(m).backend == "builtin_bb"
    monkeypatch.setenv("DFMAP_SOLVER", "cplex")
    with pytest.raises(ModelError):
        milp.solve(m)


def test_lp_export_names_rows():
    m, _ = knapsack([3, 4], [2, 3], 4)
    text = m.to_lp()
    assert "capacity" in text and "x0" in text
    assert text.lower().startswith("\\") or "minimize" in text.lower()


def test_builtin_timeout_keeps_incumbent():
    values = [37, 41, 53, 61, 29, 71, 67, 47, 59, 43, 31, 79, 83, 89, 97, 73, 101, 103]
    weights = [v + (i * 7) % 11 for i, v in enumerate(values)]
    m, _ = knapsack(values, weights, sum(weights) // 2)
    sol = milp.solve(m, "builtin_bb", time_limit=1e-9)
    assert sol.status in ("timeout", "optimal")
    if sol.status == "timeout" and sol.x is not None:
        assert math.isfinite(sol.objective)
