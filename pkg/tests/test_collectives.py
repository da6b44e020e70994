import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmap.collectives import CollectiveKind, UnsupportedCollective, collective_cost, hierarchical_cost
from dfmap.system import NetworkDim

MB = 1e6


def ring(p, bw=25e9, a=0.0):
    return NetworkDim("ring", p, bw, a)


def simulate_ring(kind: str, S: float, p: int, bw: float, a: float) -> float:
    """Step-by-step chunk schedule on a unidirectional ring.

    Every step each chip forwards one chunk to its neighbor; a step costs the
    chunk transfer plus one hop latency. Buffers are tracked explicitly and
    the final state is checked before returning the elapsed time.
    """
    chunk = S / p
    t = 0.0
    if kind in ("reduce_scatter", "all_reduce"):
        # have[c][k]: chips whose contribution to chunk k chip c has summed
        have = [[{c} for _ in range(p)] for c in range(p)]
        for step in range(p - 1):
            new = [[set(x) for x in row] for row in have]
            for c in range(p):
                k = (c - step) % p
                new[(c + 1) % p][k] |= have[c][k]
            have = new
            t += chunk / bw + a
        # chip c ends with the fully reduced chunk c + 1
        assert all(have[c][(c + 1) % p] == set(range(p)) for c in range(p))
        if kind == "reduce_scatter":
            return t
    # all-gather of p chunks, one per chip
    owned = [{c} for c in range(p)]
    for step in range(p - 1):
        new = [set(o) for o in owned]
        for c in range(p):
            new[(c + 1) % p] |= {(c - step) % p}
        owned = new
        t += chunk / bw + a
    assert all(o == set(range(p)) for o in owned)
    return t


def test_ring_all_reduce_worked_value():
    t = collective_cost("all_reduce", 12 * MB, ring(4))
    assert math.isclose(t, 0.72e-3, rel_tol=1e-12)


@pytest.mark.parametrize(
    "kind,topo,want",
    [
        # S = 8 MB, p = 4, B = 10 GB/s, a = 1 us
        ("all_reduce", "ring", 2 * 3 / 4 * 8e6 / 10e9 + 6e-6),
        ("all_gather", "ring", 3 / 4 * 8e6 / 10e9 + 3e-6),
        ("reduce_scatter", "ring", 3 / 4 * 8e6 / 10e9 + 3e-6),
        ("broadcast", "ring", 3 / 4 * 8e6 / 10e9 + 3e-6),
        ("all_to_all", "ring", 8e6 * 15 / 16 / 10e9 + 3e-6),
        ("p2p", "ring", 8e6 / 10e9 + 1e-6),
        ("all_reduce", "switch", 2 * 3 / 4 * 8e6 / 10e9 + 6e-6),
        ("all_gather", "switch", 3 / 4 * 8e6 / 10e9 + 3e-6),
        ("reduce_scatter", "switch", 3 / 4 * 8e6 / 10e9 + 3e-6),
        ("broadcast", "switch", 8e6 / 10e9 + 1e-6),
        ("all_to_all", "switch", 3 / 4 * 8e6 / 10e9 + 1e-6),
        ("p2p", "switch", 8e6 / 10e9 + 1e-6),
        ("all_reduce", "fully_connected", 2 * (8e6 / 4 / 10e9 + 1e-6)),
        ("all_gather", "fully_connected", 8e6 / 4 / 10e9 + 1e-6),
        ("reduce_scatter", "fully_connected", 8e6 / 4 / 10e9 + 1e-6),
        ("broadcast", "fully_connected", 8e6 / 10e9 + 1e-6),
        ("all_to_all", "fully_connected", 8e6 / 4 / 10e9 + 1e-6),
        ("p2p", "fully_connected", 8e6 / 10e9 + 1e-6),
    ],
)
def test_closed_forms(kind, topo, want):
    got = collective_cost(kind, 8e6, NetworkDim(topo, 4, 10e9, 1e-6))
    assert math.isclose(got, want, rel_tol=1e-12)


def test_trivial_dims_and_sizes_cost_nothing():
    assert collective_cost("all_reduce", 1e9, ring(1)) == 0.0
    assert collective_cost("all_reduce", 0, ring(8)) == 0.0
    assert hierarchical_cost("all_reduce", 0, [ring(8)]) == 0.0


def test_errors():
    with pytest.raises(ValueError):
        collective_cost("all_reduce", -1, ring(4))
    with pytest.raises(ValueError):
        collective_cost("gossip", 1, ring(4))
    with pytest.raises(UnsupportedCollective):
        collective_cost("all_reduce", 1, NetworkDim("mesh", 4, 1e9))
    with pytest.raises(ValueError):
        hierarchical_cost("all_reduce", 1, [])


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["all_reduce", "all_gather", "reduce_scatter"]),
    p=st.integers(2, 9),
    S=st.floats(1e3, 1e9),
    a=st.sampled_from([0.0, 1e-6, 5e-6]),
)
def test_ring_formula_matches_chunk_simulation(kind, p, S, a):
    sim = simulate_ring(kind, S, p, 25e9, a)
    assert math.isclose(collective_cost(kind, S, ring(p, 25e9, a)), sim, rel_tol=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 8), min_size=1, max_size=3),
    S=st.floats(1e3, 1e9),
    topo=st.sampled_from(["ring", "switch", "fully_connected"]),
)
def test_hierarchical_all_reduce_is_staged_rs_then_ag(sizes, S, topo):
    dims = [NetworkDim(topo, p, 10e9 * (i + 1), 1e-6) for i, p in enumerate(sizes)]
    rs = ag = 0.0
    msg = S
    for d in dims:
        rs += collective_cost("reduce_scatter", msg, d)
        msg /= d.size
    for d in reversed(dims):
        msg *= d.size
        ag += collective_cost("all_gather", msg, d)
    total = hierarchical_cost("all_reduce", S, dims)
    assert math.isclose(total, rs + ag, rel_tol=1e-12)
    assert math.isclose(total, hierarchical_cost("reduce_scatter", S, dims) + hierarchical_cost("all_gather", S, dims),
                        rel_tol=1e-12)


def test_single_dim_hierarchy_equals_flat():
    for kind in CollectiveKind:
        d = NetworkDim("ring", 6, 20e9, 2e-6)
        assert math.isclose(hierarchical_cost(kind, 3e6, [d]), collective_cost(kind, 3e6, d), rel_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(p=st.integers(2, 16), S=st.floats(1.0, 1e9), k=st.floats(1.01, 10))
def test_cost_monotone_in_bytes_and_bandwidth(p, S, k):
    for kind in CollectiveKind:
        for topo in ("ring", "switch", "fully_connected"):
            d = NetworkDim(topo, p, 10e9, 1e-6)
            faster = NetworkDim(topo, p, 10e9 * k, 1e-6)
            assert collective_cost(kind, S * k, d) >= collective_cost(kind, S, d)
            assert collective_cost(kind, S, faster) <= collective_cost(kind, S, d)
