import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import abstract_graph, path_delay, random_edges, to_networkx
from pwe.em_model import WaveKind
from pwe.geometry import Floorplan, Surface, box_room, vec
from pwe.pwe_graph import (C, AntennaPattern, GraphError, LinkKind, UserNode, build_graph, dbm_to_w,
                           first_impact_power, k_shortest_paths, shortest_path)


def two_user_room(coated=("walls",), alpha=60.0):
    users = [UserNode(0, vec(2, 2, 1.5), AntennaPattern(alpha, phi=0, theta=0)),
             UserNode(1, vec(4, 2, 1.5), AntennaPattern(alpha, phi=0, theta=180))]
    return build_graph(box_room(6, 4, 3, coated=coated), 1.0, users)


def check_path(g, p):
    keys = [l.key() for l in p.links]
    assert len(keys) == len(set(keys))
    for (a, b), l in zip(zip(p.nodes, p.nodes[1:]), p.links):
        assert {a, b} == {l.a, l.b}
    assert p.total_delay == pytest.approx(sum(l.delay for l in p.links), rel=1e-15)
    assert len(p.nodes) == len(set(p.nodes))


def test_tile_counts_of_stress_room():
    assert len(build_graph(box_room(13, 13, 3, coated=("all",)), 1.0, []).tiles) == 494
    g = build_graph(box_room(13, 13, 3, coated=("ceiling",)), 1.0, [])
    assert sum(not t.virtual for t in g.tiles) == 169


def test_facing_tiles_linked_and_coplanar_not():
    g = build_graph(box_room(4, 4, 3, coated=("walls",)), 1.0, [])
    names = [s.name for s in g.floorplan.surfaces]
    west = [t for t in g.tiles if names[t.surface] == "wall-west"]
    east = [t for t in g.tiles if names[t.surface] == "wall-east"]
    facing = next(e for e in east if np.allclose(e.center[1:], west[0].center[1:]))
    link = g.link_between(west[0].id, facing.id)
    assert link is not None and link.kind == LinkKind.INTER_TILE
    assert link.length == pytest.approx(4.0)
    assert link.delay == pytest.approx(4.0 / C)
    assert g.link_between(west[0].id, west[1].id) is None


def test_internal_wall_occludes_links():
    g = build_graph(box_room(4, 4, 3, coated=("walls",), walls=[(2, 0, 2, 4, False)]), 1.0, [])
    names = [s.name for s in g.floorplan.surfaces]
    west = [t.id for t in g.tiles if names[t.surface] == "wall-west"]
    east = [t.id for t in g.tiles if names[t.surface] == "wall-east"]
    assert all(g.link_between(a, b) is None for a in west for b in east)


def test_user_outside_bounds_rejected():
    with pytest.raises(GraphError):
        build_graph(box_room(4, 4, 3), 1.0, [UserNode(0, vec(5, 1, 1), AntennaPattern(30))])


def test_non_tileable_surface_rejected():
    with pytest.raises(GraphError):
        build_graph(box_room(4.5, 4, 3), 1.0, [])


def test_user_links_lie_inside_lobe():
    g = two_user_room()
    u = g.users[0]
    links = g.user_links(0)
    assert links
    for l in links:
        t = g.tiles[l.other(g.user_node(0))]
        assert u.antenna.off_axis((t.center - u.position)[None, :])[0] < u.antenna.half_angle
        assert l.kind == LinkKind.USER_TILE


def test_lobe_edge_has_zero_gain():
    a = AntennaPattern(40)
    assert float(a.gain(40.0)) == 0.0
    assert float(a.shape(0.0)) == 1.0
    assert float(a.shape(20.0)) == pytest.approx(math.cos(math.pi / 4))


@pytest.mark.parametrize("alpha", [10.0, 30.0, 80.0, 180.0])
def test_peak_gain_normalizes_radiated_power(alpha):
    # independent midpoint quadrature over the sphere
    a = AntennaPattern(alpha)
    n = 400_000
    psi = (np.arange(n) + 0.5) * (math.pi / n)
    total = 2 * math.pi * float(np.sum(a.gain(np.degrees(psi)) * np.sin(psi))) * (math.pi / n)
    assert total == pytest.approx(4 * math.pi, rel=1e-6)


def test_first_impact_power_formula():
    p_tx = dbm_to_w(-30.0)
    assert first_impact_power(p_tx, 1.0, 1.0, 2.0) == pytest.approx(1e-6 / (4 * math.pi * 4), rel=1e-15)


def test_user_link_inputs():
    g = two_user_room()
    ins = g.user_link_inputs(0, 2.4e9)
    assert len(ins) == len(g.user_links(0))
    lam = C / 2.4e9
    for link, w in ins:
        t = g.tiles[link.other(g.user_node(0))]
        assert w.kind == WaveKind.FOCAL and w.omega == 2.4e9
        assert np.allclose(w.direction, (t.center - g.users[0].position) / link.length)
        assert w.phase == pytest.approx((2 * math.pi * link.length / lam) % (2 * math.pi))
        assert 0 < w.power < dbm_to_w(-30.0)
    # independent re-integration of P G A / (4 pi d^2) over each tile's aperture
    u = g.users[0]
    for link, w in ins[::7]:
        t = g.tiles[link.other(g.user_node(0))]
        for n, tol in ((8, 1e-12), (64, 2e-2)):
            k = (np.arange(n) + 0.5) / n
            pts = t.corner + k[:, None, None] * t.edge_u + k[None, :, None] * t.edge_v
            rel = pts.reshape(-1, 3) - u.position
            d = np.linalg.norm(rel, axis=1)
            psi = np.degrees(np.arccos(np.clip(rel @ u.antenna.boresight() / d, -1, 1)))
            ref = np.sum(dbm_to_w(-30.0) * u.antenna.gain(psi) * (t.area / n ** 2) / (4 * math.pi * d ** 2))
            assert w.power == pytest.approx(ref, rel=tol)


def test_shortest_path_examples():
    g = abstract_graph(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 3.0)])
    assert shortest_path(g, 0, 1).nodes == (0, 1)
    assert shortest_path(g, 0, 2).nodes == (0, 1, 2)
    assert shortest_path(g, 0, 2).total_delay == pytest.approx(2.0 / C)
    assert shortest_path(g, 0, 2, excluded_links={1, 2}) is None
    with pytest.raises(GraphError):
        shortest_path(g, 0, 0)


def test_shortest_path_tie_break_prefers_fewer_hops_then_smaller_ids():
    g = abstract_graph(5, [(0, 3, 1.0), (3, 4, 1.0), (0, 1, 1.0), (1, 4, 1.0), (0, 2, 0.5),
                           (2, 1, 0.5)])
    # 0-1-4, 0-3-4 and 0-2-1-4 all take 2 units; two hops win, then the smaller sequence
    assert shortest_path(g, 0, 4).nodes == (0, 1, 4)


def test_users_do_not_relay():
    g = two_user_room()
    a, b = g.user_node(0), g.user_node(1)
    p = shortest_path(g, a, b)
    assert p is not None
    assert all(g.is_tile(n) for n in p.nodes[1:-1])


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 12))
def test_shortest_path_matches_all_simple_paths(seed, n):
    rng = np.random.default_rng(seed)
    g = abstract_graph(n, random_edges(rng, n))
    G = to_networkx(g)
    a, b = 0, n - 1
    got = shortest_path(g, a, b)
    if not nx.has_path(G, a, b):
        assert got is None
        return
    best = min(path_delay(G, p) for p in nx.all_simple_paths(G, a, b))
    assert got.total_delay == pytest.approx(best, rel=1e-12)
    check_path(g, got)


def _oracle_disjoint(G, k, a, b):
    out, banned = [], set()
    while len(out) < k:
        cands = [p for p in nx.all_simple_paths(G, a, b) if not set(p[1:-1]) & banned]
        if any(len(p) == 2 for p in out):
            cands = [p for p in cands if len(p) > 2]
        if not cands:
            break
        p = min(cands, key=lambda p: (path_delay(G, p), len(p), p))
        out.append(p)
        banned.update(p[1:-1])
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 10), st.integers(1, 5))
def test_k_shortest_matches_greedy_enumeration(seed, n, k):
    rng = np.random.default_rng(seed)
    g = abstract_graph(n, random_edges(rng, n, 0.5))
    G = to_networkx(g)
    got = k_shortest_paths(g, k, 0, n - 1)
    ref = _oracle_disjoint(G, k, 0, n - 1)
    assert [p.nodes for p in got] == [tuple(p) for p in ref]
    delays = [p.total_delay for p in got]
    assert delays == sorted(delays)
    inner = [set(p.nodes[1:-1]) for p in got]
    for i in range(len(inner)):
        for j in range(i + 1, len(inner)):
            assert not inner[i] & inner[j]


def test_k_shortest_examples():
    # routes 0-1-4 (delay 2) and 0-2-3-4 (delay 3) share no intermediate node
    g = abstract_graph(5, [(0, 1, 1.0), (1, 4, 1.0), (0, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)])
    assert [p.nodes for p in k_shortest_paths(g, 1, 0, 4)] == [(0, 1, 4)]
    assert [p.nodes for p in k_shortest_paths(g, 2, 0, 4)] == [(0, 1, 4), (0, 2, 3, 4)]
    assert len(k_shortest_paths(g, 5, 0, 4)) == 2
    with pytest.raises(GraphError):
        k_shortest_paths(g, 0, 0, 4)


def test_path_cache_coherent_with_fresh_computation():
    g = two_user_room(coated=("walls", "ceiling"))
    tiles = [0, 7, 40, len(g.tiles) - 1]
    for a in tiles:
        for b in tiles:
            if a == b:
                continue
            cached = k_shortest_paths(g, 4, a, b)
            assert (a, b) in g.path_cache
            fresh = k_shortest_paths(g, 4, a, b, use_cache=False)
            assert [p.nodes for p in cached] == [p.nodes for p in fresh]


def test_gain_threshold_filters_cache():
    g = two_user_room(coated=("walls", "ceiling"))
    g.gain_threshold = 0.99 ** 2 + 1e-12      # keeps single-tile paths only
    for p in k_shortest_paths(g, 4, 0, len(g.tiles) - 1):
        assert p.gain_product >= g.gain_threshold


def test_reverse_query_symmetry():
    g = two_user_room(coated=("walls", "ceiling"))
    a, b = g.user_node(0), g.user_node(1)
    fwd, back = shortest_path(g, a, b), shortest_path(g, b, a)
    assert back.total_delay == pytest.approx(fwd.total_delay, rel=1e-12)
    assert back.gain_product == pytest.approx(fwd.gain_product, rel=1e-12)
    rev = fwd.reversed(g)
    assert rev.nodes == tuple(reversed(fwd.nodes))
    assert rev.total_delay == pytest.approx(fwd.total_delay, rel=1e-15)
    check_path(g, fwd)
    check_path(g, back)


def test_bystander_sphere_blocks_tile_links():
    room = box_room(4, 4, 3, coated=("walls",))
    clear = build_graph(room, 1.0, [])
    blocked = build_graph(room, 1.0, [UserNode(0, vec(2, 2.5, 1.5), AntennaPattern(10, phi=90))])
    assert len([l for l in blocked.links if l.kind == LinkKind.INTER_TILE]) < len(clear.links)


def test_empty_floorplan_graph():
    g = build_graph(Floorplan([], (vec(0, 0, 0), vec(1, 1, 1))), 1.0, [])
    assert g.tiles == [] and g.links == []
