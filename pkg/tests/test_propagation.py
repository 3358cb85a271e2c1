import numpy as np
import pytest

from pwe.configurator import Deployment, PairRequest, deploy, kp_config
from pwe.em_model import Absorb, ConfigurationError, Steer, TileFunction, WaveKind, WaveSpec
from pwe.geometry import box_room, unit, vec
from pwe.objectives import ObjectiveSet
from pwe.propagation import (Arrival, BrokenPathError, PowerDelayProfile, classify_useful, nlos_prop,
                             path_output, total_received)
from pwe.pwe_graph import AntennaPattern, UserNode, build_graph, dbm_to_w

MAXP = ObjectiveSet(max_power=True)


def ceiling_pair():
    users = [UserNode(0, vec(1.5, 2, 1), AntennaPattern(60, phi=90)),
             UserNode(1, vec(4.5, 2, 1), AntennaPattern(60, phi=90))]
    g = build_graph(box_room(6, 4, 3, coated=("ceiling",)), 1.0, users)
    mid = next(t.id for t in g.tiles if np.allclose(t.center, [3.5, 2.5, 3]))
    return g, mid


def single_input(g, uid, tile):
    link, w = next((l, w) for l, w in g.user_link_inputs(uid, 2.4e9) if l.other(g.user_node(uid)) == tile)
    return link, w


def test_collimating_tile_gives_two_link_path():
    g, mid = ceiling_pair()
    pair = PairRequest(0, 1, MAXP)
    path = g.make_path([g.user_node(0), mid, g.user_node(1)])
    deploy(g, [path], pair, Deployment())
    link, w = single_input(g, 0, mid)
    res = nlos_prop(g, [1], [(0, [(link, w)])], strict=False)
    (arr,) = res.arrivals[1]
    assert arr.path.hops == 2 and arr.path.nodes == path.nodes
    assert arr.useful
    assert arr.wave.power == pytest.approx(w.power * 0.99, rel=1e-15)
    assert res.stats.balanced() and res.stats.reached == 1


def test_absorbing_tile_cuts_the_route():
    g, mid = ceiling_pair()
    g.tiles[mid].deployed = TileFunction(Absorb())
    link, w = single_input(g, 0, mid)
    res = nlos_prop(g, [1], [(0, [(link, w)])])
    assert res.arrivals[1] == []
    assert res.stats.absorbed == 1 and res.stats.balanced()


def test_strict_mode_rejects_unconfigured_tiles():
    g, mid = ceiling_pair()
    link, w = single_input(g, 0, mid)
    with pytest.raises(ConfigurationError):
        nlos_prop(g, [1], [(0, [(link, w)])], strict=True)


def test_five_tile_chain_gain(zigzag):
    g, route = zigzag()
    path = g.make_path(route)
    deploy(g, [path], PairRequest(0, 1, MAXP), Deployment())
    link = g.link_between(route[0], route[1])
    w = WaveSpec(WaveKind.FOCAL, 2.4e9, unit(g.position(route[1]) - g.position(route[0])), 1e-3)
    res = nlos_prop(g, [1], [(0, [(link, w)])])
    (arr,) = res.arrivals[1]
    assert arr.path.nodes == tuple(route)
    assert abs(arr.wave.power / 1e-3 - 0.99 ** 5) <= 1e-12
    assert arr.wave.power == pytest.approx(0.951e-3, abs=1e-6)
    assert path_output(w, path, g).power == arr.wave.power
    assert path.gain_product == pytest.approx(0.99 ** 5, rel=1e-15)


def test_ray_below_floor_is_dropped():
    g, mid = ceiling_pair()
    g.tiles[mid].deployed = TileFunction(Steer(g.tiles[mid].normal))
    link, _ = single_input(g, 0, mid)
    w = WaveSpec(WaveKind.FOCAL, 2.4e9, unit(g.tiles[mid].center - g.users[0].position), dbm_to_w(-249.99))
    res = nlos_prop(g, [1], [(0, [(link, w)])], min_power_dbm=-250.0)
    assert res.stats.sub_threshold == 1 and res.stats.balanced()


def test_bounce_budget():
    g, mid = ceiling_pair()
    for t in g.tiles:
        t.deployed = TileFunction(Steer(t.normal))
    link, w = single_input(g, 0, mid)
    res = nlos_prop(g, [], [(0, [(link, w)])], max_bounces=3)
    assert res.stats.over_bounce + res.stats.escaped + res.stats.absorbed == 1
    assert res.stats.balanced()


def test_path_output_examples():
    g, mid = ceiling_pair()
    path = g.make_path([g.user_node(0), mid, g.user_node(1)])
    deploy(g, [path], PairRequest(0, 1, MAXP), Deployment())
    w = WaveSpec(WaveKind.FOCAL, 2.4e9, unit(g.tiles[mid].center - g.users[0].position), 1.0)
    assert path_output(w, path, g).power == pytest.approx(0.99)


def test_path_output_three_tiles(zigzag):
    g, route = zigzag()
    deploy(g, [g.make_path(route)], PairRequest(0, 1, MAXP), Deployment())
    w = WaveSpec(WaveKind.FOCAL, 2.4e9, unit(g.position(route[1]) - g.position(route[0])), 1.0)
    # user, three composed tiles, and the tile the third one emits toward
    prefix = g.make_path(route[:5])
    assert path_output(w, prefix, g).power == pytest.approx(0.970299, rel=1e-12)


def test_path_output_broken_path(zigzag):
    g, route = zigzag()
    path = g.make_path(route)
    deploy(g, [path], PairRequest(0, 1, MAXP), Deployment())
    mid = route[3]
    g.tiles[mid].deployed = TileFunction(Steer(unit((0.4, 0.0, 1.0))))
    w = WaveSpec(WaveKind.FOCAL, 2.4e9, unit(g.position(route[1]) - g.position(route[0])), 1.0)
    with pytest.raises(BrokenPathError):
        path_output(w, path, g)


def _arrival(g, power, source=0, useful=False, delay_nodes=None):
    path = g.make_path(delay_nodes or [g.user_node(0), 0, g.user_node(1)])
    w = WaveSpec(WaveKind.PLANAR, 2.4e9, vec(0, 0, 1), power)
    return Arrival(path, w, source, 1.0, useful)


def test_total_received_examples():
    g, _ = ceiling_pair()
    assert total_received([]).total == 0.0
    t = total_received([_arrival(g, 1e-3, useful=True), _arrival(g, 2e-3)])
    assert t.total == pytest.approx(3e-3)
    assert t.useful == pytest.approx(1e-3) and t.interference == pytest.approx(2e-3)


def test_classify_useful():
    g, mid = ceiling_pair()
    path = g.make_path([g.user_node(0), mid, g.user_node(1)])
    a = Arrival(path, WaveSpec(WaveKind.PLANAR, 2.4e9, vec(0, 0, 1), 1.0), 0, 1.0)
    # no labels: everything is interference
    assert not classify_useful([a], 1)[0].useful
    path.links[0].tx_label, path.links[-1].rx_label = 0, 1
    assert classify_useful([a], 1)[0].useful
    path.links[0].tx_label = 2
    assert not classify_useful([a], 1)[0].useful


def test_pdp_sorted_by_delay():
    g, _ = ceiling_pair()
    far = _arrival(g, 1.0, delay_nodes=[g.user_node(0), len(g.tiles) - 1, g.user_node(1)])
    near = _arrival(g, 1.0)
    pdp = PowerDelayProfile.of(1, [far, near])
    delays = [e.delay for e in pdp.entries]
    assert delays == sorted(delays)


def _configured_room():
    users = [UserNode(0, vec(1.5, 2, 1), AntennaPattern(60, phi=90)),
             UserNode(1, vec(4.5, 2, 1), AntennaPattern(60, phi=90)),
             UserNode(2, vec(3, 1, 1), AntennaPattern(40, phi=90))]
    g = build_graph(box_room(6, 4, 3, coated=("ceiling", "walls")), 1.0, users)
    dep = kp_config(g, [PairRequest(0, 1, ObjectiveSet(max_power=True, eaves="All"))])
    return g, dep


def test_engine_agrees_with_path_algebra():
    g, dep = _configured_room()
    ins = dict((l.index, w) for l, w in g.user_link_inputs(0, 2.4e9))
    res = nlos_prop(g, [1], [(0, g.user_link_inputs(0, 2.4e9))])
    assert res.stats.balanced() and dep.pair_paths
    for (pair, paths) in dep.pair_paths.items():
        for p in paths:
            w = ins[p.links[0].index]
            hit = [a for a in res.arrivals[1] if a.path.nodes == p.nodes]
            assert len(hit) == 1
            assert hit[0].wave.power == path_output(w, p, g).power
            assert hit[0].wave.power <= w.power
            assert hit[0].useful


def test_reciprocity_of_point_to_point_configuration():
    g, dep = _configured_room()
    (paths,) = dep.pair_paths.values()
    fwd = nlos_prop(g, [1], [(0, g.user_link_inputs(0, 2.4e9))])
    back = nlos_prop(g, [0], [(1, g.user_link_inputs(1, 2.4e9))])
    for p in paths:
        rev = tuple(reversed(p.nodes))
        (a,) = [x for x in fwd.arrivals[1] if x.path.nodes == p.nodes]
        (b,) = [x for x in back.arrivals[0] if x.path.nodes == rev]
        assert b.path.gain_product == pytest.approx(a.path.gain_product, rel=1e-12)
        assert b.path.total_delay == pytest.approx(a.path.total_delay, rel=1e-12)


def test_propagation_is_deterministic():
    runs = []
    for _ in range(2):
        g, _ = _configured_room()
        res = nlos_prop(g, [0, 1, 2], [(u, g.user_link_inputs(u, 2.4e9)) for u in (0, 1)])
        runs.append([(r, a.path.nodes, a.wave.power, a.useful) for r in res.arrivals for a in res.arrivals[r]])
    assert runs[0] == runs[1]


def test_unconfigured_tiles_reflect_when_asked():
    g, mid = ceiling_pair()
    link, w = single_input(g, 0, mid)
    absorbed = nlos_prop(g, [1], [(0, [(link, w)])], unconfigured="absorb")
    reflected = nlos_prop(g, [1], [(0, [(link, w)])], unconfigured="specular")
    assert absorbed.stats.absorbed == 1
    assert reflected.stats.spawned == 1 and reflected.stats.balanced()
    assert absorbed.stats.reached == 0
