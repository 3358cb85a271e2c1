import itertools

import networkx as nx
import numpy as np
import pytest

from pwe.em_model import DEFAULT_PROFILE
from pwe.geometry import Floorplan, box_room, vec
from pwe.pwe_graph import (AntennaPattern, Link, LinkKind, PweGraph, TileNode, UserNode,
                           build_graph)

# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def abstract_graph(n: int, edges, gain: float = 0.99, users: int = 0) -> PweGraph:
    """A PweGraph with `n` tiles, then `users` user nodes, linked by (a, b, length) triples.

    Geometry is irrelevant here; only the path queries are exercised.
    """
    g = PweGraph(Floorplan([], (vec(0, 0, 0), vec(1, 1, 1))), 1.0, DEFAULT_PROFILE)
    z = vec(0, 0, 0)
    g.tiles = [TileNode(i, 0, z, vec(0, 0, 1), z, vec(1, 0, 0), vec(0, 1, 0), False, gain)
               for i in range(n)]
    g.users = [UserNode(u, z, AntennaPattern(180)) for u in range(users)]
    n += users
    g.n_nodes = n
    g.W = np.full((n, n), np.inf)
    g.L = np.full((n, n), -1, dtype=np.int64)
    g.links = []
    for a, b, length in edges:
        kind = LinkKind.USER_TILE if max(a, b) >= len(g.tiles) else LinkKind.INTER_TILE
        link = Link(a, b, float(length), kind, index=len(g.links))
        g.links.append(link)
        g.W[a, b] = g.W[b, a] = link.delay
        g.L[a, b] = g.L[b, a] = link.index
    return g


def random_edges(rng: np.random.Generator, n: int, p: float = 0.4):
    return [(a, b, float(rng.uniform(1.0, 10.0)))
            for a, b in itertools.combinations(range(n), 2) if rng.random() < p]


def to_networkx(g: PweGraph) -> nx.Graph:
    G = nx.Graph()
    G.add_nodes_from(range(g.n_nodes))
    for l in g.links:
        G.add_edge(l.a, l.b, delay=l.delay, index=l.index)
    return G


def path_delay(G: nx.Graph, nodes) -> float:
    return sum(G[a][b]["delay"] for a, b in zip(nodes, nodes[1:]))


def check_structure(g, dep, cleanup=True):
    # one function per tile: the ledger matches what the tiles carry
    for h, f in dep.assignments.items():
        assert g.tiles[h].deployed is f
    all_links = []
    for paths in dep.pair_paths.values():
        for p in paths:
            keys = p.link_keys()
            assert len(keys) == len(set(keys))
            assert len(p.nodes) == len(set(p.nodes))
            all_links.extend(keys)
    assert len(all_links) == len(set(all_links))
    assert all(r >= 0 for r in dep.paths_rem_trace)
    assert dep.paths_rem_trace == sorted(dep.paths_rem_trace)
    served = sum(len(v) for v in dep.pair_paths.values())
    assert served <= sum(dep.N[e] for e in dep.pair_paths) + dep.paths_rem
    if cleanup:
        assert all(t.deployed is not None for t in g.tiles)


@pytest.fixture(scope="session")
def zigzag():
    """Two users at the ends of a corridor whose floor and ceiling are coated.

    `route` is a five-tile floor/ceiling zigzag from user 0 to user 1.
    """
    fp = box_room(8, 3, 3, coated=("floor", "ceiling"))
    users = [UserNode(0, vec(0.6, 1.5, 1.5), AntennaPattern(60, phi=-30, theta=0)),
             UserNode(1, vec(7.4, 1.5, 1.5), AntennaPattern(60, phi=-30, theta=180))]

    def build():
        g = build_graph(fp, 1.0, users)
        names = [s.name for s in g.floorplan.surfaces]

        def tile(surface, x):
            return next(t.id for t in g.tiles if names[t.surface] == surface
                        and abs(t.center[0] - x) < 1e-9 and abs(t.center[1] - 1.5) < 1e-9)

        route = [g.user_node(0), tile("floor", 1.5), tile("ceiling", 2.5), tile("floor", 3.5),
                 tile("ceiling", 4.5), tile("floor", 5.5), g.user_node(1)]
        return g, route
    return build
