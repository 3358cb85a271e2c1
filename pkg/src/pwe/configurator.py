"""K-paths configuration: pair ordering, path search, selection, deployment and blocking."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .em_model import Absorb, Collimate, Steer, TileFunction, WaveKind, WaveSpec, steer_normal_for
from .geometry import deviation_from_perpendicular, segments_hit_sphere, unit
from .objectives import (Inputs, ObjectiveError, ObjectiveSet, eavesdrop_violations, path_power,
                         useful_power)
from .pwe_graph import Link, Path, PweGraph, k_shortest_paths, shortest_path

log = logging.getLogger(__name__)


class DeploymentError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairRequest:
    tx: int
    rx: int
    objective: ObjectiveSet

    def __post_init__(self) -> None:
        if self.tx == self.rx and not self.objective.block:
            raise ValueError("a pair needs two distinct users")


@dataclass(frozen=True)
class Modifiers:
    delta_jones: Optional[np.ndarray] = None
    delta_phase: Optional[float] = None


@dataclass
class Deployment:
    assignments: dict = field(default_factory=dict)          # tile id -> TileFunction
    pair_paths: dict = field(default_factory=dict)           # PairRequest -> [Path]
    labels: dict = field(default_factory=dict)               # link index -> (tx, rx)
    found: dict = field(default_factory=dict)                # PairRequest -> paths explored
    skipped: list = field(default_factory=list)
    partial_blocks: list = field(default_factory=list)
    paths_rem_trace: list = field(default_factory=list)
    N: dict = field(default_factory=dict)
    K: dict = field(default_factory=dict)

    def assign(self, tile: int, f: TileFunction) -> None:
        if tile in self.assignments:
            raise DeploymentError(f"tile {tile} would receive a second function")
        self.assignments[tile] = f

    @property
    def paths_rem(self) -> int:
        return self.paths_rem_trace[-1] if self.paths_rem_trace else 0

    def path_tiles(self) -> set[int]:
        return {t for t, f in self.assignments.items() if not isinstance(f.base, Absorb)}


@dataclass
class MdfResult:
    blocked_pairs: list
    sorted_pairs: list
    N: dict
    K: dict
    v: dict


def mdf_policy(g: PweGraph, pairs: Sequence[PairRequest], quota_basis: str = "paths") -> MdfResult:
    """Most-distant-pair-first ordering with per-pair path quotas.

    With quota_basis="paths" each user's link count is shared by the number of shortest
    paths its pairs found; "pairs" shares it by the number of pairs the user is in.
    """
    n_u: Counter = Counter()
    blocked, active = [], []
    K, v = {}, {}
    order = {e: i for i, e in enumerate(pairs)}
    for e in pairs:
        if e.objective.block:
            blocked.append(e)
            continue
        active.append(e)
        K[e] = min(len(g.user_links(e.tx)), len(g.user_links(e.rx)))
        found = k_shortest_paths(g, K[e], g.user_node(e.tx), g.user_node(e.rx)) if K[e] >= 1 else []
        v[e] = float(np.mean([p.total_delay for p in found])) if found else 0.0
        inc = len(found) if quota_basis == "paths" else 1
        n_u[e.tx] += inc
        n_u[e.rx] += inc
    active.sort(key=lambda e: (-v[e], order[e]))
    N = {}
    for e in active:
        share = []
        for u in (e.tx, e.rx):
            links = len(g.user_links(u))
            share.append(links // n_u[u] if n_u[u] > 0 else links)
        N[e] = max(min(share), 1)
    return MdfResult(blocked, active, N, K, v)


def _link_segments(g: PweGraph, links: Sequence[Link]) -> tuple[np.ndarray, np.ndarray]:
    a = np.stack([g.position(l.a) for l in links])
    b = np.stack([g.position(l.b) for l in links])
    return a, b


def filter_links_by_obj(g: PweGraph, obj: ObjectiveSet, tx: int, rx: int,
                        eaves: bool = True) -> set[int]:
    """Links that conflict with the eavesdropping and Doppler objectives of one pair."""
    out: set[int] = set()
    if eaves and obj.eaves is not None and g.links:
        protected = obj.protected([u.id for u in g.users], tx, rx)
        if protected:
            a, b = _link_segments(g, g.links)
            hit = np.zeros(len(g.links), dtype=bool)
            for uid in protected:
                hit |= segments_hit_sphere(a, b, g.users[uid].sphere(g.sphere_radius))
            out.update(int(k) for k in np.nonzero(hit)[0])
    if obj.doppler:
        out |= doppler_excluded(g, obj, rx)
    return out


def link_deviations(g: PweGraph, rx: int) -> list[tuple[float, int, Link]]:
    u = g.users[rx]
    if u.trajectory is None:
        raise ObjectiveError("Doppler mitigation needs a receiver trajectory")
    rxn = g.user_node(rx)
    out = []
    for l in g.user_links(rx):
        t = l.other(rxn)
        dev = deviation_from_perpendicular(g.position(t), u.position, u.trajectory, u.position)
        out.append((dev, t, l))
    return sorted(out, key=lambda x: (x[0], x[1]))


def doppler_excluded(g: PweGraph, obj: ObjectiveSet, rx: int) -> set[int]:
    devs = link_deviations(g, rx)
    bad = {l.index for d, _, l in devs if d > obj.doppler_tolerance}
    if devs and len(bad) == len(devs):
        bad.discard(devs[0][2].index)       # keep the least-deviating link
    return bad


def find_complex_path(g: PweGraph, src: int, dst: int, excluded: set[int],
                      used_paths: Sequence[Path], start: Optional[tuple[list, list]] = None) -> Optional[Path]:
    """Shortest path over free tiles, or one that rides through already configured tiles.

    When free tiles cannot connect the pair, the search walks the unrestricted shortest
    path up to the first configured tile, follows that tile's deployed output, and
    continues from wherever the output lands, never reusing a visited link.
    `start` seeds the walk with a prefix (nodes, links) that ends at `src`.
    """
    ex = set(excluded)
    reserved: set[int] = set()      # free tiles already promised to another path
    for p in used_paths:
        ex.update(l.index for l in p.links if l.index >= 0)
        reserved.update(h for h in p.nodes[1:-1] if not g.configured(h))
    nodes, links = (list(start[0]), list(start[1])) if start else ([src], [])
    ex.update(l.index for l in links if l.index >= 0)
    cur = nodes[-1]
    for _ in range(4 * len(g.tiles) + 4):
        if cur == dst:
            return g.make_path(nodes, links)
        if g.is_user(cur) and cur != nodes[0]:
            return None
        if len(nodes) > 1 and g.configured(cur):
            nxt = g.follow(cur, nodes[-2])
            if nxt is None or nxt in nodes or nxt in reserved:
                return None
            link = g.link_between(cur, nxt) or g.virtual_link(cur, nxt)
            if link.index >= 0 and link.index in ex:
                return None
            nodes.append(nxt)
            links.append(link)
            if link.index >= 0:
                ex.add(link.index)
            cur = nxt
            continue
        visited = set(nodes[:-1]) | (reserved - {cur})
        configured = [t.id for t in g.tiles if t.deployed is not None and t.id != cur]
        p = shortest_path(g, cur, dst, ex, visited | set(configured))
        if p is not None:
            return g.make_path(nodes + list(p.nodes[1:]), links + list(p.links))
        p = shortest_path(g, cur, dst, ex, visited)
        if p is None:
            return None
        for i in range(1, len(p.nodes)):
            h = p.nodes[i]
            nodes.append(h)
            links.append(p.links[i - 1])
            ex.add(p.links[i - 1].index)
            if g.configured(h):
                break
        cur = nodes[-1]
    return None


def filter_paths_by_obj(paths: Sequence[Path], max_paths: int, obj: ObjectiveSet,
                        inputs: Inputs) -> list[Path]:
    if max_paths < 1:
        raise ValueError("max_paths must be at least 1")
    idx = {id(p): i for i, p in enumerate(paths)}
    if obj.max_power:
        ranked = sorted(paths, key=lambda p: (-path_power(p, inputs), idx[id(p)]))
        return ranked[:max_paths]
    if obj.max_sir:
        ranked = sorted(paths, key=lambda p: (p.total_delay, idx[id(p)]))
        best_i, best_p = 0, -1.0
        for i in range(len(ranked)):
            window = ranked[i:min(i + max_paths, len(ranked))]
            p_tot, _ = useful_power(window, obj.d_th, inputs)
            if p_tot > best_p:
                best_i, best_p = i, p_tot
        return ranked[best_i:min(best_i + max_paths, len(ranked))]
    return list(paths[:max_paths])


def _direction(g: PweGraph, a: int, b: int) -> np.ndarray:
    return unit(g.position(b) - g.position(a))


def deploy(g: PweGraph, paths: Sequence[Path], pair: PairRequest, dep: Deployment,
           carrier: float = 2.4e9, modifiers: Optional[Modifiers] = None) -> list[int]:
    """Collimate at the first and last tile of each path, steer in between."""
    placed: list[int] = []
    for p in paths:
        tiles_idx = [i for i in range(1, len(p.nodes) - 1)]
        first, last = tiles_idx[0], tiles_idx[-1]
        new_here = []
        for i in tiles_idx:
            h, prev, nxt = p.nodes[i], p.nodes[i - 1], p.nodes[i + 1]
            tile = g.tiles[h]
            if tile.deployed is not None:
                if g.follow(h, prev) != nxt:
                    raise DeploymentError(f"configured tile {h} does not continue the path")
                continue
            d_in, d_out = _direction(g, prev, h), _direction(g, h, nxt)
            kind = WaveKind.FOCAL if g.is_user(prev) else WaveKind.PLANAR
            expected = WaveSpec(kind, carrier, d_in, 1.0)
            if i in (first, last):
                f = TileFunction(Collimate(d_out), expected)
            else:
                f = TileFunction(Steer(steer_normal_for(d_in, d_out)), expected)
            tile.deployed = f
            dep.assign(h, f)
            new_here.append(h)
        if modifiers is not None and new_here:
            h = min(new_here, key=lambda t: (1.0 - g.tiles[t].gain, t))
            f = g.tiles[h].deployed
            f = TileFunction(f.base, f.expected_input, modifiers.delta_jones, modifiers.delta_phase)
            g.profile.check(f)
            g.tiles[h].deployed = f
            dep.assignments[h] = f
        placed.extend(new_here)
        p.links[0].tx_label = pair.tx
        p.links[-1].rx_label = pair.rx
        for l in (p.links[0], p.links[-1]):
            dep.labels[l.index] = (l.tx_label, l.rx_label)
    return placed


def block_target(g: PweGraph, tx: int, rng: Optional[np.random.Generator] = None) -> int:
    """Nearest other user when reachable, otherwise the tile farthest by delay.

    With `rng`, a random reachable user or tile is drawn instead.
    """
    txn = g.user_node(tx)
    if rng is not None:
        dist = delays_from(g, txn)
        reach = [n for n in range(g.n_nodes) if n != txn and np.isfinite(dist[n])]
        users = [n for n in reach if g.is_user(n)]
        pool = users or reach
        return int(pool[rng.integers(len(pool))]) if pool else txn
    others = sorted((u for u in g.users if u.id != tx),
                    key=lambda u: (float(np.linalg.norm(u.position - g.users[tx].position)), u.id))
    if others:
        cand = g.user_node(others[0].id)
        if shortest_path(g, txn, cand) is not None:
            return cand
    dist = delays_from(g, txn)
    tiles = [(d, t) for t, d in enumerate(dist[:len(g.tiles)]) if np.isfinite(d)]
    if not tiles:
        return txn
    return max(tiles, key=lambda x: (x[0], -x[1]))[1]


def delays_from(g: PweGraph, a: int) -> np.ndarray:
    n = g.n_nodes
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=bool)
    dist[a] = 0.0
    T = len(g.tiles)
    while True:
        cand = np.where(done, np.inf, dist)
        u = int(np.argmin(cand))
        if not np.isfinite(cand[u]):
            return dist
        done[u] = True
        if u >= T and u != a:
            continue
        dist = np.minimum(dist, np.where(done, np.inf, dist[u] + g.W[u]))


def deploy_blocks(g: PweGraph, blocked_pairs: Sequence[PairRequest], dep: Deployment,
                  used_paths: Sequence[Path] = (), rng: Optional[np.random.Generator] = None) -> None:
    for e in blocked_pairs:
        txn = g.user_node(e.tx)
        target = block_target(g, e.tx, rng)
        leaks = []
        for link in g.user_links(e.tx):
            h_star = link.other(txn)
            if not g.configured(h_star):
                p_nodes = [txn, h_star]
            else:
                p = None if target == txn else find_complex_path(
                    g, h_star, target, set(), used_paths, start=([txn, h_star], [link]))
                p_nodes = list(p.nodes) if p is not None else _follow_chain(g, txn, h_star)
            if not _absorb_first(g, p_nodes[1:], dep):
                leaks.append(h_star)
        if leaks:
            log.warning("user %d: %d emission(s) could not be absorbed", e.tx, len(leaks))
            dep.partial_blocks.extend((e.tx, h) for h in leaks)


def _absorb_first(g: PweGraph, nodes: Sequence[int], dep: Deployment) -> bool:
    """Absorb at the first free tile; True when the emission ends absorbed."""
    for h in nodes:
        if not g.is_tile(h):
            return False
        f = g.tiles[h].deployed
        if f is None:
            f = TileFunction(Absorb())
            g.tiles[h].deployed = f
            dep.assign(h, f)
            return True
        if isinstance(f.base, Absorb) and f.base.residual == 0 and f.expected_input is None:
            return True
    return False


def _follow_chain(g: PweGraph, prev: int, h: int, limit: int = 64) -> list[int]:
    """Nodes visited by physically following deployed functions from `prev` into `h`."""
    nodes = [prev, h]
    while len(nodes) < limit and g.is_tile(nodes[-1]) and g.configured(nodes[-1]):
        nxt = g.follow(nodes[-1], nodes[-2])
        if nxt is None or nxt in nodes:
            break
        nodes.append(nxt)
    return nodes


def pair_inputs(g: PweGraph) -> dict:
    return {(g.user_node(u), t): p for (u, t), p in g.tx_power.items()}


def kp_config(g: PweGraph, pairs: Sequence[PairRequest], carrier: float = 2.4e9,
              absorb_cleanup: bool = True, quota_basis: str = "paths",
              modifiers: Optional[Mapping[PairRequest, Modifiers]] = None,
              security_priority: bool = True,
              rng: Optional[np.random.Generator] = None) -> Deployment:
    """Configure the tiles for `pairs`; returns the ledger of what was placed.

    With `security_priority` eavesdropping links are removed before the search;
    otherwise candidate paths are searched freely and violators dropped after selection.
    """
    dep = Deployment()
    mdf = mdf_policy(g, pairs, quota_basis)
    dep.N, dep.K = mdf.N, mdf.K
    inputs = pair_inputs(g)
    deployed_paths: list[Path] = []
    paths_rem = 0
    for e in mdf.sorted_pairs:
        txn, rxn = g.user_node(e.tx), g.user_node(e.rx)
        excluded = filter_links_by_obj(g, e.objective, e.tx, e.rx, eaves=security_priority)
        found: list[Path] = []
        for _ in range(mdf.K[e]):
            p = find_complex_path(g, txn, rxn, excluded, deployed_paths + found)
            if p is None:
                break
            found.append(p)
        dep.found[e] = found
        if not found:
            dep.skipped.append(e)
            continue
        max_paths = min(mdf.N[e] + paths_rem, len(found))
        sel = filter_paths_by_obj(found, max_paths, e.objective, inputs)
        if not security_priority and e.objective.eaves is not None:
            prot = [(u, g.users[u].sphere(g.sphere_radius))
                    for u in e.objective.protected([u.id for u in g.users], e.tx, e.rx)]
            sel = [p for p in sel if not eavesdrop_violations(p, prot, e.rx, g)]
            if not sel:
                dep.skipped.append(e)
                continue
        paths_rem += max(max_paths - len(sel), 0)
        dep.paths_rem_trace.append(paths_rem)
        mods = modifiers.get(e) if modifiers else None
        deploy(g, sel, e, dep, carrier, mods)
        dep.pair_paths[e] = sel
        deployed_paths.extend(sel)
    deploy_blocks(g, mdf.blocked_pairs, dep, deployed_paths, rng)
    if absorb_cleanup:
        for t in g.tiles:
            if t.deployed is None:
                t.deployed = TileFunction(Absorb())
                dep.assign(t.id, t.deployed)
    return dep
