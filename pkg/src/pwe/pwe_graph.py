"""Tiles and users as a delay-weighted graph, with (k-)shortest path queries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .em_model import (DEFAULT_PROFILE, LINEAR_X, TWO_PI, EMProfile, TileFunction, WaveKind,
                       WaveSpec, apply_function, Steer)
from .geometry import (AHEAD_EPS, Floorplan, GeometryError, Sphere, Trajectory, Vec3,
                       ray_hit, ray_sphere_entry, segments_hit_sphere, segments_occluded, unit)

C = 299_792_458.0
SUBSAMPLES = 8          # per tile edge, for antenna integration over a tile


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def w_to_dbm(w: float) -> float:
    return -math.inf if w <= 0 else 10.0 * math.log10(w) + 30.0


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class AntennaPattern:
    """Single sinusoid lobe.

    `phi` is elevation above the horizontal plane (90 points straight up) and `theta`
    the azimuth from +x. With the default "half" convention `alpha` is the angle from
    boresight at which the lobe reaches zero; "full" treats it as the full lobe width.
    """
    alpha: float
    phi: float = 90.0
    theta: float = 0.0
    tx_power_dbm: float = -30.0
    convention: str = "half"

    def __post_init__(self) -> None:
        if not 0 < self.alpha <= 360:
            raise GraphError("lobe width must be in (0, 360]")
        if self.convention not in ("half", "full"):
            raise GraphError(f"unknown lobe convention {self.convention!r}")

    @property
    def half_angle(self) -> float:
        h = self.alpha if self.convention == "half" else self.alpha / 2.0
        return min(h, 180.0)

    def boresight(self) -> Vec3:
        p, t = math.radians(self.phi), math.radians(self.theta)
        return np.array([math.cos(p) * math.cos(t), math.cos(p) * math.sin(t), math.sin(p)])

    def shape(self, psi_deg) -> np.ndarray:
        """Normalized lobe, 1 on boresight and 0 at the edge."""
        psi = np.abs(np.asarray(psi_deg, dtype=float))
        h = self.half_angle
        return np.where(psi < h, np.cos(0.5 * np.pi * psi / h), 0.0)

    @property
    def peak_gain(self) -> float:
        return _peak_gain(self.half_angle)

    def gain(self, psi_deg) -> np.ndarray:
        return self.peak_gain * self.shape(psi_deg)

    def off_axis(self, direction: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(direction)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return np.degrees(np.arccos(np.clip(d @ self.boresight(), -1.0, 1.0)))


_PEAK_CACHE: dict[float, float] = {}


def _peak_gain(half_deg: float) -> float:
    # peak gain that makes the lobe radiate exactly the transmit power
    if half_deg not in _PEAK_CACHE:
        h = math.radians(half_deg)
        psi = np.linspace(0.0, h, 20001)
        f = np.cos(0.5 * np.pi * psi / h) * np.sin(psi)
        solid = 2.0 * np.pi * float(np.sum((f[1:] + f[:-1]) * 0.5 * np.diff(psi)))
        _PEAK_CACHE[half_deg] = 4.0 * np.pi / solid
    return _PEAK_CACHE[half_deg]


def first_impact_power(p_tx_w: float, gain: float, area: float, distance: float) -> float:
    """Free-space spreading from a device to a tile: P * G * A / (4 pi d^2)."""
    return p_tx_w * gain * area / (4.0 * math.pi * distance ** 2)


class LinkKind(str, Enum):
    INTER_TILE = "InterTile"
    USER_TILE = "UserTile"


@dataclass(eq=False)
class Link:
    a: int
    b: int
    length: float
    kind: LinkKind
    index: int = -1
    tx_label: Optional[int] = None
    rx_label: Optional[int] = None

    @property
    def delay(self) -> float:
        return self.length / C

    def other(self, n: int) -> int:
        return self.b if n == self.a else self.a

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


@dataclass(eq=False)
class TileNode:
    id: int
    surface: int
    center: Vec3
    normal: Vec3
    corner: Vec3
    edge_u: Vec3
    edge_v: Vec3
    virtual: bool
    gain: float
    deployed: Optional[TileFunction] = None

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.edge_u) * np.linalg.norm(self.edge_v))

    def samples(self, n: int = SUBSAMPLES) -> np.ndarray:
        k = (np.arange(n) + 0.5) / n
        a, b = np.meshgrid(k, k, indexing="ij")
        return (self.corner + a.reshape(-1, 1) * self.edge_u + b.reshape(-1, 1) * self.edge_v)


@dataclass(eq=False)
class UserNode:
    id: int
    position: Vec3
    antenna: AntennaPattern
    trajectory: Optional[Trajectory] = None
    authorized: bool = True

    def sphere(self, radius: float) -> Sphere:
        return Sphere(self.position, radius)


@dataclass(frozen=True, eq=False)
class Path:
    nodes: tuple
    links: tuple
    gain_product: float
    total_delay: float

    @property
    def endpoints(self) -> tuple[int, int]:
        return self.nodes[0], self.nodes[-1]

    @property
    def hops(self) -> int:
        return len(self.links)

    def tiles(self, g: "PweGraph") -> list[int]:
        return [n for n in self.nodes if g.is_tile(n)]

    def link_keys(self) -> list[tuple[int, int]]:
        return [l.key() for l in self.links]

    def reversed(self, g: "PweGraph") -> "Path":
        return g.make_path(list(reversed(self.nodes)), list(reversed(self.links)))


def specular_function(normal: Vec3) -> TileFunction:
    """Natural reflection expressed as steering with the physical normal."""
    return TileFunction(Steer(np.asarray(normal, dtype=float)))


class PweGraph:
    def __init__(self, floorplan: Floorplan, tile_size: float, profile: EMProfile,
                 power_threshold_dbm: float = -250.0, sphere_radius: float = 0.5,
                 subsamples: int = SUBSAMPLES, cache_k: int = 8, gain_threshold: float = 0.0,
                 natural_gain: float = 1.0):
        if tile_size <= 0:
            raise GraphError("tile size must be positive")
        self.floorplan = floorplan
        self.tile_size = tile_size
        self.profile = profile
        self.power_threshold_dbm = power_threshold_dbm
        self.sphere_radius = sphere_radius
        self.subsamples = subsamples
        self.cache_k = cache_k
        self.gain_threshold = gain_threshold
        self.natural_gain = natural_gain
        self.tiles: list[TileNode] = []
        self.users: list[UserNode] = []
        self.links: list[Link] = []
        self.path_cache: dict[tuple[int, int], list[Path]] = {}
        self._surface_grid: list[tuple[int, int, int]] = []
        self._tile_links: list[Link] = []
        self._rx_weight: dict[tuple[int, int], float] = {}
        self.tx_power: dict[tuple[int, int], float] = {}

    # construction

    def tile_surfaces(self) -> None:
        ts = self.tile_size
        for s_idx, s in enumerate(self.floorplan.surfaces):
            nu_f, nv_f = s.width / ts, s.height / ts
            nu, nv = int(round(nu_f)), int(round(nv_f))
            if abs(nu_f - nu) * ts > 1e-6 or abs(nv_f - nv) * ts > 1e-6 or nu < 1 or nv < 1:
                raise GraphError(f"surface {s.name!r} ({s.width:g} x {s.height:g} m) "
                                 f"is not tileable by {ts:g} m")
            eu, ev = s.edge_u / nu, s.edge_v / nv
            self._surface_grid.append((len(self.tiles), nu, nv))
            for i in range(nu):
                for j in range(nv):
                    corner = s.origin + i * eu + j * ev
                    virtual = not s.coated
                    self.tiles.append(TileNode(
                        id=len(self.tiles), surface=s_idx, center=corner + 0.5 * (eu + ev),
                        normal=s.normal, corner=corner, edge_u=eu, edge_v=ev, virtual=virtual,
                        gain=self.natural_gain if virtual else self.profile.intended_gain,
                        deployed=specular_function(s.normal) if virtual else None))
        self._centers = np.stack([t.center for t in self.tiles]) if self.tiles else np.zeros((0, 3))
        self._normals = np.stack([t.normal for t in self.tiles]) if self.tiles else np.zeros((0, 3))

    def connect_tiles(self) -> None:
        n = len(self.tiles)
        ia, ib = np.triu_indices(n, k=1)
        ca, cb = self._centers[ia], self._centers[ib]
        d = cb - ca
        length = np.linalg.norm(d, axis=1)
        fa = np.einsum("ij,ij->i", d, self._normals[ia])
        fb = -np.einsum("ij,ij->i", d, self._normals[ib])
        # both tiles must face each other; coplanar pairs give zero and are rejected
        facing = (fa > 1e-9 * length) & (fb > 1e-9 * length) & (length > AHEAD_EPS)
        ia, ib, length = ia[facing], ib[facing], length[facing]
        clear = ~segments_occluded(self._centers[ia], self._centers[ib], self.floorplan)
        ia, ib, length = ia[clear], ib[clear], length[clear]
        g_min = min((t.gain for t in self.tiles), default=1.0)
        if w_to_dbm(g_min * 1.0) < self.power_threshold_dbm:
            ia, ib, length = ia[:0], ib[:0], length[:0]
        self._tile_links = [Link(int(a), int(b), float(l), LinkKind.INTER_TILE, index=k)
                            for k, (a, b, l) in enumerate(zip(ia, ib, length))]
        self._tile_pairs = (ia, ib)

    def set_users(self, users: Sequence[UserNode]) -> None:
        for u in users:
            if not self.floorplan.contains(u.position):
                raise GraphError(f"user {u.id} lies outside the floorplan")
        if [u.id for u in users] != list(range(len(users))):
            raise GraphError("user ids must be 0..n-1 in order")
        self.users = list(users)
        self._rebuild()

    def move_user(self, uid: int, position: Vec3) -> None:
        u = self.users[uid]
        self.users[uid] = UserNode(u.id, np.asarray(position, dtype=float), u.antenna,
                                   u.trajectory, u.authorized)
        if not self.floorplan.contains(self.users[uid].position):
            raise GraphError(f"user {uid} lies outside the floorplan")
        self._rebuild()

    def _rebuild(self) -> None:
        T, U = len(self.tiles), len(self.users)
        self.n_nodes = T + U
        self.path_cache.clear()
        self._rx_weight.clear()
        self.tx_power.clear()
        ia, ib = self._tile_pairs
        active = np.ones(len(ia), dtype=bool)
        for u in self.users:
            active &= ~segments_hit_sphere(self._centers[ia], self._centers[ib],
                                           u.sphere(self.sphere_radius))
        self.links = []
        W = np.full((self.n_nodes, self.n_nodes), np.inf)
        L = np.full((self.n_nodes, self.n_nodes), -1, dtype=np.int64)
        for k in np.nonzero(active)[0]:
            link = self._tile_links[k]
            link.index = len(self.links)
            link.tx_label = link.rx_label = None
            self.links.append(link)
        if self.links:
            a = np.array([l.a for l in self.links])
            b = np.array([l.b for l in self.links])
            dl = np.array([l.delay for l in self.links])
            idx = np.arange(len(self.links))
            W[a, b] = W[b, a] = dl
            L[a, b] = L[b, a] = idx
        for u in self.users:
            for t_id, length, p_w in self._user_tile_links(u):
                link = Link(self.user_node(u.id), t_id, length, LinkKind.USER_TILE, index=len(self.links))
                self.links.append(link)
                W[link.a, link.b] = W[link.b, link.a] = link.delay
                L[link.a, link.b] = L[link.b, link.a] = link.index
                self.tx_power[(u.id, t_id)] = p_w
        self.W, self.L = W, L

    def _user_tile_links(self, u: UserNode) -> list[tuple[int, float, float]]:
        if not self.tiles:
            return []
        pos = u.position
        to_user = pos - self._centers
        facing = np.einsum("ij,ij->i", to_user, self._normals) > 1e-9
        cand = np.nonzero(facing)[0]
        if cand.size == 0:
            return []
        clear = ~segments_occluded(np.repeat(pos[None, :], cand.size, axis=0),
                                   self._centers[cand], self.floorplan)
        for other in self.users:
            if other.id != u.id:
                clear &= ~segments_hit_sphere(np.repeat(pos[None, :], cand.size, axis=0),
                                              self._centers[cand], other.sphere(self.sphere_radius))
        cand = cand[clear]
        out = []
        p_tx = dbm_to_w(u.antenna.tx_power_dbm)
        for t_id in cand:
            tile = self.tiles[int(t_id)]
            p_w, inside = self._intercepted(u, tile, p_tx)
            if inside:
                out.append((int(t_id), float(np.linalg.norm(tile.center - pos)), p_w))
        return out

    def _intercepted(self, u: UserNode, tile: TileNode, p_tx: float) -> tuple[float, bool]:
        # the link exists when the tile center sits inside the lobe cone
        if float(u.antenna.off_axis((tile.center - u.position)[None, :])[0]) >= u.antenna.half_angle:
            return 0.0, False
        pts = tile.samples(self.subsamples)
        rel = pts - u.position
        dist = np.linalg.norm(rel, axis=1)
        shape = u.antenna.shape(u.antenna.off_axis(rel))
        a_k = tile.area / len(pts)
        p = float(np.sum(first_impact_power(p_tx, u.antenna.peak_gain * shape, a_k, dist)))
        return p, True

    def rx_weight(self, uid: int, tile_id: int) -> float:
        """Share of the tile's aperture the receiver lobe sees (mean normalized gain)."""
        key = (uid, tile_id)
        if key not in self._rx_weight:
            u, tile = self.users[uid], self.tiles[tile_id]
            rel = tile.samples(self.subsamples) - u.position
            self._rx_weight[key] = float(np.mean(u.antenna.shape(u.antenna.off_axis(rel))))
        return self._rx_weight[key]

    # node helpers

    def user_node(self, uid: int) -> int:
        return len(self.tiles) + uid

    def is_tile(self, n: int) -> bool:
        return 0 <= n < len(self.tiles)

    def is_user(self, n: int) -> bool:
        return n >= len(self.tiles)

    def user_of(self, n: int) -> int:
        return n - len(self.tiles)

    def position(self, n: int) -> Vec3:
        return self.tiles[n].center if self.is_tile(n) else self.users[self.user_of(n)].position

    def link_between(self, a: int, b: int) -> Optional[Link]:
        k = int(self.L[a, b])
        return self.links[k] if k >= 0 else None

    def user_links(self, uid: int) -> list[Link]:
        n = self.user_node(uid)
        return [self.links[int(k)] for k in self.L[n] if k >= 0]

    def neighbors(self, n: int) -> list[int]:
        return [int(m) for m in np.nonzero(self.L[n] >= 0)[0]]

    def make_path(self, nodes: Sequence[int], links: Optional[Sequence[Link]] = None) -> Path:
        nodes = tuple(int(n) for n in nodes)
        if links is None:
            links = []
            for a, b in zip(nodes, nodes[1:]):
                l = self.link_between(a, b)
                if l is None:
                    l = self.virtual_link(a, b)
                links.append(l)
        gain = 1.0
        for n in nodes:
            if self.is_tile(n):
                gain *= self.tiles[n].gain
        return Path(nodes, tuple(links), gain, float(sum(l.delay for l in links)))

    def virtual_link(self, a: int, b: int) -> Link:
        """A link that exists physically but is not part of the graph (e.g. a stray hop)."""
        kind = LinkKind.USER_TILE if (self.is_user(a) or self.is_user(b)) else LinkKind.INTER_TILE
        return Link(a, b, float(np.linalg.norm(self.position(b) - self.position(a))), kind)

    def clear_deployments(self) -> None:
        for t in self.tiles:
            t.deployed = specular_function(t.normal) if t.virtual else None
        for l in self.links:
            l.tx_label = l.rx_label = None

    def configured(self, n: int) -> bool:
        return self.is_tile(n) and self.tiles[n].deployed is not None

    # wave helpers

    def user_link_inputs(self, uid: int, carrier: float) -> list[tuple[Link, WaveSpec]]:
        lam = C / carrier
        out = []
        u = self.users[uid]
        for link in self.user_links(uid):
            t = link.other(self.user_node(uid))
            p = self.tx_power.get((uid, t), 0.0)
            w = WaveSpec(WaveKind.FOCAL, carrier, unit(self.tiles[t].center - u.position), p,
                         LINEAR_X.copy(), (TWO_PI * link.length / lam) % TWO_PI, link.length)
            out.append((link, w))
        return out

    def cast(self, tile_id: int, direction: Vec3, ignore_users: Iterable[int] = ()) \
            -> Optional[tuple[int, float]]:
        """Node first struck by a ray leaving a tile center, with the distance travelled."""
        tile = self.tiles[tile_id]
        d = unit(direction)
        if float(d @ tile.normal) <= 1e-12:
            return None
        hit = ray_hit(tile.center, d, self.floorplan)
        limit = hit.distance if hit is not None else math.inf
        best_user, best_t = None, limit
        skip = set(ignore_users)
        for u in self.users:
            if u.id in skip:
                continue
            t = ray_sphere_entry(tile.center, d, u.sphere(self.sphere_radius))
            if t is not None and t < best_t:
                best_user, best_t = u.id, t
        if best_user is not None:
            return self.user_node(best_user), float(np.linalg.norm(self.users[best_user].position - tile.center))
        if hit is None:
            return None
        return self.tile_at(hit.surface, hit.point), hit.distance

    def tile_at(self, surface: int, point: Vec3) -> int:
        base, nu, nv = self._surface_grid[surface]
        s = self.floorplan.surfaces[surface]
        rel = point - s.origin
        a = float(rel @ s.edge_u) / float(s.edge_u @ s.edge_u)
        b = float(rel @ s.edge_v) / float(s.edge_v @ s.edge_v)
        i = min(max(int(math.floor(a * nu)), 0), nu - 1)
        j = min(max(int(math.floor(b * nv)), 0), nv - 1)
        return base + i * nv + j

    def follow(self, tile_id: int, prev: int, ignore_users: Iterable[int] = ()) -> Optional[int]:
        """Node reached by the deployed function of `tile_id` for a wave arriving from `prev`."""
        tile = self.tiles[tile_id]
        if tile.deployed is None:
            return None
        kind = WaveKind.FOCAL if self.is_user(prev) else WaveKind.PLANAR
        w = WaveSpec(kind, 2.4e9, unit(tile.center - self.position(prev)), 1.0)
        outs = apply_function(tile.deployed, w, self.profile, tile.normal)
        if not outs:
            return None
        hit = self.cast(tile_id, outs[0].direction, ignore_users)
        return None if hit is None else hit[0]

    # path queries

    def shortest_path(self, a: int, b: int, excluded_links: Iterable[int] = (),
                      excluded_nodes: Iterable[int] = ()) -> Optional[Path]:
        return shortest_path(self, a, b, excluded_links, excluded_nodes)

    def k_shortest_paths(self, k: int, a: int, b: int) -> list[Path]:
        return k_shortest_paths(self, k, a, b)


def build_graph(floorplan: Floorplan, tile_size: float, users: Sequence[UserNode],
                profile: EMProfile = DEFAULT_PROFILE, power_threshold_dbm: float = -250.0,
                **kw) -> PweGraph:
    g = PweGraph(floorplan, tile_size, profile, power_threshold_dbm, **kw)
    g.tile_surfaces()
    g.connect_tiles()
    g.set_users(users)
    return g


def _seq(pred: np.ndarray, n: int) -> list[int]:
    out = [n]
    while pred[out[-1]] >= 0:
        out.append(int(pred[out[-1]]))
    return out[::-1]


def shortest_path(g: PweGraph, a: int, b: int, excluded_links: Iterable[int] = (),
                  excluded_nodes: Iterable[int] = ()) -> Optional[Path]:
    """Minimum-delay path; ties go to fewer hops, then the smaller node-id sequence.

    Users other than the endpoints never relay.
    """
    if a == b:
        raise GraphError("source and target must differ")
    W = g.W
    ex_links = list(excluded_links)
    if ex_links:
        W = W.copy()
        for k in ex_links:
            l = g.links[k]
            W[l.a, l.b] = W[l.b, l.a] = np.inf
    n = g.n_nodes
    dist = np.full(n, np.inf)
    hops = np.zeros(n, dtype=np.int64)
    pred = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for x in excluded_nodes:
        if x != a and x != b:
            done[x] = True
    dist[a] = 0.0
    n_tiles = len(g.tiles)
    while True:
        cand = np.where(done, np.inf, dist)
        u = int(np.argmin(cand))
        if not np.isfinite(cand[u]):
            return None
        if u == b:
            break
        done[u] = True
        if u >= n_tiles and u != a:
            continue
        nd = dist[u] + W[u]
        open_ = ~done & np.isfinite(nd)
        better = open_ & (nd < dist)
        tie = np.nonzero(open_ & (nd == dist))[0]
        for v in tie:
            h_new, h_old = hops[u] + 1, hops[v]
            if h_new < h_old or (h_new == h_old and _seq(pred, u) < _seq(pred, int(pred[v]))):
                better[v] = True
        dist[better] = nd[better]
        hops[better] = hops[u] + 1
        pred[better] = u
    return g.make_path(_seq(pred, b))


def k_shortest_paths(g: PweGraph, k: int, a: int, b: int, use_cache: bool = True) -> list[Path]:
    """Up to k intermediate-node-disjoint paths, extracted greedily in delay order."""
    if k < 1:
        raise GraphError("k must be at least 1")
    if use_cache and g.is_tile(a) and g.is_tile(b) and k <= g.cache_k:
        key = (a, b)
        if key not in g.path_cache:
            g.path_cache[key] = [p for p in _disjoint(g, g.cache_k, a, b)
                                 if p.gain_product >= g.gain_threshold]
        return g.path_cache[key][:k]
    return _disjoint(g, k, a, b)


def _disjoint(g: PweGraph, k: int, a: int, b: int) -> list[Path]:
    out: list[Path] = []
    ex_nodes: set[int] = set()
    ex_links: set[int] = set()
    while len(out) < k:
        p = shortest_path(g, a, b, ex_links, ex_nodes)
        if p is None:
            break
        out.append(p)
        inner = p.nodes[1:-1]
        if not inner:
            ex_links.add(p.links[0].index)
        ex_nodes.update(inner)
    return out
