"""Stack-based ray propagation through deployed tile functions."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .em_model import ConfigurationError, EMProfile, TileFunction, WaveSpec, apply_function, Absorb
from .geometry import unit
from .pwe_graph import Link, Path, PweGraph, specular_function, w_to_dbm


class BrokenPathError(RuntimeError):
    pass


@dataclass
class RayStats:
    spawned: int = 0
    reached: int = 0
    absorbed: int = 0
    sub_threshold: int = 0
    over_bounce: int = 0
    escaped: int = 0

    def balanced(self) -> bool:
        return self.spawned == (self.reached + self.absorbed + self.sub_threshold
                                + self.over_bounce + self.escaped)


@dataclass(frozen=True, eq=False)
class Arrival:
    path: Path
    wave: WaveSpec            # as it reaches the receiver sphere
    source: int
    rx_gain: float            # receive lobe weighting applied on arrival
    useful: bool = False

    @property
    def power(self) -> float:
        return self.wave.power * self.rx_gain

    @property
    def delay(self) -> float:
        return self.path.total_delay


@dataclass
class PropagationResult:
    arrivals: dict[int, list[Arrival]]
    stats: RayStats
    tile_hits: Counter = field(default_factory=Counter)


@dataclass
class _Ray:
    nodes: list
    links: list
    input: WaveSpec
    current: WaveSpec
    source: int
    bounces: int = 0


def _profile_for(g: PweGraph, gain: float, cache: dict) -> EMProfile:
    if gain == g.profile.intended_gain:
        return g.profile
    if gain not in cache:
        cache[gain] = replace(g.profile, intended_gain=gain, similarity_model="constant")
    return cache[gain]


def nlos_prop(g: PweGraph, receivers: Iterable[int],
              tx_inputs: Sequence[tuple[int, Sequence[tuple[Link, WaveSpec]]]],
              max_bounces: int = 50, min_power_dbm: float = -250.0,
              strict: bool = False, unconfigured: str = "absorb") -> PropagationResult:
    """Trace every transmitter input until it is received, absorbed, fades, or escapes.

    A ray is one wavefront followed hop by hop; extra outputs of a tile (split or
    parasitic) start new rays, so every ray ends in exactly one outcome.
    """
    rx_set = set(receivers)
    stats = RayStats()
    hits: Counter = Counter()
    arrivals: dict[int, list[Arrival]] = {r: [] for r in sorted(rx_set)}
    profiles: dict = {}
    fallback_absorb = TileFunction(Absorb())
    stack: list[_Ray] = []
    for uid, inputs in tx_inputs:
        un = g.user_node(uid)
        for link, wave in reversed(list(inputs)):
            stack.append(_Ray([un, link.other(un)], [link], wave, wave, uid))
            stats.spawned += 1

    while stack:
        ray = stack.pop()
        h = ray.nodes[-1]
        tile = g.tiles[h]
        hits[h] += 1
        f = tile.deployed
        if f is None:
            if strict:
                raise ConfigurationError(f"tile {h} has no deployed function")
            if unconfigured == "absorb":
                f = fallback_absorb
            else:
                f = specular_function(tile.normal)
        incoming = ray.current.with_(direction=unit(tile.center - g.position(ray.nodes[-2])))
        outs = apply_function(f, incoming, _profile_for(g, tile.gain, profiles), tile.normal)
        bounces = ray.bounces + 1
        if not outs:
            stats.absorbed += 1
            continue
        children: list[_Ray] = []
        for k, out in enumerate(outs):
            if k > 0:
                stats.spawned += 1
            if w_to_dbm(out.power) < min_power_dbm:
                stats.sub_threshold += 1
                continue
            hit = g.cast(h, out.direction)
            if hit is None:
                stats.escaped += 1
                continue
            node, _ = hit
            link = g.link_between(h, node) or g.virtual_link(h, node)
            if g.is_user(node):
                uid = g.user_of(node)
                if uid in rx_set:
                    stats.reached += 1
                    path = g.make_path(ray.nodes + [node], ray.links + [link])
                    arrivals[uid].append(Arrival(path, out, ray.source, g.rx_weight(uid, h)))
                else:
                    stats.absorbed += 1          # blocked by a bystander
                continue
            if bounces >= max_bounces:
                stats.over_bounce += 1
                continue
            children.append(_Ray(ray.nodes + [node], ray.links + [link], ray.input, out,
                                 ray.source, bounces))
        stack.extend(reversed(children))

    for r in arrivals:
        arrivals[r] = classify_useful(arrivals[r], r)
    return PropagationResult(arrivals, stats, hits)


def classify_useful(entries: Sequence[Arrival], rx: int) -> list[Arrival]:
    """Useful iff the first link is labeled for the source and the last for `rx`."""
    out = []
    for e in entries:
        first, last = e.path.links[0], e.path.links[-1]
        ok = first.tx_label == e.source and last.rx_label == rx
        out.append(replace(e, useful=ok))
    return sorted(out, key=lambda e: (e.delay, e.source, e.path.nodes))


class Totals(NamedTuple):
    total: float
    useful: float
    interference: float


def total_received(entries: Sequence[Arrival]) -> Totals:
    useful = float(sum(e.power for e in entries if e.useful))
    interf = float(sum(e.power for e in entries if not e.useful))
    return Totals(useful + interf, useful, interf)


@dataclass(frozen=True)
class PowerDelayProfile:
    rx: int
    entries: tuple

    @classmethod
    def of(cls, rx: int, arrivals: Sequence[Arrival]) -> "PowerDelayProfile":
        return cls(rx, tuple(sorted(arrivals, key=lambda e: (e.delay, e.source, e.path.nodes))))


def path_output(wave: WaveSpec, p: Path, g: PweGraph) -> WaveSpec:
    """Compose the deployed functions along `p`; raise if any tile sends the wave elsewhere."""
    profiles: dict = {}
    current = wave
    for i in range(1, len(p.nodes) - 1):
        h = p.nodes[i]
        if not g.is_tile(h):
            raise BrokenPathError(f"node {h} inside the path is not a tile")
        tile = g.tiles[h]
        if tile.deployed is None:
            raise BrokenPathError(f"tile {h} has no deployed function")
        incoming = current.with_(direction=unit(tile.center - g.position(p.nodes[i - 1])))
        outs = apply_function(tile.deployed, incoming, _profile_for(g, tile.gain, profiles), tile.normal)
        nxt = p.nodes[i + 1]
        for out in outs:
            hit = g.cast(h, out.direction)
            if hit is not None and hit[0] == nxt:
                current = out
                break
        else:
            raise BrokenPathError(f"tile {h} does not emit toward node {nxt}")
    return current
