"""Objective flags and the scores and predicates evaluated over path sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .geometry import Sphere, Trajectory, deviation_from_perpendicular, segment_intersects_sphere
from .pwe_graph import Path, PweGraph

INTERFERENCE_FREE = "interference-free"
ALL = "All"


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSet:
    max_power: bool = False
    max_sir: bool = False
    eaves: Optional[Union[str, tuple]] = None      # "All" or a tuple of protected user ids
    doppler: bool = False
    doppler_tolerance: float = 10.0
    block: bool = False
    d_th: float = 10e-9

    def __post_init__(self) -> None:
        if self.max_power and self.max_sir:
            raise ObjectiveError("MaxPower and MaxSIR cannot be combined")
        if self.block and (self.max_power or self.max_sir or self.eaves is not None or self.doppler):
            raise ObjectiveError("Block cannot be combined with other objectives")
        if self.d_th < 0:
            raise ObjectiveError("d_th must be non-negative")

    def flags(self) -> list[str]:
        out = []
        if self.max_power:
            out.append("MaxPower")
        if self.max_sir:
            out.append("MaxSIR")
        if self.eaves is not None:
            out.append("EavesMit")
        if self.doppler:
            out.append("DopplerMit")
        if self.block:
            out.append("Block")
        return out

    def protected(self, users: Sequence[int], tx: int, rx: int) -> list[int]:
        if self.eaves is None:
            return []
        pool = users if self.eaves == ALL else self.eaves
        return [u for u in pool if u not in (tx, rx)]


Inputs = Mapping[tuple, float]


def input_key(p: Path) -> tuple[int, int]:
    return p.nodes[0], p.nodes[1]


def path_power(p: Path, inputs: Inputs) -> float:
    return inputs[input_key(p)] * p.gain_product


def power_score(paths: Sequence[Path], inputs: Inputs) -> float:
    return float(sum(path_power(p, inputs) for p in paths))


def useful_power(paths: Sequence[Path], d_th: float, inputs: Inputs) -> tuple[float, list[Path]]:
    """Power of the paths arriving within `d_th` of the fastest one, and those paths."""
    if not paths:
        return 0.0, []
    first = min(p.total_delay for p in paths)
    sel = [p for p in paths if p.total_delay - first <= d_th]
    return power_score(sel, inputs), sel


def interference_power(all_paths: Sequence[Path], useful: Sequence[Path], inputs: Inputs) -> float:
    keep = {id(p) for p in useful}
    return power_score([p for p in all_paths if id(p) not in keep], inputs)


def sir(p_tot: float, interference: float) -> Union[float, str]:
    if p_tot < 0 or interference < 0:
        raise ObjectiveError("powers must be non-negative")
    if p_tot == 0:
        return 0.0
    if interference == 0:
        return INTERFERENCE_FREE
    return p_tot / interference


def eavesdrop_violations(path: Path, protected: Sequence[tuple[int, Sphere]], rx: int,
                         g: PweGraph) -> bool:
    """True iff some hop of the path crosses a protected sphere other than the endpoints'."""
    src = g.user_of(path.nodes[0]) if g.is_user(path.nodes[0]) else None
    for a, b in zip(path.nodes, path.nodes[1:]):
        pa, pb = g.position(a), g.position(b)
        for uid, sphere in protected:
            if uid == rx or uid == src:
                continue
            if segment_intersects_sphere(pa, pb, sphere):
                return True
    return False


def doppler_ok(path: Path, traj: Optional[Trajectory], tolerance: float,
               g: PweGraph) -> tuple[bool, float]:
    if traj is None:
        raise ObjectiveError("Doppler mitigation needs a receiver trajectory")
    last_tile, rx = path.nodes[-2], path.nodes[-1]
    dev = deviation_from_perpendicular(g.position(last_tile), g.position(rx), traj, g.position(rx))
    return dev <= tolerance, dev
