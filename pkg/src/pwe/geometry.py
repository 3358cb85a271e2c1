"""3D primitives, floorplans, ray casting and the geometric predicates used by objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

Vec3 = np.ndarray

AHEAD_EPS = 1e-6      # meters; hits closer than this are self-intersections
NORM_TOL = 1e-9


class GeometryError(ValueError):
    pass


class TrajectoryError(GeometryError):
    pass


def vec(x: float, y: float, z: float) -> Vec3:
    return np.array([x, y, z], dtype=float)


def unit(v: Sequence[float]) -> Vec3:
    a = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(a))
    if n == 0.0:
        raise GeometryError("cannot normalize a zero vector")
    return a / n


def specular_reflect(d: Vec3, n: Vec3) -> Vec3:
    """Mirror direction `d` about the plane with unit normal `n`."""
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    return d - 2.0 * float(np.dot(d, n)) * n


@dataclass(frozen=True, eq=False)
class Surface:
    origin: Vec3
    edge_u: Vec3
    edge_v: Vec3
    normal: Vec3
    coated: bool = True
    name: str = ""

    def __post_init__(self) -> None:
        for attr in ("origin", "edge_u", "edge_v", "normal"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        if abs(np.linalg.norm(self.normal) - 1.0) > NORM_TOL:
            raise GeometryError(f"surface {self.name!r}: normal is not unit")
        lu, lv = np.linalg.norm(self.edge_u), np.linalg.norm(self.edge_v)
        if abs(np.dot(self.normal, self.edge_u)) > NORM_TOL * max(lu, 1.0) or \
                abs(np.dot(self.normal, self.edge_v)) > NORM_TOL * max(lv, 1.0):
            raise GeometryError(f"surface {self.name!r}: normal not perpendicular to edges")
        if abs(np.dot(self.edge_u, self.edge_v)) > NORM_TOL * max(lu * lv, 1.0):
            raise GeometryError(f"surface {self.name!r}: edges are not perpendicular")

    @property
    def width(self) -> float:
        return float(np.linalg.norm(self.edge_u))

    @property
    def height(self) -> float:
        return float(np.linalg.norm(self.edge_v))

    def corners(self) -> list[Vec3]:
        o, u, v = self.origin, self.edge_u, self.edge_v
        return [o, o + u, o + v, o + u + v]


@dataclass(frozen=True)
class Sphere:
    center: Vec3
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise GeometryError("sphere radius must be positive")


@dataclass(frozen=True)
class Hit:
    surface: int
    point: Vec3
    distance: float


class Floorplan:
    """A set of rectangular surfaces inside an axis-aligned bounding box.

    Surface data is also packed into arrays so ray casts test every panel at once.
    """

    def __init__(self, surfaces: Sequence[Surface], bounds: tuple[Vec3, Vec3]):
        self.surfaces = list(surfaces)
        self.bounds = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
        lo, hi = self.bounds
        for s in self.surfaces:
            for c in s.corners():
                if np.any(c < lo - 1e-9) or np.any(c > hi + 1e-9):
                    raise GeometryError(f"surface {s.name!r} lies outside the bounds")
        if self.surfaces:
            self._o = np.stack([s.origin for s in self.surfaces])
            self._u = np.stack([s.edge_u for s in self.surfaces])
            self._v = np.stack([s.edge_v for s in self.surfaces])
            self._n = np.stack([s.normal for s in self.surfaces])
        else:
            self._o = self._u = self._v = self._n = np.zeros((0, 3))
        self._uu = np.einsum("ij,ij->i", self._u, self._u)
        self._vv = np.einsum("ij,ij->i", self._v, self._v)

    def contains(self, p: Vec3, tol: float = 1e-9) -> bool:
        lo, hi = self.bounds
        return bool(np.all(p >= lo - tol) and np.all(p <= hi + tol))

    def ray_hit(self, origin: Vec3, direction: Vec3) -> Optional[Hit]:
        return ray_hit(origin, direction, self)


def ray_hit(origin: Vec3, direction: Vec3, floorplan: Floorplan) -> Optional[Hit]:
    """Nearest surface strictly ahead of `origin`, or None when the ray escapes.

    Coincident faces (two sides of a thin wall) resolve to the face looking back at the ray.
    """
    fp = floorplan
    if not fp.surfaces:
        return None
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    denom = fp._n @ d
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = np.einsum("ij,ij->i", fp._n, fp._o - o) / denom
    ok = (np.abs(denom) > 1e-12) & (t > AHEAD_EPS)
    if not ok.any():
        return None
    p = o + np.outer(np.where(ok, t, 0.0), d)
    rel = p - fp._o
    a = np.einsum("ij,ij->i", rel, fp._u) / fp._uu
    b = np.einsum("ij,ij->i", rel, fp._v) / fp._vv
    inside = ok & (a >= -1e-9) & (a <= 1 + 1e-9) & (b >= -1e-9) & (b <= 1 + 1e-9)
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return None
    # distance first, then prefer the face whose normal opposes the ray
    best = min(idx, key=lambda i: (round(float(t[i]), 9), float(denom[i]) >= 0, int(i)))
    return Hit(int(best), p[best].copy(), float(t[best]))


def segments_occluded(p0: np.ndarray, p1: np.ndarray, floorplan: Floorplan,
                      chunk: int = 4096) -> np.ndarray:
    """Boolean mask: segment i crosses some surface away from its own endpoints."""
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    out = np.zeros(len(p0), dtype=bool)
    fp = floorplan
    if not fp.surfaces or len(p0) == 0:
        return out
    for start in range(0, len(p0), chunk):
        a0 = p0[start:start + chunk]
        d = p1[start:start + chunk] - a0
        length = np.linalg.norm(d, axis=1)
        denom = d @ fp._n.T                                    # (N, S)
        num = (np.einsum("sj,sj->s", fp._n, fp._o)[None, :] - a0 @ fp._n.T)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        ok = (np.abs(denom) > 1e-12) & (t * length[:, None] > AHEAD_EPS) \
            & ((1.0 - t) * length[:, None] > AHEAD_EPS)
        t = np.where(ok, t, 0.0)
        hit = a0[:, None, :] + t[:, :, None] * d[:, None, :]    # (N, S, 3)
        rel = hit - fp._o[None, :, :]
        a = np.einsum("nsj,sj->ns", rel, fp._u) / fp._uu
        b = np.einsum("nsj,sj->ns", rel, fp._v) / fp._vv
        inside = ok & (a > 1e-9) & (a < 1 - 1e-9) & (b > 1e-9) & (b < 1 - 1e-9)
        out[start:start + chunk] = inside.any(axis=1)
    return out


def segment_sphere_distance(p0: Vec3, p1: Vec3, center: Vec3) -> float:
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    dd = float(d @ d)
    if dd == 0.0:
        raise GeometryError("degenerate segment")
    t = min(1.0, max(0.0, float((np.asarray(center) - p0) @ d) / dd))
    return float(np.linalg.norm(p0 + t * d - center))


def segment_intersects_sphere(p0: Vec3, p1: Vec3, s: Sphere) -> bool:
    return segment_sphere_distance(p0, p1, s.center) <= s.radius


def segments_hit_sphere(p0: np.ndarray, p1: np.ndarray, s: Sphere) -> np.ndarray:
    """Vectorized segment_intersects_sphere over many segments."""
    p0 = np.atleast_2d(p0)
    d = np.atleast_2d(p1) - p0
    dd = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", s.center - p0, d) / dd, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    return np.linalg.norm(closest - s.center, axis=1) <= s.radius


def ray_sphere_entry(origin: Vec3, direction: Vec3, s: Sphere) -> Optional[float]:
    """Distance along a unit-direction ray to where it first touches the sphere."""
    oc = np.asarray(origin, dtype=float) - s.center
    b = float(oc @ direction)
    c = float(oc @ oc) - s.radius ** 2
    disc = b * b - c
    if disc < 0:
        return None
    root = np.sqrt(disc)
    t0, t1 = -b - root, -b + root
    if t1 <= AHEAD_EPS:
        return None
    return max(t0, 0.0)


@dataclass(frozen=True)
class Trajectory:
    waypoints: tuple

    def __post_init__(self) -> None:
        pts = tuple(np.asarray(w, dtype=float) for w in self.waypoints)
        if len(pts) < 2:
            raise TrajectoryError("a trajectory needs at least two waypoints")
        for a, b in zip(pts, pts[1:]):
            if np.linalg.norm(b - a) == 0.0:
                raise TrajectoryError("consecutive waypoints must differ")
        object.__setattr__(self, "waypoints", pts)

    @property
    def length(self) -> float:
        return float(sum(np.linalg.norm(b - a) for a, b in zip(self.waypoints, self.waypoints[1:])))

    def sample(self, step: float) -> list[Vec3]:
        """Points every `step` meters of arc length, starting at the first waypoint."""
        if step <= 0:
            raise TrajectoryError("step must be positive")
        n = int(np.floor(self.length / step + 1e-9))
        return [self.point_at(i * step) for i in range(n + 1)]

    def point_at(self, s: float) -> Vec3:
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            seg = float(np.linalg.norm(b - a))
            if s <= seg + 1e-12:
                return a + (b - a) * (max(s, 0.0) / seg)
            s -= seg
        return self.waypoints[-1].copy()

    def tangent_at(self, at: Vec3) -> Vec3:
        at = np.asarray(at, dtype=float)
        best, best_d = None, np.inf
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            d = b - a
            dd = float(d @ d)
            if dd == 0.0:
                raise TrajectoryError("degenerate trajectory segment")
            t = min(1.0, max(0.0, float((at - a) @ d) / dd))
            dist = float(np.linalg.norm(a + t * d - at))
            if dist < best_d - 1e-12:
                best, best_d = d, dist
        return best / np.linalg.norm(best)


def deviation_from_perpendicular(p0: Vec3, p1: Vec3, traj: Trajectory, at: Vec3) -> float:
    """Degrees by which the link p0->p1 departs from perpendicular to the trajectory at `at`."""
    link = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    if float(np.linalg.norm(link)) == 0.0:
        raise GeometryError("degenerate link")
    tangent = traj.tangent_at(at)
    c = abs(float(unit(link) @ tangent))
    return float(np.degrees(np.arcsin(min(1.0, c))))


# floorplan builders

def _rect(origin, eu, ev, normal, coated, name) -> Surface:
    return Surface(vec(*origin), vec(*eu), vec(*ev), vec(*normal), coated, name)


def box_room(lx: float, ly: float, h: float = 3.0, coated: Iterable[str] = ("floor", "ceiling", "walls"),
             walls: Sequence[tuple] = ()) -> Floorplan:
    """Rectangular room with its lower-left corner at the origin.

    `walls` adds internal full-height walls as (x0, y0, x1, y1, coated); each gets two faces.
    """
    coated = set(coated)
    if "all" in coated:
        coated |= {"floor", "ceiling", "walls", "internal"}
    w = "walls" in coated
    surfaces = [
        _rect((0, 0, 0), (lx, 0, 0), (0, ly, 0), (0, 0, 1), "floor" in coated, "floor"),
        _rect((0, 0, h), (lx, 0, 0), (0, ly, 0), (0, 0, -1), "ceiling" in coated, "ceiling"),
        _rect((0, 0, 0), (lx, 0, 0), (0, 0, h), (0, 1, 0), w, "wall-south"),
        _rect((0, ly, 0), (lx, 0, 0), (0, 0, h), (0, -1, 0), w, "wall-north"),
        _rect((0, 0, 0), (0, ly, 0), (0, 0, h), (1, 0, 0), w, "wall-west"),
        _rect((lx, 0, 0), (0, ly, 0), (0, 0, h), (-1, 0, 0), w, "wall-east"),
    ]
    for k, spec in enumerate(walls):
        x0, y0, x1, y1 = spec[:4]
        wc = spec[4] if len(spec) > 4 else ("internal" in coated)
        surfaces.extend(internal_wall((x0, y0), (x1, y1), h, wc, f"inner{k}"))
    return Floorplan(surfaces, (vec(0, 0, 0), vec(lx, ly, h)))


def internal_wall(a: tuple, b: tuple, h: float, coated: bool, name: str) -> list[Surface]:
    along = vec(b[0] - a[0], b[1] - a[1], 0.0)
    n = unit(vec(-along[1], along[0], 0.0))
    up = vec(0, 0, h)
    o = vec(a[0], a[1], 0.0)
    return [Surface(o, along, up, n, coated, name + "+"),
            Surface(o, along, up, -n, coated, name + "-")]
