"""Scenario files, end-to-end runs and report files.

Scenario grammar (one statement per line, `#` starts a comment)::

    [floorplan]
    room LX LY [H]                  # lower-left corner at the origin, H defaults to 3
    coat floor ceiling walls        # any of floor ceiling walls internal, or all / none
    wall X0 Y0 X1 Y1 [coated|uncoated]
    tile_size 1

    [profile]                       # optional, defaults to the constant-gain profile
    include FILE                    # read a profile file (same key-value lines)
    gain 0.99
    similarity cosine exponent=2
    supported Abs Str Col
    parasitic unintended 0.01 [DX,DY,DZ]

    [users]
    # ID X Y Z ALPHA PHI [theta=DEG] [power=DBM] [authorized=yes|no] [traj=X,Y,Z;X,Y,Z;...]
    0 1.0 10.0 1.0 10 0 theta=0

    [pairs]
    0 -> 2 : MaxPower, EavesMit[All]
    1 -> 3,4 : MaxSIR, EavesMit[All]      # multicast: one pair per receiver
    5 -> * : Block
    1 -> 0 : MaxPower, EavesMit[0], DopplerMit[10]

    [params]
    frequency 2.4e9
    ...
"""
from __future__ import annotations

import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np

from .configurator import Deployment, PairRequest, kp_config
from .em_model import ALL_KINDS, SIMILARITY_MODELS, Absorb, EMProfile, Parasitic, Steer
from .geometry import Trajectory, box_room, deviation_from_perpendicular, vec
from .objectives import ALL, INTERFERENCE_FREE, ObjectiveSet, sir
from .propagation import PropagationResult, nlos_prop, total_received
from .pwe_graph import AntennaPattern, PweGraph, UserNode, build_graph, specular_function, w_to_dbm

WORKERS_ENV = "PWE_WORKERS"
DISCONNECTED = "disconnected"
SECTIONS = ("floorplan", "profile", "users", "pairs", "params")
OBJECTIVE_NAMES = ("MaxPower", "MaxSIR", "EavesMit", "DopplerMit", "Block")


class ScenarioError(ValueError):
    """Parse or validation failure, anchored to a line when one is known."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<scenario>"):
        self.message, self.line, self.source = message, line, source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# scenario model

@dataclass(frozen=True)
class WallSpec:
    x0: float
    y0: float
    x1: float
    y1: float
    coated: Optional[bool] = None     # None follows the "internal" coat selector


@dataclass(frozen=True)
class FloorplanSpec:
    lx: float
    ly: float
    height: float = 3.0
    coat: tuple = ("ceiling", "floor", "walls")
    walls: tuple = ()
    tile_size: float = 1.0

    def build(self):
        walls = [(w.x0, w.y0, w.x1, w.y1) if w.coated is None else (w.x0, w.y0, w.x1, w.y1, w.coated)
                 for w in self.walls]
        return box_room(self.lx, self.ly, self.height, self.coat, walls)


@dataclass(frozen=True)
class ProfileSpec:
    gain: float = 0.99
    similarity: str = "constant"
    similarity_params: tuple = ()
    supported: tuple = tuple(sorted(ALL_KINDS))
    parasitic: tuple = ()             # (trigger, fraction, direction or None)

    def build(self) -> EMProfile:
        para = tuple(Parasitic(t, f, None if d is None else np.array(d)) for t, f, d in self.parasitic)
        return EMProfile(frozenset(self.supported), self.gain, self.similarity,
                         dict(self.similarity_params), para)


@dataclass(frozen=True)
class UserSpec:
    id: int
    position: tuple
    alpha: float
    phi: float
    theta: float = 0.0
    tx_power_dbm: float = -30.0
    authorized: bool = True
    trajectory: Optional[tuple] = None


@dataclass(frozen=True)
class PairSpec:
    tx: int
    rx: int
    objective: ObjectiveSet
    line: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class Params:
    frequency: float = 2.4e9
    max_bounces: int = 50
    min_power_dbm: float = -250.0
    d_th: float = 10e-9
    sphere_radius: float = 0.5
    security_priority: bool = True
    absorb_cleanup: bool = True
    seed: int = 0
    quota_basis: str = "paths"
    lobe_convention: str = "half"
    natural_gain: float = 1.0
    block_target: str = "nearest"
    step: float = 0.125
    steps: int = 0
    serial: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    floorplan: FloorplanSpec
    profile: ProfileSpec
    users: tuple
    pairs: tuple
    params: Params = Params()

    def user_nodes(self) -> list[UserNode]:
        out = []
        for u in self.users:
            ant = AntennaPattern(u.alpha, u.phi, u.theta, u.tx_power_dbm, self.params.lobe_convention)
            traj = Trajectory([vec(*p) for p in u.trajectory]) if u.trajectory else None
            out.append(UserNode(u.id, vec(*u.position), ant, traj, u.authorized))
        return out

    def pair_requests(self) -> list[PairRequest]:
        out, seen = [], set()
        for p in self.pairs:
            key = (min(p.tx, p.rx), max(p.tx, p.rx), p.objective)
            if key in seen:
                continue            # symmetric duplicate
            seen.add(key)
            out.append(PairRequest(p.tx, p.rx, p.objective))
        return out

    def transmitters(self) -> list[int]:
        return sorted({p.tx for p in self.pairs})


# parsing

_BOOL = {"yes": True, "true": True, "on": True, "1": True,
         "no": False, "false": False, "off": False, "0": False}


def _bool(tok: str, line: int, src: str) -> bool:
    try:
        return _BOOL[tok.lower()]
    except KeyError:
        raise ScenarioError(f"expected yes/no, got {tok!r}", line, src) from None


def _num(tok: str, line: int, src: str, what: str = "number") -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ScenarioError(f"expected {what}, got {tok!r}", line, src) from None
    if not math.isfinite(v):
        raise ScenarioError(f"{what} must be finite", line, src)
    return v


def _int(tok: str, line: int, src: str, what: str = "integer") -> int:
    try:
        return int(tok)
    except ValueError:
        raise ScenarioError(f"expected {what}, got {tok!r}", line, src) from None


def _triple(tok: str, line: int, src: str) -> tuple:
    parts = tok.split(",")
    if len(parts) != 3:
        raise ScenarioError(f"expected X,Y,Z, got {tok!r}", line, src)
    return tuple(_num(p, line, src, "coordinate") for p in parts)


def _lines(text: str):
    for k, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            yield k, s


_PARAM_TYPES = {f.name: f.type for f in fields(Params)}


def _param_value(key: str, tok: str, line: int, src: str):
    kind = _PARAM_TYPES[key]
    if kind == "bool":
        return _bool(tok, line, src)
    if kind == "int":
        return _int(tok, line, src)
    if kind == "float":
        return _num(tok, line, src)
    return tok


def _parse_profile_line(key: str, args: list[str], acc: dict, line: int, src: str,
                        base_dir: Optional[FsPath]) -> None:
    if key == "include":
        if len(args) != 1:
            raise ScenarioError("include takes one file name", line, src)
        p = FsPath(args[0])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        try:
            text = p.read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read profile file: {exc.strerror}", line, src) from None
        for k2, s in _lines(text):
            head, *rest = s.split()
            _parse_profile_line(head, rest, acc, k2, str(p), p.parent)
    elif key == "gain":
        acc["gain"] = _num(args[0] if args else "", line, src, "gain")
    elif key == "similarity":
        if not args or args[0] not in SIMILARITY_MODELS:
            raise ScenarioError(f"similarity model must be one of {sorted(SIMILARITY_MODELS)}", line, src)
        acc["similarity"] = args[0]
        kv = []
        for a in args[1:]:
            name, _, val = a.partition("=")
            kv.append((name, _num(val, line, src, f"value of {name}")))
        acc["similarity_params"] = tuple(sorted(kv))
    elif key == "supported":
        bad = [a for a in args if a not in ALL_KINDS]
        if bad or not args:
            raise ScenarioError(f"unknown function kinds {bad}; use {sorted(ALL_KINDS)}", line, src)
        acc["supported"] = tuple(sorted(set(args)))
    elif key == "parasitic":
        if len(args) not in (2, 3) or args[0] not in ("always", "intended", "unintended"):
            raise ScenarioError("parasitic takes TRIGGER FRACTION [DX,DY,DZ]", line, src)
        d = _triple(args[2], line, src) if len(args) == 3 else None
        acc.setdefault("parasitic", [])
        acc["parasitic"].append((args[0], _num(args[1], line, src, "fraction"), d))
    else:
        raise ScenarioError(f"unknown profile key {key!r}", line, src)


def _finish_profile(acc: dict, line: Optional[int], src: str) -> ProfileSpec:
    acc = dict(acc)
    if "parasitic" in acc:
        acc["parasitic"] = tuple(acc["parasitic"])
    spec = ProfileSpec(**acc)
    try:
        spec.build()
    except ValueError as exc:
        raise ScenarioError(str(exc), line, src) from None
    return spec


def load_profile(path) -> ProfileSpec:
    """Read a standalone profile file made of [profile] section lines."""
    p = FsPath(path)
    acc: dict = {}
    for k, s in _lines(p.read_text()):
        if s.startswith("["):
            continue
        head, *rest = s.split()
        _parse_profile_line(head, rest, acc, k, str(p), p.parent)
    return _finish_profile(acc, None, str(p))


_PAIR_RE = re.compile(r"^(\d+)\s*->\s*([\d,\s]+|\*)\s*:\s*(.+)$")
_FLAG_RE = re.compile(r"^(\w+)\s*(?:\[(.*)\])?$")


def _split_flags(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _parse_objective(text: str, d_th: float, line: int, src: str) -> ObjectiveSet:
    kw: dict = {"d_th": d_th}
    for flag in _split_flags(text):
        m = _FLAG_RE.match(flag)
        if not m:
            raise ScenarioError(f"malformed objective {flag!r}", line, src)
        name, arg = m.group(1), m.group(2)
        if name == "EavMit":
            name = "EavesMit"
        if name not in OBJECTIVE_NAMES:
            raise ScenarioError(f"unknown objective {name!r}; use {', '.join(OBJECTIVE_NAMES)}", line, src)
        arg = (arg or "").strip().strip("[]").strip()
        if name == "MaxPower":
            kw["max_power"] = True
        elif name == "MaxSIR":
            kw["max_sir"] = True
        elif name == "Block":
            kw["block"] = True
        elif name == "EavesMit":
            if arg in ("", ALL):
                kw["eaves"] = ALL
            else:
                kw["eaves"] = tuple(sorted(_int(a.strip(), line, src, "user id") for a in arg.split(",")))
        elif name == "DopplerMit":
            kw["doppler"] = True
            if arg and arg != "trajectory":
                kw["doppler_tolerance"] = _num(arg, line, src, "tolerance")
    try:
        return ObjectiveSet(**kw)
    except ValueError as exc:
        raise ScenarioError(str(exc), line, src) from None


def parse_scenario(text: str, name: str = "scenario", source: str = "<scenario>",
                   base_dir: Optional[FsPath] = None) -> Scenario:
    src = source
    section = None
    fp: dict = {}
    fp_line: Optional[int] = None
    prof: dict = {}
    users: list[UserSpec] = []
    user_lines: dict[int, int] = {}
    raw_pairs: list[tuple[int, str]] = []
    params: dict = {}
    seen_sections: set[str] = set()

    for line, s in _lines(text):
        if s.startswith("["):
            m = re.match(r"^\[(\w+)\]$", s)
            if not m or m.group(1) not in SECTIONS:
                raise ScenarioError(f"unknown section {s!r}; use {', '.join('[%s]' % x for x in SECTIONS)}",
                                    line, src)
            section = m.group(1)
            if section in seen_sections:
                raise ScenarioError(f"section [{section}] appears twice", line, src)
            seen_sections.add(section)
            continue
        if section is None:
            raise ScenarioError("statement outside any section", line, src)
        head, *args = s.split()

        if section == "floorplan":
            if head == "room":
                if len(args) not in (2, 3):
                    raise ScenarioError("room takes LX LY [H]", line, src)
                dims = [_num(a, line, src, "dimension") for a in args]
                if any(d <= 0 for d in dims):
                    raise ScenarioError("room dimensions must be positive", line, src)
                fp["lx"], fp["ly"] = dims[0], dims[1]
                if len(dims) == 3:
                    fp["height"] = dims[2]
                fp_line = line
            elif head == "coat":
                allowed = {"floor", "ceiling", "walls", "internal", "all", "none"}
                bad = [a for a in args if a not in allowed]
                if bad or not args:
                    raise ScenarioError(f"coat selectors must be among {sorted(allowed)}", line, src)
                sel = set(args) - {"none"}
                if "all" in sel:
                    sel = {"floor", "ceiling", "walls", "internal"}
                fp["coat"] = tuple(sorted(sel))
            elif head == "wall":
                if len(args) not in (4, 5):
                    raise ScenarioError("wall takes X0 Y0 X1 Y1 [coated|uncoated]", line, src)
                xy = [_num(a, line, src, "coordinate") for a in args[:4]]
                if xy[0] == xy[2] and xy[1] == xy[3]:
                    raise ScenarioError("wall endpoints coincide", line, src)
                coated = None
                if len(args) == 5:
                    if args[4] not in ("coated", "uncoated"):
                        raise ScenarioError("wall coating must be coated or uncoated", line, src)
                    coated = args[4] == "coated"
                fp.setdefault("walls", []).append(WallSpec(*xy, coated))
            elif head == "tile_size":
                ts = _num(args[0] if args else "", line, src, "tile size")
                if ts <= 0:
                    raise ScenarioError("tile size must be positive", line, src)
                fp["tile_size"] = ts
            else:
                raise ScenarioError(f"unknown floorplan statement {head!r}", line, src)

        elif section == "profile":
            _parse_profile_line(head, args, prof, line, src, base_dir)

        elif section == "users":
            toks = s.split()
            if len(toks) < 6:
                raise ScenarioError("user line needs ID X Y Z ALPHA PHI", line, src)
            uid = _int(toks[0], line, src, "user id")
            if uid in user_lines:
                raise ScenarioError(f"user {uid} defined twice (first on line {user_lines[uid]})", line, src)
            pos = tuple(_num(t, line, src, "coordinate") for t in toks[1:4])
            alpha, phi = _num(toks[4], line, src, "alpha"), _num(toks[5], line, src, "phi")
            if not 0 < alpha <= 360:
                raise ScenarioError("alpha must lie in (0, 360]", line, src)
            kw: dict = {}
            for t in toks[6:]:
                key, eq, val = t.partition("=")
                if not eq:
                    raise ScenarioError(f"expected key=value, got {t!r}", line, src)
                if key == "theta":
                    kw["theta"] = _num(val, line, src, "theta")
                elif key == "power":
                    kw["tx_power_dbm"] = _num(val, line, src, "power")
                elif key == "authorized":
                    kw["authorized"] = _bool(val, line, src)
                elif key == "traj":
                    pts = tuple(_triple(p, line, src) for p in val.split(";") if p)
                    if len(pts) < 2:
                        raise ScenarioError("a trajectory needs at least two waypoints", line, src)
                    kw["trajectory"] = pts
                else:
                    raise ScenarioError(f"unknown user attribute {key!r}", line, src)
            users.append(UserSpec(uid, pos, alpha, phi, **kw))
            user_lines[uid] = line

        elif section == "pairs":
            raw_pairs.append((line, s))

        elif section == "params":
            if head == "tile_size":
                fp["tile_size"] = _num(args[0] if args else "", line, src, "tile size")
                continue
            if head not in _PARAM_TYPES:
                raise ScenarioError(f"unknown parameter {head!r}", line, src)
            if len(args) != 1:
                raise ScenarioError(f"parameter {head} takes one value", line, src)
            params[head] = _param_value(head, args[0], line, src)

    if "lx" not in fp:
        raise ScenarioError("missing 'room' statement in [floorplan]", None, src)
    if "walls" in fp:
        fp["walls"] = tuple(fp["walls"])
    fspec = FloorplanSpec(**fp)
    pspec = _finish_profile(prof, None, src)
    par = Params(**params)
    _check_params(par, src)

    users.sort(key=lambda u: u.id)
    if [u.id for u in users] != list(range(len(users))):
        raise ScenarioError("user ids must be 0..n-1 without gaps", None, src)
    for u in users:
        x, y, z = u.position
        if not (0 <= x <= fspec.lx and 0 <= y <= fspec.ly and 0 <= z <= fspec.height):
            raise ScenarioError(f"user {u.id} lies outside the room", user_lines[u.id], src)
        for p in u.trajectory or ():
            if not (0 <= p[0] <= fspec.lx and 0 <= p[1] <= fspec.ly and 0 <= p[2] <= fspec.height):
                raise ScenarioError(f"trajectory of user {u.id} leaves the room", user_lines[u.id], src)

    pairs: list[PairSpec] = []
    ids = {u.id for u in users}
    for line, s in raw_pairs:
        m = _PAIR_RE.match(s)
        if not m:
            raise ScenarioError("pair line must read 'TX -> RX[,RX...] : Objective, ...'", line, src)
        tx = int(m.group(1))
        obj = _parse_objective(m.group(3), par.d_th, line, src)
        if tx not in ids:
            raise ScenarioError(f"unknown user {tx}", line, src)
        if m.group(2).strip() == "*":
            if not obj.block:
                raise ScenarioError("'*' receiver is only valid with Block", line, src)
            pairs.append(PairSpec(tx, tx, obj, line))
            continue
        if obj.block:
            raise ScenarioError("Block pairs use '*' as receiver", line, src)
        for r in m.group(2).split(","):
            rx = _int(r.strip(), line, src, "user id")
            if rx not in ids:
                raise ScenarioError(f"unknown user {rx}", line, src)
            if rx == tx:
                raise ScenarioError("a pair needs two distinct users", line, src)
            if obj.eaves not in (None, ALL) and any(e not in ids for e in obj.eaves):
                raise ScenarioError("EavesMit names an unknown user", line, src)
            if obj.doppler and users[rx].trajectory is None:
                raise ScenarioError(f"DopplerMit needs a trajectory for receiver {rx}", line, src)
            pairs.append(PairSpec(tx, rx, obj, line))
    return Scenario(name, fspec, pspec, tuple(users), tuple(pairs), par)


def _check_params(p: Params, src: str) -> None:
    problems = []
    if p.frequency <= 0:
        problems.append("frequency must be positive")
    if p.max_bounces < 1:
        problems.append("max_bounces must be at least 1")
    if p.d_th < 0:
        problems.append("d_th must be non-negative")
    if p.sphere_radius <= 0:
        problems.append("sphere_radius must be positive")
    if p.quota_basis not in ("paths", "pairs"):
        problems.append("quota_basis must be paths or pairs")
    if p.lobe_convention not in ("half", "full"):
        problems.append("lobe_convention must be half or full")
    if p.block_target not in ("nearest", "random"):
        problems.append("block_target must be nearest or random")
    if not 0 < p.natural_gain <= 1:
        problems.append("natural_gain must lie in (0, 1]")
    if p.step <= 0:
        problems.append("step must be positive")
    if p.steps < 0:
        problems.append("steps must be non-negative")
    if problems:
        raise ScenarioError("; ".join(problems), None, src)


def load_scenario(path) -> Scenario:
    p = FsPath(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", None, str(p)) from None
    return parse_scenario(text, p.stem, str(p), p.parent)


def _fmt(x: float) -> str:
    return repr(float(x))


def _objective_text(o: ObjectiveSet) -> str:
    out = []
    if o.max_power:
        out.append("MaxPower")
    if o.max_sir:
        out.append("MaxSIR")
    if o.eaves is not None:
        out.append("EavesMit[All]" if o.eaves == ALL else "EavesMit[%s]" % ",".join(map(str, o.eaves)))
    if o.doppler:
        out.append(f"DopplerMit[{_fmt(o.doppler_tolerance)}]")
    if o.block:
        out.append("Block")
    return ", ".join(out)


def dump_scenario(sc: Scenario) -> str:
    """Canonical text for `sc` with every default written out."""
    f = sc.floorplan
    out = ["[floorplan]", f"room {_fmt(f.lx)} {_fmt(f.ly)} {_fmt(f.height)}",
           "coat " + (" ".join(f.coat) if f.coat else "none"), f"tile_size {_fmt(f.tile_size)}"]
    for w in f.walls:
        tail = "" if w.coated is None else (" coated" if w.coated else " uncoated")
        out.append(f"wall {_fmt(w.x0)} {_fmt(w.y0)} {_fmt(w.x1)} {_fmt(w.y1)}{tail}")
    pr = sc.profile
    out += ["", "[profile]", f"gain {_fmt(pr.gain)}",
            " ".join(["similarity", pr.similarity] + [f"{k}={_fmt(v)}" for k, v in pr.similarity_params]),
            "supported " + " ".join(pr.supported)]
    for t, frac, d in pr.parasitic:
        out.append(f"parasitic {t} {_fmt(frac)}" + ("" if d is None else " " + ",".join(map(_fmt, d))))
    out += ["", "[users]"]
    for u in sc.users:
        line = [str(u.id)] + [_fmt(c) for c in u.position] + [_fmt(u.alpha), _fmt(u.phi),
                f"theta={_fmt(u.theta)}", f"power={_fmt(u.tx_power_dbm)}",
                f"authorized={'yes' if u.authorized else 'no'}"]
        if u.trajectory:
            line.append("traj=" + ";".join(",".join(map(_fmt, p)) for p in u.trajectory))
        out.append(" ".join(line))
    out += ["", "[pairs]"]
    for p in sc.pairs:
        rx = "*" if p.objective.block else str(p.rx)
        out.append(f"{p.tx} -> {rx} : {_objective_text(p.objective)}")
    out += ["", "[params]"]
    for fl in fields(Params):
        v = getattr(sc.params, fl.name)
        out.append(f"{fl.name} {('yes' if v else 'no') if isinstance(v, bool) else _fmt(v) if isinstance(v, float) else v}")
    return "\n".join(out) + "\n"


# running

@dataclass
class PairResult:
    tx: int
    rx: int
    objective: str
    received: float             # useful power in pwe mode, everything from tx in natural mode
    useful: Optional[float]
    interference: Optional[float]
    sir: object
    paths: int
    connected: bool


@dataclass
class TrajectoryRecord:
    step: int
    position: tuple
    deviation: Optional[float]      # worst selected last-link deviation
    min_deviation: Optional[float]  # best deviation any receiver link offers
    received: float
    paths: int
    tiles: tuple


@dataclass
class RunReport:
    scenario: str
    mode: str
    seed: int
    n_users: int
    n_tiles: int
    coated_tiles: int
    configured: int
    matrix: list                       # [tx][rx] watts
    pairs: list
    receivers: dict                    # rx -> Totals (useful/interference only in pwe mode)
    pdp: dict                          # rx -> list of Arrival
    tile_usage: list                   # (tile id, surface name, virtual, function, rays)
    stats: object
    skipped: list = field(default_factory=list)
    partial_blocks: list = field(default_factory=list)
    serial: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @property
    def configured_fraction(self) -> float:
        return self.configured / self.coated_tiles if self.coated_tiles else 0.0


def build_scenario_graph(sc: Scenario) -> PweGraph:
    p = sc.params
    return build_graph(sc.floorplan.build(), sc.floorplan.tile_size, sc.user_nodes(),
                       sc.profile.build(), p.min_power_dbm, sphere_radius=p.sphere_radius,
                       natural_gain=p.natural_gain)


def _configure(g: PweGraph, sc: Scenario, pairs: Sequence[PairRequest]) -> Deployment:
    p = sc.params
    rng = np.random.default_rng(p.seed) if p.block_target == "random" else None
    return kp_config(g, pairs, p.frequency, p.absorb_cleanup, p.quota_basis,
                     security_priority=p.security_priority, rng=rng)


def _naturalize(g: PweGraph) -> None:
    for t in g.tiles:
        t.deployed = specular_function(t.normal)
    for l in g.links:
        l.tx_label = l.rx_label = None


def _propagate(g: PweGraph, sc: Scenario) -> PropagationResult:
    txs = [(u, g.user_link_inputs(u, sc.params.frequency)) for u in sc.transmitters()]
    return nlos_prop(g, range(len(g.users)), txs, sc.params.max_bounces, sc.params.min_power_dbm)


def _function_name(t) -> str:
    f = t.deployed
    if f is None:
        return "none"
    if t.virtual:
        return "natural"
    if isinstance(f.base, Absorb):
        return "Abs"
    if isinstance(f.base, Steer) and f.expected_input is None:
        return "Spec"
    return f.base.kind


def run(sc: Scenario, mode: str = "pwe", seed: Optional[int] = None, steps: Optional[int] = None,
        workers: Optional[int] = None) -> RunReport:
    if mode not in ("pwe", "natural"):
        raise ValueError("mode must be pwe or natural")
    if seed is not None or steps is not None:
        sc = replace(sc, params=replace(sc.params, seed=sc.params.seed if seed is None else seed,
                                        steps=sc.params.steps if steps is None else steps))
    g = build_scenario_graph(sc)
    pairs = sc.pair_requests()
    dep = None
    serial = []
    if mode == "pwe":
        if sc.params.serial:
            active = [q for q in pairs if not q.objective.block]
            for k in range(1, len(active) + 1):
                g.clear_deployments()
                d = _configure(g, sc, active[:k])
                serial.append((k, len(_path_tiles(g, d))))
            g.clear_deployments()
        dep = _configure(g, sc, pairs)
    else:
        _naturalize(g)
    res = _propagate(g, sc)
    report = _report(g, sc, mode, dep, res)
    report.serial = serial
    if _has_trajectory(sc):
        report.trajectory = run_trajectory(sc, mode, workers)
    return report


def _path_tiles(g: PweGraph, dep: Deployment) -> set[int]:
    return {t for t in dep.path_tiles() if not g.tiles[t].virtual}


def _has_trajectory(sc: Scenario) -> bool:
    return any(u.trajectory for u in sc.users)


def _report(g: PweGraph, sc: Scenario, mode: str, dep: Optional[Deployment],
            res: PropagationResult) -> RunReport:
    n = len(g.users)
    matrix = [[0.0] * n for _ in range(n)]
    for rx, arr in res.arrivals.items():
        for tx in range(n):
            matrix[tx][rx] = total_received([a for a in arr if a.source == tx]).total
    pairs = []
    for q in sc.pair_requests():
        if q.objective.block:
            continue
        arr = res.arrivals[q.rx]
        name = ",".join(q.objective.flags())
        if mode == "pwe":
            tot = total_received(arr)
            mine = total_received([a for a in arr if a.source == q.tx and a.useful])
            interf = tot.total - mine.useful
            npaths = len(dep.pair_paths.get(q, ()))
            pairs.append(PairResult(q.tx, q.rx, name, mine.useful, mine.useful, interf,
                                    sir(mine.useful, interf), npaths, mine.useful > 0))
        else:
            mine = total_received([a for a in arr if a.source == q.tx])
            pairs.append(PairResult(q.tx, q.rx, name, mine.total, None, None, None,
                                    sum(1 for a in arr if a.source == q.tx and a.power > 0),
                                    mine.total > 0))
    receivers = {rx: total_received(arr) for rx, arr in res.arrivals.items()}
    usage = [(t.id, g.floorplan.surfaces[t.surface].name, t.virtual, _function_name(t), res.tile_hits[t.id])
             for t in g.tiles]
    coated = sum(1 for t in g.tiles if not t.virtual)
    configured = len(_path_tiles(g, dep)) if dep is not None else 0
    return RunReport(sc.name, mode, sc.params.seed, n, len(g.tiles), coated, configured, matrix, pairs,
                     receivers, dict(res.arrivals), usage, res.stats,
                     [(q.tx, q.rx) for q in dep.skipped] if dep else [],
                     list(dep.partial_blocks) if dep else [])


# trajectories

def trajectory_positions(sc: Scenario) -> list[tuple[int, np.ndarray]]:
    """(user id, position) per step for the first user that has a trajectory."""
    for u in sc.user_nodes():
        if u.trajectory is not None:
            pts = u.trajectory.sample(sc.params.step)
            if sc.params.steps:
                pts = pts[:sc.params.steps]
            return [(u.id, p) for p in pts]
    return []


_STEP_GRAPH: list = []      # (scenario, graph) reused by consecutive steps in one process


def _trajectory_step(sc: Scenario, mode: str, k: int, uid: int, pos: np.ndarray) -> TrajectoryRecord:
    if not _STEP_GRAPH or _STEP_GRAPH[0][0] != sc:
        _STEP_GRAPH[:] = [(sc, build_scenario_graph(sc))]
    g = _STEP_GRAPH[0][1]
    g.clear_deployments()
    g.move_user(uid, pos)
    pairs = sc.pair_requests()
    if mode == "pwe":
        dep = _configure(g, sc, pairs)
    else:
        dep = None
        _naturalize(g)
    res = _propagate(g, sc)
    u = g.users[uid]
    un = g.user_node(uid)
    devs = [deviation_from_perpendicular(g.position(l.other(un)), u.position, u.trajectory, u.position)
            for l in g.user_links(uid)]
    mine = [q for q in pairs if q.rx == uid and not q.objective.block]
    sel_dev, tiles, npaths, received = None, (), 0, 0.0
    arr = res.arrivals[uid]
    if mode == "pwe":
        paths = [p for q in mine for p in dep.pair_paths.get(q, ())]
        npaths = len(paths)
        last = sorted({p.nodes[-2] for p in paths})
        tiles = tuple(last)
        if last:
            sel_dev = max(deviation_from_perpendicular(g.position(t), u.position, u.trajectory, u.position)
                          for t in last)
        received = total_received([a for a in arr if a.useful and any(a.source == q.tx for q in mine)]).useful
    else:
        srcs = {q.tx for q in mine}
        got = [a for a in arr if a.source in srcs]
        npaths = sum(1 for a in got if a.power > 0)
        received = total_received(got).total
    return TrajectoryRecord(k, tuple(float(c) for c in pos), sel_dev, min(devs) if devs else None,
                            received, npaths, tiles)


def _step_worker(args):
    sc, mode, k, uid, pos = args
    return _trajectory_step(sc, mode, k, uid, pos)


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(int(raw), 1) if raw else default
    except ValueError:
        return default


def run_trajectory(sc: Scenario, mode: str = "pwe", workers: Optional[int] = None) -> list[TrajectoryRecord]:
    steps = trajectory_positions(sc)
    jobs = [(sc, mode, k, uid, pos) for k, (uid, pos) in enumerate(steps)]
    n = workers if workers is not None else worker_count()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            return list(ex.map(_step_worker, jobs, chunksize=max(len(jobs) // (4 * n), 1)))
    return [_step_worker(j) for j in jobs]


# report files

def dbm(w: float) -> str:
    return DISCONNECTED if w <= 0 else f"{w_to_dbm(w):.2f}"


def _level(w: float) -> str:
    return "none" if w <= 0 else f"{w_to_dbm(w):.2f}"


def _sir_text(v) -> str:
    if v == INTERFERENCE_FREE:
        return v
    return f"{10 * math.log10(v):.2f}" if v > 0 else "-inf"


def _yes(b: bool) -> str:
    return "yes" if b else "no"


def metrics_text(r: RunReport) -> str:
    s = r.stats
    out = [f"scenario {r.scenario}", f"mode {r.mode}", f"seed {r.seed}", f"users {r.n_users}",
           f"tiles {r.n_tiles}", f"coated_tiles {r.coated_tiles}", f"configured_tiles {r.configured}",
           f"configured_fraction {r.configured_fraction:.4f}",
           f"rays spawned={s.spawned} reached={s.reached} absorbed={s.absorbed} "
           f"sub_threshold={s.sub_threshold} over_bounce={s.over_bounce} escaped={s.escaped}"]
    for p in r.pairs:
        line = f"pair {p.tx}->{p.rx} objective={p.objective} received_dbm={dbm(p.received)}"
        if r.mode == "pwe":
            line += f" interference_dbm={_level(p.interference)} sir_db={_sir_text(p.sir)}"
        line += f" paths={p.paths} connected={_yes(p.connected)}"
        out.append(line)
    for tx, rx in r.skipped:
        out.append(f"skipped {tx}->{rx}")
    for tx, tile in r.partial_blocks:
        out.append(f"partial_block user={tx} tile={tile}")
    for k, n in r.serial:
        out.append(f"serial pairs={k} configured_tiles={n}")
    for rx in sorted(r.receivers):
        t = r.receivers[rx]
        line = f"receiver {rx} total_dbm={dbm(t.total)}"
        if r.mode == "pwe":
            line += f" useful_dbm={_level(t.useful)} interference_dbm={_level(t.interference)}"
        out.append(line)
    for rx in sorted(r.pdp):
        for a in r.pdp[rx]:
            line = (f"pdp rx={rx} source={a.source} delay_ns={a.delay * 1e9:.3f} "
                    f"power_dbm={dbm(a.power)} hops={a.path.hops}")
            if r.mode == "pwe":
                line += f" useful={_yes(a.useful)}"
            out.append(line + " nodes=" + "-".join(map(str, a.path.nodes)))
    return "\n".join(out) + "\n"


def matrix_text(r: RunReport) -> str:
    n = r.n_users
    out = ["# received power in dBm, rows are transmitters, columns receivers",
           "tx\\rx" + "".join(f" {j}" for j in range(n))]
    for i in range(n):
        out.append(f"{i}" + "".join(f" {dbm(r.matrix[i][j])}" for j in range(n)))
    return "\n".join(out) + "\n"


def tile_usage_text(r: RunReport) -> str:
    out = ["tile surface virtual function rays"]
    for tid, surf, virtual, fn, rays in r.tile_usage:
        out.append(f"{tid} {surf} {_yes(virtual)} {fn} {rays}")
    return "\n".join(out) + "\n"


def _dev(v: Optional[float]) -> str:
    return "none" if v is None else f"{v:.2f}"


def trajectory_text(r: RunReport) -> str:
    out = ["step x y z deviation_deg min_deviation_deg received_dbm paths tiles"]
    for t in r.trajectory:
        x, y, z = t.position
        tiles = ",".join(map(str, t.tiles)) or "-"
        out.append(f"{t.step} {x:.3f} {y:.3f} {z:.3f} {_dev(t.deviation)} {_dev(t.min_deviation)} "
                   f"{dbm(t.received)} {t.paths} {tiles}")
    return "\n".join(out) + "\n"


REPORT_FILES = ("metrics.txt", "matrix.txt", "tile_usage.txt", "trajectory.txt")


def emit_report(r: RunReport, out_dir) -> list[FsPath]:
    d = FsPath(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    files = {"metrics.txt": metrics_text(r), "matrix.txt": matrix_text(r),
             "tile_usage.txt": tile_usage_text(r)}
    if r.trajectory:
        files["trajectory.txt"] = trajectory_text(r)
    written = []
    for name, text in files.items():
        p = d / name
        p.write_text(text)
        written.append(p)
    return written


def read_pair_levels(report_dir) -> dict[str, Optional[float]]:
    """Received dBm per pair from a metrics file; None marks a disconnected pair."""
    p = FsPath(report_dir)
    if p.is_dir():
        p = p / "metrics.txt"
    levels: dict[str, Optional[float]] = {}
    for line in p.read_text().splitlines():
        if not line.startswith("pair "):
            continue
        toks = line.split()
        kv = dict(t.split("=", 1) for t in toks[2:] if "=" in t)
        v = kv.get("received_dbm", DISCONNECTED)
        levels[toks[1]] = None if v == DISCONNECTED else float(v)
    return levels


@dataclass(frozen=True)
class PairDelta:
    pair: str
    a: Optional[float]
    b: Optional[float]

    @property
    def delta(self) -> Optional[float]:
        if self.a is None or self.b is None:
            return None
        return self.b - self.a


def compare(report_a, report_b) -> list[PairDelta]:
    la, lb = read_pair_levels(report_a), read_pair_levels(report_b)
    keys = sorted(set(la) | set(lb), key=lambda k: tuple(int(x) for x in k.split("->")))
    return [PairDelta(k, la.get(k), lb.get(k)) for k in keys]


def compare_text(deltas: Sequence[PairDelta]) -> str:
    def f(v):
        return DISCONNECTED if v is None else f"{v:.2f}"
    out = ["pair a_dbm b_dbm delta_db"]
    for d in deltas:
        dd = "n/a" if d.delta is None else f"{d.delta:+.2f}"
        out.append(f"{d.pair} {f(d.a)} {f(d.b)} {dd}")
    return "\n".join(out) + "\n"
