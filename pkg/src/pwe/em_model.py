"""Wave tuples, tile EM functions with modifiers, combination rules and EM profiles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .geometry import Vec3, specular_reflect, unit

TWO_PI = 2.0 * math.pi
DIR_MATCH = 1e-9          # 1 - cos(angle) below which two directions count as the same


class ConfigurationError(ValueError):
    pass


class WaveKind(str, Enum):
    PLANAR = "PlanarWave"
    FOCAL = "FocalWave"


LINEAR_X = np.array([1.0 + 0j, 0.0 + 0j])


@dataclass(frozen=True, eq=False)
class WaveSpec:
    kind: WaveKind
    omega: float
    direction: Vec3
    power: float
    jones: np.ndarray = field(default_factory=lambda: LINEAR_X.copy())
    phase: float = 0.0
    distance: Optional[float] = None      # source distance for focal waves

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        object.__setattr__(self, "jones", np.asarray(self.jones, dtype=complex))
        if self.power < 0:
            raise ValueError("wave power must be non-negative")
        if not self.omega > 0:
            raise ValueError("carrier frequency must be positive")
        if abs(np.linalg.norm(self.jones) - 1.0) > 1e-9:
            raise ValueError("Jones vector must have unit norm")

    def with_(self, **kw) -> "WaveSpec":
        return replace(self, **kw)

    def reversed(self) -> "WaveSpec":
        return replace(self, direction=-self.direction)


# base functions

@dataclass(frozen=True, eq=False)
class Absorb:
    residual: float = 0.0      # > 0 means partial absorption with a specular remainder
    kind = "Abs"


@dataclass(frozen=True, eq=False)
class Steer:
    virtual_normal: Vec3
    kind = "Str"


@dataclass(frozen=True, eq=False)
class Collimate:
    out_direction: Vec3
    kind = "Col"


@dataclass(frozen=True, eq=False)
class Split:
    virtual_normals: tuple
    kind = "Split"

    def __post_init__(self) -> None:
        if len(self.virtual_normals) < 2:
            raise ConfigurationError("split needs at least two normals")


Base = Union[Absorb, Steer, Collimate, Split]


@dataclass(frozen=True, eq=False)
class TileFunction:
    base: Base
    expected_input: Optional[WaveSpec] = None   # None accepts every direction as intended
    delta_jones: Optional[np.ndarray] = None
    delta_phase: Optional[float] = None

    def __post_init__(self) -> None:
        has_mod = self.delta_jones is not None or self.delta_phase is not None
        if isinstance(self.base, Absorb) and has_mod and self.base.residual <= 0:
            raise ConfigurationError("modifiers on absorb need partial absorption")

    @property
    def kind(self) -> str:
        return self.base.kind

    def required_kinds(self) -> set[str]:
        kinds = {self.base.kind}
        if self.delta_jones is not None:
            kinds.add("Pol")
        if self.delta_phase is not None:
            kinds.add("Pha")
        return kinds


@dataclass(frozen=True, eq=False)
class Parasitic:
    """Extra output emitted when `trigger` ("always", "intended", "unintended") holds."""
    trigger: str
    power_fraction: float
    direction: Optional[Vec3] = None      # None: specular off the physical tile normal


SimilarityFn = Callable[["EMProfile", WaveSpec, WaveSpec], float]


def _constant_similarity(profile: "EMProfile", nominal: WaveSpec, actual: WaveSpec) -> float:
    return profile.intended_gain


def _cosine_similarity(profile: "EMProfile", nominal: WaveSpec, actual: WaveSpec) -> float:
    c = float(np.dot(unit(nominal.direction), unit(actual.direction)))
    k = float(profile.similarity_params.get("exponent", 1.0))
    return profile.intended_gain * max(c, 0.0) ** k


SIMILARITY_MODELS: dict[str, SimilarityFn] = {
    "constant": _constant_similarity,
    "cosine": _cosine_similarity,
}

ALL_KINDS = frozenset({"Abs", "Str", "Col", "Split", "Pol", "Pha"})


@dataclass(frozen=True, eq=False)
class EMProfile:
    supported: frozenset = ALL_KINDS
    intended_gain: float = 0.99
    similarity_model: str = "constant"
    similarity_params: dict = field(default_factory=dict)
    parasitic: tuple = ()
    unintended_delta_jones: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not 0 < self.intended_gain <= 1:
            raise ConfigurationError("intended_gain must lie in (0, 1]")
        if self.similarity_model not in SIMILARITY_MODELS:
            raise ConfigurationError(f"unknown similarity model {self.similarity_model!r}")
        if self.intended_gain + sum(p.power_fraction for p in self.parasitic) > 1 + 1e-12:
            raise ConfigurationError("profile would create power")

    def similarity_gain(self, nominal: WaveSpec, actual: WaveSpec) -> float:
        return SIMILARITY_MODELS[self.similarity_model](self, nominal, actual)

    def check(self, f: TileFunction) -> None:
        missing = f.required_kinds() - set(self.supported)
        if missing:
            raise ConfigurationError(f"profile does not support {sorted(missing)}")


DEFAULT_PROFILE = EMProfile()


def same_direction(a: Vec3, b: Vec3) -> bool:
    return 1.0 - float(np.dot(a, b)) <= DIR_MATCH


def _match(f: TileFunction, d: Vec3) -> Optional[str]:
    """'fwd' or 'rev' when the input matches the configured input (or its reverse)."""
    exp = f.expected_input
    if exp is None:
        return "fwd"
    a = unit(exp.direction)
    b = _nominal_output(f, a)
    fwd = same_direction(d, a)
    rev = b is not None and same_direction(d, -b)
    if fwd and rev:
        # output nearly antiparallel to the input: take the closer reading
        return "fwd" if float(np.dot(d, a)) >= float(np.dot(d, -b)) else "rev"
    if fwd:
        return "fwd"
    return "rev" if rev else None


def _nominal_output(f: TileFunction, a: Vec3) -> Optional[Vec3]:
    base = f.base
    if isinstance(base, Steer):
        return specular_reflect(a, base.virtual_normal)
    if isinstance(base, Collimate):
        return unit(base.out_direction)
    return None


def apply_function(f: TileFunction, wave: WaveSpec, profile: EMProfile,
                   tile_normal: Vec3) -> list[WaveSpec]:
    """Output waves of tile function `f` for one impinging wave."""
    profile.check(f)
    d = unit(wave.direction)
    n = unit(tile_normal)
    how = _match(f, d)
    intended = how is not None
    if intended:
        g = profile.intended_gain
    else:
        g = profile.similarity_gain(f.expected_input, wave)
    base = f.base
    outs: list[WaveSpec] = []
    other = WaveKind.FOCAL if wave.kind == WaveKind.PLANAR else WaveKind.PLANAR

    if isinstance(base, Absorb):
        if not intended:
            outs.append(wave.with_(direction=specular_reflect(d, n), power=g * wave.power))
        elif base.residual > 0:
            outs.append(wave.with_(direction=specular_reflect(d, n), power=base.residual * g * wave.power))
    elif isinstance(base, Steer):
        outs.append(wave.with_(direction=specular_reflect(d, unit(base.virtual_normal)), power=g * wave.power))
    elif isinstance(base, Collimate):
        if how == "fwd":
            out_dir = unit(base.out_direction)
            outs.append(wave.with_(kind=other, direction=out_dir, power=g * wave.power, distance=None))
        elif how == "rev":
            back = -unit(f.expected_input.direction)
            outs.append(wave.with_(kind=other, direction=back, power=g * wave.power, distance=None))
        else:
            outs.append(wave.with_(kind=WaveKind.PLANAR, direction=specular_reflect(d, n),
                                   power=g * wave.power, distance=None))
    elif isinstance(base, Split):
        share = wave.power / len(base.virtual_normals)
        for vn in base.virtual_normals:
            outs.append(wave.with_(direction=specular_reflect(d, unit(vn)), power=g * share))
    else:  # pragma: no cover
        raise ConfigurationError(f"unknown base function {base!r}")

    dj = f.delta_jones if intended else profile.unintended_delta_jones
    if dj is not None or f.delta_phase is not None:
        outs = [_modify(w, dj, f.delta_phase) for w in outs]

    for para in profile.parasitic:
        fire = para.trigger == "always" or (para.trigger == "intended") == intended
        if fire:
            pd = specular_reflect(d, n) if para.direction is None else unit(para.direction)
            outs.append(wave.with_(direction=pd, power=para.power_fraction * wave.power))
    return outs


def _modify(w: WaveSpec, dj: Optional[np.ndarray], dphi: Optional[float]) -> WaveSpec:
    jones = w.jones
    if dj is not None:
        shifted = jones + np.asarray(dj, dtype=complex)
        norm = np.linalg.norm(shifted)
        if norm == 0:
            raise ConfigurationError("polarization shift cancels the wave")
        jones = shifted / norm
    phase = w.phase if dphi is None else (w.phase + dphi) % TWO_PI
    return w.with_(jones=jones, phase=phase)


def apply_function_multi(f: TileFunction, inputs: Sequence[WaveSpec], profile: EMProfile,
                         tile_normal: Vec3) -> list[WaveSpec]:
    out: list[WaveSpec] = []
    for w in inputs:
        out.extend(apply_function(f, w, profile, tile_normal))
    return out


class Method(str, Enum):
    SURFACE_DIVISION = "SD"
    META_ATOM_MERGE = "MM"


_KINDS = ("Abs", "Str", "Col", "Pol", "Pha")
# "~SD": possible but potentially unintended, "MM*": only with partial absorption
_TABLE = {
    "Abs": ("SD", "SD", "~SD", "MM*", "MM*"),
    "Str": ("SD", "SD", "~SD", "MM", "MM"),
    "Col": ("~SD", "~SD", "~SD", "MM", "MM"),
    "Pol": ("MM*", "MM", "MM", "-", "MM"),
    "Pha": ("MM*", "MM", "MM", "MM", "-"),
}


@dataclass(frozen=True)
class Combination:
    ok: bool
    unintended: bool = False

    def __bool__(self) -> bool:
        return self.ok


def validate_combination(a: str, b: str, method: Union[Method, str],
                         partial_absorb: bool = False) -> Combination:
    if a not in _TABLE or b not in _TABLE:
        raise ConfigurationError(f"combination of {a!r} and {b!r} is not tabulated")
    cell = _TABLE[a][_KINDS.index(b)]
    m = Method(method)
    if cell == "-":
        return Combination(False)
    if cell == "SD":
        return Combination(m == Method.SURFACE_DIVISION)
    if cell == "~SD":
        ok = m == Method.SURFACE_DIVISION
        return Combination(ok, ok)
    if cell == "MM":
        return Combination(m == Method.META_ATOM_MERGE)
    return Combination(m == Method.META_ATOM_MERGE and partial_absorb)


def steer_normal_for(d_in: Vec3, d_out: Vec3) -> Vec3:
    """Virtual normal that steers `d_in` onto `d_out` (bisector of -d_in and d_out)."""
    return unit(np.asarray(d_out, dtype=float) - np.asarray(d_in, dtype=float))
