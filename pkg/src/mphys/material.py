"""Material parameter types, the per-class range catalog, scaling, and clamping.

Seven material classes are supported, each with a fixed set of class-specific
coefficients plus a common density. All ranges are closed intervals in SI units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import (
    DegenerateMaterial,
    ExtraField,
    MissingField,
    ParseError,
    UnknownMaterialType,
)


class MaterialClass(Enum):
    ELASTIC = "Elastic"
    PLASTICINE = "Plasticine"
    METAL = "Metal"
    FOAM = "Foam"
    SAND = "Sand"
    NEWTONIAN_FLUID = "Newtonian fluid"
    NON_NEWTONIAN_FLUID = "Non-Newtonian fluid"


@dataclass(frozen=True)
class ParamRange:
    """Closed range for one parameter of one material class."""

    name: str
    lower: float
    upper: float
    unit: str

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"range for {self.name} has lower > upper")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def clamp(self, value: float) -> float:
        return min(max(value, self.lower), self.upper)


# Density is common to every class and appended last in the catalog.
_DENSITY_RANGE = ParamRange("density", 10.0, 2.3e4, "kg/m^3")

_CLASS_RANGES: dict[MaterialClass, tuple[ParamRange, ...]] = {
    MaterialClass.ELASTIC: (
        ParamRange("E", 1e7, 4e11, "Pa"),
        ParamRange("nu", 0.1, 0.5, ""),
    ),
    MaterialClass.PLASTICINE: (
        ParamRange("E", 1e6, 5e6, "Pa"),
        ParamRange("nu", 0.3, 0.4, ""),
        ParamRange("tau_Y", 5e3, 2e4, "Pa"),
    ),
    MaterialClass.METAL: (
        ParamRange("E", 4.5e10, 4.0e11, "Pa"),
        ParamRange("nu", 0.25, 0.35, ""),
        ParamRange("tau_Y", 1e7, 2e9, "Pa"),
    ),
    MaterialClass.FOAM: (
        ParamRange("E", 1e3, 1e7, "Pa"),
        ParamRange("nu", 0.0, 0.3, ""),
        ParamRange("tau_Y", 1e4, 1e6, "Pa"),
        ParamRange("eta", 0.1, 1.0, ""),
    ),
    MaterialClass.SAND: (
        ParamRange("theta_fric", 27.0, 45.0, "deg"),
    ),
    MaterialClass.NEWTONIAN_FLUID: (
        ParamRange("mu", 1e-3, 10.0, "Pa.s"),
        ParamRange("kappa", 1e9, 5e9, "Pa"),
    ),
    MaterialClass.NON_NEWTONIAN_FLUID: (
        ParamRange("mu", 1e-3, 1e3, "Pa.s"),
        ParamRange("kappa", 1e9, 5e9, "Pa"),
        ParamRange("tau_Y", 1.0, 2e3, "Pa"),
        ParamRange("eta", 0.1, 1.0, ""),
    ),
}

# Parameters scaled logarithmically (strictly positive, wide dynamic range);
# everything else maps linearly onto [0, 1] over its range.
_LOG_SCALED = frozenset({"E", "tau_Y", "kappa", "mu", "density"})

_JSON_KEYS = ("material_type", "density", "E", "nu", "tau_Y", "mu", "kappa", "eta", "theta_fric")


def range_catalog(material_class: MaterialClass) -> list[ParamRange]:
    """Ranges for one class in declaration order, density appended last."""
    return list(_CLASS_RANGES[material_class]) + [_DENSITY_RANGE]


def required_fields(material_class: MaterialClass) -> list[str]:
    """Field names a valid parameter set for this class must carry."""
    return [r.name for r in range_catalog(material_class)]


@dataclass(frozen=True)
class MaterialParams:
    """One material parameter set: class, density, class-specific coefficients.

    Optional fields not used by the class must stay None; `validate` enforces
    the exact field set and does not check ranges (see `clamp_to_range`).
    """

    material_class: MaterialClass
    density: float
    E: float | None = None
    nu: float | None = None
    tau_Y: float | None = None
    mu: float | None = None
    kappa: float | None = None
    eta: float | None = None
    theta_fric: float | None = None

    _OPTIONAL = ("E", "nu", "tau_Y", "mu", "kappa", "eta", "theta_fric")

    def get(self, name: str) -> float:
        value = getattr(self, name)
        if value is None:
            raise MissingField(f"{self.material_class.value} requires field '{name}'")
        return value

    def validate(self) -> None:
        needed = set(required_fields(self.material_class))
        for name in self._OPTIONAL:
            present = getattr(self, name) is not None
            if present and name not in needed:
                raise ExtraField(
                    f"field '{name}' does not belong to class {self.material_class.value}"
                )
            if not present and name in needed:
                raise MissingField(
                    f"class {self.material_class.value} requires field '{name}'"
                )

    def to_json_dict(self) -> dict:
        out = {"material_type": self.material_class.value, "density": self.density}
        for name in self._OPTIONAL:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def material_class_from_string(text: str) -> MaterialClass:
    """Case-insensitive lookup tolerant of separators ('newtonian_fluid')."""
    key = "".join(ch for ch in text.lower() if ch.isalnum())
    for cls in MaterialClass:
        if "".join(ch for ch in cls.value.lower() if ch.isalnum()) == key:
            return cls
    raise UnknownMaterialType(f"unknown material_type: {text!r}")


def params_from_json_dict(data: dict) -> MaterialParams:
    """Build validated MaterialParams from the flat wire-format dict."""
    if "material_type" not in data:
        raise MissingField("missing key 'material_type'")
    cls = material_class_from_string(str(data["material_type"]))
    if "density" not in data:
        raise MissingField("missing key 'density'")
    unknown = set(data) - set(_JSON_KEYS)
    if unknown:
        raise ExtraField(f"unknown keys: {sorted(unknown)}")
    def as_float(name):
        try:
            return float(data[name])
        except (TypeError, ValueError):
            raise ParseError(f"field '{name}' is not numeric: {data[name]!r}") from None

    kwargs = {}
    for name in MaterialParams._OPTIONAL:
        if name in data:
            kwargs[name] = as_float(name)
    params = MaterialParams(material_class=cls, density=as_float("density"), **kwargs)
    params.validate()
    return params


@dataclass(frozen=True)
class ClampEvent:
    field: str
    original: float
    clamped: float


def clamp_to_range(params: MaterialParams) -> tuple[MaterialParams, list[ClampEvent]]:
    """Clamp every present field into its catalog range.

    In-range values pass through bit-identically; each modification is
    recorded as a ClampEvent.
    """
    params.validate()
    events: list[ClampEvent] = []
    updates: dict[str, float] = {}
    for r in range_catalog(params.material_class):
        value = params.get(r.name)
        clamped = r.clamp(value)
        if clamped != value:
            events.append(ClampEvent(r.name, value, clamped))
            updates[r.name] = clamped
    if updates:
        params = replace(params, **updates)
    return params, events


@dataclass(frozen=True)
class LameCoefficients:
    """Shear modulus and first Lame parameter, both in Pa."""

    mu: float
    lam: float


def lame_from_young_poisson(E: float, nu: float) -> LameCoefficients:
    """Standard isotropic conversion; nu == 0.5 is rejected (lambda diverges)."""
    if E <= 0:
        raise DegenerateMaterial(f"Young's modulus must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise DegenerateMaterial(f"Poisson's ratio must lie in [0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return LameCoefficients(mu=mu, lam=lam)


def scale_value(r: ParamRange, value: float) -> float:
    """Map one value to its optimization coordinate (log or linear-in-[0,1])."""
    if r.name in _LOG_SCALED:
        return math.log(value)
    if r.upper == r.lower:
        return 0.0
    return (value - r.lower) / (r.upper - r.lower)


def unscale_value(r: ParamRange, coord: float) -> float:
    if r.name in _LOG_SCALED:
        return math.exp(coord)
    return r.lower + coord * (r.upper - r.lower)


def scaled_bounds(r: ParamRange) -> tuple[float, float]:
    """Range box in scaled coordinates."""
    if r.name in _LOG_SCALED:
        return math.log(r.lower), math.log(r.upper)
    return 0.0, 1.0


def log_scale(params: MaterialParams) -> np.ndarray:
    """All fields of the class (density last) as scaled coordinates."""
    params.validate()
    return np.array(
        [scale_value(r, params.get(r.name)) for r in range_catalog(params.material_class)]
    )


def unscale(material_class: MaterialClass, coords: np.ndarray) -> MaterialParams:
    """Inverse of `log_scale` for the same class."""
    ranges = range_catalog(material_class)
    if len(coords) != len(ranges):
        raise MissingField(
            f"{material_class.value} expects {len(ranges)} coordinates, got {len(coords)}"
        )
    values = {r.name: unscale_value(r, c) for r, c in zip(ranges, coords)}
    density = values.pop("density")
    return MaterialParams(material_class=material_class, density=density, **values)
