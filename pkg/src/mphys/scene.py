"""Scene configuration: particle sources, boundary conditions, forces, camera.

Scenes are declarative JSON documents; parsing is strict (unknown keys are
rejected with their JSON path). Boundary conditions act on grid velocities,
force modules act on particles, and both carry activation time windows.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import mpm_kernels as kern
from .errors import ParseError, ValidationError
from .material import MaterialParams, params_from_json_dict
from .mpm import GridSpec, ParticleState, StepConfig
from .rng import generator

_MODE_CODES = {"sticky": 0, "slip": 1, "frictional": 2, "cut": 3}
_BC_KINDS = ("bounding_box", "clamp_grid", "surface_collider")
_FORCE_KINDS = (
    "add_constant_force",
    "add_impulse",
    "force_particles_translation",
    "force_particles_rotation",
    "release_particles",
)


@dataclass(frozen=True)
class ParticleSourceSpec:
    kind: str                    # box | sphere | file
    count: int
    center: tuple = (0.5, 0.5, 0.5)
    size: tuple = (0.2, 0.2, 0.2)        # box only
    radius: float = 0.1                   # sphere only
    path: str = ""                        # file only
    volume: float | None = None           # file only; box/sphere derive it
    velocity: tuple = (0.0, 0.0, 0.0)
    color: tuple = (0.7, 0.7, 0.7)
    group: int = 0
    frozen: bool = False


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str
    mode: str = "frictional"              # surface_collider only
    friction: float = 0.0
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    bounds: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))  # clamp_grid only
    velocity: tuple = (0.0, 0.0, 0.0)     # clamp_grid only
    axes: tuple = (1, 1, 1)               # clamp_grid only
    window: tuple = (0.0, float("inf"))


@dataclass(frozen=True)
class RegionSelector:
    """Axis-aligned box in world space; None bounds select everything."""

    lo: tuple | None = None
    hi: tuple | None = None

    def mask(self, x: np.ndarray) -> np.ndarray:
        m = np.ones(x.shape[0], dtype=bool)
        if self.lo is not None:
            m &= np.all(x >= np.asarray(self.lo), axis=1)
        if self.hi is not None:
            m &= np.all(x <= np.asarray(self.hi), axis=1)
        return m


@dataclass(frozen=True)
class ForceModule:
    kind: str
    vector: tuple = (0.0, 0.0, 0.0)       # force / impulse / translation velocity
    axes: tuple = (1, 1, 1)               # translation only
    angular_speed: float = 0.0            # rotation only
    axis_point: tuple = (0.5, 0.5, 0.5)
    axis_dir: tuple = (0.0, 0.0, 1.0)
    n_layer: int = 1                      # release only
    substeps: int = 1                     # impulse only
    start: float = 0.0                    # impulse only
    window: tuple = (0.0, float("inf"))
    region: RegionSelector = field(default_factory=RegionSelector)
    group: int | None = None


@dataclass(frozen=True)
class Camera:
    """Orthographic camera; `ortho_height` is the world height of the image."""

    position: tuple = (0.5, -2.0, 0.5)
    look_at: tuple = (0.5, 0.5, 0.5)
    up: tuple = (0.0, 0.0, 1.0)
    width: int = 64
    height: int = 64
    ortho_height: float = 1.0

    def basis(self):
        pos = np.asarray(self.position, dtype=float)
        forward = np.asarray(self.look_at, dtype=float) - pos
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(self.up, dtype=float))
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return pos, right, up, forward

    @property
    def pixel_scale(self) -> float:
        """World units per pixel."""
        return self.ortho_height / self.height

    def project(self, points: np.ndarray):
        """World points -> (u_px, v_px, depth) arrays."""
        pos, right, up, forward = self.basis()
        d = np.asarray(points, dtype=float) - pos
        s = self.pixel_scale
        u = d @ right / s + self.width / 2.0
        v = self.height / 2.0 - d @ up / s
        depth = d @ forward
        return u, v, depth

    def project_velocity(self, velocities: np.ndarray):
        """World velocities -> screen velocities in px/s."""
        _, right, up, _ = self.basis()
        s = self.pixel_scale
        vel = np.asarray(velocities, dtype=float)
        return vel @ right / s, -(vel @ up) / s


@dataclass(frozen=True)
class PerturbConfig:
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValidationError("perturbation scale must be >= 0")


@dataclass(frozen=True)
class SceneConfig:
    sources: tuple[ParticleSourceSpec, ...]
    materials: dict[int, MaterialParams]
    grid: GridSpec
    stepping: StepConfig
    boundaries: tuple[BoundaryCondition, ...]
    forces: tuple[ForceModule, ...]
    camera: Camera
    seed: int = 0
    name: str = ""
    perturb: PerturbConfig = field(default_factory=PerturbConfig)

    @property
    def total_duration(self) -> float:
        return self.stepping.frames * self.stepping.frame_duration


# ---------------------------------------------------------------------------
# strict JSON parsing

def _check_keys(obj: dict, allowed, path: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ParseError(f"{path}: unknown keys {sorted(unknown)}")


def _get(obj: dict, key: str, path: str, default=_check_keys):
    if key not in obj:
        if default is _check_keys:
            raise ParseError(f"{path}: missing required key '{key}'")
        return default
    return obj[key]


def _vec3(value, path: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ParseError(f"{path}: expected a 3-element array")
    return tuple(float(c) for c in value)


def _window(value, path: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ParseError(f"{path}: expected [t0, t1]")
    t0, t1 = float(value[0]), float(value[1])
    if t0 > t1:
        raise ValidationError(f"{path}: window start exceeds end")
    return (t0, t1)


def _parse_source(obj: dict, path: str) -> ParticleSourceSpec:
    _check_keys(obj, (
        "kind", "count", "center", "size", "radius", "path", "volume",
        "velocity", "color", "group", "frozen",
    ), path)
    kind = _get(obj, "kind", path)
    if kind not in ("box", "sphere", "file"):
        raise ParseError(f"{path}.kind: unknown particle source '{kind}'")
    spec = ParticleSourceSpec(
        kind=kind,
        count=int(_get(obj, "count", path)),
        center=_vec3(obj.get("center", (0.5, 0.5, 0.5)), f"{path}.center"),
        size=_vec3(obj.get("size", (0.2, 0.2, 0.2)), f"{path}.size"),
        radius=float(obj.get("radius", 0.1)),
        path=str(obj.get("path", "")),
        volume=float(obj["volume"]) if "volume" in obj else None,
        velocity=_vec3(obj.get("velocity", (0, 0, 0)), f"{path}.velocity"),
        color=_vec3(obj.get("color", (0.7, 0.7, 0.7)), f"{path}.color"),
        group=int(obj.get("group", 0)),
        frozen=bool(obj.get("frozen", False)),
    )
    if spec.count < 1 and kind != "file":
        raise ValidationError(f"{path}.count: must be >= 1")
    if kind == "file" and not spec.path:
        raise ParseError(f"{path}.path: required for file sources")
    return spec


def _parse_boundary(obj: dict, path: str) -> BoundaryCondition:
    _check_keys(obj, (
        "kind", "mode", "friction", "point", "normal", "bounds",
        "velocity", "axes", "window",
    ), path)
    kind = _get(obj, "kind", path)
    if kind not in _BC_KINDS:
        raise ParseError(f"{path}.kind: unknown boundary kind '{kind}'")
    mode = str(obj.get("mode", "frictional"))
    if kind == "surface_collider" and mode not in _MODE_CODES:
        raise ParseError(f"{path}.mode: unknown collider mode '{mode}'")
    friction = float(obj.get("friction", 0.0))
    if kind == "surface_collider" and mode == "sticky" and friction != 0.0:
        raise ValidationError(f"{path}.friction: sticky colliders require friction = 0")
    bounds = obj.get("bounds", ((0, 0, 0), (1, 1, 1)))
    if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
        raise ParseError(f"{path}.bounds: expected [[lo], [hi]]")
    normal = np.asarray(_vec3(obj.get("normal", (0, 0, 1)), f"{path}.normal"))
    norm = np.linalg.norm(normal)
    if kind == "surface_collider" and norm == 0:
        raise ValidationError(f"{path}.normal: must be nonzero")
    if norm > 0:
        normal = normal / norm
    return BoundaryCondition(
        kind=kind,
        mode=mode,
        friction=friction,
        point=_vec3(obj.get("point", (0, 0, 0)), f"{path}.point"),
        normal=tuple(normal),
        bounds=(
            _vec3(bounds[0], f"{path}.bounds[0]"),
            _vec3(bounds[1], f"{path}.bounds[1]"),
        ),
        velocity=_vec3(obj.get("velocity", (0, 0, 0)), f"{path}.velocity"),
        axes=tuple(int(a) for a in obj.get("axes", (1, 1, 1))),
        window=_window(obj.get("window", (0.0, float("inf"))), f"{path}.window"),
    )


def _parse_region(obj, path: str) -> RegionSelector:
    if obj is None:
        return RegionSelector()
    _check_keys(obj, ("lo", "hi"), path)
    lo = _vec3(obj["lo"], f"{path}.lo") if "lo" in obj else None
    hi = _vec3(obj["hi"], f"{path}.hi") if "hi" in obj else None
    return RegionSelector(lo=lo, hi=hi)


def _parse_force(obj: dict, path: str) -> ForceModule:
    _check_keys(obj, (
        "kind", "vector", "axes", "angular_speed", "axis_point", "axis_dir",
        "n_layer", "substeps", "start", "window", "region", "group",
    ), path)
    kind = _get(obj, "kind", path)
    if kind not in _FORCE_KINDS:
        raise ParseError(f"{path}.kind: unknown force kind '{kind}'")
    substeps = int(obj.get("substeps", 1))
    if kind == "add_impulse" and substeps < 1:
        raise ValidationError(f"{path}.substeps: impulses need >= 1 whole substeps")
    n_layer = int(obj.get("n_layer", 1))
    if kind == "release_particles" and n_layer < 1:
        raise ValidationError(f"{path}.n_layer: must be >= 1")
    return ForceModule(
        kind=kind,
        vector=_vec3(obj.get("vector", (0, 0, 0)), f"{path}.vector"),
        axes=tuple(int(a) for a in obj.get("axes", (1, 1, 1))),
        angular_speed=float(obj.get("angular_speed", 0.0)),
        axis_point=_vec3(obj.get("axis_point", (0.5, 0.5, 0.5)), f"{path}.axis_point"),
        axis_dir=_vec3(obj.get("axis_dir", (0, 0, 1)), f"{path}.axis_dir"),
        n_layer=n_layer,
        substeps=substeps,
        start=float(obj.get("start", 0.0)),
        window=_window(obj.get("window", (0.0, float("inf"))), f"{path}.window"),
        region=_parse_region(obj.get("region"), f"{path}.region"),
        group=int(obj["group"]) if "group" in obj else None,
    )


def parse_scene(text: str) -> SceneConfig:
    """Parse and fully validate a scene document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("scene document must be a JSON object")
    _check_keys(doc, (
        "name", "seed", "particles", "materials", "grid", "stepping",
        "boundaries", "forces", "camera", "perturb",
    ), "$")

    sources_raw = _get(doc, "particles", "$")
    if isinstance(sources_raw, dict):
        sources_raw = [sources_raw]
    sources = tuple(
        _parse_source(s, f"$.particles[{i}]") for i, s in enumerate(sources_raw)
    )

    mats_raw = _get(doc, "materials", "$")
    materials = {}
    for key, mat in mats_raw.items():
        try:
            materials[int(key)] = params_from_json_dict(mat)
        except ValueError:
            raise ParseError(f"$.materials: group key '{key}' is not an integer")
    for src in sources:
        if src.group not in materials:
            raise ValidationError(f"no material defined for particle group {src.group}")

    grid_raw = doc.get("grid", {})
    _check_keys(grid_raw, ("resolution", "cell_width", "origin", "padding", "mass_epsilon"), "$.grid")
    grid = GridSpec(
        resolution=tuple(int(r) for r in grid_raw.get("resolution", (64, 64, 64))),
        cell_width=float(grid_raw.get("cell_width", 1.0 / 64.0)),
        origin=_vec3(grid_raw.get("origin", (0, 0, 0)), "$.grid.origin"),
        padding=int(grid_raw.get("padding", 3)),
        mass_epsilon=float(grid_raw.get("mass_epsilon", 1e-12)),
    )

    step_raw = doc.get("stepping", {})
    _check_keys(step_raw, ("substeps_per_frame", "frames", "frame_duration", "gravity"), "$.stepping")
    stepping = StepConfig(
        substeps_per_frame=int(step_raw.get("substeps_per_frame", 256)),
        frames=int(step_raw.get("frames", 150)),
        frame_duration=float(step_raw.get("frame_duration", 5.0 / 150.0)),
        gravity=_vec3(step_raw.get("gravity", (0, 0, -9.8)), "$.stepping.gravity"),
    )

    boundaries = tuple(
        _parse_boundary(b, f"$.boundaries[{i}]")
        for i, b in enumerate(doc.get("boundaries", []))
    )
    if not any(b.kind == "bounding_box" for b in boundaries):
        raise ValidationError("scene must declare at least one bounding_box boundary")

    forces = tuple(
        _parse_force(f, f"$.forces[{i}]") for i, f in enumerate(doc.get("forces", []))
    )

    total = stepping.frames * stepping.frame_duration
    for i, bc in enumerate(boundaries):
        if bc.window[0] > total:
            raise ValidationError(f"$.boundaries[{i}].window: starts after scene end")
    for i, fm in enumerate(forces):
        if fm.window[0] > total or (fm.kind == "add_impulse" and fm.start > total):
            raise ValidationError(f"$.forces[{i}]: activation starts after scene end")

    cam_raw = doc.get("camera", {})
    _check_keys(cam_raw, ("position", "look_at", "up", "width", "height", "ortho_height"), "$.camera")
    camera = Camera(
        position=_vec3(cam_raw.get("position", (0.5, -2.0, 0.5)), "$.camera.position"),
        look_at=_vec3(cam_raw.get("look_at", (0.5, 0.5, 0.5)), "$.camera.look_at"),
        up=_vec3(cam_raw.get("up", (0, 0, 1)), "$.camera.up"),
        width=int(cam_raw.get("width", 64)),
        height=int(cam_raw.get("height", 64)),
        ortho_height=float(cam_raw.get("ortho_height", 1.0)),
    )

    pert_raw = doc.get("perturb", {})
    _check_keys(pert_raw, ("epsilon", "seed"), "$.perturb")
    perturb = PerturbConfig(
        epsilon=float(pert_raw.get("epsilon", 0.1)),
        seed=int(pert_raw.get("seed", 0)),
    )

    return SceneConfig(
        sources=sources,
        materials=materials,
        grid=grid,
        stepping=stepping,
        boundaries=boundaries,
        forces=forces,
        camera=camera,
        seed=int(doc.get("seed", 0)),
        name=str(doc.get("name", "")),
        perturb=perturb,
    )


def parse_scene_file(path) -> SceneConfig:
    with open(path) as f:
        return parse_scene(f.read())


def serialize_scene(cfg: SceneConfig) -> str:
    """Canonical JSON rendering; parse_scene(serialize_scene(cfg)) == cfg."""
    def src_dict(s: ParticleSourceSpec):
        d = {"kind": s.kind, "count": s.count, "velocity": list(s.velocity),
             "color": list(s.color), "group": s.group, "frozen": s.frozen}
        if s.kind == "box":
            d.update(center=list(s.center), size=list(s.size))
        elif s.kind == "sphere":
            d.update(center=list(s.center), radius=s.radius)
        else:
            d.update(path=s.path, volume=s.volume)
        return d

    def bc_dict(b: BoundaryCondition):
        d = {"kind": b.kind}
        if b.kind == "bounding_box":
            d["friction"] = b.friction
        elif b.kind == "clamp_grid":
            d.update(bounds=[list(b.bounds[0]), list(b.bounds[1])],
                     velocity=list(b.velocity), axes=list(b.axes))
        else:
            d.update(mode=b.mode, point=list(b.point), normal=list(b.normal),
                     friction=b.friction)
        if math.isfinite(b.window[1]):
            d["window"] = list(b.window)
        return d

    def force_dict(f: ForceModule):
        d = {"kind": f.kind}
        if f.kind in ("add_constant_force", "add_impulse", "force_particles_translation"):
            d["vector"] = list(f.vector)
        if f.kind == "force_particles_translation":
            d["axes"] = list(f.axes)
        if f.kind == "force_particles_rotation":
            d.update(angular_speed=f.angular_speed, axis_point=list(f.axis_point),
                     axis_dir=list(f.axis_dir))
        if f.kind == "release_particles":
            d["n_layer"] = f.n_layer
        if f.kind == "add_impulse":
            d.update(substeps=f.substeps, start=f.start)
        elif math.isfinite(f.window[1]):
            d["window"] = list(f.window)
        if f.region.lo is not None or f.region.hi is not None:
            region = {}
            if f.region.lo is not None:
                region["lo"] = list(f.region.lo)
            if f.region.hi is not None:
                region["hi"] = list(f.region.hi)
            d["region"] = region
        if f.group is not None:
            d["group"] = f.group
        return d

    doc = {
        "name": cfg.name,
        "seed": cfg.seed,
        "particles": [src_dict(s) for s in cfg.sources],
        "materials": {str(g): m.to_json_dict() for g, m in cfg.materials.items()},
        "grid": {
            "resolution": list(cfg.grid.resolution),
            "cell_width": cfg.grid.cell_width,
            "origin": list(cfg.grid.origin),
            "padding": cfg.grid.padding,
        },
        "stepping": {
            "substeps_per_frame": cfg.stepping.substeps_per_frame,
            "frames": cfg.stepping.frames,
            "frame_duration": cfg.stepping.frame_duration,
            "gravity": list(cfg.stepping.gravity),
        },
        "boundaries": [bc_dict(b) for b in cfg.boundaries],
        "forces": [force_dict(f) for f in cfg.forces],
        "camera": {
            "position": list(cfg.camera.position),
            "look_at": list(cfg.camera.look_at),
            "up": list(cfg.camera.up),
            "width": cfg.camera.width,
            "height": cfg.camera.height,
            "ortho_height": cfg.camera.ortho_height,
        },
        "perturb": {"epsilon": cfg.perturb.epsilon, "seed": cfg.perturb.seed},
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# particle sourcing

def make_particles(cfg: SceneConfig) -> ParticleState:
    """Instantiate all particle sources with the scene seed."""
    chunks = []
    for i, src in enumerate(cfg.sources):
        rng = generator(cfg.seed, f"particles/{i}")
        if src.kind == "box":
            size = np.asarray(src.size)
            pts = (rng.random((src.count, 3)) - 0.5) * size + np.asarray(src.center)
            volume = float(np.prod(size))
        elif src.kind == "sphere":
            pts = np.empty((src.count, 3))
            got = 0
            while got < src.count:
                cand = (rng.random((src.count * 2, 3)) - 0.5) * 2.0 * src.radius
                keep = cand[np.sum(cand * cand, axis=1) <= src.radius ** 2]
                take = min(len(keep), src.count - got)
                pts[got:got + take] = keep[:take]
                got += take
            pts += np.asarray(src.center)
            volume = 4.0 / 3.0 * math.pi * src.radius ** 3
        else:
            pts = np.load(src.path).astype(float)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValidationError(f"particle file {src.path} must be (N, 3)")
            volume = src.volume if src.volume is not None else 1e-3
        chunks.append((src, pts, volume))

    n = sum(len(pts) for _, pts, _ in chunks)
    particles = ParticleState.allocate(n)
    offset = 0
    for src, pts, volume in chunks:
        count = len(pts)
        sl = slice(offset, offset + count)
        density = cfg.materials[src.group].density
        particles.x[sl] = pts
        particles.v[sl] = np.asarray(src.velocity)
        particles.mass[sl] = density * volume / count
        particles.vol0[sl] = volume / count
        particles.color[sl] = np.asarray(src.color)
        particles.group[sl] = src.group
        particles.frozen[sl] = src.frozen
        if src.frozen:
            particles.v[sl] = 0.0
        offset += count
    return particles


# ---------------------------------------------------------------------------
# boundary conditions

def encode_boundaries(boundaries, cfg: SceneConfig):
    """Compile the ordered BC list into the kernel's array encoding."""
    n = len(boundaries)
    bc_kind = np.zeros(n, dtype=np.int64)
    bc_mode = np.zeros(n, dtype=np.int64)
    bc_params = np.zeros((n, kern.BC_PARAM_COLS))
    for i, bc in enumerate(boundaries):
        t0, t1 = bc.window
        t1 = min(t1, 1e30)
        if bc.kind == "bounding_box":
            bc_kind[i] = 0
            bc_params[i, 0] = bc.friction
            bc_params[i, 1] = t0
            bc_params[i, 2] = t1
        elif bc.kind == "clamp_grid":
            bc_kind[i] = 1
            bc_params[i, 0:3] = bc.bounds[0]
            bc_params[i, 3:6] = bc.bounds[1]
            bc_params[i, 6:9] = bc.velocity
            bc_params[i, 9:12] = bc.axes
            bc_params[i, 12] = t0
            bc_params[i, 13] = t1
        else:
            bc_kind[i] = 2
            bc_mode[i] = _MODE_CODES[bc.mode]
            bc_params[i, 0:3] = bc.point
            bc_params[i, 3:6] = bc.normal
            bc_params[i, 6] = bc.friction
            bc_params[i, 7] = t0
            bc_params[i, 8] = t1
    return bc_kind, bc_mode, bc_params


def apply_boundary(bc: BoundaryCondition, grid_v: np.ndarray, grid: GridSpec, t: float) -> np.ndarray:
    """Reference (vectorized numpy) application of one BC to a velocity field.

    Used by tests as an independent route; the solver applies the compiled
    encoding inside the grid kernel.
    """
    v = grid_v.copy()
    if not bc.window[0] <= t <= bc.window[1]:
        return v
    nx, ny, nz, _ = v.shape
    idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
    pos = np.asarray(grid.origin) + idx * grid.cell_width
    if bc.kind == "bounding_box":
        pad = grid.padding
        for axis, res in zip(range(3), (nx, ny, nz)):
            low = idx[..., axis] < pad
            high = idx[..., axis] >= res - pad
            out_low = low & (v[..., axis] < 0)
            out_high = high & (v[..., axis] > 0)
            _plane_response(v, out_low, axis, +1.0, bc.friction)
            _plane_response(v, out_high, axis, -1.0, bc.friction)
    elif bc.kind == "clamp_grid":
        lo, hi = np.asarray(bc.bounds[0]), np.asarray(bc.bounds[1])
        inside = np.all((pos >= lo) & (pos <= hi), axis=-1)
        for axis in range(3):
            if bc.axes[axis]:
                v[..., axis][inside] = bc.velocity[axis]
    else:
        n = np.asarray(bc.normal)
        below = (pos - np.asarray(bc.point)) @ n < 0
        if bc.mode in ("sticky", "cut"):
            v[below] = 0.0
        else:
            vn = v @ n
            incoming = below & (vn < 0)
            vt = v - vn[..., None] * n
            if bc.mode == "frictional" and bc.friction > 0:
                tnorm = np.linalg.norm(vt, axis=-1)
                scale = np.where(
                    tnorm > 1e-30,
                    np.maximum(0.0, 1.0 - bc.friction * np.abs(vn) / np.maximum(tnorm, 1e-30)),
                    0.0,
                )
                vt = vt * scale[..., None]
            v[incoming] = vt[incoming]
    return v


def _plane_response(v, mask, axis, sign, friction):
    """One-way wall response on masked nodes (helper for apply_boundary)."""
    if not np.any(mask):
        return
    vn = v[..., axis][mask] * sign
    sub = v[mask]
    sub[:, axis] = 0.0
    if friction > 0:
        tnorm = np.linalg.norm(sub, axis=1)
        scale = np.where(tnorm > 1e-30, np.maximum(0.0, 1.0 - friction * np.abs(vn) / np.maximum(tnorm, 1e-30)), 0.0)
        sub *= scale[:, None]
    v[mask] = sub


def apply_cut_removal(particles: ParticleState, boundaries, t: float) -> None:
    """Flag particles behind active cut colliders for removal."""
    for bc in boundaries:
        if bc.kind != "surface_collider" or bc.mode != "cut":
            continue
        if not bc.window[0] <= t <= bc.window[1]:
            continue
        n = np.asarray(bc.normal)
        behind = (particles.x - np.asarray(bc.point)) @ n < 0
        particles.removed |= behind


# ---------------------------------------------------------------------------
# force modules

def _selection(fm: ForceModule, particles: ParticleState, include_frozen=False) -> np.ndarray:
    mask = fm.region.mask(particles.x) & ~particles.removed
    if fm.group is not None:
        mask &= particles.group == fm.group
    if not include_frozen:
        mask &= ~particles.frozen
    if not mask.any():
        warnings.warn(f"{fm.kind}: selection matched zero particles", stacklevel=3)
    return mask


def apply_force(fm: ForceModule, particles: ParticleState, t: float, dt: float) -> None:
    """Apply one tick of a force module (window checks done by the scheduler)."""
    if fm.kind == "add_constant_force":
        mask = _selection(fm, particles)
        particles.v[mask] += dt * np.asarray(fm.vector)
    elif fm.kind == "add_impulse":
        mask = _selection(fm, particles)
        particles.v[mask] += np.asarray(fm.vector)
    elif fm.kind == "force_particles_translation":
        mask = _selection(fm, particles)
        for axis in range(3):
            if fm.axes[axis]:
                particles.v[mask, axis] = fm.vector[axis]
    elif fm.kind == "force_particles_rotation":
        mask = _selection(fm, particles)
        omega = fm.angular_speed * np.asarray(fm.axis_dir) / np.linalg.norm(fm.axis_dir)
        rel = particles.x[mask] - np.asarray(fm.axis_point)
        particles.v[mask] = np.cross(np.broadcast_to(omega, rel.shape), rel)
    else:
        release_next_layer(fm, particles)


def release_next_layer(fm: ForceModule, particles: ParticleState) -> None:
    """Unfreeze the lowest-index n_layer frozen particles."""
    frozen_idx = np.flatnonzero(particles.frozen)
    if len(frozen_idx) == 0:
        return
    particles.frozen[frozen_idx[: fm.n_layer]] = False


class ForceScheduler:
    """Drives the force modules across substeps.

    Impulses fire for exactly their stated substep count starting at their
    start time; releases fire on evenly spaced ticks across their window.
    """

    def __init__(self, forces, particles: ParticleState, dt: float):
        self.forces = tuple(forces)
        self.dt = dt
        self._impulse_fired = {i: 0 for i, f in enumerate(self.forces) if f.kind == "add_impulse"}
        self._release_state = {}
        for i, f in enumerate(self.forces):
            if f.kind != "release_particles":
                continue
            frozen_count = int(particles.frozen.sum())
            ticks = max(1, math.ceil(frozen_count / f.n_layer)) if frozen_count else 0
            t0, t1 = f.window
            duration = min(t1, 1e30) - t0
            spacing = duration / ticks if ticks else 0.0
            self._release_state[i] = {"ticks": ticks, "fired": 0, "t0": t0, "spacing": spacing}

    def apply(self, particles: ParticleState, t: float) -> None:
        for i, fm in enumerate(self.forces):
            if fm.kind == "add_impulse":
                fired = self._impulse_fired[i]
                if fired < fm.substeps and t >= fm.start - 1e-12:
                    apply_force(fm, particles, t, self.dt)
                    self._impulse_fired[i] = fired + 1
            elif fm.kind == "release_particles":
                st = self._release_state[i]
                while st["fired"] < st["ticks"] and t >= st["t0"] + st["fired"] * st["spacing"] - 1e-12:
                    release_next_layer(fm, particles)
                    st["fired"] += 1
            else:
                if fm.window[0] - 1e-12 <= t <= fm.window[1]:
                    apply_force(fm, particles, t, self.dt)


# ---------------------------------------------------------------------------
# perturbation augmentation

def perturb_particles(particles: ParticleState, cfg: PerturbConfig) -> ParticleState:
    """Augmented copy: jittered positions and colors; original untouched.

    The same per-particle offsets apply wherever the copy is reused, so two
    identical trajectories perturbed with the same config stay identical.
    """
    out = particles.copy()
    if cfg.epsilon == 0.0:
        return out
    rng = generator(cfg.seed, "perturb")
    out.x += cfg.epsilon * rng.standard_normal(out.x.shape)
    out.color = np.clip(
        out.color + 2.0 * cfg.epsilon * rng.standard_normal(out.color.shape), 0.0, 1.0
    )
    return out


def perturbation_offsets(n: int, cfg: PerturbConfig):
    """Per-particle (position, color) offsets drawn once from the seed."""
    rng = generator(cfg.seed, "perturb")
    dx = cfg.epsilon * rng.standard_normal((n, 3))
    dc = 2.0 * cfg.epsilon * rng.standard_normal((n, 3))
    return dx, dc
