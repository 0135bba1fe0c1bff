"""MLS-MPM solver: particle/grid state, substepping, trajectories.

The kernels in `mpm_kernels` do the per-substep work; this module owns the
object-level state, configuration validation, the CFL guard, and trajectory
recording/serialization. All acceptance-grade runs are serial and therefore
bit-deterministic; thread-level parallelism happens across independent
simulations (finite-difference probes), not inside one.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import mpm_kernels as kern
from .errors import ParseError, ParticleOutOfDomain, Unstable, ValidationError
from .material import MaterialClass, MaterialParams, lame_from_young_poisson
from .plasticity import DEFAULT_SOFTENING, drucker_prager_alpha

TRAJECTORY_MAGIC = b"MPHY"
TRAJECTORY_VERSION = 1

# Sand exposes only the friction angle; the StVK elastic law underneath
# needs moduli, fixed here to conventional MPM sand values.
SAND_ELASTIC_E = 3.5e5
SAND_ELASTIC_NU = 0.3

MATERIAL_CODES = {cls: code for code, cls in enumerate(MaterialClass)}


@dataclass(frozen=True)
class GridSpec:
    """Uniform background grid over an axis-aligned box."""

    resolution: tuple[int, int, int] = (64, 64, 64)
    cell_width: float = 1.0 / 64.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    padding: int = 3
    mass_epsilon: float = 1e-12

    def __post_init__(self):
        if min(self.resolution) < 8:
            raise ValidationError("grid resolution must be >= 8 per axis")
        if self.cell_width <= 0:
            raise ValidationError("cell width must be positive")


@dataclass(frozen=True)
class StepConfig:
    """Substepping schedule; dt * substeps_per_frame must equal frame_duration."""

    substeps_per_frame: int = 256
    frames: int = 150
    frame_duration: float = 5.0 / 150.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.8)

    @property
    def dt(self) -> float:
        return self.frame_duration / self.substeps_per_frame

    def __post_init__(self):
        if self.substeps_per_frame < 1 or self.frames < 0:
            raise ValidationError("substeps_per_frame >= 1 and frames >= 0 required")
        if self.frame_duration <= 0:
            raise ValidationError("frame_duration must be positive")


@dataclass
class ParticleState:
    """Structure-of-arrays particle storage."""

    x: np.ndarray        # (N, 3) positions, m
    v: np.ndarray        # (N, 3) velocities, m/s
    C: np.ndarray        # (N, 3, 3) affine velocity, 1/s
    F: np.ndarray        # (N, 3, 3) elastic deformation gradient
    eps_p: np.ndarray    # (N,) accumulated plastic strain
    mass: np.ndarray     # (N,) kg
    vol0: np.ndarray     # (N,) initial volume, m^3
    color: np.ndarray    # (N, 3) in [0, 1]
    group: np.ndarray    # (N,) int64 material group ids
    frozen: np.ndarray   # (N,) bool
    removed: np.ndarray  # (N,) bool

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return ParticleState(
            **{name: getattr(self, name).copy() for name in (
                "x", "v", "C", "F", "eps_p", "mass", "vol0", "color",
                "group", "frozen", "removed",
            )}
        )

    @classmethod
    def allocate(cls, n: int) -> "ParticleState":
        F = np.zeros((n, 3, 3))
        F[:, 0, 0] = F[:, 1, 1] = F[:, 2, 2] = 1.0
        return cls(
            x=np.zeros((n, 3)),
            v=np.zeros((n, 3)),
            C=np.zeros((n, 3, 3)),
            F=F,
            eps_p=np.zeros(n),
            mass=np.ones(n),
            vol0=np.ones(n),
            color=np.full((n, 3), 0.7),
            group=np.zeros(n, dtype=np.int64),
            frozen=np.zeros(n, dtype=np.bool_),
            removed=np.zeros(n, dtype=np.bool_),
        )


def material_table(params_by_group: dict[int, MaterialParams]) -> np.ndarray:
    """Compile per-group material parameters into the kernel table."""
    n_groups = max(params_by_group) + 1
    table = np.zeros((n_groups, 8))
    for g, params in params_by_group.items():
        params.validate()
        cls = params.material_class
        row = table[g]
        row[0] = MATERIAL_CODES[cls]
        if cls in (
            MaterialClass.ELASTIC, MaterialClass.PLASTICINE,
            MaterialClass.METAL, MaterialClass.FOAM,
        ):
            lame = lame_from_young_poisson(params.get("E"), params.get("nu"))
            row[1], row[2] = lame.mu, lame.lam
        elif cls is MaterialClass.SAND:
            lame = lame_from_young_poisson(SAND_ELASTIC_E, SAND_ELASTIC_NU)
            row[1], row[2] = lame.mu, lame.lam
            row[7] = drucker_prager_alpha(params.get("theta_fric"))
        elif cls is MaterialClass.NEWTONIAN_FLUID:
            row[1] = params.get("mu")
            row[5] = params.get("mu")
            row[6] = params.get("kappa")
        else:  # non-Newtonian: mu acts as the shear modulus of the StVK law
            mu = params.get("mu")
            kappa = params.get("kappa")
            row[1] = mu
            row[2] = kappa - 2.0 * mu / 3.0
            row[6] = kappa
        if cls in (
            MaterialClass.PLASTICINE, MaterialClass.METAL,
            MaterialClass.FOAM, MaterialClass.NON_NEWTONIAN_FLUID,
        ):
            row[3] = params.get("tau_Y")
        if cls in (MaterialClass.FOAM, MaterialClass.NON_NEWTONIAN_FLUID):
            row[4] = params.get("eta")
        if cls is MaterialClass.PLASTICINE:
            row[7] = DEFAULT_SOFTENING
    return table


@dataclass
class MpmState:
    """Everything one substep needs: particles, grid buffers, materials."""

    particles: ParticleState
    grid: GridSpec
    mat_table: np.ndarray
    grid_m: np.ndarray = field(init=False)
    grid_mom: np.ndarray = field(init=False)
    clamp_count: np.ndarray = field(init=False)

    def __post_init__(self):
        nx, ny, nz = self.grid.resolution
        self.grid_m = np.zeros((nx, ny, nz))
        self.grid_mom = np.zeros((nx, ny, nz, 3))
        self.clamp_count = np.zeros(1, dtype=np.int64)

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.grid.origin, dtype=float)


_NO_BC_KIND = np.zeros(0, dtype=np.int64)
_NO_BC_MODE = np.zeros(0, dtype=np.int64)
_NO_BC_PARAMS = np.zeros((0, kern.BC_PARAM_COLS))


def clear_grid(state: MpmState) -> None:
    state.grid_m.fill(0.0)
    state.grid_mom.fill(0.0)


def p2g(state: MpmState, dt: float) -> None:
    """Particle-to-grid transfer; grid must have been cleared."""
    p = state.particles
    bad = kern.p2g(
        p.x, p.v, p.C, p.F, p.mass, p.vol0, p.group, p.frozen, p.removed,
        state.mat_table, state.grid_m, state.grid_mom,
        state.origin, state.grid.cell_width, dt, state.clamp_count,
    )
    if bad >= 0:
        raise ParticleOutOfDomain(
            f"particle {bad} at {p.x[bad]} too close to the grid boundary"
        )


def grid_update(
    state: MpmState,
    dt: float,
    gravity: np.ndarray,
    t: float = 0.0,
    bc_kind: np.ndarray = _NO_BC_KIND,
    bc_mode: np.ndarray = _NO_BC_MODE,
    bc_params: np.ndarray = _NO_BC_PARAMS,
) -> None:
    """Momentum to velocity, gravity, then boundary conditions in order."""
    kern.grid_update(
        state.grid_m, state.grid_mom, state.grid.mass_epsilon, dt,
        np.asarray(gravity, dtype=float), state.grid.padding,
        bc_kind, bc_mode, bc_params, t,
        state.origin, state.grid.cell_width,
    )


def g2p(state: MpmState, dt: float) -> float:
    """Grid-to-particle transfer plus F evolution and return mapping."""
    p = state.particles
    return kern.g2p(
        p.x, p.v, p.C, p.F, p.eps_p, p.group, p.frozen, p.removed,
        state.mat_table, state.grid_mom,
        state.origin, state.grid.cell_width, dt,
    )


def substep(
    state: MpmState,
    dt: float,
    gravity: np.ndarray,
    t: float = 0.0,
    bc_kind: np.ndarray = _NO_BC_KIND,
    bc_mode: np.ndarray = _NO_BC_MODE,
    bc_params: np.ndarray = _NO_BC_PARAMS,
) -> float:
    """One full update: clear -> p2g -> grid_update -> g2p. Returns max speed."""
    clear_grid(state)
    p2g(state, dt)
    grid_update(state, dt, gravity, t, bc_kind, bc_mode, bc_params)
    max_speed = g2p(state, dt)
    if max_speed * dt > 0.5 * state.grid.cell_width:
        raise Unstable(
            f"CFL violated: max speed {max_speed:g} m/s at dt {dt:g}", None, None
        )
    return max_speed


@dataclass
class Trajectory:
    """Per-frame particle snapshots (positions, velocities, colors)."""

    positions: list[np.ndarray]
    velocities: list[np.ndarray]
    colors: list[np.ndarray]
    mass: np.ndarray | None = None  # runtime only, not serialized

    @property
    def n_frames(self) -> int:
        return len(self.positions)

    @property
    def n_particles(self) -> int:
        return self.positions[0].shape[0] if self.positions else 0

    def append(self, particles: ParticleState) -> None:
        self.positions.append(particles.x.astype(np.float32))
        self.velocities.append(particles.v.astype(np.float32))
        self.colors.append(particles.color.astype(np.float32))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(TRAJECTORY_MAGIC)
            f.write(struct.pack("<HII", TRAJECTORY_VERSION, self.n_particles, self.n_frames))
            for k in range(self.n_frames):
                f.write(self.positions[k].astype("<f4").tobytes())
                f.write(self.velocities[k].astype("<f4").tobytes())
                f.write(self.colors[k].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Trajectory":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != TRAJECTORY_MAGIC:
                raise ParseError(f"bad trajectory magic {magic!r}")
            version, n, n_frames = struct.unpack("<HII", f.read(10))
            if version != TRAJECTORY_VERSION:
                raise ParseError(f"unsupported trajectory version {version}")
            positions, velocities, colors = [], [], []
            for _ in range(n_frames):
                for store in (positions, velocities, colors):
                    raw = f.read(12 * n)
                    if len(raw) != 12 * n:
                        raise ParseError("truncated trajectory file")
                    store.append(np.frombuffer(raw, dtype="<f4").reshape(n, 3))
        return cls(positions=positions, velocities=velocities, colors=colors)

    def summary_rows(self):
        """(frame, kinetic energy, max speed, COM position) per snapshot."""
        mass = self.mass if self.mass is not None else np.ones(self.n_particles)
        total_mass = mass.sum()
        rows = []
        for k in range(self.n_frames):
            v = self.velocities[k].astype(float)
            x = self.positions[k].astype(float)
            ke = 0.5 * float(np.sum(mass * np.sum(v * v, axis=1)))
            max_speed = float(np.sqrt(np.max(np.sum(v * v, axis=1)))) if len(v) else 0.0
            com = (mass[:, None] * x).sum(axis=0) / total_mass
            rows.append((k, ke, max_speed, com[0], com[1], com[2]))
        return rows

    def save_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "kinetic_energy", "max_speed", "com_x", "com_y", "com_z"])
            for row in self.summary_rows():
                writer.writerow(row)


def simulate(scene_cfg, params_by_group=None, record_frames=None):
    """Run a scene and return its trajectory.

    `record_frames` restricts snapshots to the given 1-based frame indices
    (and stops the rollout at the largest one); None records every frame.
    If `params_by_group` is None the scene's own materials are used.
    """
    from . import scene as scene_mod

    particles = scene_mod.make_particles(scene_cfg)
    if params_by_group is None:
        params_by_group = scene_cfg.materials
    state = MpmState(
        particles=particles,
        grid=scene_cfg.grid,
        mat_table=material_table(params_by_group),
    )
    bc_kind, bc_mode, bc_params = scene_mod.encode_boundaries(
        scene_cfg.boundaries, scene_cfg
    )
    step = scene_cfg.stepping
    gravity = np.asarray(step.gravity, dtype=float)
    dt = step.dt
    forces = scene_mod.ForceScheduler(scene_cfg.forces, particles, dt)

    n_frames = step.frames
    last_frame = n_frames
    wanted = None
    if record_frames is not None:
        wanted = set(int(i) for i in record_frames)
        last_frame = max(wanted) if wanted else 0

    traj = Trajectory(positions=[], velocities=[], colors=[], mass=particles.mass.copy())
    if last_frame == 0:
        traj.append(particles)
        return traj

    for frame in range(1, last_frame + 1):
        for s in range(step.substeps_per_frame):
            t = (frame - 1) * step.frame_duration + s * dt
            forces.apply(particles, t)
            try:
                substep(state, dt, gravity, t, bc_kind, bc_mode, bc_params)
            except Unstable as exc:
                raise Unstable(str(exc), frame=frame, substep=s) from None
            scene_mod.apply_cut_removal(particles, scene_cfg.boundaries, t)
        if wanted is None or frame in wanted:
            traj.append(particles)
    return traj
