"""Tests for scene parsing, boundary conditions, forces, and perturbation."""

import json

import numpy as np
import pytest

from mphys import mpm_kernels as kern
from mphys.errors import ParseError, ValidationError
from mphys.mpm import GridSpec, ParticleState
from mphys.scene import (
    BoundaryCondition,
    Camera,
    ForceModule,
    ForceScheduler,
    PerturbConfig,
    RegionSelector,
    apply_boundary,
    encode_boundaries,
    make_particles,
    parse_scene,
    perturb_particles,
    perturbation_offsets,
    serialize_scene,
)

BASE_DOC = {
    "name": "unit",
    "seed": 5,
    "particles": [{
        "kind": "box", "count": 40, "center": [0.5, 0.5, 0.5],
        "size": [0.2, 0.2, 0.2], "group": 0,
    }],
    "materials": {
        "0": {"material_type": "Elastic", "density": 1000, "E": 1e7, "nu": 0.3}
    },
    "grid": {"resolution": [32, 32, 32], "cell_width": 1.0 / 32},
    "stepping": {
        "substeps_per_frame": 8, "frames": 4, "frame_duration": 0.01,
        "gravity": [0, 0, -9.8],
    },
    "boundaries": [{"kind": "bounding_box", "friction": 0.1}],
}


def doc_with(**overrides):
    doc = json.loads(json.dumps(BASE_DOC))
    doc.update(overrides)
    return doc


def parse(doc):
    return parse_scene(json.dumps(doc))


class TestParsing:
    def test_base_document_parses(self):
        cfg = parse(BASE_DOC)
        assert cfg.name == "unit"
        assert cfg.sources[0].count == 40
        assert cfg.boundaries[0].friction == 0.1
        assert cfg.stepping.dt == pytest.approx(0.01 / 8)

    def test_unknown_top_level_key_names_path(self):
        with pytest.raises(ParseError, match=r"\$.*wind"):
            parse(doc_with(wind=[1, 0, 0]))

    def test_unknown_source_kind_names_path(self):
        doc = doc_with()
        doc["particles"][0]["kind"] = "torus"
        with pytest.raises(ParseError, match=r"particles\[0\]"):
            parse(doc)

    def test_missing_material_for_group(self):
        doc = doc_with()
        doc["particles"][0]["group"] = 2
        with pytest.raises(ValidationError, match="group 2"):
            parse(doc)

    def test_non_integer_material_key(self):
        doc = doc_with()
        doc["materials"]["metal"] = doc["materials"].pop("0")
        with pytest.raises(ParseError, match="materials"):
            parse(doc)

    def test_sticky_collider_with_friction_rejected(self):
        doc = doc_with()
        doc["boundaries"].append({
            "kind": "surface_collider", "mode": "sticky", "friction": 0.4,
            "point": [0.5, 0.5, 0.2], "normal": [0, 0, 1],
        })
        with pytest.raises(ValidationError, match="sticky"):
            parse(doc)

    def test_bounding_box_required(self):
        with pytest.raises(ValidationError, match="bounding_box"):
            parse(doc_with(boundaries=[]))

    def test_window_start_after_end_rejected(self):
        doc = doc_with()
        doc["boundaries"][0]["window"] = [1.0, 0.5]
        with pytest.raises(ValidationError, match="window"):
            parse(doc)

    def test_activation_after_scene_end_rejected(self):
        doc = doc_with(forces=[{
            "kind": "add_impulse", "vector": [1, 0, 0], "start": 99.0,
        }])
        with pytest.raises(ValidationError, match=r"forces\[0\]"):
            parse(doc)

    def test_zero_normal_rejected(self):
        doc = doc_with()
        doc["boundaries"].append({
            "kind": "surface_collider", "mode": "slip",
            "point": [0.5, 0.5, 0.2], "normal": [0, 0, 0],
        })
        with pytest.raises(ValidationError, match="normal"):
            parse(doc)

    def test_invalid_json_reported_as_parse_error(self):
        with pytest.raises(ParseError, match="invalid JSON"):
            parse_scene("{not json")

    def test_single_source_shorthand(self):
        doc = doc_with()
        doc["particles"] = doc["particles"][0]
        assert len(parse(doc).sources) == 1

    def test_serialize_parse_round_trip(self):
        doc = doc_with(forces=[
            {"kind": "add_impulse", "vector": [0.4, 0, 0], "substeps": 2,
             "start": 0.005, "region": {"lo": [0, 0, 0.4]}},
            {"kind": "force_particles_rotation", "angular_speed": -5.0,
             "axis_point": [0.5, 0.5, 0.5], "axis_dir": [0, 0, 1],
             "window": [0.0, 0.02], "group": 0},
        ])
        doc["boundaries"].append({
            "kind": "surface_collider", "mode": "frictional", "friction": 0.3,
            "point": [0.5, 0.5, 0.15], "normal": [0, 0, 1],
        })
        cfg = parse(doc)
        again = parse_scene(serialize_scene(cfg))
        assert again == cfg


class TestMakeParticles:
    def test_counts_masses_and_groups(self):
        cfg = parse(BASE_DOC)
        p = make_particles(cfg)
        assert p.n == 40
        volume = 0.2 ** 3
        np.testing.assert_allclose(p.mass, 1000.0 * volume / 40)
        np.testing.assert_allclose(p.vol0, volume / 40)
        assert np.all(p.group == 0)
        assert np.all(np.abs(p.x - 0.5) <= 0.1 + 1e-12)

    def test_sphere_source_stays_inside_radius(self):
        doc = doc_with()
        doc["particles"] = [{
            "kind": "sphere", "count": 200, "center": [0.5, 0.5, 0.5],
            "radius": 0.08, "group": 0,
        }]
        p = make_particles(parse(doc))
        r = np.linalg.norm(p.x - 0.5, axis=1)
        assert np.all(r <= 0.08 + 1e-12)

    def test_frozen_source_has_zero_velocity(self):
        doc = doc_with()
        doc["particles"][0]["frozen"] = True
        doc["particles"][0]["velocity"] = [1.0, 0.0, 0.0]
        p = make_particles(parse(doc))
        assert np.all(p.frozen)
        assert np.all(p.v == 0.0)

    def test_seed_controls_layout(self):
        a = make_particles(parse(BASE_DOC))
        b = make_particles(parse(BASE_DOC))
        c = make_particles(parse(doc_with(seed=6)))
        np.testing.assert_array_equal(a.x, b.x)
        assert a.x.tobytes() != c.x.tobytes()


def make_grid_field(res=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((res, res, res, 3))


GRID = GridSpec(resolution=(16, 16, 16), cell_width=1.0 / 16)


class TestApplyBoundary:
    def test_slip_collider_removes_normal_component(self):
        bc = BoundaryCondition(
            kind="surface_collider", mode="slip",
            point=(0.0, 0.0, 0.5), normal=(0.0, 0.0, 1.0),
        )
        v = np.zeros((16, 16, 16, 3))
        v[:] = [1.0, 0.0, -2.0]
        out = apply_boundary(bc, v, GRID, t=0.0)
        below = np.arange(16) * GRID.cell_width < 0.5
        lo, hi = out[:, :, below], out[:, :, ~below]
        np.testing.assert_allclose(lo, np.broadcast_to([1.0, 0.0, 0.0], lo.shape))
        np.testing.assert_allclose(hi, np.broadcast_to([1.0, 0.0, -2.0], hi.shape))

    def test_frictionless_equals_slip(self):
        slip = BoundaryCondition(kind="surface_collider", mode="slip",
                                 point=(0, 0, 0.5), normal=(0, 0, 1))
        fric = BoundaryCondition(kind="surface_collider", mode="frictional",
                                 friction=0.0, point=(0, 0, 0.5), normal=(0, 0, 1))
        v = make_grid_field()
        np.testing.assert_allclose(
            apply_boundary(slip, v, GRID, 0.0), apply_boundary(fric, v, GRID, 0.0)
        )

    def test_collider_is_one_way(self):
        bc = BoundaryCondition(kind="surface_collider", mode="slip",
                               point=(0, 0, 0.5), normal=(0, 0, 1))
        v = np.zeros((16, 16, 16, 3))
        v[:] = [0.0, 0.0, 3.0]  # separating
        out = apply_boundary(bc, v, GRID, 0.0)
        np.testing.assert_array_equal(out, v)

    def test_sticky_zeroes_everything_below(self):
        bc = BoundaryCondition(kind="surface_collider", mode="sticky",
                               point=(0, 0, 0.5), normal=(0, 0, 1))
        out = apply_boundary(bc, make_grid_field(), GRID, 0.0)
        below = np.arange(16) * GRID.cell_width < 0.5
        assert np.all(out[:, :, below] == 0.0)

    def test_friction_reduces_tangential_speed(self):
        bc = BoundaryCondition(kind="surface_collider", mode="frictional",
                               friction=0.5, point=(0, 0, 0.5), normal=(0, 0, 1))
        v = np.zeros((16, 16, 16, 3))
        v[:] = [1.0, 0.0, -2.0]
        out = apply_boundary(bc, v, GRID, 0.0)
        below = np.arange(16) * GRID.cell_width < 0.5
        # |vt| drops by friction * |vn| = 1.0, hitting zero
        np.testing.assert_allclose(out[:, :, below], 0.0, atol=1e-14)

    def test_inactive_window_is_identity(self):
        bc = BoundaryCondition(kind="surface_collider", mode="sticky",
                               point=(0, 0, 0.5), normal=(0, 0, 1),
                               window=(1.0, 2.0))
        v = make_grid_field()
        np.testing.assert_array_equal(apply_boundary(bc, v, GRID, 0.5), v)

    def test_bounding_box_blocks_outgoing_only(self):
        bc = BoundaryCondition(kind="bounding_box")
        v = np.zeros((16, 16, 16, 3))
        v[:] = [-1.0, 0.0, 0.0]
        out = apply_boundary(bc, v, GRID, 0.0)
        assert np.all(out[: GRID.padding, :, :, 0] == 0.0)
        np.testing.assert_array_equal(
            out[GRID.padding:-GRID.padding, :, :, 0],
            v[GRID.padding:-GRID.padding, :, :, 0],
        )
        # high side moving inward stays untouched
        assert np.all(out[-GRID.padding:, :, :, 0] == -1.0)

    def test_clamp_grid_pins_selected_axes(self):
        bc = BoundaryCondition(
            kind="clamp_grid",
            bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 0.25)),
            velocity=(0.5, 0.0, 0.0), axes=(1, 0, 1),
        )
        v = make_grid_field()
        out = apply_boundary(bc, v, GRID, 0.0)
        inside = np.arange(16) * GRID.cell_width <= 0.25
        np.testing.assert_allclose(out[:, :, inside, 0], 0.5)
        np.testing.assert_allclose(out[:, :, inside, 2], 0.0)
        np.testing.assert_array_equal(out[:, :, inside, 1], v[:, :, inside, 1])


class TestKernelBoundaryAgreement:
    """The compiled grid kernel must match the numpy reference route."""

    def run_both(self, boundaries, seed=3):
        v = make_grid_field(seed=seed)
        ref = v
        for bc in boundaries:
            ref = apply_boundary(bc, ref, GRID, t=0.0)

        class FakeCfg:
            pass

        bc_kind, bc_mode, bc_params = encode_boundaries(boundaries, FakeCfg())
        grid_m = np.ones((16, 16, 16))
        grid_mom = v.copy()
        kern.grid_update(
            grid_m, grid_mom, 1e-12, 0.0, np.zeros(3), GRID.padding,
            bc_kind, bc_mode, bc_params, 0.0,
            np.zeros(3), GRID.cell_width,
        )
        return ref, grid_mom

    def test_bounding_box_agreement(self):
        ref, got = self.run_both([BoundaryCondition(kind="bounding_box", friction=0.2)])
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_collider_agreement(self):
        ref, got = self.run_both([
            BoundaryCondition(kind="bounding_box"),
            BoundaryCondition(kind="surface_collider", mode="frictional",
                              friction=0.3, point=(0.5, 0.5, 0.4),
                              normal=(0.1, 0.2, 0.97)),
        ])
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_sticky_and_clamp_agreement(self):
        ref, got = self.run_both([
            BoundaryCondition(kind="bounding_box"),
            BoundaryCondition(kind="surface_collider", mode="sticky",
                              point=(0.5, 0.5, 0.3), normal=(0, 0, 1)),
            BoundaryCondition(kind="clamp_grid",
                              bounds=((0, 0, 0.8), (1, 1, 1)),
                              velocity=(0, 0.25, 0), axes=(0, 1, 0)),
        ])
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_disjoint_colliders_commute(self):
        a = BoundaryCondition(kind="surface_collider", mode="slip",
                              point=(0, 0, 0.2), normal=(0, 0, 1))
        b = BoundaryCondition(kind="surface_collider", mode="slip",
                              point=(0, 0, 0.8), normal=(0, 0, -1))
        ref_ab, got_ab = self.run_both([a, b])
        ref_ba, got_ba = self.run_both([b, a])
        np.testing.assert_allclose(got_ab, got_ba, atol=1e-13)
        np.testing.assert_allclose(ref_ab, ref_ba, atol=1e-13)


def fresh_particles(n=12, frozen=0):
    p = ParticleState.allocate(n)
    rng = np.random.default_rng(2)
    p.x[:] = 0.3 + 0.4 * rng.random((n, 3))
    p.frozen[:frozen] = True
    return p


class TestForceModules:
    def test_impulse_fires_exact_substep_count(self):
        fm = ForceModule(kind="add_impulse", vector=(0.4, 0.0, 0.0),
                         substeps=2, start=0.0)
        p = fresh_particles()
        sched = ForceScheduler([fm], p, dt=1e-3)
        for k in range(5):
            sched.apply(p, t=k * 1e-3)
        np.testing.assert_allclose(p.v[:, 0], 0.8, rtol=1e-12)

    def test_impulse_waits_for_start_time(self):
        fm = ForceModule(kind="add_impulse", vector=(1.0, 0.0, 0.0),
                         substeps=1, start=0.5)
        p = fresh_particles()
        sched = ForceScheduler([fm], p, dt=1e-3)
        sched.apply(p, t=0.0)
        assert np.all(p.v == 0.0)
        sched.apply(p, t=0.5)
        np.testing.assert_allclose(p.v[:, 0], 1.0)

    def test_constant_force_matches_equivalent_impulse(self):
        # n ticks of dt * f equal one impulse of n * dt * f
        f = np.array([15.0, 15.0, -15.0])
        dt, n = 1e-3, 8
        fa = ForceModule(kind="add_constant_force", vector=tuple(f),
                         window=(0.0, (n - 1) * dt))
        fb = ForceModule(kind="add_impulse", vector=tuple(n * dt * f),
                         substeps=1, start=0.0)
        pa, pb = fresh_particles(), fresh_particles()
        sa = ForceScheduler([fa], pa, dt)
        sb = ForceScheduler([fb], pb, dt)
        for k in range(n):
            sa.apply(pa, t=k * dt)
            sb.apply(pb, t=k * dt)
        np.testing.assert_allclose(pa.v, pb.v, rtol=1e-12)

    def test_rotation_speed_scales_with_radius(self):
        fm = ForceModule(kind="force_particles_rotation", angular_speed=-5.0,
                         axis_point=(0.5, 0.5, 0.5), axis_dir=(0.0, 0.0, 1.0))
        p = fresh_particles()
        ForceScheduler([fm], p, 1e-3).apply(p, t=0.0)
        rel = p.x - np.array([0.5, 0.5, 0.5])
        radius = np.linalg.norm(rel[:, :2], axis=1)
        speed = np.linalg.norm(p.v, axis=1)
        np.testing.assert_allclose(speed, 5.0 * radius, rtol=1e-10)
        assert np.all(np.abs(p.v[:, 2]) < 1e-14)

    def test_translation_pins_selected_axes(self):
        fm = ForceModule(kind="force_particles_translation",
                         vector=(0.3, 9.0, 0.0), axes=(1, 0, 0))
        p = fresh_particles()
        p.v[:] = [0.0, 0.7, 0.2]
        ForceScheduler([fm], p, 1e-3).apply(p, t=0.0)
        np.testing.assert_allclose(p.v[:, 0], 0.3)
        np.testing.assert_allclose(p.v[:, 1], 0.7)

    def test_release_unfreezes_layer_by_layer(self):
        fm = ForceModule(kind="release_particles", n_layer=3, window=(0.0, 0.4))
        p = fresh_particles(n=12, frozen=10)
        sched = ForceScheduler([fm], p, 1e-3)
        # ceil(10 / 3) = 4 ticks spaced 0.1 apart
        sched.apply(p, t=0.0)
        assert p.frozen.sum() == 7
        sched.apply(p, t=0.05)
        assert p.frozen.sum() == 7
        sched.apply(p, t=0.1)
        assert p.frozen.sum() == 4
        sched.apply(p, t=0.3)
        assert p.frozen.sum() == 0

    def test_region_and_group_selection(self):
        p = fresh_particles()
        p.x[:, 2] = np.linspace(0.3, 0.7, p.n)
        p.group[p.n // 2:] = 1
        fm = ForceModule(kind="add_impulse", vector=(1.0, 0.0, 0.0),
                         substeps=1, region=RegionSelector(lo=(0, 0, 0.5)), group=1)
        ForceScheduler([fm], p, 1e-3).apply(p, t=0.0)
        hit = (p.x[:, 2] >= 0.5) & (p.group == 1)
        assert np.array_equal(p.v[:, 0] != 0.0, hit)
        assert hit.any()

    def test_frozen_particles_ignore_forces(self):
        fm = ForceModule(kind="add_impulse", vector=(1.0, 0.0, 0.0), substeps=1)
        p = fresh_particles(n=6, frozen=6)
        with pytest.warns(UserWarning, match="zero particles"):
            ForceScheduler([fm], p, 1e-3).apply(p, t=0.0)
        assert np.all(p.v == 0.0)


class TestPerturbation:
    def test_zero_epsilon_is_bit_identical(self):
        p = fresh_particles()
        out = perturb_particles(p, PerturbConfig(epsilon=0.0, seed=1))
        np.testing.assert_array_equal(out.x, p.x)
        np.testing.assert_array_equal(out.color, p.color)

    def test_offsets_match_augmentation(self):
        p = fresh_particles()
        cfg = PerturbConfig(epsilon=0.01, seed=9)
        out = perturb_particles(p, cfg)
        dx, dc = perturbation_offsets(p.n, cfg)
        np.testing.assert_allclose(out.x - p.x, dx, atol=1e-15)
        np.testing.assert_allclose(out.color, np.clip(p.color + dc, 0.0, 1.0))

    def test_same_seed_same_offsets(self):
        cfg = PerturbConfig(epsilon=0.1, seed=4)
        a = perturbation_offsets(64, cfg)
        b = perturbation_offsets(64, cfg)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_offset_scale_tracks_epsilon(self):
        dx, dc = perturbation_offsets(20000, PerturbConfig(epsilon=0.1, seed=0))
        assert dx.std() == pytest.approx(0.1, rel=0.05)
        assert dc.std() == pytest.approx(0.2, rel=0.05)

    def test_colors_stay_clamped(self):
        p = fresh_particles()
        out = perturb_particles(p, PerturbConfig(epsilon=0.5, seed=2))
        assert out.color.min() >= 0.0
        assert out.color.max() <= 1.0

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ValidationError):
            PerturbConfig(epsilon=-0.1)


class TestCamera:
    def test_center_projects_to_image_center(self):
        cam = Camera()
        u, v, depth = cam.project(np.array([[0.5, 0.5, 0.5]]))
        assert u[0] == pytest.approx(32.0)
        assert v[0] == pytest.approx(32.0)
        assert depth[0] == pytest.approx(2.5)

    def test_axis_conventions(self):
        cam = Camera()
        u, v, _ = cam.project(np.array([[0.6, 0.5, 0.6]]))
        # +x maps right, +z maps up (smaller v)
        assert u[0] == pytest.approx(32.0 + 0.1 * 64)
        assert v[0] == pytest.approx(32.0 - 0.1 * 64)

    def test_velocity_projection_consistent_with_positions(self):
        cam = Camera()
        x = np.array([[0.43, 0.5, 0.57]])
        vel = np.array([[0.2, 0.0, -0.1]])
        dt = 1e-3
        u0, v0, _ = cam.project(x)
        u1, v1, _ = cam.project(x + dt * vel)
        du, dv = cam.project_velocity(vel)
        assert du[0] == pytest.approx((u1[0] - u0[0]) / dt, rel=1e-9)
        assert dv[0] == pytest.approx((v1[0] - v0[0]) / dt, rel=1e-9)

    def test_pixel_scale(self):
        cam = Camera(height=128, ortho_height=2.0)
        assert cam.pixel_scale == pytest.approx(2.0 / 128)
