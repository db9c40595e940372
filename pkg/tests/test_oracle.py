"""Analytic scene: exact SDFs, sphere tracing, sensor renders, dataset export."""

import numpy as np
import pytest

from fieldsim.geometry import Aabb, Pose
from fieldsim.oracle import (TRACKLET_PAD, OracleScene, Primitive,
                             gen_dataset, oracle_render_camera,
                             oracle_render_lidar, sphere_trace,
                             standard_camera, standard_dataset, standard_lidar,
                             standard_rig, standard_scene)
from fieldsim.render import CameraModel, LidarModel


def sphere_at(center, r=1.0):
    return Primitive("sphere", [Pose(np.eye(3), np.asarray(center, float))],
                     (r,), (0.5, 0.5, 0.5), 0.7, name="s")


def box_at(center, half):
    return Primitive("box", [Pose(np.eye(3), np.asarray(center, float))],
                     half, (0.5, 0.5, 0.5), 0.4, name="b")


def wide_roi():
    return Aabb(np.full(3, -20.0), np.full(3, 20.0))


class TestPrimitiveSdf:
    def test_sphere_hand_values(self):
        p = sphere_at([0, 0, 0], r=2.0)
        x = np.array([[0.0, 0, 0], [2.0, 0, 0], [5.0, 0, 0], [0, -3.0, 0]])
        np.testing.assert_allclose(p.sdf(x, 0), [-2.0, 0.0, 3.0, 1.0],
                                   atol=1e-12)

    def test_translated_sphere(self):
        p = sphere_at([3, 0, 0], r=1.0)
        assert abs(p.sdf(np.array([[3.0, 0, 0]]), 0)[0] + 1.0) < 1e-12
        assert abs(p.sdf(np.array([[5.0, 0, 0]]), 0)[0] - 1.0) < 1e-12

    def test_box_hand_values(self):
        p = box_at([0, 0, 0], (1.0, 2.0, 3.0))
        x = np.array([
            [0.0, 0.0, 0.0],     # deepest inside: nearest face 1 away
            [1.0, 0.0, 0.0],     # on the +x face
            [3.0, 0.0, 0.0],     # 2 beyond the +x face
            [4.0, 6.0, 3.0],     # outside past a corner in x and y
        ])
        d_corner = np.hypot(3.0, 4.0)
        np.testing.assert_allclose(p.sdf(x, 0), [-1.0, 0.0, 2.0, d_corner],
                                   atol=1e-12)

    def test_plane_is_signed_height(self):
        p = Primitive("plane", [Pose()], (), (0.5, 0.5, 0.5), 0.3)
        x = np.array([[5.0, -2.0, 1.5], [0.0, 0.0, -0.25]])
        np.testing.assert_allclose(p.sdf(x, 0), [1.5, -0.25])

    def test_rotated_box(self):
        rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        p = Primitive("box", [Pose(rz, np.zeros(3))], (2.0, 1.0, 1.0),
                      (0.5, 0.5, 0.5), 0.4)
        # world +y is the box's long (object x) axis after a 90 deg turn
        assert abs(p.sdf(np.array([[0.0, 2.0, 0.0]]), 0)[0]) < 1e-12
        assert abs(p.sdf(np.array([[1.0, 0.0, 0.0]]), 0)[0]) < 1e-12

    def test_dynamic_primitive_follows_frames(self):
        poses = [Pose(np.eye(3), np.array([float(f), 0, 0])) for f in range(3)]
        p = Primitive("sphere", poses, (0.5,), (0.5, 0.5, 0.5), 0.7,
                      dynamic=True)
        x = np.array([[2.0, 0.0, 0.0]])
        np.testing.assert_allclose([p.sdf(x, f)[0] for f in range(3)],
                                   [1.5, 0.5, -0.5], atol=1e-12)

    def test_unknown_kind_raises(self):
        p = Primitive("cone", [Pose()], (1.0,), (0.5, 0.5, 0.5), 0.5)
        with pytest.raises(ValueError, match="unknown primitive"):
            p.sdf(np.zeros((1, 3)), 0)


class TestSceneUnion:
    def scene(self):
        return OracleScene([sphere_at([0, 0, 0]), sphere_at([4, 0, 0])],
                           wide_roi())

    def test_union_takes_minimum(self):
        s, idx = self.scene().sdf(np.array([[1.5, 0.0, 0.0]]), 0)
        np.testing.assert_allclose(s, [0.5])
        assert idx[0] == 0
        s, idx = self.scene().sdf(np.array([[3.5, 0.0, 0.0]]), 0)
        np.testing.assert_allclose(s, [-0.5])
        assert idx[0] == 1

    def test_normal_points_outward_on_sphere(self):
        sc = self.scene()
        x = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
        n = sc.normal(x, 0)
        np.testing.assert_allclose(n, [[0, 1, 0], [0, 0, -1]], atol=1e-5)


class TestSphereTrace:
    def test_depth_matches_analytic_sphere(self):
        sc = OracleScene([sphere_at([10, 0, 0], r=2.0)], wide_roi())
        o = np.array([[0.0, 0.0, 0.0]])
        d = np.array([[1.0, 0.0, 0.0]])
        depth, hit, prim = sphere_trace(sc, o, d, 0)
        assert hit[0] and prim[0] == 0
        assert abs(depth[0] - 8.0) < 1e-5

    def test_hit_points_sit_on_surface(self, rng):
        sc = OracleScene([sphere_at([10, 0, 0], r=2.0),
                          box_at([5, 5, 0], (1.0, 1.0, 1.0))], wide_roi())
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.zeros((200, 3))
        depth, hit, _ = sphere_trace(sc, o, d, 0)
        pts = o[hit] + depth[hit, None] * d[hit]
        s, _ = sc.sdf(pts, 0)
        assert np.abs(s).max() <= 1e-6

    def test_miss_returns_zero_depth(self):
        sc = OracleScene([sphere_at([10, 0, 0], r=1.0)], wide_roi())
        depth, hit, _ = sphere_trace(sc, np.zeros((1, 3)),
                                     np.array([[0.0, 0.0, 1.0]]), 0)
        assert not hit[0]
        assert depth[0] == 0.0

    def test_t_max_truncates(self):
        sc = OracleScene([sphere_at([10, 0, 0], r=1.0)], wide_roi())
        o = np.zeros((1, 3))
        d = np.array([[1.0, 0.0, 0.0]])
        _, hit_far, _ = sphere_trace(sc, o, d, 0, t_max=20.0)
        _, hit_near, _ = sphere_trace(sc, o, d, 0, t_max=5.0)
        assert hit_far[0] and not hit_near[0]

    def test_surface_beyond_roi_does_not_return(self):
        roi = Aabb(np.full(3, -2.0), np.full(3, 2.0))
        sc = OracleScene([sphere_at([10, 0, 0], r=1.0)], roi)
        _, hit, _ = sphere_trace(sc, np.zeros((1, 3)),
                                 np.array([[1.0, 0.0, 0.0]]), 0)
        assert not hit[0]


class TestOracleSensors:
    def downward_camera(self):
        rot = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).T
        # looking straight down from z=5 over a ground plane at z=0
        down = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        return CameraModel(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32,
                           height=24, upsample=2,
                           pose=Pose(down, np.array([0.0, 0.0, 5.0])))

    def test_empty_scene_renders_background(self):
        sc = OracleScene([sphere_at([100, 100, 100], r=0.1)],
                         Aabb(np.full(3, -50.0), np.full(3, 150.0)))
        img = oracle_render_camera(sc, self.downward_camera(), 0)
        assert img.shape == (24, 32, 3)
        np.testing.assert_allclose(img, np.tile(sc.background, (24, 32, 1)))

    def test_lambert_shading_on_flat_ground(self):
        plane = Primitive("plane", [Pose()], (), (0.4, 0.5, 0.6), 0.3,
                          name="ground")
        sc = OracleScene([plane], wide_roi())
        img = oracle_render_camera(sc, self.downward_camera(), 0)
        lam = sc.light_dir[2]            # surface normal is +z
        want = np.clip(np.array(plane.albedo)
                       * (sc.ambient + (1 - sc.ambient) * lam), 0, 1)
        np.testing.assert_allclose(img, np.tile(want, (24, 32, 1)), atol=1e-6)

    def test_lidar_intensity_is_reflectivity(self):
        plane = Primitive("plane", [Pose()], (), (0.4, 0.5, 0.6), 0.3)
        sc = OracleScene([plane], wide_roi())
        lidar = LidarModel(elevations=np.radians([-30.0]),
                           azimuth_resolution=np.radians(45.0), max_range=30.0,
                           pose=Pose(np.eye(3), np.array([0.0, 0.0, 3.0])))
        sweep = oracle_render_lidar(sc, lidar, 0)
        assert not sweep.miss.any()
        np.testing.assert_allclose(sweep.intensity, 0.3)
        np.testing.assert_allclose(sweep.depth, 3.0 / np.sin(np.radians(30.0)),
                                   atol=1e-5)
        np.testing.assert_allclose(sweep.points[:, 2], 0.0, atol=1e-5)

    def test_upward_lidar_misses(self):
        plane = Primitive("plane", [Pose()], (), (0.4, 0.5, 0.6), 0.3)
        sc = OracleScene([plane], wide_roi())
        lidar = LidarModel(elevations=np.radians([30.0]),
                           azimuth_resolution=np.radians(90.0), max_range=30.0,
                           pose=Pose(np.eye(3), np.array([0.0, 0.0, 3.0])))
        sweep = oracle_render_lidar(sc, lidar, 0)
        assert sweep.miss.all()
        np.testing.assert_array_equal(sweep.intensity, 0.0)


class TestStandardScene:
    def test_primitive_roster(self):
        sc = standard_scene()
        names = [p.name for p in sc.primitives]
        assert names == ["ground", "building_a", "building_b", "sphere",
                         "vehicle"]
        dyn = [p.name for p in sc.primitives if p.dynamic]
        assert dyn == ["vehicle"]
        assert sc.primitives[-1].symmetric

    def test_vehicle_drives_constant_velocity(self):
        sc = standard_scene(n_frames=4)
        veh = sc.primitives[-1]
        xs = [veh.pose_at(f).translation[0] for f in range(4)]
        np.testing.assert_allclose(xs, [8.0, 9.0, 10.0, 11.0])

    def test_rig_advances_along_x(self):
        rig = standard_rig(3)
        np.testing.assert_allclose([p.translation[0] for p in rig],
                                   [0.0, 1.25, 2.5])

    def test_sensor_configs(self):
        cam, cam_extr = standard_camera()
        assert (cam.width, cam.height, cam.upsample) == (128, 96, 2)
        lidar, lid_extr = standard_lidar()
        assert len(lidar.elevations) == 8
        assert lidar.n_azimuths == 360
        np.testing.assert_allclose(lid_extr.translation, [0.0, 0.0, 2.0])


class TestDataset:
    def test_even_odd_split(self, tiny_dataset):
        assert tiny_dataset.train_frames == [0, 2]
        assert tiny_dataset.test_frames == [1, 3]

    def test_image_stack(self, tiny_dataset):
        assert tiny_dataset.images.shape == (4, 96, 128, 3)
        assert tiny_dataset.images.min() >= 0.0
        assert tiny_dataset.images.max() <= 1.0

    def test_sweep_layout(self, tiny_dataset):
        assert len(tiny_dataset.sweeps) == 4
        for sw in tiny_dataset.sweeps:
            assert sw.depth.shape == (2880,)
            assert sw.points.shape == (2880, 3)

    def test_lidar_points_lie_on_surfaces(self, tiny_dataset):
        ds = tiny_dataset
        for f in range(ds.n_frames):
            sw = ds.sweeps[f]
            s, _ = ds.scene.sdf(sw.points[~sw.miss], f)
            assert np.abs(s).max() <= 1e-6

    def test_dynamic_mask_marks_vehicle_hits(self, tiny_dataset):
        ds = tiny_dataset
        veh = ds.scene.primitives[-1]
        for f in range(ds.n_frames):
            sw = ds.sweeps[f]
            dyn = ds.sweep_dynamic[f]
            assert dyn.dtype == bool
            if np.any(dyn):
                s = veh.sdf(sw.points[dyn], f)
                assert np.abs(s).max() <= 1e-6

    def test_static_points_avoid_the_vehicle(self, tiny_dataset):
        ds = tiny_dataset
        pts = ds.static_points()
        assert pts.shape[0] > 1000
        for f in ds.train_frames:
            s = ds.scene.primitives[-1].sdf(pts, f)
            assert s.min() > -1e-6    # never inside the dynamic box

    def test_tracklet_padding_and_symmetry(self, tiny_dataset):
        (tk,) = tiny_dataset.tracklets
        assert tk.actor_id == "vehicle"
        assert tk.symmetric
        np.testing.assert_allclose(tk.box.max, np.array([2.0, 1.0, 0.75])
                                   + TRACKLET_PAD)
        np.testing.assert_allclose(tk.box.min, -tk.box.max)
        assert len(tk.poses) == 4

    def test_pose_composition(self, tiny_dataset):
        ds = tiny_dataset
        cam2 = ds.cam_at_frame(2)
        want = ds.rig_poses[2].compose(ds.cam_extrinsic)
        np.testing.assert_allclose(cam2.pose.rotation, want.rotation)
        np.testing.assert_allclose(cam2.pose.translation, want.translation)
        lid1 = ds.lidar_at_frame(1)
        want = ds.rig_poses[1].compose(ds.lidar_extrinsic)
        np.testing.assert_allclose(lid1.pose.translation, want.translation)

    def test_generation_deterministic(self):
        a = standard_dataset(n_frames=2)
        b = standard_dataset(n_frames=2)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.sweeps[0].depth, b.sweeps[0].depth)
        np.testing.assert_array_equal(a.sweeps[1].intensity,
                                      b.sweeps[1].intensity)

    def test_rig_length_mismatch_raises(self):
        sc = standard_scene(n_frames=2)
        cam, ce = standard_camera()
        lid, le = standard_lidar()
        with pytest.raises(ValueError, match="length"):
            gen_dataset(sc, 2, standard_rig(3), cam, lid, ce, le)
