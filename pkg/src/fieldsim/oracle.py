"""Analytic ground-truth scene: exact SDF primitives, sphere-traced sensors,
and dataset generation for training and every oracle-based check.

The world is defined only inside the ROI box: surfaces beyond it do not
return (the learned fields share the same domain, which keeps reference and
simulated sensors comparable everywhere). Shading is a fixed directional
light with a Lambert term; LiDAR intensity equals the hit primitive's
reflectivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb, Pose, ray_aabb_intersect_batch
from .render import CameraModel, LidarModel, SweepRender, gen_camera_rays, \
    gen_lidar_rays

TRACE_TOL = 1e-6
TRACE_MAX_STEPS = 512


@dataclass
class Primitive:
    kind: str                       # sphere | box | plane
    poses: list[Pose]               # one (static) or one-per-frame (dynamic)
    size: np.ndarray                # sphere: (r,), box: half extents (3,), plane: ()
    albedo: np.ndarray
    reflectivity: float
    dynamic: bool = False
    name: str = ""
    symmetric: bool = False

    def __post_init__(self):
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def pose_at(self, frame: int) -> Pose:
        return self.poses[frame] if self.dynamic else self.poses[0]

    def sdf(self, x: np.ndarray, frame: int) -> np.ndarray:
        pose = self.pose_at(frame)
        q = (x - pose.translation) @ pose.rotation
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - self.size
            outer = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inner = np.minimum(d.max(axis=-1), 0.0)
            return outer + inner
        if self.kind == "plane":
            # half-space: solid below the object-frame z=0 plane
            return q[..., 2]
        raise ValueError(f"unknown primitive kind '{self.kind}'")


@dataclass
class OracleScene:
    primitives: list[Primitive]
    roi: Aabb
    background: np.ndarray = field(
        default_factory=lambda: np.array([0.55, 0.65, 0.80]))
    light_dir: np.ndarray = field(
        default_factory=lambda: np.array([0.3, 0.2, 0.9]))
    ambient: float = 0.35

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def sdf(self, x: np.ndarray, frame: int):
        """Union SDF value and owning-primitive index at world points."""
        vals = np.stack([p.sdf(x, frame) for p in self.primitives], axis=0)
        idx = np.argmin(vals, axis=0)
        return np.min(vals, axis=0), idx

    def normal(self, x: np.ndarray, frame: int, h: float = 1e-5) -> np.ndarray:
        g = np.zeros_like(x)
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            g[:, k] = (self.sdf(x + dx, frame)[0] - self.sdf(x - dx, frame)[0])
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(n, 1e-12)


def sphere_trace(scene: OracleScene, origins, dirs, frame: int,
                 t_max=None):
    """March the exact union SDF; returns (depth, hit mask, primitive index).

    Rays are confined to their ROI intersection interval (and t_max); a ray
    that leaves it without reaching tolerance distance is a miss.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    t0, t1, inside = ray_aabb_intersect_batch(origins, dirs, scene.roi)
    if t_max is not None:
        t1 = np.minimum(t1, t_max)
    t = np.where(inside, t0, np.inf)
    hit = np.zeros(n, dtype=bool)
    prim = np.zeros(n, dtype=np.int64)
    active = inside & (t1 > t0)
    for _ in range(TRACE_MAX_STEPS):
        if not np.any(active):
            break
        ai = np.flatnonzero(active)
        x = origins[ai] + t[ai, None] * dirs[ai]
        s, idx = scene.sdf(x, frame)
        close = s < TRACE_TOL
        hit_now = ai[close]
        hit[hit_now] = True
        prim[hit_now] = idx[close]
        t[ai[~close]] += s[~close]
        active[ai[close]] = False
        over = active & (t > t1)
        active &= ~over
    return np.where(hit, t, 0.0), hit, prim


def oracle_render_camera(scene: OracleScene, cam: CameraModel,
                         frame: int) -> np.ndarray:
    """Exact full-resolution RGB image (H, W, 3) in [0,1]."""
    full = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                       upsample=1, pose=cam.pose)
    origins, dirs = gen_camera_rays(full)
    depth, hit, prim = sphere_trace(scene, origins, dirs, frame)
    img = np.tile(scene.background, (origins.shape[0], 1))
    if np.any(hit):
        pts = origins[hit] + depth[hit, None] * dirs[hit]
        nrm = scene.normal(pts, frame)
        lam = np.maximum(nrm @ scene.light_dir, 0.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lam
        albedo = np.stack([scene.primitives[i].albedo for i in prim[hit]])
        img[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return img.reshape(cam.height, cam.width, 3)


def _trace_lidar(scene: OracleScene, lidar: LidarModel, frame: int):
    origins, dirs, az, el = gen_lidar_rays(lidar)
    depth, hit, prim = sphere_trace(scene, origins, dirs, frame,
                                    t_max=lidar.max_range)
    inten = np.where(
        hit, np.array([p.reflectivity for p in scene.primitives])[prim], 0.0)
    pts = origins + depth[:, None] * dirs
    pts[~hit] = 0.0
    sweep = SweepRender(depth=depth, intensity=inten, miss=~hit, azimuth=az,
                        elevation=el, points=pts)
    return sweep, prim, hit


def oracle_render_lidar(scene: OracleScene, lidar: LidarModel,
                        frame: int) -> SweepRender:
    """Exact sweep with depth, reflectivity intensity and per-ray miss flags."""
    return _trace_lidar(scene, lidar, frame)[0]


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class Tracklet:
    actor_id: str
    box: Aabb                     # object frame, centered at origin
    poses: list[Pose]             # per frame
    symmetric: bool = False


@dataclass
class Dataset:
    scene: OracleScene
    rig_poses: list[Pose]
    camera: CameraModel           # pose field unused; see cam_at_frame
    lidar: LidarModel
    cam_extrinsic: Pose
    lidar_extrinsic: Pose
    images: np.ndarray            # (T, H, W, 3)
    sweeps: list[SweepRender]
    sweep_dynamic: list[np.ndarray]   # per frame: bool, hit on a dynamic primitive
    tracklets: list[Tracklet]
    train_frames: list[int]
    test_frames: list[int]
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.rig_poses)

    def cam_at_frame(self, frame: int) -> CameraModel:
        c = self.camera
        return CameraModel(c.fx, c.fy, c.cx, c.cy, c.width, c.height,
                           upsample=c.upsample,
                           pose=self.rig_poses[frame].compose(self.cam_extrinsic))

    def lidar_at_frame(self, frame: int) -> LidarModel:
        ld = self.lidar
        return LidarModel(ld.elevations, ld.azimuth_resolution, ld.max_range,
                          pose=self.rig_poses[frame].compose(self.lidar_extrinsic))

    def static_points(self, frames=None) -> np.ndarray:
        """Aggregated world hit points on static primitives (occupancy input)."""
        frames = self.train_frames if frames is None else frames
        parts = []
        for f in frames:
            sw = self.sweeps[f]
            keep = ~sw.miss & ~self.sweep_dynamic[f]
            parts.append(sw.points[keep])
        return np.concatenate(parts, axis=0) if parts else np.empty((0, 3))


TRACKLET_PAD = 0.15


def gen_dataset(scene: OracleScene, n_frames: int, rig_poses: list[Pose],
                camera: CameraModel, lidar: LidarModel, cam_extrinsic: Pose,
                lidar_extrinsic: Pose, seed: int = 0) -> Dataset:
    """Render every frame with both sensors and export actor tracklets."""
    if len(rig_poses) != n_frames:
        raise ValueError("rig trajectory length must equal n_frames")
    images = []
    sweeps = []
    dyn_masks = []
    dyn_idx = {i for i, p in enumerate(scene.primitives) if p.dynamic}
    for f in range(n_frames):
        cam_f = CameraModel(camera.fx, camera.fy, camera.cx, camera.cy,
                            camera.width, camera.height, upsample=camera.upsample,
                            pose=rig_poses[f].compose(cam_extrinsic))
        lid_f = LidarModel(lidar.elevations, lidar.azimuth_resolution,
                           lidar.max_range,
                           pose=rig_poses[f].compose(lidar_extrinsic))
        images.append(oracle_render_camera(scene, cam_f, f))
        sw, prim, hit = _trace_lidar(scene, lid_f, f)
        sweeps.append(sw)
        dyn_masks.append(hit & np.isin(prim, sorted(dyn_idx)))
    tracklets = []
    for i, prim_ in enumerate(scene.primitives):
        if not prim_.dynamic:
            continue
        if prim_.kind != "box":
            raise ValueError("only box primitives can be dynamic actors")
        half = prim_.size + TRACKLET_PAD
        tracklets.append(Tracklet(
            actor_id=prim_.name or f"actor{i}",
            box=Aabb(-half, half),
            poses=[prim_.pose_at(f) for f in range(n_frames)],
            symmetric=prim_.symmetric))
    return Dataset(scene=scene, rig_poses=list(rig_poses), camera=camera,
                   lidar=lidar, cam_extrinsic=cam_extrinsic,
                   lidar_extrinsic=lidar_extrinsic,
                   images=np.stack(images), sweeps=sweeps,
                   sweep_dynamic=dyn_masks, tracklets=tracklets,
                   train_frames=[f for f in range(n_frames) if f % 2 == 0],
                   test_frames=[f for f in range(n_frames) if f % 2 == 1],
                   seed=seed)


# ---------------------------------------------------------------------------
# the standard synthetic scene: flat ground, two buildings, a sphere, and a
# constant-velocity vehicle beside a straight 20 m rig line


def _static(kind, center, size, albedo, refl, name):
    return Primitive(kind, [Pose(np.eye(3), np.asarray(center, dtype=np.float64))],
                     size, albedo, refl, name=name)


def standard_scene(n_frames: int = 16) -> OracleScene:
    roi = Aabb(np.array([-10.0, -10.0, -0.5]), np.array([30.0, 10.0, 6.0]))
    vehicle_poses = [
        Pose(np.eye(3), np.array([8.0 + 1.0 * f, 1.6, 0.75]))
        for f in range(n_frames)]
    prims = [
        _static("plane", (0.0, 0.0, 0.0), (), (0.45, 0.50, 0.40), 0.3, "ground"),
        _static("box", (10.0, 5.5, 1.5), (2.0, 1.5, 1.5),
                (0.70, 0.30, 0.25), 0.6, "building_a"),
        _static("box", (16.0, -5.5, 1.25), (2.0, 1.5, 1.25),
                (0.25, 0.35, 0.70), 0.5, "building_b"),
        _static("sphere", (10.0, -2.5, 1.0), (1.0,),
                (0.80, 0.70, 0.20), 0.8, "sphere"),
        Primitive("box", vehicle_poses, (2.0, 1.0, 0.75), (0.20, 0.40, 0.80),
                  0.7, dynamic=True, name="vehicle", symmetric=True),
    ]
    return OracleScene(prims, roi)


def standard_rig(n_frames: int = 16) -> list[Pose]:
    return [Pose(np.eye(3), np.array([1.25 * f, 0.0, 0.0]))
            for f in range(n_frames)]


def standard_camera() -> tuple[CameraModel, Pose]:
    pitch = np.deg2rad(12.0)
    base = np.array([[0.0, 0.0, 1.0],
                     [-1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0]])
    # tilt the optical axis down by rotating about the camera x (right) axis
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, np.cos(pitch), np.sin(pitch)],
                   [0.0, -np.sin(pitch), np.cos(pitch)]])
    extr = Pose(base @ rx, np.array([0.3, 0.0, 1.6]))
    cam = CameraModel(fx=110.0, fy=110.0, cx=64.0, cy=48.0,
                      width=128, height=96, upsample=2)
    return cam, extr


def standard_lidar() -> tuple[LidarModel, Pose]:
    elev = np.deg2rad([-60.0, -50.0, -40.0, -32.0, -26.0, -21.0, -17.0, -14.0])
    lidar = LidarModel(elev, np.deg2rad(1.0), max_range=20.0)
    return lidar, Pose(np.eye(3), np.array([0.0, 0.0, 2.0]))


def standard_dataset(n_frames: int = 16, seed: int = 0) -> Dataset:
    scene = standard_scene(n_frames)
    cam, cam_extr = standard_camera()
    lidar, lidar_extr = standard_lidar()
    return gen_dataset(scene, n_frames, standard_rig(n_frames), cam, lidar,
                       cam_extr, lidar_extr, seed=seed)
