"""Scenario edits and the deterministic closed sensor loop.

Each step: behaviors move the actors, the sensors are posed on the SDV,
the scene renders a LiDAR sweep (camera optional), a toy autonomy stub
turns the sweep into (accel, steer), and a kinematic bicycle model
advances the SDV. Everything is a pure function of (scenario, weights,
seed), so two runs produce bitwise-identical step records.

Actors are rendered at behavior poses by rewriting trajectory slot 0 of
the scene graph for the duration of the run (restored on exit), which
keeps the field query path identical to training.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import Pose, Ray, ray_aabb_intersect
from .metrics import LidarMetrics, lidar_metrics
from .render import (CameraModel, LidarModel, RenderConfig, render_image,
                     render_lidar)
from .scene import SceneGraph, make_actor

WHEELBASE = 2.8      # meters
ACCEL_MAX = 4.0      # m/s^2
STEER_MAX = 0.5      # radians


# ---------------------------------------------------------------------------
# behaviors


@dataclass
class BehaviorModel:
    """How one actor moves: replay | constant-velocity | scripted-waypoints."""

    kind: str
    poses: list[Pose] | None = None          # replay
    velocity: np.ndarray | None = None       # constant-velocity, world m/s
    start_pose: Pose | None = None           # constant-velocity start
    waypoints: np.ndarray | None = None      # scripted, (K, 3)
    times: np.ndarray | None = None          # scripted, (K,) seconds

    def __post_init__(self):
        kinds = ("replay", "constant-velocity", "scripted-waypoints")
        if self.kind not in kinds:
            raise ValueError(f"unknown behavior kind '{self.kind}'")
        if self.kind == "replay" and not self.poses:
            raise ValueError("replay behavior needs recorded poses")
        if self.kind == "constant-velocity":
            if self.velocity is None or self.start_pose is None:
                raise ValueError("constant-velocity needs velocity and start_pose")
            self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.kind == "scripted-waypoints":
            if self.waypoints is None or self.times is None:
                raise ValueError("scripted behavior needs waypoints and times")
            self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
            self.times = np.asarray(self.times, dtype=np.float64)
            if self.waypoints.shape[0] != self.times.shape[0]:
                raise ValueError("one time per waypoint")
            if self.waypoints.shape[0] < 2:
                raise ValueError("scripted behavior needs >= 2 waypoints")
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("waypoint times must increase")


@dataclass
class ActorState:
    pose: Pose
    step: int = 0
    time: float = 0.0


def _yaw_pose(position: np.ndarray, direction: np.ndarray,
              fallback: Pose) -> Pose:
    d = np.asarray(direction, dtype=np.float64)[:2]
    n = np.linalg.norm(d)
    if n < 1e-12:
        return Pose(fallback.rotation, np.asarray(position, dtype=np.float64))
    c, s = d[0] / n, d[1] / n
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rot, np.asarray(position, dtype=np.float64))


def step_behavior(behavior: BehaviorModel, state: ActorState,
                  dt: float) -> Pose:
    """Pose for the step the state is entering; does not mutate state."""
    if behavior.kind == "replay":
        k = min(state.step, len(behavior.poses) - 1)
        return behavior.poses[k]
    if behavior.kind == "constant-velocity":
        t = behavior.velocity * dt
        return Pose(state.pose.rotation, state.pose.translation + t)
    t_next = state.time + dt
    wp, times = behavior.waypoints, behavior.times
    if t_next >= times[-1]:
        seg = wp[-1] - wp[-2]
        return _yaw_pose(wp[-1], seg, state.pose)
    i = int(np.searchsorted(times, t_next, side="right") - 1)
    i = max(0, min(i, len(times) - 2))
    frac = (t_next - times[i]) / (times[i + 1] - times[i])
    pos = wp[i] + frac * (wp[i + 1] - wp[i])
    return _yaw_pose(pos, wp[i + 1] - wp[i], state.pose)


# ---------------------------------------------------------------------------
# autonomy stub + SDV kinematics


@dataclass
class AutonomyStub:
    target_speed: float = 5.0        # m/s
    brake_threshold: float = 10.0    # meters, forward-cone min depth
    lateral_gain: float = 0.5        # steer per meter of offset
    speed_gain: float = 1.0          # accel per m/s of speed error
    cone_half_angle: float = np.radians(15.0)
    accel_max: float = ACCEL_MAX
    steer_max: float = STEER_MAX


@dataclass
class SdvState:
    pose: Pose
    speed: float

    @property
    def heading(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    @property
    def yaw(self) -> float:
        h = self.heading
        return float(np.arctan2(h[1], h[0]))


def lateral_offset(position: np.ndarray, polyline: np.ndarray) -> float:
    """Signed distance from a lane-center polyline; positive = left of travel."""
    p = np.asarray(position, dtype=np.float64)[:2]
    pts = np.asarray(polyline, dtype=np.float64)[:, :2]
    if pts.shape[0] < 2:
        raise ValueError("lane reference needs >= 2 points")
    best, best_off = np.inf, 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        L2 = float(seg @ seg)
        u = 0.0 if L2 == 0.0 else float(np.clip((p - a) @ seg / L2, 0.0, 1.0))
        proj = a + u * seg
        d = float(np.linalg.norm(p - proj))
        if d < best:
            best = d
            # z of the 2D cross product: + when p is left of the segment
            off = seg[0] * (p[1] - a[1]) - seg[1] * (p[0] - a[0])
            best_off = np.sign(off) * d if L2 > 0 else d
    return best_off


def autonomy_act(sweep, sdv: SdvState, stub: AutonomyStub,
                 lane_ref: np.ndarray | None = None) -> tuple[float, float]:
    """(accel, steer) from one sweep; all-miss keeps speed and heading."""
    if np.all(sweep.miss):
        return 0.0, 0.0
    ang = np.mod(sweep.azimuth + np.pi, 2.0 * np.pi) - np.pi
    cone = (~sweep.miss) & (np.abs(ang) < stub.cone_half_angle)
    if np.any(cone) and float(np.min(sweep.depth[cone])) < stub.brake_threshold:
        accel = -stub.accel_max
    else:
        accel = float(np.clip(stub.speed_gain * (stub.target_speed - sdv.speed),
                              -stub.accel_max, stub.accel_max))
    steer = 0.0
    if lane_ref is not None:
        off = lateral_offset(sdv.pose.translation, lane_ref)
        steer = float(np.clip(-stub.lateral_gain * off,
                              -stub.steer_max, stub.steer_max))
    return accel, steer


def integrate_bicycle(sdv: SdvState, accel: float, steer: float,
                      dt: float, wheelbase: float = WHEELBASE) -> SdvState:
    """Kinematic bicycle step; speed clamped at 0 (no reverse)."""
    v = sdv.speed
    yaw = sdv.yaw
    x, y, z = sdv.pose.translation
    x += v * np.cos(yaw) * dt
    y += v * np.sin(yaw) * dt
    yaw += v / wheelbase * np.tan(steer) * dt
    v = max(0.0, v + accel * dt)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return SdvState(Pose(rot, np.array([x, y, z])), v)


# ---------------------------------------------------------------------------
# scenario + edits


@dataclass
class SceneEdits:
    remove: list[str] = dc_field(default_factory=list)
    add: list[dict] = dc_field(default_factory=list)    # actor_id, copy_from, trajectory
    override: dict = dc_field(default_factory=dict)     # actor_id -> list[Pose]


def apply_edits(graph: SceneGraph, edits: SceneEdits) -> SceneGraph:
    """Remove / clone / re-route actors in place; unknown ids raise KeyError."""
    for actor_id in edits.remove:
        graph.remove_actor(actor_id)
    for spec_ in edits.add:
        src = graph.actor(spec_["copy_from"])
        clone = make_actor(spec_["actor_id"], src.box, spec_["trajectory"],
                           graph.z_dim, np.random.default_rng(0),
                           symmetric=src.symmetric)
        clone.z = src.z.copy()
        graph.add_actor(clone)
    for actor_id, poses in edits.override.items():
        graph.set_trajectory(actor_id, poses)
    return graph


@dataclass
class Scenario:
    horizon: int
    sdv_start: Pose
    sdv_speed: float = 5.0
    dt: float = 0.1
    seed: int = 0
    behaviors: dict = dc_field(default_factory=dict)    # actor_id -> BehaviorModel
    edits: SceneEdits | None = None
    lidar: LidarModel | None = None
    camera: CameraModel | None = None
    lidar_extrinsic: Pose = dc_field(default_factory=Pose)
    cam_extrinsic: Pose = dc_field(default_factory=Pose)
    render_camera: bool = False
    lane_ref: np.ndarray | None = None                  # (K, 3) polyline
    base_scene: str = ""

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.lane_ref is not None:
            self.lane_ref = np.asarray(self.lane_ref, dtype=np.float64)

    def default_lane_ref(self) -> np.ndarray:
        h = self.sdv_start.rotation[:, 0]
        p = self.sdv_start.translation
        return np.stack([p - 5.0 * h, p + 1000.0 * h])


# ---------------------------------------------------------------------------
# the loop


@dataclass
class StepRecord:
    step: int
    sdv_pose: Pose
    sdv_speed: float
    actor_poses: dict
    accel: float
    steer: float
    clearance: float            # min forward clearance, meters; inf if clear
    artifacts: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        def pose_d(pose):
            return {"rotation": pose.rotation.tolist(),
                    "translation": pose.translation.tolist()}
        return {"step": self.step,
                "sdv_pose": pose_d(self.sdv_pose),
                "sdv_speed": self.sdv_speed,
                "actor_poses": {k: pose_d(v) for k, v in self.actor_poses.items()},
                "accel": self.accel,
                "steer": self.steer,
                "clearance": None if np.isinf(self.clearance) else self.clearance,
                "artifacts": dict(self.artifacts)}


def forward_clearance(sdv: SdvState, graph: SceneGraph, frame: int = 0,
                      front_offset: float = 2.0) -> float:
    """Bumper-to-box distance along the heading; <= 0 counts as collision.

    Each actor is probed with a level ray at its own box-center height, so
    a ground-level SDV origin still sees boxes that sit on the road.
    """
    heading = sdv.heading.copy()
    heading[2] = 0.0
    n = np.linalg.norm(heading)
    if n < 1e-12:
        return np.inf
    heading /= n
    best = np.inf
    for actor in graph.actors:
        pose = actor.corrected_pose(frame)
        origin = sdv.pose.translation.copy()
        origin[2] = pose.translation[2]
        o_obj = (origin - pose.translation) @ pose.rotation
        d_obj = heading @ pose.rotation
        span = ray_aabb_intersect(Ray(o_obj, d_obj), actor.box)
        if span is None:
            continue
        best = min(best, span[0] - front_offset)
    return best


class _StagedActors:
    """Rewrites trajectory slot `frame` (and zeroes its pose delta) for a run."""

    def __init__(self, graph: SceneGraph, frame: int = 0):
        self.graph = graph
        self.frame = frame
        self._saved = [(a.trajectory[frame], a.delta_rot6d[frame].copy(),
                        a.delta_trans[frame].copy()) for a in graph.actors]
        for a in graph.actors:
            a.delta_rot6d[frame] = np.array([1.0, 0, 0, 0, 1.0, 0])
            a.delta_trans[frame] = 0.0

    def set_pose(self, actor_id: str, pose: Pose) -> None:
        self.graph.actor(actor_id).trajectory[self.frame] = pose

    def restore(self) -> None:
        for a, (traj, d6, dt_) in zip(self.graph.actors, self._saved):
            a.trajectory[self.frame] = traj
            a.delta_rot6d[self.frame] = d6
            a.delta_trans[self.frame] = dt_


def closed_loop_run(scenario: Scenario, graph: SceneGraph,
                    stub: AutonomyStub | None,
                    cfg: RenderConfig | None = None,
                    out_dir=None) -> list[StepRecord]:
    """Run the loop; stub=None drives open-loop (zero controls).

    Renders LiDAR every step (camera when scenario.render_camera) using
    trajectory slot 0 of the graph for the behavior poses; the graph is
    restored afterwards. Returns one StepRecord per step.
    """
    if scenario.lidar is None:
        raise ValueError("scenario needs a lidar model")
    cfg = cfg or RenderConfig()
    lane_ref = scenario.lane_ref
    if lane_ref is None:
        lane_ref = scenario.default_lane_ref()
    if scenario.edits is not None:
        apply_edits(graph, scenario.edits)
    states = {}
    for actor_id, behavior in scenario.behaviors.items():
        actor = graph.actor(actor_id)       # validates the reference
        if behavior.kind == "replay":
            start = behavior.poses[0]
        elif behavior.kind == "constant-velocity":
            start = behavior.start_pose
        else:
            start = _yaw_pose(behavior.waypoints[0],
                              behavior.waypoints[1] - behavior.waypoints[0],
                              actor.trajectory[0])
        states[actor_id] = ActorState(start, step=0, time=0.0)
    sdv = SdvState(scenario.sdv_start, scenario.sdv_speed)
    staged = _StagedActors(graph, frame=0)
    records = []
    try:
        for k in range(scenario.horizon):
            for actor_id, behavior in scenario.behaviors.items():
                st = states[actor_id]
                pose = step_behavior(behavior, st, scenario.dt)
                states[actor_id] = ActorState(pose, st.step + 1,
                                              st.time + scenario.dt)
                staged.set_pose(actor_id, pose)
            lidar = scenario.lidar
            lidar_posed = LidarModel(lidar.elevations, lidar.azimuth_resolution,
                                     lidar.max_range,
                                     pose=sdv.pose.compose(scenario.lidar_extrinsic))
            artifacts = {}
            try:
                sweep = render_lidar(graph, lidar_posed, 0, cfg)
                image = None
                if scenario.render_camera and scenario.camera is not None:
                    cam = scenario.camera
                    cam_posed = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy,
                                            cam.width, cam.height, cam.upsample,
                                            pose=sdv.pose.compose(scenario.cam_extrinsic))
                    image = render_image(graph, cam_posed, 0, cfg)
            except Exception as e:
                raise RuntimeError(f"rendering failed at step {k}: {e}") from e
            if stub is not None:
                accel, steer = autonomy_act(sweep, sdv, stub, lane_ref)
            else:
                accel, steer = 0.0, 0.0
            sdv = integrate_bicycle(sdv, accel, steer, scenario.dt)
            clearance = forward_clearance(sdv, graph, frame=0)
            if out_dir is not None:
                artifacts = _save_step_artifacts(out_dir, k, sweep, image)
            records.append(StepRecord(
                step=k, sdv_pose=sdv.pose, sdv_speed=sdv.speed,
                actor_poses={a: states[a].pose for a in scenario.behaviors},
                accel=accel, steer=steer, clearance=clearance,
                artifacts=artifacts))
    finally:
        staged.restore()
    return records


def _save_step_artifacts(out_dir, step: int, sweep, image) -> dict:
    from pathlib import Path
    from . import fileio
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    ply = out / f"step_{step:04d}.ply"
    fileio.save_ply(ply, sweep.points[~sweep.miss],
                    sweep.intensity[~sweep.miss])
    paths["sweep"] = str(ply)
    if image is not None:
        png = out / f"step_{step:04d}.png"
        fileio.save_png(png, image.image)
        paths["image"] = str(png)
    return paths


# ---------------------------------------------------------------------------
# open-loop replay + lane shift


def open_loop_replay(graph: SceneGraph, dataset, frames=None,
                     cfg: RenderConfig | None = None):
    """Re-render recorded frames; LiDAR metrics vs the log.

    Returns (per-frame LidarMetrics list, pooled LidarMetrics over all the
    frames' rays, frame indices).
    """
    cfg = cfg or RenderConfig()
    frames = list(dataset.test_frames) if frames is None else list(frames)
    per_frame = []
    sim_sweeps = []
    for f in frames:
        sweep = render_lidar(graph, dataset.lidar_at_frame(f), f, cfg)
        sim_sweeps.append(sweep)
        per_frame.append(lidar_metrics(sweep, dataset.sweeps[f]))
    pooled = lidar_metrics(_concat_sweeps(sim_sweeps),
                           _concat_sweeps([dataset.sweeps[f] for f in frames]))
    return per_frame, pooled, frames


def _concat_sweeps(sweeps):
    from .render import SweepRender
    return SweepRender(
        depth=np.concatenate([s.depth for s in sweeps]),
        intensity=np.concatenate([s.intensity for s in sweeps]),
        miss=np.concatenate([s.miss for s in sweeps]),
        azimuth=np.concatenate([s.azimuth for s in sweeps]),
        elevation=np.concatenate([s.elevation for s in sweeps]),
        points=np.concatenate([s.points for s in sweeps], axis=0))


def shift_rig(poses: list[Pose], offset: float) -> list[Pose]:
    """Lane-shift evaluation: translate each pose along its own +y (left)."""
    return [Pose(p.rotation, p.translation + p.rotation[:, 1] * offset)
            for p in poses]
