"""Compositional scene: background field + dynamic actors with latent-code grids.

The background owns a multi-resolution grid over the ROI; each actor owns a
latent code whose grid tables come out of a shared hypernetwork, an
object-frame box, and a per-frame pose trajectory with trainable
(rotation6d, translation) corrections. Samples along rays are labeled by box
membership and routed to the owning field; everything downstream
(alpha-compositing, decoding) treats the merged stream uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fieldgrid import HashGridConfig, MultiResGrid, OccupancyGrid, \
    ray_skip_samples_batch
from .geometry import Aabb, Pose, Rotation6D, rot6d_to_matrix, \
    ray_aabb_intersect_batch
from .nets import FieldHead, HyperNet, IntensityNet, RgbDecoder

BETA_FLOOR = 5.0


@dataclass
class ActorModel:
    actor_id: str
    z: np.ndarray                      # (Z,) latent, trainable
    box: Aabb                          # object frame, centered at origin
    trajectory: list[Pose]             # one pose per frame
    delta_rot6d: np.ndarray            # (n_frames, 6) trainable correction
    delta_trans: np.ndarray            # (n_frames, 3) trainable correction
    symmetric: bool = False

    def __post_init__(self):
        c = self.box.center
        if np.abs(c).max() > 1e-6 * max(1.0, np.abs(self.box.extents).max()):
            raise ValueError(f"actor '{self.actor_id}' box must be centered at origin")

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def corrected_pose(self, frame: int) -> Pose:
        """trajectory pose composed with the learned correction."""
        base = self.trajectory[frame]
        d6 = self.delta_rot6d[frame]
        r_delta = rot6d_to_matrix(Rotation6D(d6[:3], d6[3:]))
        return Pose(base.rotation @ r_delta,
                    base.translation + self.delta_trans[frame])

    @property
    def scale(self) -> float:
        """Meters per normalized unit for this actor's field."""
        return float(np.max(self.box.max))


def make_actor(actor_id: str, box: Aabb, trajectory: list[Pose],
               z_dim: int, rng: np.random.Generator,
               symmetric: bool = False) -> ActorModel:
    n = len(trajectory)
    d6 = np.zeros((n, 6))
    d6[:, 0] = 1.0
    d6[:, 4] = 1.0            # identity 6d: columns (1,0,0) and (0,1,0)
    return ActorModel(actor_id, rng.normal(0.0, 0.1, size=z_dim), box,
                      list(trajectory), d6, np.zeros((n, 3)), symmetric)


@dataclass
class SampleBatch:
    """Flat per-sample arrays for a bundle of rays, sorted by (ray, t)."""

    seg: ad.Segments                  # ray partition of the flat arrays
    t: np.ndarray                     # (M,) distances along each ray
    pts: np.ndarray                   # (M, 3) world positions
    ray_of: np.ndarray                # (M,) owning ray index
    label: np.ndarray                 # (M,) -1 = background, else actor index
    n_rays: int


@dataclass
class ComposeConfig:
    background_step: float = 0.25
    actor_step: float = 0.1
    max_samples: int = 192

    def __post_init__(self):
        if self.actor_step > self.background_step:
            raise ValueError("actor step must not exceed background step")


class SceneGraph:
    """Background + actors + shared heads; the editable world model."""

    def __init__(self, roi: Aabb, n_frames: int, seed: int = 0,
                 bg_grid_cfg: HashGridConfig | None = None,
                 actor_grid_cfg: HashGridConfig | None = None,
                 z_dim: int = 16, n_f: int = 8, upsample: int = 2,
                 beta_init: float = 20.0):
        rng = np.random.default_rng(seed)
        self.roi = roi
        self.n_frames = n_frames
        self.init_seed = seed
        self.z_dim = z_dim
        self.n_f = n_f
        self.upsample = upsample
        self.bg_grid_cfg = bg_grid_cfg or HashGridConfig(domain=roi)
        if actor_grid_cfg is None:
            actor_grid_cfg = HashGridConfig(
                table_size=1 << 12,
                domain=Aabb(-np.ones(3), np.ones(3)))  # per-actor domain set later
        self.actor_grid_cfg = actor_grid_cfg
        self.background = MultiResGrid(self.bg_grid_cfg, rng, name="bg.grid")
        self.bg_head = FieldHead("bg.head", self.bg_grid_cfg.out_dim, rng,
                                 n_f=n_f)
        self.actor_head = FieldHead("actor.head", actor_grid_cfg.out_dim, rng,
                                    n_f=n_f)
        self.hypernet = HyperNet("hyper", z_dim, actor_grid_cfg.levels,
                                 actor_grid_cfg.table_size,
                                 actor_grid_cfg.feature_dim, rng)
        self.decoder = RgbDecoder("decoder", n_f, rng, upsample=upsample)
        self.intensity_net = IntensityNet("intensity", n_f, rng)
        self.beta_raw = np.array(np.log(np.expm1(beta_init - BETA_FLOOR)))
        self.actors: list[ActorModel] = []
        self.occupancy: OccupancyGrid | None = None
        self._rng = rng

    # ------------------------------------------------------------------
    # parameters

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays except pose deltas (those opt in separately)."""
        out = {}
        out.update(self.background.params())
        out.update(self.bg_head.params())
        out.update(self.actor_head.params())
        out.update(self.hypernet.params())
        out.update(self.decoder.params())
        out.update(self.intensity_net.params())
        out["beta_raw"] = self.beta_raw
        for a in self.actors:
            out[f"actor.{a.actor_id}.z"] = a.z
        return out

    def delta_params(self, actor_id: str) -> dict[str, np.ndarray]:
        a = self.actor(actor_id)
        return {f"actor.{actor_id}.delta_rot6d": a.delta_rot6d,
                f"actor.{actor_id}.delta_trans": a.delta_trans}

    def beta(self, p: dict | None = None) -> ad.Tensor:
        raw = (p or {}).get("beta_raw", self.beta_raw)
        return ad.add(ad.constant(BETA_FLOOR), ad.softplus(ad.as_tensor(raw)))

    # ------------------------------------------------------------------
    # actors and edits

    def actor(self, actor_id: str) -> ActorModel:
        for a in self.actors:
            if a.actor_id == actor_id:
                return a
        raise KeyError(f"unknown actor '{actor_id}'")

    def add_actor(self, actor: ActorModel) -> "SceneGraph":
        if any(a.actor_id == actor.actor_id for a in self.actors):
            raise ValueError(f"duplicate actor id '{actor.actor_id}'")
        if actor.n_frames != self.n_frames:
            raise ValueError("actor trajectory length must match frame count")
        self.actors.append(actor)
        return self

    def remove_actor(self, actor_id: str) -> "SceneGraph":
        a = self.actor(actor_id)
        self.actors.remove(a)
        return self

    def set_trajectory(self, actor_id: str, poses: list[Pose]) -> "SceneGraph":
        a = self.actor(actor_id)
        if len(poses) != self.n_frames:
            raise ValueError("trajectory length must match frame count")
        a.trajectory = list(poses)
        return self

    def actor_grid(self, actor: ActorModel) -> MultiResGrid:
        cfg = HashGridConfig(
            levels=self.actor_grid_cfg.levels,
            base_resolution=self.actor_grid_cfg.base_resolution,
            per_level_scale=self.actor_grid_cfg.per_level_scale,
            table_size=self.actor_grid_cfg.table_size,
            feature_dim=self.actor_grid_cfg.feature_dim,
            domain=actor.box)
        grid = MultiResGrid.__new__(MultiResGrid)
        grid.cfg = cfg
        grid.name = f"actor.{actor.actor_id}.grid"
        grid.tables = None            # filled from the hypernet per query
        return grid

    def actor_tables(self, actor: ActorModel, p: dict | None = None):
        """Hypernet-regressed per-level tables for one actor."""
        z = (p or {}).get(f"actor.{actor.actor_id}.z", actor.z)
        return self.hypernet.grid_tables(z, p)

    # ------------------------------------------------------------------
    # queries

    def _normalize_bg(self, x: np.ndarray):
        c = self.roi.center
        s0 = float(np.max(self.roi.extents) * 0.5)
        return (x - c) / s0, s0

    def query_background(self, x: np.ndarray, d: np.ndarray,
                         p: dict | None = None):
        """(s [meters], f descriptor) of the static field at world points."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        if not np.all(self.roi.contains(x)):
            raise ValueError("background query outside the scene ROI")
        feats = self.background.query(x, p)
        xn, s0 = self._normalize_bg(x)
        s_n, h = self.bg_head.geometry(feats, xn, p)
        f = self.bg_head.descriptor(h, d, p)
        return ad.scalar_mul(s_n, s0), f

    def query_actor(self, actor: ActorModel, x_world: np.ndarray,
                    d_world: np.ndarray, frame: int, p: dict | None = None,
                    flip: np.ndarray | bool | None = None,
                    tables=None, track_pose: bool = False):
        """(s [meters], f) of one actor's field at world points.

        flip: None (off), True/False, or a per-point bool mask; when on, the
        lateral (y) component of object-frame point and direction is negated
        before the query — the training-time symmetry augmentation.
        track_pose: build the object-frame transform on the tape from this
        actor's delta parameters in p, so gradients reach the pose correction.
        """
        x_world = np.asarray(x_world, dtype=np.float64).reshape(-1, 3)
        d_world = np.asarray(d_world, dtype=np.float64).reshape(-1, 3)
        pose = actor.corrected_pose(frame)
        x_obj = (x_world - pose.translation) @ pose.rotation
        d_obj = d_world @ pose.rotation
        tol = 1e-6 * max(1.0, actor.scale)
        if np.any(np.abs(x_obj) > np.asarray(actor.box.max) + tol):
            raise ValueError(
                f"actor '{actor.actor_id}': query outside its box at frame {frame}")
        n = x_obj.shape[0]
        if flip is None or flip is False:
            flip_mask = None
        elif flip is True:
            flip_mask = np.ones(n, dtype=bool)
        else:
            flip_mask = np.asarray(flip, dtype=bool)
        if flip_mask is not None and flip_mask.any():
            sgn = np.where(flip_mask, -1.0, 1.0)
            x_obj = x_obj.copy()
            d_obj = d_obj.copy()
            x_obj[:, 1] *= sgn
            d_obj[:, 1] *= sgn
        if tables is None:
            tables = self.actor_tables(actor, p)
        grid = self.actor_grid(actor)
        q = p.copy() if p else {}
        for l, tab in enumerate(tables):
            q[f"{grid.name}.tables.{l}"] = tab
        x_t = None
        if track_pose:
            x_t, d_t = self._tape_object_transform(actor, x_world, d_world,
                                                   frame, q, flip_mask)
            d_obj_in = d_t
        else:
            d_obj_in = d_obj
        feats = grid.query(x_obj, q, x_t=x_t)
        s0 = actor.scale
        if x_t is None:
            xn = x_obj / s0
        else:
            xn = ad.scalar_mul(x_t, 1.0 / s0)
        s_n, h = self.actor_head.geometry(feats, xn, q)
        f = self.actor_head.descriptor(h, d_obj_in, q)
        return ad.scalar_mul(s_n, s0), f

    def _tape_object_transform(self, actor: ActorModel, x_world, d_world,
                               frame: int, p: dict, flip_mask):
        """Object-frame coords as tape tensors of the pose-delta parameters."""
        d6_all = p.get(f"actor.{actor.actor_id}.delta_rot6d")
        dt_all = p.get(f"actor.{actor.actor_id}.delta_trans")
        if d6_all is None or dt_all is None:
            raise ValueError("track_pose requires bound delta parameters")
        d6 = ad.reshape(ad.slice_(ad.as_tensor(d6_all), (frame,)), (6,))
        dt = ad.reshape(ad.slice_(ad.as_tensor(dt_all), (frame,)), (3,))
        base = actor.trajectory[frame]
        r_delta = rot6d_tape(d6)
        r_corr = ad.matmul(ad.constant(base.rotation), r_delta)
        t_corr = ad.add(ad.constant(base.translation), dt)
        xm = ad.add_row(ad.constant(x_world), ad.scalar_mul(t_corr, -1.0))
        x_t = ad.matmul(xm, r_corr)
        d_t = ad.matmul(ad.constant(d_world), r_corr)
        if flip_mask is not None and flip_mask.any():
            sgn = np.ones((x_world.shape[0], 3))
            sgn[flip_mask, 1] = -1.0
            x_t = ad.mul(x_t, ad.constant(sgn))
            d_t = ad.mul(d_t, ad.constant(sgn))
        return x_t, d_t

    # ------------------------------------------------------------------
    # sample composition

    def compose_samples(self, origins, dirs, frame: int, cfg: ComposeConfig,
                        rng: np.random.Generator | None = None,
                        t_max: float | None = None) -> SampleBatch:
        """Free-space-skipped background samples merged with fine actor samples.

        Every sample is labeled by world-frame box membership at the frame;
        a point inside several boxes goes to the nearest centroid.
        """
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n_rays = origins.shape[0]
        t0, t1, hit = ray_aabb_intersect_batch(origins, dirs, self.roi)
        t0 = np.where(hit, t0, 0.0)
        t1 = np.where(hit, t1, 0.0)
        if t_max is not None:
            t1 = np.minimum(t1, t_max)
        ts, pts, bg_counts = ray_skip_samples_batch(
            self.occupancy, origins, dirs, t0, t1, cfg.background_step, rng,
            cfg.max_samples)
        all_t = [ts]
        all_ray = [np.repeat(np.arange(n_rays), bg_counts)]
        for actor in self.actors:
            pose = actor.corrected_pose(frame)
            o_obj = (origins - pose.translation) @ pose.rotation
            d_obj = dirs @ pose.rotation
            ta0, ta1, ahit = ray_aabb_intersect_batch(o_obj, d_obj, actor.box)
            ta0 = np.maximum(ta0, t0)
            ta1 = np.minimum(ta1, t1)
            ok = ahit & hit & (ta1 > ta0)
            if not np.any(ok):
                continue
            fts, _, fcounts = ray_skip_samples_batch(
                None, origins[ok], dirs[ok], ta0[ok], ta1[ok],
                cfg.actor_step, rng, cfg.max_samples)
            all_t.append(fts)
            all_ray.append(np.repeat(np.flatnonzero(ok), fcounts))
        t_all = np.concatenate(all_t)
        ray_all = np.concatenate(all_ray)
        order = np.lexsort((t_all, ray_all))
        t_all, ray_all = t_all[order], ray_all[order]
        keep = np.ones(t_all.shape[0], dtype=bool)
        if t_all.shape[0] > 1:
            dup = (np.diff(t_all) == 0) & (np.diff(ray_all) == 0)
            keep[1:][dup] = False
        t_all, ray_all = t_all[keep], ray_all[keep]
        pts_all = origins[ray_all] + t_all[:, None] * dirs[ray_all]
        label = self._label_samples(pts_all, frame)
        counts = np.bincount(ray_all, minlength=n_rays).astype(np.int64)
        return SampleBatch(ad.Segments(counts), t_all, pts_all, ray_all,
                           label, n_rays)

    def _label_samples(self, pts: np.ndarray, frame: int) -> np.ndarray:
        label = np.full(pts.shape[0], -1, dtype=np.int64)
        best = np.full(pts.shape[0], np.inf)
        for i, actor in enumerate(self.actors):
            pose = actor.corrected_pose(frame)
            x_obj = (pts - pose.translation) @ pose.rotation
            inside = np.all(np.abs(x_obj) <= actor.box.max + 1e-12, axis=1)
            if not np.any(inside):
                continue
            d2 = np.sum((pts - pose.translation) ** 2, axis=1)
            upd = inside & (d2 < best)
            label[upd] = i
            best[upd] = d2[upd]
        return label

    def query_samples(self, batch: SampleBatch, dirs, frame: int,
                      p: dict | None = None,
                      rng: np.random.Generator | None = None,
                      track_actor: str | None = None):
        """Route each labeled sample to its owning field; returns (s, f) flat.

        rng drives the per-ray symmetry flip coin (training only; pass None
        at inference). track_actor names one actor whose pose correction
        should stay on the tape.
        """
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        m = batch.t.shape[0]
        if m == 0:
            z1 = ad.constant(np.zeros((0, 1)))
            zf = ad.constant(np.zeros((0, self.n_f)))
            return z1, zf
        d_flat = dirs[batch.ray_of]
        idx_groups = []
        outputs_s = []
        outputs_f = []
        bg_idx = np.flatnonzero(batch.label == -1)
        if bg_idx.size:
            s, f = self.query_background(batch.pts[bg_idx], d_flat[bg_idx], p)
            idx_groups.append(bg_idx)
            outputs_s.append(s)
            outputs_f.append(f)
        for i, actor in enumerate(self.actors):
            a_idx = np.flatnonzero(batch.label == i)
            if not a_idx.size:
                continue
            flip = None
            if rng is not None and actor.symmetric:
                coin = rng.random(batch.n_rays) < 0.5
                flip = coin[batch.ray_of[a_idx]]
            s, f = self.query_actor(
                actor, batch.pts[a_idx], d_flat[a_idx], frame, p, flip=flip,
                track_pose=(track_actor == actor.actor_id))
            idx_groups.append(a_idx)
            outputs_s.append(s)
            outputs_f.append(f)
        order = np.concatenate(idx_groups)
        inv = np.argsort(order, kind="stable")
        s_all = ad.gather(ad.concat(outputs_s, axis=0), inv)
        f_all = ad.gather(ad.concat(outputs_f, axis=0), inv)
        return s_all, f_all


def rot6d_tape(d6: ad.Tensor) -> ad.Tensor:
    """Gram-Schmidt rotation from a (6,) tape tensor; columns (b1, b2, b1xb2)."""
    a1 = ad.slice_(d6, (slice(0, 3),))
    a2 = ad.slice_(d6, (slice(3, 6),))
    b1 = ad.mul(a1, ad.reciprocal(ad.sqrt(ad.tsum(ad.square(a1)))))
    dot = ad.tsum(ad.mul(a2, b1))
    a2p = ad.sub(a2, ad.mul(b1, dot))
    b2 = ad.mul(a2p, ad.reciprocal(ad.sqrt(ad.tsum(ad.square(a2p)))))
    c0 = ad.sub(ad.mul(b1[1], b2[2]), ad.mul(b1[2], b2[1]))
    c1 = ad.sub(ad.mul(b1[2], b2[0]), ad.mul(b1[0], b2[2]))
    c2 = ad.sub(ad.mul(b1[0], b2[1]), ad.mul(b1[1], b2[0]))
    b3 = ad.concat([ad.reshape(c0, (1,)), ad.reshape(c1, (1,)),
                    ad.reshape(c2, (1,))], axis=0)
    rows = ad.concat([ad.reshape(b1, (1, 3)), ad.reshape(b2, (1, 3)),
                      ad.reshape(b3, (1, 3))], axis=0)
    return ad.transpose(rows)
