"""Sensor simulation: camera/LiDAR ray generation, SDF volume rendering,
feature compositing, RGB decoding, expected depth, and intensity.

Rays are generated in world frame. The SDF converts to per-sample opacity
through a trainable-slope logistic, alpha-compositing yields per-ray
weights, and per-ray descriptors either pass through the CNN decoder
(camera) or the intensity MLP (LiDAR). A ray whose total weight stays under
MISS_THRESHOLD produces no return.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Pose
from .scene import ComposeConfig, SampleBatch, SceneGraph

MISS_THRESHOLD = 0.05


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int                # full-resolution image W
    height: int               # full-resolution image H
    upsample: int = 2         # k: image = k x feature map
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.upsample not in (1, 2):
            raise ValueError("upsample factor must be 1 or 2")
        if self.width % self.upsample or self.height % self.upsample:
            raise ValueError("image size must be divisible by the upsample factor")

    @property
    def feat_width(self) -> int:
        return self.width // self.upsample

    @property
    def feat_height(self) -> int:
        return self.height // self.upsample


@dataclass
class LidarModel:
    elevations: np.ndarray          # (B,) beam elevation angles, radians
    azimuth_resolution: float       # radians between consecutive azimuths
    max_range: float = 25.0
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)

    @property
    def n_azimuths(self) -> int:
        return int(round(2.0 * np.pi / self.azimuth_resolution))

    @property
    def n_rays(self) -> int:
        return len(self.elevations) * self.n_azimuths


@dataclass
class RenderConfig:
    compose: ComposeConfig = field(default_factory=ComposeConfig)
    beta_override: float | None = None     # fixed slope for analytic tests

    @property
    def background_step(self) -> float:
        return self.compose.background_step


def gen_camera_rays(cam: CameraModel, pixels: np.ndarray | None = None):
    """World-frame rays through feature-map pixel centers.

    pixels: optional (N, 2) integer (row, col) feature-map coords; default
    all H_f x W_f pixels in row-major order. Feature pixel (i, j) looks
    through image coordinates ((j+0.5)*k, (i+0.5)*k).
    """
    k = cam.upsample
    if pixels is None:
        ii, jj = np.meshgrid(np.arange(cam.feat_height),
                             np.arange(cam.feat_width), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pixels = np.asarray(pixels)
    u = (pixels[:, 1] + 0.5) * k
    v = (pixels[:, 0] + 0.5) * k
    d_cam = np.stack([(u - cam.cx) / cam.fx,
                      (v - cam.cy) / cam.fy,
                      np.ones(len(u))], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ cam.pose.rotation.T
    origins = np.broadcast_to(cam.pose.translation, dirs.shape).copy()
    return origins, dirs


def gen_lidar_rays(lidar: LidarModel):
    """One world-frame ray per (beam, azimuth), beams outer, azimuths inner."""
    az = np.arange(lidar.n_azimuths) * lidar.azimuth_resolution
    el = lidar.elevations
    a = np.tile(az, len(el))
    e = np.repeat(el, lidar.n_azimuths)
    d_sensor = np.stack([np.cos(e) * np.cos(a),
                         np.cos(e) * np.sin(a),
                         np.sin(e)], axis=1)
    dirs = d_sensor @ lidar.pose.rotation.T
    origins = np.broadcast_to(lidar.pose.translation, dirs.shape).copy()
    return origins, dirs, a, e


def sdf_to_alpha(s, beta):
    """Opacity alpha = 1 / (1 + exp(beta * s)); beta may be a tape tensor."""
    return ad.sigmoid(ad.scalar_mul(ad.mul(ad.as_tensor(s), ad.as_tensor(beta)),
                                    -1.0))


def volume_render(batch_seg: ad.Segments, alphas, t, feats=None):
    """Alpha-compositing along each ray.

    Returns (weights flat, weight sums per ray, expected depth per ray,
    composited descriptor per ray or None). alphas is flat (M,) or (M, 1).
    """
    a = ad.as_tensor(alphas)
    if a.value.ndim == 2:
        a = ad.reshape(a, (a.value.shape[0],))
    w = ad.ray_weights(a, batch_seg)
    wsum = ad.segment_sum(w, batch_seg)
    t_const = np.asarray(t, dtype=np.float64)
    depth = ad.segment_sum(ad.mul(w, ad.constant(t_const)), batch_seg)
    f_ray = None
    if feats is not None:
        nf = feats.value.shape[1]
        w2 = ad.reshape(w, (w.value.shape[0], 1))
        wf = ad.mul(feats, ad.concat([w2] * nf, axis=1)) if nf > 1 else \
            ad.mul(feats, w2)
        f_ray = ad.segment_sum(wf, batch_seg)
    return w, wsum, depth, f_ray


@dataclass
class SweepRender:
    depth: np.ndarray          # (N,) meters, 0 where miss
    intensity: np.ndarray      # (N,) in [0,1], 0 where miss
    miss: np.ndarray           # (N,) bool
    azimuth: np.ndarray
    elevation: np.ndarray
    points: np.ndarray         # (N, 3) world hit points (miss rows zeroed)


@dataclass
class ImageRender:
    image: np.ndarray          # (H, W, 3) in (0,1)
    feature_map: np.ndarray    # (H_f, W_f, N_f)
    depth: np.ndarray          # (H_f, W_f) expected depth
    weight_sum: np.ndarray     # (H_f, W_f)
    miss: np.ndarray           # (H_f, W_f) bool


def _field_forward(graph: SceneGraph, origins, dirs, frame, cfg: RenderConfig,
                   rng=None, p=None, t_max=None, track_actor=None):
    batch = graph.compose_samples(origins, dirs, frame, cfg.compose, rng,
                                  t_max=t_max)
    s, f = graph.query_samples(batch, dirs, frame, p, rng,
                               track_actor=track_actor)
    beta = graph.beta(p) if cfg.beta_override is None \
        else ad.constant(cfg.beta_override)
    alphas = sdf_to_alpha(s, beta)
    w, wsum, depth, f_ray = volume_render(batch.seg, alphas, batch.t, f)
    return batch, s, w, wsum, depth, f_ray


def render_image(graph: SceneGraph, cam: CameraModel, frame: int,
                 cfg: RenderConfig | None = None) -> ImageRender:
    """Full camera pipeline at inference (no tape, deterministic midpoints)."""
    cfg = cfg or RenderConfig()
    origins, dirs = gen_camera_rays(cam)
    _, _, _, wsum, depth, f_ray = _field_forward(
        graph, origins, dirs, frame, cfg)
    hf, wf = cam.feat_height, cam.feat_width
    fmap = f_ray.value.reshape(hf, wf, graph.n_f)
    img_t = graph.decoder.forward(
        ad.constant(np.transpose(fmap, (2, 0, 1))))
    image = np.transpose(img_t.value, (1, 2, 0))
    wsum_v = wsum.value.reshape(hf, wf)
    return ImageRender(image=image, feature_map=fmap,
                       depth=depth.value.reshape(hf, wf),
                       weight_sum=wsum_v,
                       miss=wsum_v < MISS_THRESHOLD)


def render_lidar(graph: SceneGraph, lidar: LidarModel, frame: int,
                 cfg: RenderConfig | None = None) -> SweepRender:
    """Full LiDAR pipeline at inference for one sweep."""
    cfg = cfg or RenderConfig()
    origins, dirs, az, el = gen_lidar_rays(lidar)
    _, _, _, wsum, depth, f_ray = _field_forward(
        graph, origins, dirs, frame, cfg, t_max=lidar.max_range)
    inten = graph.intensity_net.forward(f_ray).value[:, 0]
    wsum_v = wsum.value
    miss = wsum_v < MISS_THRESHOLD
    depth_v = np.where(miss, 0.0, depth.value)
    inten_v = np.where(miss, 0.0, inten)
    pts = origins + depth_v[:, None] * dirs
    pts[miss] = 0.0
    return SweepRender(depth=depth_v, intensity=inten_v, miss=miss,
                       azimuth=az, elevation=el, points=pts)


def decode_feature_map(graph: SceneGraph, fmap: np.ndarray | ad.Tensor,
                       p=None) -> ad.Tensor:
    """(H_f, W_f, N_f) feature map -> (H, W, 3) image tensor."""
    if isinstance(fmap, ad.Tensor):
        chw = ad.transpose(fmap, (2, 0, 1))
    else:
        chw = ad.constant(np.transpose(fmap, (2, 0, 1)))
    img = graph.decoder.forward(chw, p)
    return ad.transpose(img, (1, 2, 0))
