"""Losses, optimizer, the training loop, and tracklet (pose) refinement.

The objective is L_rgb + lambda_lidar * L_lidar + lambda_reg * L_reg:
squared-error photometric patches, a trimmed per-ray LiDAR term (depth +
intensity, keeping the trim_fraction of rays with smallest depth error),
and a regularizer that suppresses sample weight off the observed surface
while pushing the SDF toward a unit gradient inside the surface band. The
band SDF gradient comes from central differences built on the tape (exact
for the piecewise-trilinear field within a cell), so no second-order
autodiff is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .fieldgrid import build_occupancy
from .geometry import Aabb, ray_aabb_intersect_batch
from .render import gen_camera_rays, gen_lidar_rays, sdf_to_alpha, volume_render
from .scene import ComposeConfig, SceneGraph, make_actor


@dataclass
class LossWeights:
    lambda_lidar: float = 1.0
    lambda_reg: float = 0.1
    epsilon: float = 0.1          # meters, surface band half-width
    trim_fraction: float = 0.95

    def __post_init__(self):
        if not (0.0 < self.trim_fraction <= 1.0):
            raise ValueError("trim_fraction must be in (0, 1]")
        if self.lambda_lidar < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 2048
    n_patches: int = 4
    patch_size: int = 32          # full-resolution pixels
    seed: int = 0
    precision: str = "float32"
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    checkpoint_interval: int = 500
    compose: ComposeConfig = dc_field(default_factory=ComposeConfig)
    eikonal_delta: float = 0.01   # meters, FD half-step for grad s

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")


# ---------------------------------------------------------------------------
# losses


def loss_rgb(rendered, observed) -> ad.Tensor:
    """Mean squared error over pixels; shapes must match exactly."""
    rendered = ad.as_tensor(rendered)
    obs = np.asarray(observed, dtype=np.float64)
    if rendered.value.shape != obs.shape:
        raise ValueError(
            f"loss_rgb: shape mismatch {rendered.value.shape} vs {obs.shape}")
    return ad.tmean(ad.square(ad.sub(rendered, ad.constant(obs))))


def trim_indices(depth_errors: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Kept-ray indices: smallest |depth error|, equal errors keep lower index."""
    n = depth_errors.shape[0]
    kept = max(1, int(np.floor(n * trim_fraction)))
    order = np.argsort(depth_errors, kind="stable")
    return np.sort(order[:kept])


def loss_lidar(depth, intensity, obs_depth, obs_intensity,
               trim_fraction: float = 0.95) -> ad.Tensor:
    """Trimmed mean over rays of depth^2 + intensity^2 errors."""
    depth = ad.reshape(ad.as_tensor(depth), (-1,))
    intensity = ad.reshape(ad.as_tensor(intensity), (-1,))
    obs_depth = np.asarray(obs_depth, dtype=np.float64).reshape(-1)
    obs_intensity = np.asarray(obs_intensity, dtype=np.float64).reshape(-1)
    if depth.value.shape != obs_depth.shape:
        raise ValueError("loss_lidar: ray count mismatch")
    kept = trim_indices(np.abs(depth.value - obs_depth), trim_fraction)
    per_ray = ad.add(ad.square(ad.sub(depth, ad.constant(obs_depth))),
                     ad.square(ad.sub(intensity, ad.constant(obs_intensity))))
    return ad.tmean(ad.gather(per_ray, kept))


def fd_sdf_gradient(sdf_at, pts: np.ndarray, labels: np.ndarray,
                    delta: float = 0.01) -> ad.Tensor:
    """grad s at pts by central differences through `sdf_at`.

    sdf_at(points (K,3), labels (K,)) must return a (K, 1) tensor of SDF
    values; it is called once on the stacked 6K-point stencil. Gradients of
    whatever parameters sdf_at touches flow through the result.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    k = pts.shape[0]
    shifted = np.empty((6 * k, 3))
    for ax in range(3):
        off = np.zeros(3)
        off[ax] = delta
        shifted[(2 * ax) * k:(2 * ax + 1) * k] = pts + off
        shifted[(2 * ax + 1) * k:(2 * ax + 2) * k] = pts - off
    s_all = sdf_at(shifted, np.tile(np.asarray(labels), 6))
    comps = []
    for ax in range(3):
        hi = ad.slice_(s_all, (slice((2 * ax) * k, (2 * ax + 1) * k),))
        lo = ad.slice_(s_all, (slice((2 * ax + 1) * k, (2 * ax + 2) * k),))
        comps.append(ad.scalar_mul(ad.sub(hi, lo), 1.0 / (2.0 * delta)))
    return ad.concat(comps, axis=1)                      # (k, 3)


def eikonal_residual(sdf_at, pts, labels, delta: float = 0.01) -> ad.Tensor:
    """(|grad s| - 1)^2 per point, via the FD gradient of `sdf_at`."""
    grad = fd_sdf_gradient(sdf_at, pts, labels, delta)
    k = grad.value.shape[0]
    norm = ad.sqrt(ad.add(ad.tsum(ad.square(grad), axis=1),
                          ad.constant(np.full(k, 1e-12))))
    return ad.square(ad.sub(norm, ad.constant(np.ones(k))))


def loss_reg(batch, w_flat, obs_depth, epsilon: float = 0.1, sdf_at=None,
             delta: float = 0.01, fd_valid: np.ndarray | None = None) -> ad.Tensor:
    """Mean over depth-supervised rays of off-surface w^2 + in-band Eikonal.

    obs_depth: (n_rays,) ground-truth depths; rays with depth <= 0 (misses)
    carry no supervision and are skipped. sdf_at=None drops the Eikonal term
    (e.g. when no SDF provider is available); fd_valid masks samples whose
    FD stencil would leave the field domain.
    """
    obs_depth = np.asarray(obs_depth, dtype=np.float64).reshape(-1)
    if obs_depth.shape[0] != batch.n_rays:
        raise ValueError("loss_reg: depth supervision must cover every ray")
    supervised = obs_depth > 0.0
    sup_rays = np.flatnonzero(supervised)
    if sup_rays.size == 0:
        return ad.constant(0.0)
    tau = np.abs(batch.t - obs_depth[batch.ray_of])
    ray_sup = supervised[batch.ray_of]
    off = (tau > epsilon) & ray_sup
    near = (tau < epsilon) & ray_sup
    if fd_valid is not None:
        near &= np.asarray(fd_valid, dtype=bool)
    w_flat = ad.reshape(ad.as_tensor(w_flat), (-1,))
    total = ad.segment_sum(
        ad.mul(ad.square(w_flat), ad.constant(off.astype(np.float64))),
        batch.seg)
    if sdf_at is not None and np.any(near):
        res = eikonal_residual(sdf_at, batch.pts[near], batch.label[near],
                               delta)
        # near rows inherit the batch's (ray, t) sort, so their ray ids are
        # nondecreasing and a second segment structure can scatter them
        counts = np.bincount(batch.ray_of[near], minlength=batch.n_rays)
        total = ad.add(total, ad.segment_sum(ad.reshape(res, (-1,)),
                                             ad.Segments(counts)))
    return ad.tmean(ad.gather(total, sup_rays))


# ---------------------------------------------------------------------------
# scene-coupled SDF probing (descriptor nets skipped)


def query_sdf_only(graph: SceneGraph, pts: np.ndarray, labels: np.ndarray,
                   frame: int, p: dict | None = None) -> ad.Tensor:
    """SDF values (meters, (K,1)) for labeled points, one routed query."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    outputs, groups = [], []
    bg_idx = np.flatnonzero(labels == -1)
    if bg_idx.size:
        x = pts[bg_idx]
        if not np.all(graph.roi.contains(x)):
            raise ValueError("background SDF probe outside the scene ROI")
        feats = graph.background.query(x, p)
        xn, s0 = graph._normalize_bg(x)
        s_n, _ = graph.bg_head.geometry(feats, xn, p)
        outputs.append(ad.scalar_mul(s_n, s0))
        groups.append(bg_idx)
    for i, actor in enumerate(graph.actors):
        a_idx = np.flatnonzero(labels == i)
        if not a_idx.size:
            continue
        pose = actor.corrected_pose(frame)
        x_obj = (pts[a_idx] - pose.translation) @ pose.rotation
        grid = graph.actor_grid(actor)
        q = p.copy() if p else {}
        for l, tab in enumerate(graph.actor_tables(actor, p)):
            q[f"{grid.name}.tables.{l}"] = tab
        feats = grid.query(x_obj, q)
        s_n, _ = graph.actor_head.geometry(feats, x_obj / actor.scale, q)
        outputs.append(ad.scalar_mul(s_n, actor.scale))
        groups.append(a_idx)
    order = np.concatenate(groups)
    inv = np.argsort(order, kind="stable")
    return ad.gather(ad.concat(outputs, axis=0), inv)


def fd_stencil_valid(graph: SceneGraph, pts: np.ndarray, labels: np.ndarray,
                     frame: int, delta: float = 0.01) -> np.ndarray:
    """Mask of samples whose +-delta FD stencil stays inside its field domain."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    valid = np.ones(pts.shape[0], dtype=bool)
    bg = labels == -1
    if np.any(bg):
        core = Aabb(graph.roi.min + delta, graph.roi.max - delta)
        valid[bg] = core.contains(pts[bg])
    for i, actor in enumerate(graph.actors):
        sel = labels == i
        if not np.any(sel):
            continue
        pose = actor.corrected_pose(frame)
        x_obj = (pts[sel] - pose.translation) @ pose.rotation
        valid[sel] = np.all(np.abs(x_obj) <= actor.box.max - delta, axis=1)
    return valid


def sdf_gradient_norms(graph: SceneGraph, pts: np.ndarray, frame: int = 0,
                       labels: np.ndarray | None = None,
                       delta: float = 0.01) -> np.ndarray:
    """Numeric |grad s| at interior points; the regularization-effect probe."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if labels is None:
        labels = np.full(pts.shape[0], -1, dtype=np.int64)
    ok = fd_stencil_valid(graph, pts, labels, frame, delta)
    if not np.all(ok):
        raise ValueError("FD stencil leaves the field domain for some points")
    grad = fd_sdf_gradient(
        lambda q, lab: query_sdf_only(graph, q, lab, frame, None),
        pts, labels, delta)
    return np.linalg.norm(grad.value, axis=1)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Bias-corrected Adam; lr may be a float or a name -> float function."""

    lr: object = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.lr(name) if callable(self.lr) else float(self.lr)


def group_lr(lr_grid: float = 1e-2, lr_mlp: float = 1e-3):
    """Per-parameter learning rate: grid tables, latents and the opacity
    slope move fast; MLP weights slow."""
    def lr(name: str) -> float:
        if ".tables." in name or name.endswith(".z") or name == "beta_raw":
            return lr_grid
        return lr_mlp
    return lr


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One in-place Adam update of every parameter that has a gradient.

    Bias correction is folded into the step size (the usual fused form):
      arr -= lr*sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps*sqrt(1-b2^t))
    which equals lr * m_hat / (sqrt(v_hat) + eps) exactly.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc2 = np.sqrt(1.0 - b2 ** state.t)
    step_scale = bc2 / (1.0 - b1 ** state.t)
    for name, arr in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.array(g, dtype=np.float64)  # owned copy: reused as scratch below
        if np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros(arr.shape)
            state.v[name] = np.zeros(arr.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        np.square(g, out=g)
        g *= (1.0 - b2)
        v += g
        denom = np.sqrt(v, out=g)  # reuse g's buffer as scratch
        denom += state.eps * bc2
        np.divide(m, denom, out=denom)
        denom *= state.lr_for(name) * step_scale
        arr -= denom
    return params


# ---------------------------------------------------------------------------
# training loop


def build_graph(dataset, seed: int = 0, voxel_size: float = 0.25,
                dilation_radius: int = 2, **graph_kwargs) -> SceneGraph:
    """Fresh scene graph for a dataset: actors from tracklets + occupancy."""
    graph = SceneGraph(dataset.scene.roi, n_frames=dataset.n_frames,
                       seed=seed, **graph_kwargs)
    for t in dataset.tracklets:
        graph.add_actor(make_actor(t.actor_id, t.box, t.poses, graph.z_dim,
                                   graph._rng, symmetric=t.symmetric))
    graph.occupancy = build_occupancy(dataset.static_points(),
                                      dataset.scene.roi,
                                      voxel_size=voxel_size,
                                      dilation_radius=dilation_radius)
    return graph


def bind_params(tape: ad.Tape, params: dict) -> dict:
    return {name: tape.leaf(value, name) for name, value in params.items()}


def _patch_pixels(i0: int, j0: int, side: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(i0, i0 + side), np.arange(j0, j0 + side),
                         indexing="ij")
    return np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)


def _lidar_forward(graph, origins, dirs, frame, compose_cfg, t_max, p, rng,
                   track_actor=None):
    batch = graph.compose_samples(origins, dirs, frame, compose_cfg, rng=rng,
                                  t_max=t_max)
    s, f = graph.query_samples(batch, dirs, frame, p, rng=rng,
                               track_actor=track_actor)
    alphas = sdf_to_alpha(s, graph.beta(p))
    w, wsum, depth, f_ray = volume_render(batch.seg, alphas, batch.t, f)
    inten = ad.reshape(graph.intensity_net.forward(f_ray, p), (-1,))
    return batch, s, w, depth, inten


def train(graph: SceneGraph, dataset, cfg: TrainConfig | None = None,
          weights: LossWeights | None = None, out_dir=None,
          log_fn=None):
    """Fit the scene to the dataset; returns (graph, history).

    history is a list of per-iteration dicts with keys iteration, total,
    rgb, lidar, reg — the loss-curve rows. out_dir (optional) receives
    weight checkpoints and a cumulative loss CSV every checkpoint_interval
    iterations and at the end. Divergence (non-finite loss) aborts with a
    diagnostic error. Fully deterministic for a fixed config.
    """
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    prev_dtype = ad.default_dtype()
    ad.set_default_dtype(cfg.precision)
    try:
        return _train_inner(graph, dataset, cfg, weights, out_dir, log_fn)
    finally:
        ad.set_default_dtype(prev_dtype)


def _train_inner(graph, dataset, cfg, weights, out_dir, log_fn):
    rng = np.random.default_rng(cfg.seed)
    params = graph.params()
    opt = AdamState(lr=group_lr(cfg.lr_grid, cfg.lr_mlp))
    frames = list(dataset.train_frames)
    lidar_rays = {}
    for f in frames:
        o, d, _, _ = gen_lidar_rays(dataset.lidar_at_frame(f))
        lidar_rays[f] = (o, d)
    t_max = dataset.lidar.max_range
    k_up = graph.upsample
    side_f = cfg.patch_size // k_up
    if side_f < 1:
        raise ValueError("patch_size smaller than the decoder upsampling")
    history = []
    for it in range(cfg.iterations):
        tape = ad.Tape()
        p = bind_params(tape, params)
        try:
            row = _train_step(graph, dataset, cfg, weights, rng, frames,
                              lidar_rays, t_max, side_f, tape, p, it)
        except FloatingPointError as e:
            raise RuntimeError(
                f"training diverged at iteration {it}: {e}") from e
        if not np.isfinite(row["total"]):
            raise RuntimeError(
                f"training diverged at iteration {it}: loss {row['total']}")
        grads = {name: p[name].grad for name in params}
        adam_step(opt, params, grads)
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        last = it + 1 == cfg.iterations
        if out_dir is not None and (last or (it + 1) % cfg.checkpoint_interval == 0):
            _emit_checkpoint(graph, history, out_dir, it + 1)
    return graph, history


def _train_step(graph, dataset, cfg, weights, rng, frames, lidar_rays, t_max,
                side_f, tape, p, it):
    frame = frames[int(rng.integers(len(frames)))]
    o, d = lidar_rays[frame]
    sw = dataset.sweeps[frame]
    ret = np.flatnonzero(~sw.miss)
    sel = rng.choice(ret, size=min(cfg.rays_per_batch, ret.size),
                     replace=False)
    sel.sort()
    batch, s, w, depth, inten = _lidar_forward(
        graph, o[sel], d[sel], frame, cfg.compose, t_max, p, rng)
    l_lidar = loss_lidar(depth, inten, sw.depth[sel], sw.intensity[sel],
                         weights.trim_fraction)
    sdf_at = (lambda q, lab: query_sdf_only(graph, q, lab, frame, p))
    fd_valid = fd_stencil_valid(graph, batch.pts, batch.label, frame,
                                cfg.eikonal_delta)
    l_reg = loss_reg(batch, w, sw.depth[sel], weights.epsilon, sdf_at,
                     cfg.eikonal_delta, fd_valid)
    rgb_terms = []
    for _ in range(cfg.n_patches):
        f2 = frames[int(rng.integers(len(frames)))]
        cam = dataset.cam_at_frame(f2)
        i0 = int(rng.integers(cam.feat_height - side_f + 1))
        j0 = int(rng.integers(cam.feat_width - side_f + 1))
        o2, d2 = gen_camera_rays(cam, pixels=_patch_pixels(i0, j0, side_f))
        batch2 = graph.compose_samples(o2, d2, f2, cfg.compose, rng=rng)
        s2, f_desc = graph.query_samples(batch2, d2, f2, p, rng=rng)
        a2 = sdf_to_alpha(s2, graph.beta(p))
        _, _, _, f_ray2 = volume_render(batch2.seg, a2, batch2.t, f_desc)
        fmap = ad.transpose(ad.reshape(f_ray2, (side_f, side_f, graph.n_f)),
                            (2, 0, 1))
        img = graph.decoder.forward(fmap, p)
        k = graph.upsample
        obs = dataset.images[f2][i0 * k:(i0 + side_f) * k,
                                 j0 * k:(j0 + side_f) * k].transpose(2, 0, 1)
        rgb_terms.append(loss_rgb(img, obs))
    l_rgb = rgb_terms[0]
    for term in rgb_terms[1:]:
        l_rgb = ad.add(l_rgb, term)
    l_rgb = ad.scalar_mul(l_rgb, 1.0 / max(1, len(rgb_terms)))
    total = ad.add(l_rgb, ad.add(ad.scalar_mul(l_lidar, weights.lambda_lidar),
                                 ad.scalar_mul(l_reg, weights.lambda_reg)))
    tape.backward(total)
    return {"iteration": it, "total": float(total.value),
            "rgb": float(l_rgb.value), "lidar": float(l_lidar.value),
            "reg": float(l_reg.value)}


def _emit_checkpoint(graph, history, out_dir, iteration):
    from . import fileio
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_weights(out / f"checkpoint_{iteration:06d}.weights",
                        graph.params())
    fileio.write_loss_csv(out / "loss_curve.csv", history)


# ---------------------------------------------------------------------------
# tracklet refinement


def refine_tracklets(graph: SceneGraph, dataset, actor_id: str,
                     steps: int = 100, lr: float = 0.02,
                     trim_fraction: float = 0.95,
                     rays_per_frame: int = 192, min_rays: int = 8,
                     frames=None, seed: int = 0,
                     compose: ComposeConfig | None = None,
                     log_fn=None) -> dict:
    """Optimize one actor's per-frame pose deltas against observed sweeps.

    Each step renders LiDAR depth/intensity for rays crossing the actor's
    (current) box in every usable frame and descends the trimmed LiDAR loss
    with the pose correction on the tape; field parameters stay fixed.
    Returns the updated delta dict {.. .delta_rot6d, ...delta_trans}.
    """
    actor = graph.actor(actor_id)
    deltas = graph.delta_params(actor_id)
    opt = AdamState(lr=lr)
    compose = compose or ComposeConfig()
    rng = np.random.default_rng(seed)
    frames = list(dataset.train_frames) if frames is None else list(frames)
    cache = {}
    for f in frames:
        o, d, _, _ = gen_lidar_rays(dataset.lidar_at_frame(f))
        cache[f] = (o, d)
    t_max = dataset.lidar.max_range
    # 0.5 m additive margin keeps true-surface rays while the pose is off
    catch = Aabb(actor.box.min - 0.5, actor.box.max + 0.5)
    for step in range(steps):
        tape = ad.Tape()
        p = bind_params(tape, deltas)
        terms = []
        for f in frames:
            o, d = cache[f]
            sw = dataset.sweeps[f]
            pose = actor.corrected_pose(f)
            o_obj = (o - pose.translation) @ pose.rotation
            d_obj = d @ pose.rotation
            ta0, ta1, hit = ray_aabb_intersect_batch(o_obj, d_obj, catch)
            cand = np.flatnonzero(hit & (ta1 > ta0) & ~sw.miss
                                  & (ta0 < t_max))
            if cand.size < min_rays:
                continue
            if cand.size > rays_per_frame:
                cand = rng.choice(cand, size=rays_per_frame, replace=False)
                cand.sort()
            _, _, _, depth, inten = _lidar_forward(
                graph, o[cand], d[cand], f, compose, t_max, p, rng,
                track_actor=actor_id)
            terms.append(loss_lidar(depth, inten, sw.depth[cand],
                                    sw.intensity[cand], trim_fraction))
        if not terms:
            raise ValueError(
                f"actor '{actor_id}' is not visible in any supervising rays")
        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        total = ad.scalar_mul(total, 1.0 / len(terms))
        tape.backward(total)
        grads = {name: p[name].grad for name in deltas}
        adam_step(opt, deltas, grads)
        if log_fn is not None:
            log_fn({"step": step, "loss": float(total.value)})
    return deltas


def tracklet_translation_error(graph: SceneGraph, actor_id: str,
                               gt_poses, frames=None) -> float:
    """Mean over frames of |corrected translation - ground truth|."""
    actor = graph.actor(actor_id)
    frames = range(actor.n_frames) if frames is None else frames
    errs = [np.linalg.norm(actor.corrected_pose(f).translation
                           - gt_poses[f].translation) for f in frames]
    return float(np.mean(errs))
