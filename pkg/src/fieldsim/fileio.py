"""Every on-disk format: PNG, ascii PLY, binary ray tables, weight blobs,
scene / scenario / dataset JSON, occupancy bitsets, CSVs, run manifests.

Formats are deliberately boring: JSON for structure, raw little-endian
blobs for bulk arrays, 8-bit PNG for images. Weight blobs are a flat byte
file plus a manifest mapping parameter name -> (offset, shape, dtype) so
partial loads and external inspection stay easy.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Aabb, Pose
from .render import CameraModel, LidarModel, SweepRender

RAY_TABLE_MAGIC = b"RAYT"
RAY_TABLE_VERSION = 1


# ---------------------------------------------------------------------------
# small JSON helpers


def pose_to_json(pose: Pose) -> list:
    return pose.matrix().tolist()


def pose_from_json(doc) -> Pose:
    return Pose.from_matrix(np.asarray(doc, dtype=np.float64))


def aabb_to_json(box: Aabb) -> dict:
    return {"min": box.min.tolist(), "max": box.max.tolist()}


def aabb_from_json(doc) -> Aabb:
    return Aabb(np.asarray(doc["min"], dtype=np.float64),
                np.asarray(doc["max"], dtype=np.float64))


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# images


def save_png(path, image: np.ndarray) -> None:
    """Float image in [0,1], (H, W, 3) or (H, W), to 8-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("RGB", "L")
                         else im)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# point clouds


def save_ply(path, points: np.ndarray, intensity: np.ndarray) -> None:
    """ascii PLY with per-vertex x y z intensity."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intensity = np.asarray(intensity, dtype=np.float64).reshape(-1)
    if points.shape[0] != intensity.shape[0]:
        raise ValueError("one intensity per point")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {points.shape[0]}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float intensity\nend_header\n")
        for (x, y, z), i in zip(points, intensity):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {i:.6f}\n")


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: no vertex element")
        if n == 0:
            return np.zeros((0, 3)), np.zeros(0)
        data = np.loadtxt(fh, dtype=np.float64, max_rows=n)
    data = data.reshape(-1, 4)
    return data[:, :3], data[:, 3]


# ---------------------------------------------------------------------------
# binary ray tables


def save_ray_table(path, sweep: SweepRender) -> None:
    """Flat binary sweep: header, then per-ray (az, el, depth, intensity, miss)."""
    n = sweep.depth.shape[0]
    cols = np.stack([sweep.azimuth, sweep.elevation, sweep.depth,
                     sweep.intensity], axis=1).astype("<f8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(RAY_TABLE_MAGIC)
        fh.write(struct.pack("<II", RAY_TABLE_VERSION, n))
        fh.write(cols.tobytes())
        fh.write(sweep.miss.astype(np.uint8).tobytes())


def load_ray_table(path) -> SweepRender:
    """Rebuild a sweep; points are sensor-frame (dir * depth), zero on miss."""
    with open(path, "rb") as fh:
        if fh.read(4) != RAY_TABLE_MAGIC:
            raise ValueError(f"{path}: not a ray table")
        version, n = struct.unpack("<II", fh.read(8))
        if version != RAY_TABLE_VERSION:
            raise ValueError(f"{path}: unsupported ray-table version {version}")
        cols = np.frombuffer(fh.read(n * 4 * 8), dtype="<f8").reshape(n, 4)
        miss = np.frombuffer(fh.read(n), dtype=np.uint8).astype(bool)
    az, el, depth, inten = [np.array(cols[:, k]) for k in range(4)]
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                     np.sin(el)], axis=1)
    pts = np.where(miss[:, None], 0.0, dirs * depth[:, None])
    return SweepRender(depth=depth, intensity=inten, miss=miss,
                       azimuth=az, elevation=el, points=pts)


# ---------------------------------------------------------------------------
# weight blobs


def save_weights(path, params: dict) -> None:
    """Blob at <path>.bin + manifest <path>.json (name -> offset/shape/dtype)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {}
    offset = 0
    with open(path.with_suffix(path.suffix + ".bin"), "wb") as fh:
        for name in sorted(params):
            src = np.asarray(params[name])
            arr = np.ascontiguousarray(src)  # note: promotes 0-d to (1,)
            raw = arr.tobytes()
            manifest[name] = {"offset": offset,
                              "shape": list(src.shape),
                              "dtype": str(arr.dtype)}
            fh.write(raw)
            offset += len(raw)
    save_json(path.with_suffix(path.suffix + ".json"),
              {"total_bytes": offset, "params": manifest})


def load_weights(path) -> dict:
    path = Path(path)
    doc = load_json(path.with_suffix(path.suffix + ".json"))
    blob = Path(path.with_suffix(path.suffix + ".bin")).read_bytes()
    if len(blob) != doc["total_bytes"]:
        raise ValueError(f"{path}: blob size does not match manifest")
    out = {}
    for name, meta in doc["params"].items():
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count,
                            offset=meta["offset"]).reshape(meta["shape"])
        out[name] = np.array(arr)
    return out


def graph_state(graph) -> dict:
    """Trainable params plus every actor's pose deltas — the full model state."""
    state = dict(graph.params())
    for a in graph.actors:
        state.update(graph.delta_params(a.actor_id))
    return state


def apply_weights(graph, weights: dict, strict: bool = True):
    """Copy loaded arrays into the graph in place; names/shapes must match."""
    targets = graph_state(graph)
    for name, value in weights.items():
        arr = targets.get(name)
        if arr is None:
            if strict:
                raise KeyError(f"weights name '{name}' not in this graph")
            continue
        value = np.asarray(value)
        if arr.shape != value.shape:
            raise ValueError(f"shape mismatch for '{name}': "
                             f"{arr.shape} vs {value.shape}")
        arr[...] = value
    return graph


# ---------------------------------------------------------------------------
# occupancy bitsets


def save_occupancy(path, occ) -> None:
    path = Path(path)
    header, bits = occ.to_bitset()
    header["empty_input"] = bool(occ.empty_input)
    save_json(path.with_suffix(path.suffix + ".json"), header)
    path.with_suffix(path.suffix + ".bin").write_bytes(bits.tobytes())


def load_occupancy(path):
    from .fieldgrid import OccupancyGrid
    path = Path(path)
    header = load_json(path.with_suffix(path.suffix + ".json"))
    bits = np.frombuffer(path.with_suffix(path.suffix + ".bin").read_bytes(),
                         dtype=np.uint8)
    occ = OccupancyGrid.from_bitset(header, bits)
    occ.empty_input = bool(header.get("empty_input", False))
    return occ


# ---------------------------------------------------------------------------
# scene graphs


def save_scene(path, graph) -> None:
    """Structure only (ROI, grid configs, actors); weights go in the blob."""
    def grid_doc(cfg):
        return {"levels": cfg.levels, "base_resolution": cfg.base_resolution,
                "per_level_scale": cfg.per_level_scale,
                "table_size": cfg.table_size, "feature_dim": cfg.feature_dim}
    doc = {
        "roi": aabb_to_json(graph.roi),
        "n_frames": graph.n_frames,
        "init_seed": graph.init_seed,
        "z_dim": graph.z_dim,
        "n_f": graph.n_f,
        "upsample": graph.upsample,
        "bg_grid": grid_doc(graph.bg_grid_cfg),
        "actor_grid": grid_doc(graph.actor_grid_cfg),
        "actors": [{
            "actor_id": a.actor_id,
            "box": aabb_to_json(a.box),
            "trajectory": [pose_to_json(p) for p in a.trajectory],
            "symmetric": a.symmetric,
        } for a in graph.actors],
    }
    save_json(path, doc)


def load_scene(path):
    from .fieldgrid import HashGridConfig
    from .scene import SceneGraph, make_actor
    doc = load_json(path)
    roi = aabb_from_json(doc["roi"])
    def grid_cfg(d, domain):
        return HashGridConfig(levels=d["levels"],
                              base_resolution=d["base_resolution"],
                              per_level_scale=d["per_level_scale"],
                              table_size=d["table_size"],
                              feature_dim=d["feature_dim"], domain=domain)
    graph = SceneGraph(
        roi, doc["n_frames"], seed=doc["init_seed"],
        bg_grid_cfg=grid_cfg(doc["bg_grid"], roi),
        actor_grid_cfg=grid_cfg(doc["actor_grid"],
                                Aabb(-np.ones(3), np.ones(3))),
        z_dim=doc["z_dim"], n_f=doc["n_f"], upsample=doc["upsample"])
    rng = np.random.default_rng(doc["init_seed"])
    for a in doc["actors"]:
        graph.add_actor(make_actor(
            a["actor_id"], aabb_from_json(a["box"]),
            [pose_from_json(m) for m in a["trajectory"]],
            graph.z_dim, rng, symmetric=a["symmetric"]))
    return graph


# ---------------------------------------------------------------------------
# sensors


def camera_to_json(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "upsample": cam.upsample}


def camera_from_json(doc, pose: Pose | None = None) -> CameraModel:
    return CameraModel(doc["fx"], doc["fy"], doc["cx"], doc["cy"],
                       doc["width"], doc["height"], doc.get("upsample", 2),
                       pose=pose or Pose())


def lidar_to_json(lidar: LidarModel) -> dict:
    return {"elevations": np.asarray(lidar.elevations).tolist(),
            "azimuth_resolution": lidar.azimuth_resolution,
            "max_range": lidar.max_range}


def lidar_from_json(doc, pose: Pose | None = None) -> LidarModel:
    return LidarModel(np.asarray(doc["elevations"], dtype=np.float64),
                      doc["azimuth_resolution"], doc.get("max_range", 25.0),
                      pose=pose or Pose())


# ---------------------------------------------------------------------------
# datasets


def save_dataset(out_dir, ds) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "sweeps").mkdir(parents=True, exist_ok=True)
    for f in range(ds.n_frames):
        save_png(out / "images" / f"frame_{f:04d}.png", ds.images[f])
        save_ray_table(out / "sweeps" / f"frame_{f:04d}.rays", ds.sweeps[f])
        np.packbits(ds.sweep_dynamic[f]).tofile(
            out / "sweeps" / f"frame_{f:04d}.dyn")
    meta = {
        "seed": ds.seed,
        "n_frames": ds.n_frames,
        "train_frames": list(ds.train_frames),
        "test_frames": list(ds.test_frames),
        "rig_poses": [pose_to_json(p) for p in ds.rig_poses],
        "camera": camera_to_json(ds.camera),
        "lidar": lidar_to_json(ds.lidar),
        "cam_extrinsic": pose_to_json(ds.cam_extrinsic),
        "lidar_extrinsic": pose_to_json(ds.lidar_extrinsic),
        "tracklets": [{
            "actor_id": t.actor_id,
            "box": aabb_to_json(t.box),
            "poses": [pose_to_json(p) for p in t.poses],
            "symmetric": t.symmetric,
        } for t in ds.tracklets],
        "oracle": {
            "roi": aabb_to_json(ds.scene.roi),
            "background": ds.scene.background.tolist(),
            "light_dir": ds.scene.light_dir.tolist(),
            "ambient": ds.scene.ambient,
            "primitives": [{
                "kind": p.kind,
                "poses": [pose_to_json(q) for q in p.poses],
                "size": p.size.tolist(),
                "albedo": p.albedo.tolist(),
                "reflectivity": p.reflectivity,
                "dynamic": p.dynamic,
                "name": p.name,
                "symmetric": p.symmetric,
            } for p in ds.scene.primitives],
        },
    }
    save_json(out / "meta.json", meta)


def load_dataset(in_dir):
    from .oracle import Dataset, OracleScene, Primitive, Tracklet
    from .render import gen_lidar_rays
    root = Path(in_dir)
    meta = load_json(root / "meta.json")
    scene = OracleScene(
        primitives=[Primitive(
            kind=p["kind"],
            poses=[pose_from_json(q) for q in p["poses"]],
            size=np.asarray(p["size"], dtype=np.float64),
            albedo=np.asarray(p["albedo"], dtype=np.float64),
            reflectivity=p["reflectivity"], dynamic=p["dynamic"],
            name=p["name"], symmetric=p["symmetric"],
        ) for p in meta["oracle"]["primitives"]],
        roi=aabb_from_json(meta["oracle"]["roi"]),
        background=np.asarray(meta["oracle"]["background"], dtype=np.float64),
        light_dir=np.asarray(meta["oracle"]["light_dir"], dtype=np.float64),
        ambient=meta["oracle"]["ambient"])
    rig = [pose_from_json(m) for m in meta["rig_poses"]]
    camera = camera_from_json(meta["camera"])
    lidar = lidar_from_json(meta["lidar"])
    cam_ex = pose_from_json(meta["cam_extrinsic"])
    lidar_ex = pose_from_json(meta["lidar_extrinsic"])
    n = meta["n_frames"]
    images = np.stack([load_png(root / "images" / f"frame_{f:04d}.png")
                       for f in range(n)])
    sweeps, dyn = [], []
    for f in range(n):
        sw = load_ray_table(root / "sweeps" / f"frame_{f:04d}.rays")
        pose = rig[f].compose(lidar_ex)
        posed = LidarModel(lidar.elevations, lidar.azimuth_resolution,
                           lidar.max_range, pose=pose)
        o, d, _, _ = gen_lidar_rays(posed)
        pts = np.where(sw.miss[:, None], 0.0, o + d * sw.depth[:, None])
        sweeps.append(SweepRender(depth=sw.depth, intensity=sw.intensity,
                                  miss=sw.miss, azimuth=sw.azimuth,
                                  elevation=sw.elevation, points=pts))
        bits = np.fromfile(root / "sweeps" / f"frame_{f:04d}.dyn",
                           dtype=np.uint8)
        dyn.append(np.unpackbits(bits)[:posed.n_rays].astype(bool))
    tracklets = [Tracklet(t["actor_id"], aabb_from_json(t["box"]),
                          [pose_from_json(m) for m in t["poses"]],
                          t["symmetric"])
                 for t in meta["tracklets"]]
    return Dataset(scene=scene, rig_poses=rig, camera=camera, lidar=lidar,
                   cam_extrinsic=cam_ex, lidar_extrinsic=lidar_ex,
                   images=images, sweeps=sweeps, sweep_dynamic=dyn,
                   tracklets=tracklets, train_frames=meta["train_frames"],
                   test_frames=meta["test_frames"], seed=meta["seed"])


# ---------------------------------------------------------------------------
# scenarios


def scenario_to_json(sc) -> dict:
    from .simloop import BehaviorModel, SceneEdits  # noqa: F401 (type refs)
    def behavior_doc(b):
        d = {"kind": b.kind}
        if b.poses is not None:
            d["poses"] = [pose_to_json(p) for p in b.poses]
        if b.velocity is not None:
            d["velocity"] = b.velocity.tolist()
        if b.start_pose is not None:
            d["start_pose"] = pose_to_json(b.start_pose)
        if b.waypoints is not None:
            d["waypoints"] = b.waypoints.tolist()
            d["times"] = b.times.tolist()
        return d
    doc = {
        "base_scene": sc.base_scene,
        "horizon": sc.horizon,
        "dt": sc.dt,
        "seed": sc.seed,
        "sdv_start": pose_to_json(sc.sdv_start),
        "sdv_speed": sc.sdv_speed,
        "behaviors": {k: behavior_doc(b) for k, b in sc.behaviors.items()},
        "lidar_extrinsic": pose_to_json(sc.lidar_extrinsic),
        "cam_extrinsic": pose_to_json(sc.cam_extrinsic),
        "render_camera": sc.render_camera,
    }
    if sc.lidar is not None:
        doc["lidar"] = lidar_to_json(sc.lidar)
    if sc.camera is not None:
        doc["camera"] = camera_to_json(sc.camera)
    if sc.lane_ref is not None:
        doc["lane_ref"] = sc.lane_ref.tolist()
    if sc.edits is not None:
        doc["edits"] = {
            "remove": list(sc.edits.remove),
            "add": [{"actor_id": a["actor_id"], "copy_from": a["copy_from"],
                     "trajectory": [pose_to_json(p) for p in a["trajectory"]]}
                    for a in sc.edits.add],
            "override": {k: [pose_to_json(p) for p in v]
                         for k, v in sc.edits.override.items()},
        }
    return doc


def scenario_from_json(doc):
    from .simloop import BehaviorModel, Scenario, SceneEdits
    def behavior(d):
        return BehaviorModel(
            kind=d["kind"],
            poses=[pose_from_json(p) for p in d["poses"]] if "poses" in d else None,
            velocity=np.asarray(d["velocity"]) if "velocity" in d else None,
            start_pose=pose_from_json(d["start_pose"]) if "start_pose" in d else None,
            waypoints=np.asarray(d["waypoints"]) if "waypoints" in d else None,
            times=np.asarray(d["times"]) if "times" in d else None)
    edits = None
    if "edits" in doc:
        e = doc["edits"]
        edits = SceneEdits(
            remove=list(e.get("remove", [])),
            add=[{"actor_id": a["actor_id"], "copy_from": a["copy_from"],
                  "trajectory": [pose_from_json(p) for p in a["trajectory"]]}
                 for a in e.get("add", [])],
            override={k: [pose_from_json(p) for p in v]
                      for k, v in e.get("override", {}).items()})
    return Scenario(
        horizon=doc["horizon"],
        sdv_start=pose_from_json(doc["sdv_start"]),
        sdv_speed=doc.get("sdv_speed", 5.0),
        dt=doc.get("dt", 0.1),
        seed=doc.get("seed", 0),
        behaviors={k: behavior(b) for k, b in doc.get("behaviors", {}).items()},
        edits=edits,
        lidar=lidar_from_json(doc["lidar"]) if "lidar" in doc else None,
        camera=camera_from_json(doc["camera"]) if "camera" in doc else None,
        lidar_extrinsic=pose_from_json(doc["lidar_extrinsic"])
        if "lidar_extrinsic" in doc else Pose(),
        cam_extrinsic=pose_from_json(doc["cam_extrinsic"])
        if "cam_extrinsic" in doc else Pose(),
        render_camera=doc.get("render_camera", False),
        lane_ref=np.asarray(doc["lane_ref"], dtype=np.float64)
        if "lane_ref" in doc else None,
        base_scene=doc.get("base_scene", ""))


def save_scenario(path, scenario) -> None:
    save_json(path, scenario_to_json(scenario))


def load_scenario(path):
    return scenario_from_json(load_json(path))


# ---------------------------------------------------------------------------
# CSVs, JSONL, manifests


def write_loss_csv(path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "total", "rgb", "lidar", "reg"])
        for row in history:
            writer.writerow([row["iteration"], row["total"], row["rgb"],
                             row["lidar"], row["reg"]])


def read_loss_csv(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iter"]), "total": float(r["total"]),
             "rgb": float(r["rgb"]), "lidar": float(r["lidar"]),
             "reg": float(r["reg"])} for r in rows]


def write_metrics_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no metric rows to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_jsonl(path, docs) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# model directories (scene structure + weights + occupancy)


def save_model(model_dir, graph) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    save_scene(model_dir / "scene.json", graph)
    save_weights(model_dir / "weights", graph_state(graph))
    if graph.occupancy is not None:
        save_occupancy(model_dir / "occupancy", graph.occupancy)


def load_model(model_dir):
    model_dir = Path(model_dir)
    graph = load_scene(model_dir / "scene.json")
    apply_weights(graph, load_weights(model_dir / "weights"))
    if (model_dir / "occupancy.json").exists():
        graph.occupancy = load_occupancy(model_dir / "occupancy")
    return graph


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_run_manifest(path, seed: int, config: dict, extra: dict | None = None):
    from . import __version__
    doc = {
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "fieldsim": __version__,
        },
        "seed": seed,
        "config_hash": config_hash(config),
    }
    if extra:
        doc.update(extra)
    save_json(path, doc)
    return doc
