"""Command-line front end: one subcommand per pipeline stage.

    oracle-gen  generate the analytic ground-truth dataset
    fit         train a scene model on a dataset directory
    render      render a camera frame from a trained model
    lidar       render a LiDAR sweep from a trained model
    edit        apply scenario edits and re-render
    loop        closed-loop simulation with the autonomy stub
    replay      open-loop re-rendering + LiDAR metrics vs the log
    gradcheck   finite-difference check of every autodiff op

All subcommands accept --config (JSON file of defaults) and --seed; flags
override config values. Exit codes: 0 success, 1 failure (message on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio, reports
from .metrics import psnr, ssim
from .oracle import standard_dataset
from .render import RenderConfig, render_image, render_lidar
from .scene import ComposeConfig
from .simloop import (AutonomyStub, apply_edits, closed_loop_run,
                      open_loop_replay, shift_rig)
from .train import LossWeights, TrainConfig, build_graph, train

GRADCHECK_TOL = 1e-4


def _cfg_get(cfg: dict, key: str, flag_value, default):
    if flag_value is not None:
        return flag_value
    return cfg.get(key, default)


def _load_cfg(args) -> dict:
    return fileio.load_json(args.config) if args.config else {}


def _compose_cfg(cfg: dict) -> ComposeConfig:
    c = cfg.get("compose", {})
    return ComposeConfig(
        background_step=c.get("background_step", 0.25),
        actor_step=c.get("actor_step", 0.1),
        max_samples=c.get("max_samples", 192))


def _render_cfg(cfg: dict) -> RenderConfig:
    return RenderConfig(compose=_compose_cfg(cfg))


# ---------------------------------------------------------------------------
# subcommands


def cmd_oracle_gen(args) -> int:
    cfg = _load_cfg(args)
    seed = _cfg_get(cfg, "seed", args.seed, 0)
    n_frames = _cfg_get(cfg, "n_frames", args.frames, 16)
    out = Path(_cfg_get(cfg, "out", args.out, "dataset"))
    ds = standard_dataset(n_frames=n_frames, seed=seed)
    fileio.save_dataset(out, ds)
    fileio.write_run_manifest(out / "manifest.json", seed, cfg,
                              {"command": "oracle-gen", "n_frames": n_frames})
    n_returns = int(sum((~s.miss).sum() for s in ds.sweeps))
    print(f"wrote {n_frames} frames ({n_returns} lidar returns) to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _load_cfg(args)
    seed = _cfg_get(cfg, "seed", args.seed, 0)
    ds = fileio.load_dataset(_cfg_get(cfg, "dataset", args.dataset, "dataset"))
    out = Path(_cfg_get(cfg, "out", args.out, "model"))
    tc = TrainConfig(
        iterations=_cfg_get(cfg, "iterations", args.iterations, 2000),
        rays_per_batch=cfg.get("rays_per_batch", 2048),
        n_patches=cfg.get("n_patches", 4),
        patch_size=cfg.get("patch_size", 32),
        seed=seed,
        precision=cfg.get("precision", "float32"),
        lr_grid=cfg.get("lr_grid", 1e-2),
        lr_mlp=cfg.get("lr_mlp", 1e-3),
        checkpoint_interval=cfg.get("checkpoint_interval", 500),
        compose=_compose_cfg(cfg))
    loss_cfg = cfg.get("loss", {})
    weights = LossWeights(
        lambda_lidar=loss_cfg.get("lambda_lidar", 1.0),
        lambda_reg=loss_cfg.get("lambda_reg", 0.1),
        epsilon=loss_cfg.get("epsilon", 0.1),
        trim_fraction=loss_cfg.get("trim_fraction", 0.95))
    graph = build_graph(ds, seed=seed)
    log = (lambda row: print(f"iter {row['iteration']:5d}  "
                             f"total {row['total']:.5f}  rgb {row['rgb']:.5f}  "
                             f"lidar {row['lidar']:.5f}  reg {row['reg']:.5f}",
                             flush=True)) if args.verbose else None
    graph, history = train(graph, ds, tc, weights,
                           out_dir=out / "checkpoints", log_fn=log)
    fileio.save_model(out, graph)
    fileio.write_loss_csv(out / "loss_curve.csv", history)
    reports.loss_curve_figure(history, out / "loss_curve.png")
    fileio.write_run_manifest(out / "manifest.json", seed, cfg,
                              {"command": "fit", "iterations": tc.iterations,
                               "final_loss": history[-1]["total"]})
    print(f"trained {tc.iterations} iterations; final loss "
          f"{history[-1]['total']:.5f}; model in {out}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    graph = fileio.load_model(_cfg_get(cfg, "model", args.model, "model"))
    ds = fileio.load_dataset(_cfg_get(cfg, "dataset", args.dataset, "dataset"))
    frame = _cfg_get(cfg, "frame", args.frame, 0)
    out = Path(_cfg_get(cfg, "out", args.out, "render.png"))
    shift = _cfg_get(cfg, "lane_shift", args.lane_shift, 0.0)
    cam = ds.cam_at_frame(frame)
    if shift:
        cam = type(cam)(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                        cam.upsample,
                        pose=shift_rig([ds.rig_poses[frame]], shift)[0]
                        .compose(ds.cam_extrinsic))
    render = render_image(graph, cam, frame, _render_cfg(cfg))
    fileio.save_png(out, render.image)
    if shift:
        # no ground truth off the recorded trajectory; report coverage only
        wsum = render.weight_sum
        print(f"lane-shift {shift:+.1f} m render -> {out}  "
              f"(weight-sum mean {wsum.mean():.3f}, min {wsum.min():.3f})")
        return 0
    ref = ds.images[frame]
    fig = reports.image_compare_figure(render.image, ref,
                                       out.with_suffix(".compare.png"))
    print(f"frame {frame} -> {out}  psnr {psnr(render.image, ref):.2f} dB  "
          f"ssim {ssim(render.image, ref):.4f}  (figure {fig})")
    return 0


def cmd_lidar(args) -> int:
    cfg = _load_cfg(args)
    graph = fileio.load_model(_cfg_get(cfg, "model", args.model, "model"))
    ds = fileio.load_dataset(_cfg_get(cfg, "dataset", args.dataset, "dataset"))
    frame = _cfg_get(cfg, "frame", args.frame, 0)
    out = Path(_cfg_get(cfg, "out", args.out, "sweep"))
    sweep = render_lidar(graph, ds.lidar_at_frame(frame), frame,
                         _render_cfg(cfg))
    fileio.save_ply(Path(str(out) + ".ply"), sweep.points[~sweep.miss],
                    sweep.intensity[~sweep.miss])
    fileio.save_ray_table(Path(str(out) + ".rays"), sweep)
    from .metrics import lidar_metrics
    m = lidar_metrics(sweep, ds.sweeps[frame])
    print(f"frame {frame}: hit rate {m.hit_rate:.4f}  "
          f"median depth err {m.depth_median_l2:.4f} m  "
          f"intensity rmse {m.intensity_rmse:.4f}  -> {out}.ply / {out}.rays")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_cfg(args)
    graph = fileio.load_model(_cfg_get(cfg, "model", args.model, "model"))
    ds = fileio.load_dataset(_cfg_get(cfg, "dataset", args.dataset, "dataset"))
    scenario = fileio.load_scenario(args.scenario)
    frame = _cfg_get(cfg, "frame", args.frame, 0)
    out = Path(_cfg_get(cfg, "out", args.out, "edited"))
    out.mkdir(parents=True, exist_ok=True)
    if scenario.edits is None:
        print("scenario has no edits; rendering unchanged scene",
              file=sys.stderr)
    else:
        apply_edits(graph, scenario.edits)
    rcfg = _render_cfg(cfg)
    render = render_image(graph, ds.cam_at_frame(frame), frame, rcfg)
    sweep = render_lidar(graph, ds.lidar_at_frame(frame), frame, rcfg)
    fileio.save_png(out / f"frame_{frame:04d}.png", render.image)
    fileio.save_ply(out / f"frame_{frame:04d}.ply", sweep.points[~sweep.miss],
                    sweep.intensity[~sweep.miss])
    print(f"edited render of frame {frame} -> {out}")
    return 0


def cmd_loop(args) -> int:
    cfg = _load_cfg(args)
    graph = fileio.load_model(_cfg_get(cfg, "model", args.model, "model"))
    scenario = fileio.load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    out = Path(_cfg_get(cfg, "out", args.out, "run"))
    stub = None
    if not args.no_autonomy:
        a = cfg.get("autonomy", {})
        stub = AutonomyStub(
            target_speed=a.get("target_speed", 5.0),
            brake_threshold=a.get("brake_threshold", 10.0),
            lateral_gain=a.get("lateral_gain", 0.5))
    records = closed_loop_run(scenario, graph, stub, _render_cfg(cfg),
                              out_dir=out / "steps" if args.save_frames else None)
    fileio.write_jsonl(out / "records.jsonl", [r.to_json() for r in records])
    label = "autonomy" if stub is not None else "no autonomy"
    reports.clearance_figure({label: records}, out / "clearance.png")
    fileio.write_run_manifest(out / "manifest.json", scenario.seed, cfg,
                              {"command": "loop", "horizon": scenario.horizon,
                               "autonomy": stub is not None})
    min_clear = min(r.clearance for r in records)
    print(f"{len(records)} steps ({label}); min forward clearance "
          f"{min_clear:.3f} m -> {out}")
    return 0


def cmd_replay(args) -> int:
    cfg = _load_cfg(args)
    graph = fileio.load_model(_cfg_get(cfg, "model", args.model, "model"))
    ds = fileio.load_dataset(_cfg_get(cfg, "dataset", args.dataset, "dataset"))
    out = Path(_cfg_get(cfg, "out", args.out, "replay"))
    frames = cfg.get("frames", None)
    per_frame, pooled, frames = open_loop_replay(graph, ds, frames,
                                                 _render_cfg(cfg))
    rows = [{"frame": f, "hit_rate": m.hit_rate,
             "depth_median_l2": m.depth_median_l2,
             "intensity_rmse": m.intensity_rmse,
             "n_reference": m.n_reference, "n_mutual": m.n_mutual}
            for f, m in zip(frames, per_frame)]
    fileio.write_metrics_csv(out / "lidar_metrics.csv", rows)
    reports.lidar_metrics_figure(rows, out / "lidar_metrics.png")
    fileio.write_run_manifest(
        out / "manifest.json", _cfg_get(cfg, "seed", args.seed, 0), cfg,
        {"command": "replay", "frames": list(frames),
         "pooled": {"hit_rate": pooled.hit_rate,
                    "depth_median_l2": pooled.depth_median_l2,
                    "intensity_rmse": pooled.intensity_rmse}})
    print(f"replayed {len(frames)} frames: hit rate {pooled.hit_rate:.4f}  "
          f"median depth err {pooled.depth_median_l2:.4f} m  "
          f"intensity rmse {pooled.intensity_rmse:.4f} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = ad.gradcheck_suite(seed=seed)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name:28s} {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return 0 if worst < GRADCHECK_TOL else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldsim",
        description="neural closed-loop sensor simulation on a desk-scale "
                    "synthetic scene")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("oracle-gen", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(fn=cmd_oracle_gen)

    p = sub.add_parser("fit", help="train a scene model")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("render", help="render a camera frame")
    common(p)
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--lane-shift", type=float, default=None,
                   help="lateral SDV offset in meters (diagnostics only)")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("lidar", help="render a LiDAR sweep")
    common(p)
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_lidar)

    p = sub.add_parser("edit", help="apply scenario edits and re-render")
    common(p)
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("loop", help="closed-loop simulation")
    common(p)
    p.add_argument("--model")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--no-autonomy", action="store_true")
    p.add_argument("--save-frames", action="store_true")
    p.set_defaults(fn=cmd_loop)

    p = sub.add_parser("replay", help="open-loop replay metrics")
    common(p)
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("gradcheck", help="finite-difference autodiff check")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # argparse usage errors exit(2) before this
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
