"""``clap-pretrain`` command line entry point.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad input),
2 numerical abort (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATION_MODES, TrainConfig, ablation_mode, load_config

log = logging.getLogger("clap_pretrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    from .synthscene import generate_scene, simulate_sample
    from .synthscene.io import write_csv, write_ply, write_ppm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(args.seed, n_objects=args.objects)
    sample = simulate_sample(scene, n_cam=args.cameras, image_size=args.image_size)
    (out / "scene.json").write_text(scene.to_json())
    cloud = sample.cloud
    write_ply(out / "lidar.ply", cloud.xyz, {"intensity": cloud.features[:, 0], "semantic": cloud.semantic,
                                             "curvature": cloud.curvature})
    cols = ["x", "y", "z", "range", "prim_id", "semantic", "nx", "ny", "nz", "curvature"]
    rows = np.column_stack([cloud.xyz, cloud.ranges, cloud.prim_id, cloud.semantic, cloud.normals, cloud.curvature])
    write_csv(out / "lidar_gt.csv", cols, rows)
    for k, frame in enumerate(sample.frames):
        write_ppm(out / f"cam{k}.ppm", frame.image)
        r, c = np.meshgrid(np.arange(frame.height), np.arange(frame.width), indexing="ij")
        depth = np.where(np.isfinite(frame.depth), frame.depth, -1.0)
        write_csv(out / f"cam{k}_gt.csv", ["row", "col", "depth", "prim_id"],
                  np.column_stack([r.ravel(), c.ravel(), depth.ravel(), frame.prim_id.ravel()]))
        np.savetxt(out / f"cam{k}_calib.txt", frame.calib)
    print(f"scene {args.seed}: {len(scene.primitives)} primitives, {len(cloud)} LiDAR points -> {out}")
    return 0


def _config_from(args) -> TrainConfig:
    overrides = {}
    for key in ("seed", "epochs", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "scenes", None) is not None:
        overrides["scene_seeds"] = list(range(args.scenes))
    cfg = load_config(args.config, overrides)
    return ablation_mode(cfg, args.mode) if getattr(args, "mode", None) else cfg


def cmd_pretrain(args) -> int:
    from .checkpoint import Checkpoint
    from .trainer import train

    out = Path(args.out)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        cfg = resume.config
    else:
        cfg = _config_from(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    ck = train(cfg, out, resume)
    print(f"trained {ck.epoch} epochs / {ck.step} steps; log {out / 'train_log.csv'}")
    return 0


def cmd_probe(args) -> int:
    from .checkpoint import Checkpoint
    from .probe import CSV_HEADER, PROBE_TEST_SEEDS, PROBE_TRAIN_SEEDS, linear_probe

    ck = Checkpoint.load(args.ckpt)
    train_s = PROBE_TRAIN_SEEDS[: args.train_scenes]
    test_s = PROBE_TEST_SEEDS[: args.test_scenes]
    rows = linear_probe(ck, train_s, test_s).rows("checkpoint")
    if not args.no_baseline:
        rows += linear_probe(None, train_s, test_s, config=ck.config).rows("random-init")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return 0


def _load_scene(args):
    from .checkpoint import Checkpoint
    from .model import prepare_scene

    ck = Checkpoint.load(args.ckpt)
    return ck, prepare_scene(ck.config, args.scene)


def cmd_render_debug(args) -> int:
    from .diffengine import DiffValue
    from .model import encode, frozen
    from .neuralfield import eval_rgb, eval_sdf, sample_lattice, sharpness
    from .renderer import integrate, near_far, render_weights, sample_ranges
    from .synthscene.io import write_csv, write_ppm

    ck, data = _load_scene(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    P = frozen(ck.params)
    grid = encode(data, P).refined
    h = sharpness(P)
    frame = data.frames[args.camera]
    rows, cols = np.meshgrid(np.arange(frame.height), np.arange(frame.width), indexing="ij")
    o, d = frame.pixel_rays(rows.ravel(), cols.ravel())
    origins = np.broadcast_to(o, d.shape)
    near, far = near_far(origins, d, data.spec.lo, data.spec.hi)
    r = sample_ranges(near, far, ck.config.n_ray_samples)
    pts = (origins[:, None] + r[..., None] * d[:, None]).reshape(-1, 3)
    depth, rgb = [], []
    for i in range(0, len(d), 512):
        sl = slice(i * r.shape[1], (i + 512) * r.shape[1])
        n = min(512, len(d) - i)
        s = eval_sdf(DiffValue(pts[sl]), grid, P).data.reshape(n, -1)
        w = render_weights(s, h)
        z = r[i:i + n] * (d[i:i + n] @ frame.pose.rotation[:, 2])[:, None]
        depth.append(integrate(w, z).data)
        c = eval_rgb(DiffValue(pts[sl]), grid, P).data.reshape(n, -1, 3)
        rgb.append(integrate(w, c).data)
    depth = np.concatenate(depth).reshape(frame.height, frame.width)
    rgb = np.concatenate(rgb).reshape(frame.height, frame.width, 3)
    write_ppm(out / "render_rgb.ppm", rgb)
    write_ppm(out / "gt_rgb.ppm", frame.image)
    gt = np.where(np.isfinite(frame.depth), frame.depth, -1.0)
    write_csv(out / "render_depth.csv", ["row", "col", "depth", "gt_depth"],
              np.column_stack([rows.ravel(), cols.ravel(), depth.ravel(), gt.ravel()]))
    sample_lattice(grid, P, path=out / "sdf_lattice.csv")
    print(f"wrote debug render of scene {args.scene}, camera {args.camera} -> {out}")
    return 0


def cmd_export_curvature(args) -> int:
    from .model import curvature_weights
    from .synthscene.io import heat_colors, write_ply

    ck, data = _load_scene(args)
    w = curvature_weights(data, ck.params, ck.config).point_weights
    write_ply(args.out, data.cloud.xyz, {"curvature": w}, rgb=heat_colors(w))
    print(f"curvature heatmap for {len(w)} points -> {args.out}")
    return 0


def cmd_export_protos(args) -> int:
    from .model import prototype_assignment
    from .synthscene.io import write_ply

    ck, data = _load_scene(args)
    assign = prototype_assignment(data, ck.params)
    idx, inside = data.spec.voxel_index(data.cloud.xyz)
    flat = data.spec.flat_index(np.clip(idx, 0, np.asarray(data.spec.dims) - 1))
    point_proto = np.where(inside, assign[flat], -1)
    palette = np.random.default_rng(0).uniform(0.15, 1.0, size=(ck.config.n_k, 3))
    rgb = np.where(point_proto[:, None] >= 0, palette[np.maximum(point_proto, 0)], 0.0)
    write_ply(args.out, data.cloud.xyz, {"prototype": point_proto}, rgb=rgb)
    print(f"{len(np.unique(point_proto[point_proto >= 0]))} prototypes in use -> {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    failures = run_selfcheck(verbose=True)
    return 0 if not failures else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clap-pretrain", description="Joint LiDAR-camera pre-training on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="generate one scene and its sensor data")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--cameras", type=int, default=2)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("pretrain", help="run pre-training")
    t.add_argument("--config", help="TOML config file")
    t.add_argument("--mode", choices=ABLATION_MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scenes", type=int, help="use scene seeds 0..N-1")
    t.add_argument("--resume", help="checkpoint JSON to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("probe", help="linear probe of a checkpoint (CSV on stdout)")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--train-scenes", type=int, default=16)
    q.add_argument("--test-scenes", type=int, default=8)
    q.add_argument("--no-baseline", action="store_true")
    q.set_defaults(func=cmd_probe)

    for name, func, helptext in (("render-debug", cmd_render_debug, "render a camera view from the field"),
                                 ("export-curvature", cmd_export_curvature, "PLY heatmap of curvature weights"),
                                 ("export-protos", cmd_export_protos, "PLY of per-point prototype assignment")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--scene", type=int, required=True)
        s.add_argument("--out", required=True)
        if name == "render-debug":
            s.add_argument("--camera", type=int, default=0)
        s.set_defaults(func=func)

    c = sub.add_parser("selfcheck", help="run the built-in invariant suite")
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    from .diffengine import EngineError, NonFiniteError
    from .synthscene import SceneError
    from .trainer import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"clap-pretrain: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ValueError, SceneError, EngineError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
