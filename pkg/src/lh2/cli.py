"""Command-line front end: train / stats / render / grad-check / hist.

Exit codes: 0 success, 2 training divergence, 3 configuration error
(bad flags, unreadable files, out-of-domain parameters), 1 gradient-check
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .errors import (CanvasError, ConfigError, DomainError, FormatError,
                     RangeError)
from .io_formats import (RunConfig, emit_metrics, parse_config, read_pgm,
                         read_ppm, read_tensor, write_pgm, write_ppm)
from .depth_renderer import (DepthMap, LightingParams, Pose, center_crop,
                             depth_centroid, depth_to_pointcloud,
                             intrinsics_from_fov, make_canvas, project_points,
                             render_hemisphere_demo, scatter_min_render, shade,
                             transform_pointcloud, warp_image)
from .sphere_stats import (evt_estimate, half_quarter_cosines,
                           monte_carlo_pairwise)
from .train_harness import (dataset_inputs, grad_check, histogram_dump,
                            load_checkpoint, train)

_HANDLED = (ConfigError, FormatError, DomainError, RangeError, CanvasError,
            OSError, ValueError)


class _Parser(argparse.ArgumentParser):
    """argparse folds usage problems into the config-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg, args.out_dir)
    if result.status == 2:
        print("training diverged: non-finite loss; last finite state saved",
              file=sys.stderr)
        return 2
    print(f"epochs {result.epochs_run}  final train accuracy "
          f"{result.final_accuracy:.4f}  metrics {result.metrics_path}")
    return 0


def _cmd_stats(args) -> int:
    est = evt_estimate(args.C, args.d)
    half, quarter = half_quarter_cosines(est)
    row = {"C": est.C, "d": est.d, "cos_min": est.cos_min,
           "theta_min_rad": est.theta_min_rad, "theta_min_deg": est.theta_min_deg,
           "std_cos": est.std_cos, "cos_half": half, "cos_quarter": quarter}
    if args.trials > 0:
        row.update(monte_carlo_pairwise(args.C, args.d, args.trials, args.seed))
    for key, value in row.items():
        print(f"{key} = {value}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        emit_metrics([row], os.path.join(args.out_dir, "stats.csv"))
    return 0


def _read_depth(path) -> DepthMap:
    if path.endswith(".pgm"):
        return DepthMap.from_values(read_pgm(path))
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise FormatError(f"depth tensor must be 2-D, got shape {arr.shape}")
    return DepthMap.from_values(arr.astype(np.float64))


def _write_frame(out_dir, name, image, depth_values, mask):
    write_ppm(image, os.path.join(out_dir, f"{name}.ppm"))
    # PGM needs finite values: background pixels take the far depth
    finite = depth_values[np.isfinite(depth_values)]
    far = float(finite.max()) if finite.size else 0.0
    filled = np.where(np.isfinite(depth_values), depth_values, far)
    write_pgm(filled, os.path.join(out_dir, f"{name}.pgm"))
    del mask


def _cmd_render(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.demo is not None:
        demo = render_hemisphere_demo(size=args.size, rotations=args.rotations,
                                      frames_per_axis=args.frames,
                                      radius=args.radius)
        write_ppm(demo["canonical"], os.path.join(args.out_dir, "canonical.ppm"))
        write_pgm(demo["depth"].values, os.path.join(args.out_dir, "depth.pgm"))
        for name, image, mask in demo["frames"]:
            write_ppm(image, os.path.join(args.out_dir, f"{name}.ppm"))
        print(f"wrote {len(demo['frames'])} frames to {args.out_dir}")
        return 0

    if args.depth is None or args.albedo is None or args.pose is None:
        raise ConfigError("custom render needs --depth, --albedo, and --pose")
    depth = _read_depth(args.depth)
    albedo = read_ppm(args.albedo)
    if albedo.shape[:2] != depth.shape:
        raise DomainError(f"albedo {albedo.shape[:2]} does not match depth "
                          f"{depth.shape}")
    h, w = depth.shape
    K = intrinsics_from_fov(w, h, args.fov)
    vals = args.pose
    pose = Pose(R=np.array(vals[:9]).reshape(3, 3), t=np.array(vals[9:]),
                pivot=depth_centroid(depth, K))
    light = LightingParams(k_a=0.35, k_d=0.65, l_dx=0.4, l_dy=0.25)
    source = shade(depth, albedo, light, K)
    canvas = make_canvas([pose], depth, K)
    image, mask = warp_image(source, depth, pose, K, canvas, args.radius)
    pts = transform_pointcloud(depth_to_pointcloud(depth, K), pose)
    rendered = scatter_min_render(project_points(pts, K), canvas, args.radius)
    cropped = center_crop(rendered.values, h, w)
    write_ppm(source, os.path.join(args.out_dir, "canonical.ppm"))
    _write_frame(args.out_dir, "frame", image, cropped, mask)
    print(f"wrote frame.ppm and frame.pgm to {args.out_dir}")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = parse_config(args.config) if args.config else None
    rows, ok = grad_check(cfg, repeats=args.repeats, seed=args.seed,
                          corrupt_op=args.corrupt)
    width = max(len(r["op"]) for r in rows)
    for r in rows:
        mark = "ok" if r["pass"] else "FAIL"
        print(f"{r['op']:<{width}}  max_rel_err {r['max_rel_err']:.3e}  {mark}")
    return 0 if ok else 1


def _cmd_hist(args) -> int:
    cfg = _load_config(args)
    state = load_checkpoint(args.checkpoint)
    X, labels = dataset_inputs(cfg)
    if X.shape[1] != state[0].shape[0]:
        raise ConfigError(f"checkpoint expects {state[0].shape[0]} input dims "
                          f"but the config generates {X.shape[1]}")
    records, summary = histogram_dump(state, X, labels)
    os.makedirs(args.out_dir, exist_ok=True)
    emit_metrics(records, os.path.join(args.out_dir, "hist.csv"))
    for key, value in summary.items():
        print(f"{key} = {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lh2", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True,
                               parser_class=_Parser)

    p = sub.add_parser("train", help="train the synthetic embedder")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("stats", help="minimum-angle and spread estimates")
    p.add_argument("--C", type=int, required=True, help="number of classes")
    p.add_argument("--d", type=int, required=True, help="feature dimension")
    p.add_argument("--trials", type=int, default=0,
                   help="Monte Carlo trials (0 = closed form only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", help="also write stats.csv here")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("render", help="depth-map rotation renderer")
    p.add_argument("--demo", choices=["hemisphere"],
                   help="render the built-in demo scene")
    p.add_argument("--size", type=int, default=30, help="demo grid size")
    p.add_argument("--frames", type=int, default=5, help="demo frames per axis")
    p.add_argument("--rotations", type=float, nargs=3, default=(10.0, 10.0, 10.0),
                   metavar=("AX", "AY", "AZ"), help="demo max angles, degrees")
    p.add_argument("--depth", help="depth map (.lh2t tensor or 16-bit .pgm)")
    p.add_argument("--albedo", help="albedo image (.ppm)")
    p.add_argument("--pose", type=float, nargs=12,
                   help="row-major 3x3 rotation then translation x y z")
    p.add_argument("--fov", type=float, default=40.0, help="field of view, degrees")
    p.add_argument("--radius", type=int, default=1, help="scatter dilation radius")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--config", help="config file supplying the seed")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--repeats", type=int, default=5,
                   help="random instances per op")
    p.add_argument("--corrupt", metavar="OP",
                   help="deliberately corrupt one op's gradient (detector test)")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("hist", help="positive/negative cosine histograms")
    p.add_argument("--checkpoint", required=True,
                   help="either file of a checkpoint pair, or their stem")
    p.add_argument("--config", help="config that generated the dataset")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except _HANDLED as exc:
        print(f"lh2: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
