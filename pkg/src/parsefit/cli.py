"""Command-line entry point: ``parsefit {fit,eval,splinefit,ransac,synth}``.

Exit status is 0 on success, 1 for usage or input errors and 2 when fitting fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import io
from .bspline import BSplineError, fit_patch, init_parametrization
from .clustering import ClusteringError
from .embedding import EmbeddingError
from .metrics import MetricsError, SegmentLabeling, evaluate
from .pipeline import SCENE_PRESET, PipelineConfig, PipelineError, PointCloud, cylindrical_parametrization, decompose
from .primitives import FitError, patch_kind
from .ransac import RansacConfig, RansacError, detect_primitives
from .synth import SCENES, make_scene

EXIT_OK, EXIT_USAGE, EXIT_FIT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(text: str) -> tuple[int, int]:
    try:
        p, q = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 20x20, got {text!r}") from None
    if p < 4 or q < 4:
        raise argparse.ArgumentTypeError("grid sides must be at least 4")
    return p, q


def _load_cloud(path) -> PointCloud:
    pos, nrm = io.read_points(path)
    return PointCloud(pos, nrm)


def cmd_fit(args) -> int:
    cloud = _load_cloud(args.input)
    data = {}
    if args.preset == "scene":
        data.update(SCENE_PRESET)
    if args.config:
        with open(args.config) as fh:
            data.update(json.load(fh))
    if args.embeddings:
        data["embedding"] = args.embeddings
    if args.seed is not None:
        data["seed"] = args.seed
    config = PipelineConfig.from_dict(data)
    result = decompose(cloud, config)
    for msg in result.warnings:
        logging.warning(msg)
    if not result.patches:
        logging.error("no patches were fit")
        return EXIT_FIT
    patches = [p.patch for p in result.patches]
    indices = [p.indices for p in result.patches]
    io.write_patch_set(args.output, patches, indices, {**config.to_dict(), "timings": result.timings})
    if args.mesh:
        io.write_obj(args.mesh, patches, [cloud.positions[i] for i in indices])
    print(f"{len(patches)} patches: " + ", ".join(p.kind.value for p in result.patches))
    return EXIT_OK


def cmd_eval(args) -> int:
    pos, _ = io.read_points(args.points)
    pred, pred_idx, _ = io.read_patch_set(args.pred)
    truth, truth_idx, _ = io.read_patch_set(args.truth)
    n = len(pos)
    pl = io.labels_from_indices(pred_idx, n)
    tl = io.labels_from_indices(truth_idx, n)
    if np.any(tl < 0):
        raise UsageError("ground truth must assign every point to a segment")
    # points the prediction left out form one extra segment without a patch
    pred_kinds = [patch_kind(p) for p in pred]
    pred = list(pred)
    if np.any(pl < 0):
        pl = np.where(pl < 0, len(pred), pl)
        pred_kinds.append(pred_kinds[0] if pred_kinds else "plane")
        pred.append(None)
    report = evaluate(
        pos,
        SegmentLabeling(pl, pred_kinds),
        pred,
        SegmentLabeling(tl, [patch_kind(p) for p in truth]),
        truth_patches=truth,
        seed=args.seed,
    )
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "matched_pairs"}))
    return EXIT_OK


def cmd_splinefit(args) -> int:
    pos, nrm = io.read_points(args.input)
    p, q = args.grid
    uv = cylindrical_parametrization(pos, nrm) if args.closed_u else init_parametrization(pos)
    patch = fit_patch(uv, pos, p, q, closed_u=args.closed_u)
    io.write_patch_set(args.output, [patch], [np.arange(len(pos))], {"grid": [p, q], "closed_u": args.closed_u})
    return EXIT_OK


def cmd_ransac(args) -> int:
    pos, nrm = io.read_points(args.input)
    config = RansacConfig(inlier_epsilon=args.epsilon, seed=args.seed)
    found = detect_primitives(pos, nrm, config)
    if not found:
        logging.error("no primitive detected")
        return EXIT_FIT
    io.write_patch_set(args.output, [d.patch for d in found], [d.inliers for d in found],
                       {"ransac": {"inlier_epsilon": args.epsilon, "seed": args.seed}})
    print(f"{len(found)} primitives: " + ", ".join(d.kind.value for d in found))
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = make_scene(args.scene, args.seed)
    io.write_points(args.output, scene.points, scene.normals)
    if args.truth:
        indices = [scene.segment(k) for k in range(len(scene.patches))]
        io.write_patch_set(args.truth, scene.patches, indices, {"scene": args.scene, "seed": args.seed})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="parsefit", description="Decompose point clouds into parametric surface patches.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="segment a point cloud and fit patches")
    p.add_argument("--input", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["default", "scene"], default="default",
                   help="'scene' uses embedding settings tuned for the synthetic scenes")
    p.add_argument("--output", required=True)
    p.add_argument("--mesh")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score predicted patches against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("splinefit", help="fit one B-spline patch to all points")
    p.add_argument("--input", required=True)
    p.add_argument("--grid", type=_grid, default=(20, 20))
    p.add_argument("--closed-u", action="store_true")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_splinefit)

    p = sub.add_parser("ransac", help="RANSAC primitive detection baseline")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ransac)

    p = sub.add_parser("synth", help="write a synthetic test scene")
    p.add_argument("--scene", required=True, choices=sorted(SCENES))
    p.add_argument("--output", required=True)
    p.add_argument("--truth", help="also write the generating patches as a patch-set JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, io.FormatError, PipelineError, MetricsError, EmbeddingError, OSError,
            json.JSONDecodeError) as exc:
        print(f"parsefit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BSplineError, FitError, ClusteringError, RansacError, np.linalg.LinAlgError) as exc:
        print(f"parsefit: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
