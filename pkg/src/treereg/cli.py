"""Command-line pipeline: simulate, tree, reconstruct, ensemble, evaluate.

Every command is deterministic given its flags and seed, writes a manifest
describing the run, and uses exit codes 0 (success), 1 (runtime failure),
2 (usage error). A JSON config file can predefine any flag; explicit flags
win. REGIST_SEED serves as the fallback seed.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .ensemble import EnsembleRun, optimize_ensemble
from .errors import TreeregError
from .evaluation import (
    accuracy_curves,
    acc_comp,
    align_clouds_by_camera_centers,
    depth_profile,
    maa30,
    metric_report,
    relative_pose_errors,
)
from .geometry import Se3Pose, quat_from_rotation
from .io_formats import (
    pose_record_from_gt,
    pose_record_from_result,
    read_manifest,
    read_pmap,
    read_poses,
    read_similarity,
    write_manifest,
    write_ply,
    write_pmap,
    write_poses,
    write_similarity_csv,
    PoseSetRecord,
    PoseViewRecord,
)
from .predictor import (
    ExternalPredictor,
    OracleNoiseConfig,
    OraclePredictor,
    ToyNetPredictor,
)
from .registration import plan_registration, reconstruct, reconstruct_infer_then_align
from .scene_sim import PRESETS, make_scene
from .stereo_model import ToyNetConfig, make_toy_weights
from .view_graph import SimilarityMatrix, kmedoids_roots


def _views_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 views, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _default_seed() -> int:
    return int(os.environ.get("REGIST_SEED", "0"))


def _tree_summary(forest) -> dict:
    hist: dict[str, int] = {}
    for t in forest.trees:
        for d in t.depth.values():
            hist[str(d)] = hist.get(str(d), 0) + 1
    return {
        "roots": sorted(forest.root_set),
        "max_depth": max(t.max_depth() for t in forest.trees),
        "depth_histogram": hist,
    }


def _write_run_manifest(out_dir: Path, command: str, config: dict, seed: int,
                        outputs: list[str], tree_summary=None,
                        predict_calls=None, timings=None) -> None:
    write_manifest(out_dir / "manifest.json", {
        "command": command,
        "config": config,
        "seed": seed,
        "tree": tree_summary,
        "predict_calls": predict_calls,
        "timings": timings,
        "outputs": sorted(outputs),
    })


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, traj, gt = make_scene(args.scene, args.views, args.seed,
                             image_size=args.image_size)
    outputs = []
    for v in range(gt.num_views):
        for kind, pm in (("world", gt.world_pointmaps[v]),
                         ("camera", gt.camera_pointmaps[v])):
            name = f"view{v:03d}_{kind}.pmap"
            write_pmap(out / name, pm)
            outputs.append(name)
    write_poses(out / "poses.json", pose_record_from_gt(gt))
    write_similarity_csv(out / "sim.csv", SimilarityMatrix(gt.overlap))
    outputs += ["poses.json", "sim.csv"]
    config = {"scene": args.scene, "views": args.views,
              "image_size": args.image_size}
    # timings stay null here so repeated runs are byte-identical
    _write_run_manifest(out, "simulate", config, args.seed, outputs)
    return 0


# ---------------------------------------------------------------------------
# tree


def cmd_tree(args) -> int:
    sim = read_similarity(args.sim)
    roots = None
    if args.root is not None:
        roots = [args.root]
    elif args.roots is not None:
        roots = kmedoids_roots(sim, args.roots, seed=args.seed)
    plan = plan_registration(sim, tree=args.tree, compression_k=args.compress,
                             roots=roots)
    summary = _tree_summary(plan.forest)
    doc = {
        "tree": args.tree,
        "compress": args.compress,
        "summary": summary,
        "trees": [
            {
                "root": t.root,
                "parent": {str(v): p for v, p in sorted(t.parent.items())},
                "depth": {str(v): d for v, d in sorted(t.depth.items())},
            }
            for t in plan.forest.trees
        ],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.dot:
        lines = ["graph tree {"]
        for t in plan.forest.trees:
            for v, p in sorted(t.parent.items()):
                if p is not None:
                    lines.append(f"  {p} -- {v};")
        lines.append("}")
        Path(args.dot).write_text("\n".join(lines) + "\n")
    print(f"roots={summary['roots']} max_depth={summary['max_depth']}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct


def _load_bundle(scene_dir: Path):
    manifest = read_manifest(scene_dir / "manifest.json")
    cfg = manifest["config"]
    _, traj, gt = make_scene(cfg["scene"], cfg["views"], manifest["seed"],
                             image_size=cfg["image_size"])
    sim = read_similarity(scene_dir / "sim.csv")
    return gt, sim


def _build_predictor(args, gt):
    if args.predictor == "oracle":
        noise = OracleNoiseConfig(
            sigma_rot=args.sigma_rot, sigma_trans=args.sigma_trans,
            sigma_scale=args.sigma_scale, sigma_point=args.sigma_point,
            conf_decay_eta=args.conf_decay_eta, seed=args.seed)
        return OraclePredictor(gt, noise)
    if args.predictor == "toynet":
        cfg = ToyNetConfig()
        return ToyNetPredictor(cfg, make_toy_weights(cfg, seed=args.seed))
    if args.predictor == "external":
        if not args.predictor_cmd:
            raise TreeregError("--predictor-cmd is required with --predictor external")
        return ExternalPredictor(shlex.split(args.predictor_cmd))
    raise TreeregError(f"unknown predictor {args.predictor!r}")


def cmd_reconstruct(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt, sim = _load_bundle(Path(args.scene))
    roots = None
    if args.roots is not None:
        roots = kmedoids_roots(sim, args.roots, seed=args.seed)
    plan = plan_registration(sim, tree=args.tree, compression_k=args.compress,
                             roots=roots)
    predictor = _build_predictor(args, gt)
    runner = reconstruct_infer_then_align if args.infer_then_align else reconstruct
    try:
        result = runner(plan, predictor, gt.images,
                        conf_threshold=args.conf_threshold,
                        pnp_threads=args.threads)
    finally:
        if hasattr(predictor, "close"):
            predictor.close()

    outputs = []
    points, colors, confs = [], [], []
    for v in result.registered_views():
        name = f"view{v:03d}.pmap"
        write_pmap(out / name, result.pointmaps[v], result.confidences[v])
        outputs.append(name)
        pm = result.pointmaps[v]
        points.append(pm.xyz[pm.valid])
        colors.append(gt.images[v][pm.valid])
        confs.append(result.confidences[v].c[pm.valid])
    write_poses(out / "poses.json", pose_record_from_result(result))
    write_manifest(out / "intrinsics.json", {
        "focal": result.intrinsics.focal,
        "cx": result.intrinsics.cx,
        "cy": result.intrinsics.cy,
    })
    write_ply(np.concatenate(points), np.concatenate(colors),
              np.concatenate(confs), out / "cloud.ply")
    outputs += ["poses.json", "intrinsics.json", "cloud.ply"]
    config = {k: getattr(args, k) for k in
              ("scene", "predictor", "tree", "compress", "roots",
               "conf_threshold", "sigma_rot", "sigma_trans", "sigma_scale",
               "sigma_point", "conf_decay_eta", "infer_then_align")}
    _write_run_manifest(
        out, "reconstruct", config, args.seed, outputs,
        tree_summary=_tree_summary(plan.forest) | {
            "bootstrap_children": {str(k): v for k, v in
                                   result.bootstrap_children.items()},
            "partial": result.partial,
        },
        predict_calls=result.predict_calls,
        timings=result.timings)
    return 0


# ---------------------------------------------------------------------------
# ensemble


def cmd_ensemble(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for manifest_path in args.runs:
        mdir = Path(manifest_path).parent
        manifest = read_manifest(manifest_path)
        if "poses.json" not in manifest.get("outputs", []):
            raise TreeregError(f"{manifest_path} lists no poses.json output")
        records.append(read_poses(mdir / "poses.json"))
    num_views = max(v.view_id for r in records for v in r.views) + 1
    runs = []
    for k, record in enumerate(records):
        poses = record.pose_dict()
        valid = record.valid_dict()
        depths = record.depth_dict()
        runs.append(EnsembleRun(
            k,
            tuple(poses.get(v) if valid.get(v, False) else None
                  for v in range(num_views)),
            tuple(depths.get(v, 0) for v in range(num_views)),
            tuple(bool(valid.get(v, False)) for v in range(num_views)),
        ))
    t0 = time.perf_counter()
    merged = optimize_ensemble(runs)
    views = tuple(
        PoseViewRecord(v, tuple(quat_from_rotation(merged.poses[v].rotation).tolist()),
                       tuple(merged.poses[v].center.tolist()),
                       any(r.valid[v] for r in runs), 0)
        for v in range(num_views))
    write_poses(out / "poses.json", PoseSetRecord(views, records[0].intrinsics))
    trace_lines = ["iteration,cost"] + [f"{i},{float(c)!r}" for i, c in
                                        enumerate(merged.cost_trace)]
    (out / "cost_trace.csv").write_text("\n".join(trace_lines) + "\n")
    _write_run_manifest(
        out, "ensemble",
        {"runs": [str(r) for r in args.runs],
         "final_cost": merged.final_cost,
         "per_run_cost": merged.per_run_cost},
        args.seed, ["poses.json", "cost_trace.csv"],
        timings={"total": time.perf_counter() - t0})
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_record = read_poses(args.pred)
    gt_record = read_poses(args.gt)
    pred = pred_record.pose_dict()
    gt = gt_record.pose_dict()
    acc = comp = None
    if args.pred_cloud and args.gt_cloud:
        pred_pm, _ = read_pmap(args.pred_cloud)
        gt_pm, _ = read_pmap(args.gt_cloud)
        common = sorted(set(pred) & set(gt))
        aligned = align_clouds_by_camera_centers(
            pred_pm.xyz[pred_pm.valid],
            np.array([pred[v].center for v in common]),
            np.array([gt[v].center for v in common]))
        acc, comp = acc_comp(aligned, gt_pm.xyz[gt_pm.valid], workers=args.threads)

    # a per-depth error profile is anchored at the tree root; it is only
    # well defined when the prediction identifies exactly one root view
    profile = None
    depths = pred_record.depth_dict()
    valid = pred_record.valid_dict()
    roots = [v for v in pred if depths.get(v, 0) == 0 and valid.get(v, False)]
    if len(roots) == 1:
        shim = SimpleNamespace(poses=pred, pose_valid=valid, depths=depths,
                               tree_roots={v: roots[0] for v in pred})
        profile = {str(d): stats for d, stats in depth_profile(shim, gt).items()}

    report = metric_report(pred, gt, pred_valid=valid, acc=acc, comp=comp)
    errs = relative_pose_errors(pred, gt, pred_valid=valid)
    taus = list(range(1, 31))
    rra, rta = accuracy_curves(errs, taus)
    write_manifest(out / "metrics.json", {
        "maa30": report.maa30,
        "rra": report.rra,
        "rta": report.rta,
        "acc": acc,
        "comp": comp,
        "depth_profile": profile,
        "pairs": len(errs.pairs),
        "pairs_excluded": errs.n_excluded,
        "maa30_check": float(np.minimum(rra, rta).mean()),
    })
    lines = ["tau,rra,rta"] + [f"{t},{float(r)!r},{float(a)!r}"
                               for t, r, a in zip(taus, rra, rta)]
    (out / "curves.csv").write_text("\n".join(lines) + "\n")
    print(report.summary_line())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="treereg",
        description="Incremental multi-view pointmap registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON file of flag defaults")
        p.add_argument("--seed", type=int, default=_default_seed())
        p.set_defaults(func=func)
        subparsers[name] = p
        return p

    p = add("simulate", cmd_simulate, help="generate a synthetic scene bundle")
    p.add_argument("--scene", choices=PRESETS, required=True)
    p.add_argument("--views", type=_views_count, required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out", required=True)

    p = add("tree", cmd_tree, help="build and inspect the registration tree")
    p.add_argument("--sim", required=True, help="similarity matrix file (csv or pmap)")
    p.add_argument("--tree", choices=("mst", "spt"), default="mst")
    p.add_argument("--compress", type=_nonneg_int, default=0)
    p.add_argument("--root", type=int, default=None,
                   help="explicit root view id (overrides the similarity rule)")
    p.add_argument("--roots", type=int, default=None,
                   help="k-medoids root count for a forest")
    p.add_argument("--out", required=True)
    p.add_argument("--dot", default=None)

    p = add("reconstruct", cmd_reconstruct, help="run incremental registration")
    p.add_argument("--scene", required=True, help="bundle directory from simulate")
    p.add_argument("--predictor", choices=("oracle", "toynet", "external"),
                   default="oracle")
    p.add_argument("--predictor-cmd", default=None)
    p.add_argument("--tree", choices=("mst", "spt"), default="mst")
    p.add_argument("--compress", type=_nonneg_int, default=0)
    p.add_argument("--roots", type=int, default=None)
    p.add_argument("--conf-threshold", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--infer-then-align", action="store_true")
    p.add_argument("--sigma-rot", type=float, default=0.0)
    p.add_argument("--sigma-trans", type=float, default=0.0)
    p.add_argument("--sigma-scale", type=float, default=0.0)
    p.add_argument("--sigma-point", type=float, default=0.0)
    p.add_argument("--conf-decay-eta", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("ensemble", cmd_ensemble, help="merge runs into one pose set")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run manifest files")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, help="compare predicted and true poses")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-cloud", default=None)
    p.add_argument("--gt-cloud", default=None)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)

    return parser, subparsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        subparsers[args.command].set_defaults(
            **{k: v for k, v in overrides.items() if k != "config"})
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TreeregError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
