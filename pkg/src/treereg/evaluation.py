"""Pose and point-cloud metrics: RRA/RTA curves, mAA@30, Acc/Comp, drift profiles.

All pairwise pose metrics are gauge-invariant: rotation error is the geodesic
angle between relative rotations, translation error is the angle between
relative translation directions expressed in the first view's frame, so a
global rigid transform plus uniform scale of either pose set changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, TooFewPoses
from .geometry import Se3Pose, rotation_geodesic_sq, umeyama_sim3


@dataclass(frozen=True)
class PairwiseErrors:
    """Per unordered view pair (i < j): rotation and translation-direction
    errors in degrees. Pairs touching an invalid pose are excluded and
    counted."""

    pairs: tuple
    rot_deg: np.ndarray
    trans_deg: np.ndarray
    n_excluded: int = 0


@dataclass(frozen=True)
class MetricReport:
    rra: dict
    rta: dict
    maa30: float
    acc: float | None = None
    comp: float | None = None
    depth_profile: dict | None = None

    def summary_line(self) -> str:
        return (f"mAA@30={self.maa30:.4f} RRA@5={self.rra[5]:.4f} "
                f"RTA@5={self.rta[5]:.4f}")


def _direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 and nb < 1e-12:
        return 0.0
    if na < 1e-12 or nb < 1e-12:
        return 90.0
    # atan2 keeps full precision near 0 and 180 degrees, arccos does not
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def relative_pose_errors(pred: dict, gt: dict,
                         pred_valid: dict | None = None) -> PairwiseErrors:
    """Pairwise relative pose errors between two pose sets keyed by view id."""
    views = sorted(set(pred) & set(gt))
    if pred_valid is not None:
        usable = [v for v in views if pred_valid.get(v, False)]
    else:
        usable = views
    if len(usable) < 2:
        raise TooFewPoses(f"{len(usable)} valid poses, need >= 2")
    n_total_pairs = len(views) * (len(views) - 1) // 2
    pairs, rot, trans = [], [], []
    for a in range(len(usable)):
        for b in range(a + 1, len(usable)):
            i, j = usable[a], usable[b]
            rel_pred = pred[i].rotation.T @ pred[j].rotation
            rel_gt = gt[i].rotation.T @ gt[j].rotation
            rot.append(np.degrees(np.sqrt(rotation_geodesic_sq(rel_pred, rel_gt))))
            dir_pred = pred[i].rotation.T @ (pred[j].center - pred[i].center)
            dir_gt = gt[i].rotation.T @ (gt[j].center - gt[i].center)
            trans.append(_direction_angle_deg(dir_pred, dir_gt))
            pairs.append((i, j))
    return PairwiseErrors(tuple(pairs), np.array(rot), np.array(trans),
                          n_excluded=n_total_pairs - len(pairs))


def accuracy_curves(errs: PairwiseErrors, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """RRA@tau and RTA@tau: fraction of pairs with error strictly below tau."""
    if len(errs.pairs) == 0:
        raise TooFewPoses("no pairs to evaluate")
    taus = np.asarray(list(thresholds), dtype=float)
    rra = np.array([(errs.rot_deg < t).mean() for t in taus])
    rta = np.array([(errs.trans_deg < t).mean() for t in taus])
    return rra, rta


def maa30(errs: PairwiseErrors) -> float:
    """Mean over integer thresholds 1..30 of min(RRA@tau, RTA@tau)."""
    rra, rta = accuracy_curves(errs, range(1, 31))
    return float(np.minimum(rra, rta).mean())


def metric_report(pred: dict, gt: dict, pred_valid: dict | None = None,
                  acc: float | None = None, comp: float | None = None,
                  depth_profile_data: dict | None = None) -> MetricReport:
    errs = relative_pose_errors(pred, gt, pred_valid)
    taus = (5, 10, 15)
    rra, rta = accuracy_curves(errs, taus)
    return MetricReport(
        rra=dict(zip(taus, rra.tolist())),
        rta=dict(zip(taus, rta.tolist())),
        maa30=maa30(errs),
        acc=acc, comp=comp,
        depth_profile=depth_profile_data,
    )


# ---------------------------------------------------------------------------
# point clouds


def acc_comp(pred_cloud: np.ndarray, gt_cloud: np.ndarray,
             workers: int = 1) -> tuple[float, float]:
    """Mean nearest-neighbor distances: pred-to-gt (Acc) and gt-to-pred (Comp).

    Clouds must already share a frame; align_clouds_by_camera_centers is the
    documented way to do that for reconstruction outputs.
    """
    pred_cloud = np.asarray(pred_cloud, dtype=float).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=float).reshape(-1, 3)
    if pred_cloud.shape[0] == 0 or gt_cloud.shape[0] == 0:
        raise EmptyCloud("both clouds must be nonempty")
    acc = float(cKDTree(gt_cloud).query(pred_cloud, workers=workers)[0].mean())
    comp = float(cKDTree(pred_cloud).query(gt_cloud, workers=workers)[0].mean())
    return acc, comp


def align_clouds_by_camera_centers(pred_cloud: np.ndarray, pred_centers: np.ndarray,
                                   gt_centers: np.ndarray) -> np.ndarray:
    """Sim(3)-align a predicted cloud into the ground-truth frame using the
    camera centers as correspondences."""
    t = umeyama_sim3(np.asarray(pred_centers), np.asarray(gt_centers))
    return t.apply(pred_cloud)


# ---------------------------------------------------------------------------
# drift diagnostics


def depth_profile(result, gt_poses) -> dict:
    """Mean pose error per spanning-tree depth, root-anchored per tree.

    Comparing in each tree root's camera frame avoids any global alignment
    step, which would be degenerate for collinear trajectories.
    """
    groups: dict[int, list[tuple[float, float]]] = {}
    for v, pose in result.poses.items():
        if not result.pose_valid.get(v, False):
            continue
        root = result.tree_roots[v]
        r_root = gt_poses[root].rotation
        rot_gt = r_root.T @ gt_poses[v].rotation
        center_gt = (gt_poses[v].center - gt_poses[root].center) @ r_root
        rot_err = np.degrees(np.sqrt(rotation_geodesic_sq(pose.rotation, rot_gt)))
        center_err = float(np.linalg.norm(pose.center - center_gt))
        groups.setdefault(result.depths[v], []).append((rot_err, center_err))
    return {
        d: {
            "count": len(vals),
            "rot_deg": float(np.mean([v[0] for v in vals])),
            "center": float(np.mean([v[1] for v in vals])),
        }
        for d, vals in sorted(groups.items())
    }
