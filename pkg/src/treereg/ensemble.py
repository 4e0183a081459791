"""Joint refinement of several registration runs into one global pose set.

K runs of per-view poses (with their tree depths) are decomposed into K
sequence similarity transforms plus N global poses by alternating
minimization of

    sum_k sum_i w(d_ki) [ d_R(R_i, R'_k R_ki) + || t_i - (s_k R'_k t_ki + t'_k) ||^2 ]

where d_R is the squared geodesic angle and w(d) = exp(-5 d / d_max) dampens
deep, drift-prone views. Missing views carry zero weight.

Step A fits each run's sequence transform by weighted Umeyama on camera
centers; step B re-estimates the global poses with a weighted chordal mean
for rotations. Both steps approximate the geodesic rotation term, so an
iteration that fails to lower the cost rolls back and stops, which keeps the
cost trace non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration
from .geometry import (
    Se3Pose,
    Sim3Transform,
    project_so3,
    rotation_geodesic_sq,
    umeyama_sim3,
)


@dataclass(frozen=True)
class EnsembleRun:
    """One registration run: per-view poses and spanning-tree depths."""

    run_id: int
    poses: tuple  # Se3Pose or None per view
    depths: tuple  # tree layer per view, ignored where the pose is missing
    valid: tuple

    def __post_init__(self):
        if not (len(self.poses) == len(self.depths) == len(self.valid)):
            raise ValueError("poses, depths, valid must have equal length")
        if any(d < 0 for d in self.depths):
            raise ValueError("depths must be nonnegative")

    @property
    def num_views(self) -> int:
        return len(self.poses)

    @staticmethod
    def from_reconstruction(result, num_views: int, run_id: int) -> "EnsembleRun":
        poses, depths, valid = [], [], []
        for v in range(num_views):
            ok = result.pose_valid.get(v, False)
            poses.append(result.poses.get(v) if ok else None)
            depths.append(int(result.depths.get(v, 0)))
            valid.append(bool(ok))
        return EnsembleRun(run_id, tuple(poses), tuple(depths), tuple(valid))


@dataclass(frozen=True)
class EnsembleConfig:
    num_runs: int = 3
    max_iters: int = 100
    cost_tol: float = 1e-9

    def __post_init__(self):
        if self.num_runs < 2:
            raise ValueError("need at least 2 runs to ensemble")


@dataclass
class GlobalPoseSet:
    poses: list
    run_transforms: list
    final_cost: float
    cost_trace: list = field(default_factory=list)
    per_run_cost: list = field(default_factory=list)


def depth_weight(d: int, d_max: int) -> float:
    """exp(-5 d / d_max); weight 1 everywhere when the deepest layer is 0."""
    if d_max <= 0:
        return 1.0
    return float(np.exp(-5.0 * d / d_max))


def _weight_matrix(runs) -> np.ndarray:
    d_max = max((r.depths[i] for r in runs for i in range(r.num_views) if r.valid[i]),
                default=0)
    w = np.zeros((len(runs), runs[0].num_views))
    for k, r in enumerate(runs):
        for i in range(r.num_views):
            if r.valid[i]:
                w[k, i] = depth_weight(r.depths[i], d_max)
    return w


def _run_cost(run, transform, poses, w_row) -> float:
    total = 0.0
    for i in range(run.num_views):
        if w_row[i] == 0.0:
            continue
        g = poses[i]
        rot_term = rotation_geodesic_sq(g.rotation, transform.rotation @ run.poses[i].rotation)
        trans_term = float(np.sum((g.center - transform.apply(run.poses[i].center)) ** 2))
        total += w_row[i] * (rot_term + trans_term)
    return total


def ensemble_cost(runs, global_set: GlobalPoseSet) -> float:
    """Exact evaluation of the alternating-minimization objective."""
    w = _weight_matrix(runs)
    return sum(_run_cost(run, global_set.run_transforms[k], global_set.poses, w[k])
               for k, run in enumerate(runs))


def optimize_ensemble(runs, cfg: EnsembleConfig | None = None) -> GlobalPoseSet:
    """Alternate sequence-transform fits and global pose updates until the
    cost settles.

    Raises DegenerateConfiguration when a run has fewer than 3 positive
    weight views or its camera centers are collinear, since the sequence
    transform is then unobservable.
    """
    cfg = cfg or EnsembleConfig()
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError(f"need >= 2 runs, got {len(runs)}")
    n = runs[0].num_views
    if any(r.num_views != n for r in runs):
        raise ValueError("runs disagree on the number of views")
    w = _weight_matrix(runs)
    if np.any(np.count_nonzero(w, axis=1) < 3):
        raise DegenerateConfiguration("every run needs >= 3 views with positive weight")

    covered = [i for i in range(n) if w[:, i].sum() > 0]
    if not covered:
        raise DegenerateConfiguration("no view is covered by any run")

    # initialize the globals from the run carrying the most total weight
    k_init = int(np.argmax(w.sum(axis=1)))
    poses: list = [None] * n
    for i in range(n):
        for k in [k_init] + [k for k in range(len(runs)) if k != k_init]:
            if w[k, i] > 0:
                poses[i] = runs[k].poses[i]
                break
        if poses[i] is None:
            poses[i] = Se3Pose.identity()  # uncovered, weight 0 everywhere
    transforms = [Sim3Transform.identity() for _ in runs]

    state = GlobalPoseSet(poses, transforms, 0.0)
    cost = ensemble_cost(runs, state)
    trace = [cost]

    for _ in range(cfg.max_iters):
        # step A: per-run similarity onto the current global centers
        new_transforms = []
        for k, run in enumerate(runs):
            idx = [i for i in range(n) if w[k, i] > 0]
            src = np.array([run.poses[i].center for i in idx])
            dst = np.array([state.poses[i].center for i in idx])
            new_transforms.append(umeyama_sim3(src, dst, weights=w[k, idx]))

        # step B: per-view chordal mean rotation and weighted mean center
        new_poses = list(state.poses)
        for i in covered:
            acc_rot = np.zeros((3, 3))
            acc_center = np.zeros(3)
            total = 0.0
            for k, run in enumerate(runs):
                if w[k, i] == 0.0:
                    continue
                t = new_transforms[k]
                acc_rot += w[k, i] * (t.rotation @ run.poses[i].rotation)
                acc_center += w[k, i] * t.apply(run.poses[i].center)
                total += w[k, i]
            new_poses[i] = Se3Pose(project_so3(acc_rot), acc_center / total)

        candidate = GlobalPoseSet(new_poses, new_transforms, 0.0)
        new_cost = ensemble_cost(runs, candidate)
        if new_cost > cost + 1e-15:
            break  # approximate steps stopped descending, keep the best state
        improved = cost - new_cost
        state = candidate
        cost = new_cost
        trace.append(cost)
        if improved < cfg.cost_tol:
            break

    state.final_cost = cost
    state.cost_trace = trace
    state.per_run_cost = [
        _run_cost(run, state.run_transforms[k], state.poses, w[k])
        for k, run in enumerate(runs)
    ]
    return state
