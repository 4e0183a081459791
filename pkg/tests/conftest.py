import numpy as np
import pytest

from treereg.geometry import rotation_geodesic_sq
from treereg.scene_sim import make_scene


@pytest.fixture(scope="session")
def orbit8():
    return make_scene("orbit", 8, seed=1)


@pytest.fixture(scope="session")
def grid9():
    return make_scene("grid", 9, seed=2)


class CountingPredictor:
    """Delegating wrapper that tallies calls and keeps the last requests."""

    def __init__(self, inner):
        self.inner = inner
        self.predict_calls = 0
        self.init_pair_calls = 0
        self.requests = []

    def init_pair(self, a, b, image_a=None, image_b=None):
        self.init_pair_calls += 1
        return self.inner.init_pair(a, b, image_a, image_b)

    def predict(self, req):
        self.predict_calls += 1
        self.requests.append(req)
        return self.inner.predict(req)


def root_anchored_gt(gt, root, view):
    """Ground-truth pose of `view` expressed in the root camera frame."""
    r_root = gt.poses[root].rotation
    rot = r_root.T @ gt.poses[view].rotation
    center = (gt.poses[view].center - gt.poses[root].center) @ r_root
    return rot, center


def pose_errors_vs_gt(result, gt):
    """Per-view (rotation radians, center distance) against ground truth.

    The reconstruction lives in its root camera frame, so ground truth is
    re-anchored to the same gauge before comparing.
    """
    rot_err, center_err = {}, {}
    for v, pose in result.poses.items():
        if not result.pose_valid.get(v, False):
            continue
        rot_gt, center_gt = root_anchored_gt(gt, result.tree_roots[v], v)
        rot_err[v] = float(np.sqrt(rotation_geodesic_sq(pose.rotation, rot_gt)))
        center_err[v] = float(np.linalg.norm(pose.center - center_gt))
    return rot_err, center_err
