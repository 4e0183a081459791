import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treereg.errors import (
    DegenerateConfiguration,
    DegeneratePointmap,
    InsufficientCorrespondences,
)
from treereg.geometry import (
    ConfidenceMap,
    Intrinsics,
    NormalizationParams,
    Pointmap,
    Se3Pose,
    Sim3Transform,
    apply_denormalization,
    apply_normalization,
    estimate_focal,
    is_rotation,
    normalization_params,
    pixel_grid,
    project_points,
    quat_from_rotation,
    random_rotation_uniform,
    rotation_from_quat,
    rotation_geodesic_sq,
    so3_exp,
    solve_pnp,
    umeyama_sim3,
)

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def grid_pointmap(points, h=1, w=None):
    pts = np.asarray(points, dtype=float)
    if w is None:
        w = pts.shape[0]
    xyz = pts.reshape(h, w, 3)
    return Pointmap(xyz, np.ones((h, w), dtype=bool))


def random_pointmap(rng, h=8, w=8, scale=3.0):
    xyz = rng.normal(size=(h, w, 3)) * scale + rng.normal(size=3) * 5.0
    valid = rng.random((h, w)) > 0.2
    valid.flat[0] = True  # at least one valid pixel
    valid.flat[1] = True
    valid.flat[2] = True
    return Pointmap(xyz, valid)


# ---------------------------------------------------------------------------
# normalization


def test_normalization_two_points():
    pm = grid_pointmap([(0, 0, 0), (2, 0, 0)])
    p = normalization_params(pm)
    assert np.allclose(p.mu, [1, 0, 0])
    assert p.z == pytest.approx(1.0)


def test_normalization_single_point_degenerate():
    pm = grid_pointmap([(1.0, 2.0, 3.0)])
    with pytest.raises(DegeneratePointmap):
        normalization_params(pm)


def test_normalization_coincident_points_degenerate():
    pm = grid_pointmap([(1.0, 2.0, 3.0)] * 4)
    with pytest.raises(DegeneratePointmap):
        normalization_params(pm)


def test_normalization_no_valid_pixels():
    pm = Pointmap(np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(DegeneratePointmap):
        normalization_params(pm)


def test_normalize_by_own_params_centers_and_scales():
    rng = np.random.default_rng(0)
    pm = random_pointmap(rng)
    out = apply_normalization(pm, normalization_params(pm))
    p2 = normalization_params(out)
    assert np.max(np.abs(p2.mu)) < 1e-12
    assert abs(p2.z - 1.0) < 1e-12


def test_identity_params_are_identity():
    rng = np.random.default_rng(1)
    pm = random_pointmap(rng)
    out = apply_normalization(pm, NormalizationParams(np.zeros(3), 1.0))
    assert np.array_equal(out.xyz, pm.xyz)


def test_round_trip_normalize_denormalize():
    rng = np.random.default_rng(2)
    pm = random_pointmap(rng)
    p = normalization_params(pm)
    back = apply_denormalization(apply_normalization(pm, p), p)
    assert np.max(np.abs(back.xyz - pm.xyz)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_normalization_idempotent_on_normalized_input(seed):
    rng = np.random.default_rng(seed)
    pm = random_pointmap(rng)
    normed = apply_normalization(pm, normalization_params(pm))
    p2 = normalization_params(normed)
    assert np.max(np.abs(p2.mu)) < 1e-12
    assert abs(p2.z - 1.0) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_normalization_scale_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    pm = random_pointmap(rng)
    r = random_rotation_uniform(rng)
    rotated = Pointmap(pm.xyz @ r.T, pm.valid)
    p = normalization_params(pm)
    pr = normalization_params(rotated)
    assert abs(p.z - pr.z) < 1e-12
    assert np.max(np.abs(pr.mu - r @ p.mu)) < 1e-12


# ---------------------------------------------------------------------------
# rotations


def test_random_rotation_is_rotation():
    rng = np.random.default_rng(3)
    for _ in range(50):
        assert is_rotation(random_rotation_uniform(rng))


def test_random_rotation_mean_angle():
    # The closed-form density p(theta) = (1 - cos theta)/pi on [0, pi] has
    # mean pi/2 + 2/pi = 126.476 degrees.
    rng = np.random.default_rng(4)
    angles = [np.sqrt(rotation_geodesic_sq(np.eye(3), random_rotation_uniform(rng)))
              for _ in range(10_000)]
    mean_deg = np.degrees(np.mean(angles))
    assert abs(mean_deg - 126.476) < 2.0


def test_random_rotation_deterministic_per_seed():
    a = random_rotation_uniform(np.random.default_rng(99))
    b = random_rotation_uniform(np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_geodesic_zero_on_equal():
    rng = np.random.default_rng(5)
    r = random_rotation_uniform(rng)
    assert rotation_geodesic_sq(r, r) == pytest.approx(0.0, abs=1e-18)


def test_geodesic_quarter_turn():
    rz = so3_exp([0, 0, np.pi / 2])
    assert rotation_geodesic_sq(np.eye(3), rz) == pytest.approx(2.4674011002723395, abs=1e-12)


def test_geodesic_symmetric_and_bounded():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = random_rotation_uniform(rng)
        b = random_rotation_uniform(rng)
        d_ab = rotation_geodesic_sq(a, b)
        assert d_ab == pytest.approx(rotation_geodesic_sq(b, a), abs=1e-12)
        assert d_ab <= np.pi**2 + 1e-12


def test_geodesic_triangle_bound():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = random_rotation_uniform(rng)
        b = random_rotation_uniform(rng)
        c = random_rotation_uniform(rng)
        assert (np.sqrt(rotation_geodesic_sq(a, c))
                <= np.sqrt(rotation_geodesic_sq(a, b))
                + np.sqrt(rotation_geodesic_sq(b, c)) + 1e-9)


def test_quat_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(100):
        r = random_rotation_uniform(rng)
        q = quat_from_rotation(r)
        assert q[0] >= 0
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        assert np.max(np.abs(rotation_from_quat(q) - r)) < 1e-12


# ---------------------------------------------------------------------------
# Umeyama alignment


def make_cloud(rng, n=40):
    return rng.normal(size=(n, 3)) * 2.0


def test_umeyama_identity_on_equal_sets():
    rng = np.random.default_rng(9)
    pts = make_cloud(rng)
    t = umeyama_sim3(pts, pts)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-12
    assert np.max(np.abs(t.translation)) < 1e-12


def test_umeyama_construct_and_recover():
    rng = np.random.default_rng(10)
    for _ in range(20):
        src = make_cloud(rng)
        true = Sim3Transform(float(np.exp(rng.normal() * 0.3)),
                             random_rotation_uniform(rng),
                             rng.normal(size=3) * 4.0)
        dst = true.apply(src)
        got = umeyama_sim3(src, dst)
        assert np.sqrt(rotation_geodesic_sq(got.rotation, true.rotation)) < 1e-9
        assert got.scale == pytest.approx(true.scale, rel=1e-9)
        assert np.max(np.abs(got.translation - true.translation)) < 1e-9


def test_umeyama_weighted_ignores_zero_weight_outliers():
    rng = np.random.default_rng(11)
    src = make_cloud(rng)
    true = Sim3Transform(1.3, random_rotation_uniform(rng), np.array([1.0, -2.0, 0.5]))
    dst = true.apply(src)
    dst[:5] += 100.0  # corrupted but zero-weighted
    w = np.ones(len(src))
    w[:5] = 0.0
    got = umeyama_sim3(src, dst, weights=w)
    assert np.sqrt(rotation_geodesic_sq(got.rotation, true.rotation)) < 1e-9
    assert got.scale == pytest.approx(true.scale, rel=1e-9)


def test_umeyama_collinear_degenerate():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        umeyama_sim3(line, line + 1.0)


def test_umeyama_coincident_degenerate():
    pts = np.ones((5, 3))
    with pytest.raises(DegenerateConfiguration):
        umeyama_sim3(pts, pts)


def test_umeyama_minimality_under_tangent_perturbations():
    rng = np.random.default_rng(12)
    src = make_cloud(rng)
    dst = Sim3Transform(1.2, random_rotation_uniform(rng), rng.normal(size=3)).apply(src)
    dst += rng.normal(size=dst.shape) * 0.05  # make the optimum interior
    w = rng.random(len(src)) + 0.1
    fit = umeyama_sim3(src, dst, weights=w)

    def cost(t):
        return float(np.sum(w * np.sum((t.apply(src) - dst) ** 2, axis=1)))

    base = cost(fit)
    eps = 1e-4
    directions = [e * s for e in np.eye(3) for s in (eps, -eps)]
    for d in directions:  # rotation tangents
        perturbed = Sim3Transform(fit.scale, so3_exp(d) @ fit.rotation, fit.translation)
        assert cost(perturbed) >= base - 1e-15
    for d in directions:  # translation tangents
        perturbed = Sim3Transform(fit.scale, fit.rotation, fit.translation + d)
        assert cost(perturbed) >= base - 1e-15


def test_sim3_compose_inverse():
    rng = np.random.default_rng(13)
    a = Sim3Transform(1.7, random_rotation_uniform(rng), rng.normal(size=3))
    b = Sim3Transform(0.4, random_rotation_uniform(rng), rng.normal(size=3))
    pts = make_cloud(rng, 10)
    assert np.max(np.abs(a.compose(b).apply(pts) - a.apply(b.apply(pts)))) < 1e-12
    assert np.max(np.abs(a.inverse().apply(a.apply(pts)) - pts)) < 1e-12


# ---------------------------------------------------------------------------
# PnP


def synthetic_view(rng, h=16, w=16, focal=24.0, planar=False):
    k = Intrinsics(focal=focal, cx=w / 2, cy=h / 2)
    pose = Se3Pose(random_rotation_uniform(rng), rng.normal(size=3) * 2.0)
    u, v = pixel_grid(h, w)
    if planar:
        z = np.full((h, w), 4.0)
    else:
        z = rng.uniform(2.0, 5.0, size=(h, w))
    cam = np.stack([(u - k.cx) / k.focal * z, (v - k.cy) / k.focal * z, z], axis=-1)
    world = pose.camera_to_world(cam.reshape(-1, 3)).reshape(h, w, 3)
    pm = Pointmap(world, np.ones((h, w), dtype=bool))
    conf = ConfidenceMap(np.ones((h, w)))
    return pm, conf, k, pose


@pytest.mark.parametrize("planar", [False, True])
def test_pnp_recovers_known_pose(planar):
    rng = np.random.default_rng(14)
    for _ in range(10):
        pm, conf, k, pose = synthetic_view(rng, planar=planar)
        res = solve_pnp(pm, conf, k)
        assert res.converged
        assert np.sqrt(rotation_geodesic_sq(res.pose.rotation, pose.rotation)) < 1e-6
        assert np.max(np.abs(res.pose.center - pose.center)) < 1e-6


def test_pnp_identity_for_camera_frame_pointmap():
    rng = np.random.default_rng(15)
    h = w = 12
    k = Intrinsics(18.0, w / 2, h / 2)
    u, v = pixel_grid(h, w)
    z = rng.uniform(1.0, 3.0, size=(h, w))
    cam = np.stack([(u - k.cx) / k.focal * z, (v - k.cy) / k.focal * z, z], axis=-1)
    res = solve_pnp(Pointmap(cam, np.ones((h, w), bool)), ConfidenceMap(np.ones((h, w))), k)
    assert np.sqrt(rotation_geodesic_sq(res.pose.rotation, np.eye(3))) < 1e-8
    assert np.max(np.abs(res.pose.center)) < 1e-8


def test_pnp_too_few_points():
    rng = np.random.default_rng(16)
    pm, conf, k, _ = synthetic_view(rng, h=4, w=4)
    valid = np.zeros((4, 4), dtype=bool)
    valid.flat[:5] = True
    with pytest.raises(InsufficientCorrespondences):
        solve_pnp(Pointmap(pm.xyz, valid), conf, k)


def test_pnp_confidence_threshold_filters_pixels():
    rng = np.random.default_rng(17)
    pm, conf, k, pose = synthetic_view(rng)
    c = np.ones((pm.height, pm.width))
    c[: pm.height // 2] = 0.01
    xyz = pm.xyz.copy()
    xyz[: pm.height // 2] += 50.0  # corrupt the low-confidence half
    res = solve_pnp(Pointmap(xyz, pm.valid), ConfidenceMap(c), k, conf_threshold=0.5)
    assert np.sqrt(rotation_geodesic_sq(res.pose.rotation, pose.rotation)) < 1e-6


def test_pnp_collinear_points_rejected():
    h, w = 2, 8
    k = Intrinsics(10.0, w / 2, h / 2)
    xyz = np.zeros((h, w, 3))
    xyz[..., 2] = np.linspace(1, 2, h * w).reshape(h, w)
    with pytest.raises(InsufficientCorrespondences):
        solve_pnp(Pointmap(xyz, np.ones((h, w), bool)), ConfidenceMap(np.ones((h, w))), k)


# ---------------------------------------------------------------------------
# focal estimation


def camera_frame_render(rng, h=64, w=64, focal=256.0):
    u, v = pixel_grid(h, w)
    z = rng.uniform(3.0, 9.0, size=(h, w))
    xyz = np.stack([(u - w / 2) / focal * z, (v - h / 2) / focal * z, z], axis=-1)
    return Pointmap(xyz, np.ones((h, w), dtype=bool))


def test_estimate_focal_exact_render():
    rng = np.random.default_rng(18)
    pm = camera_frame_render(rng, focal=256.0)
    k = estimate_focal(pm, cx=32.0, cy=32.0)
    assert 255.9 <= k.focal <= 256.1


def test_estimate_focal_scale_invariant():
    rng = np.random.default_rng(19)
    pm = camera_frame_render(rng, focal=256.0)
    doubled = Pointmap(pm.xyz * 2.0, pm.valid)
    assert estimate_focal(doubled, 32.0, 32.0).focal == pytest.approx(
        estimate_focal(pm, 32.0, 32.0).focal, rel=1e-12)


def test_estimate_focal_behind_camera():
    rng = np.random.default_rng(20)
    pm = camera_frame_render(rng)
    flipped = Pointmap(pm.xyz * np.array([1.0, 1.0, -1.0]), pm.valid)
    with pytest.raises(DegeneratePointmap):
        estimate_focal(flipped, 32.0, 32.0)


def test_project_points_inverts_unprojection():
    rng = np.random.default_rng(21)
    k = Intrinsics(32.0, 16.0, 16.0)
    u, v = pixel_grid(4, 4)
    z = rng.uniform(1.0, 2.0, size=(4, 4))
    cam = np.stack([(u - k.cx) / k.focal * z, (v - k.cy) / k.focal * z, z], axis=-1)
    uv = project_points(cam, k)
    assert np.max(np.abs(uv[..., 0] - u)) < 1e-12
    assert np.max(np.abs(uv[..., 1] - v)) < 1e-12
