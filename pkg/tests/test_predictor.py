import io

import numpy as np
import pytest

from treereg import wire
from treereg.errors import ProtocolError, UnknownView
from treereg.geometry import (
    Pointmap,
    Sim3Transform,
    apply_normalization,
    estimate_focal,
    normalization_params,
    random_rotation_uniform,
    rotation_geodesic_sq,
    so3_exp,
    umeyama_sim3,
)
from treereg.predictor import (
    OracleNoiseConfig,
    OraclePredictor,
    PredictorRequest,
    ToyNetPredictor,
    oracle_confidence,
    oracle_frame_recovery,
)
from treereg.scene_sim import make_scene
from treereg.stereo_model import ToyNetConfig, make_toy_weights


@pytest.fixture(scope="module")
def orbit():
    _, traj, gt = make_scene("orbit", 8, seed=1)
    return gt


def normalized_request(gt, ref, tgt, conf_value=0.5):
    pm = gt.camera_pointmaps[ref] if ref == 0 else gt.world_pointmaps[ref]
    norm = normalization_params(pm)
    return PredictorRequest(
        ref_view_id=ref, tgt_view_id=tgt,
        ref_image=gt.images[ref],
        ref_pointmap=apply_normalization(pm, norm),
        ref_conf_squashed=np.full(pm.xyz.shape[:2], conf_value),
        tgt_image=gt.images[tgt],
    ), norm


# ---------------------------------------------------------------------------
# frame recovery


def test_frame_recovery_identity_on_exact_input(orbit):
    pm = orbit.world_pointmaps[2]
    t = oracle_frame_recovery(pm, pm)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-9
    assert np.max(np.abs(t.translation)) < 1e-9


def test_frame_recovery_of_normalization(orbit):
    pm = orbit.world_pointmaps[3]
    norm = normalization_params(pm)
    t = oracle_frame_recovery(apply_normalization(pm, norm), pm)
    assert t.scale == pytest.approx(1.0 / norm.z, rel=1e-9)
    assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-9
    assert np.max(np.abs(t.translation + norm.mu / norm.z)) < 1e-9


def test_frame_recovery_of_known_corruption(orbit):
    rng = np.random.default_rng(0)
    pm = orbit.world_pointmaps[1]
    t_true = Sim3Transform(1.4, random_rotation_uniform(rng), rng.normal(size=3))
    corrupted = Pointmap(t_true.apply(pm.xyz), pm.valid)
    t = oracle_frame_recovery(corrupted, pm)
    assert np.sqrt(rotation_geodesic_sq(t.rotation, t_true.rotation)) < 1e-9
    assert t.scale == pytest.approx(t_true.scale, rel=1e-9)
    assert np.max(np.abs(t.translation - t_true.translation)) < 1e-9


# ---------------------------------------------------------------------------
# exact oracle predictions


def test_oracle_exact_prediction_round_trips_to_world(orbit):
    oracle = OraclePredictor(orbit)
    for ref, tgt in [(0, 1), (3, 6), (5, 2)]:
        pm_ref = orbit.world_pointmaps[ref]
        norm = normalization_params(pm_ref)
        req = PredictorRequest(ref, tgt, orbit.images[ref],
                               apply_normalization(pm_ref, norm),
                               np.full(pm_ref.xyz.shape[:2], 0.5),
                               orbit.images[tgt])
        resp = oracle.predict(req)
        back = resp.tgt_pointmap.xyz * norm.z + norm.mu
        gt_tgt = orbit.world_pointmaps[tgt]
        assert np.array_equal(resp.tgt_pointmap.valid, gt_tgt.valid)
        assert np.max(np.abs(back[gt_tgt.valid] - gt_tgt.xyz[gt_tgt.valid])) < 1e-9


def test_oracle_drift_propagation(orbit):
    # a corrupted reference frame must shift the output by exactly the
    # same transform, nothing more
    rng = np.random.default_rng(1)
    oracle = OraclePredictor(orbit)
    pm_ref = orbit.world_pointmaps[0]
    norm = normalization_params(pm_ref)
    base_pm = apply_normalization(pm_ref, norm)
    conf = np.full(pm_ref.xyz.shape[:2], 0.5)
    clean = oracle.predict(PredictorRequest(0, 4, orbit.images[0], base_pm,
                                            conf, orbit.images[4]))
    t = Sim3Transform(0.7, random_rotation_uniform(rng), rng.normal(size=3) * 2)
    twisted = Pointmap(t.apply(base_pm.xyz), base_pm.valid)
    drifted = oracle.predict(PredictorRequest(0, 4, orbit.images[0], twisted,
                                              conf, orbit.images[4]))
    expected = t.apply(clean.tgt_pointmap.xyz)
    mask = clean.tgt_pointmap.valid
    assert np.max(np.abs(drifted.tgt_pointmap.xyz[mask] - expected[mask])) < 1e-9


def test_oracle_unknown_view(orbit):
    oracle = OraclePredictor(orbit)
    with pytest.raises(UnknownView):
        oracle.init_pair(0, 99)
    req, _ = normalized_request(orbit, 0, 1)
    bad = PredictorRequest(42, 1, req.ref_image, req.ref_pointmap,
                           req.ref_conf_squashed, req.tgt_image)
    with pytest.raises(UnknownView):
        oracle.predict(bad)


def test_oracle_deterministic_under_seed(orbit):
    noise = OracleNoiseConfig(sigma_rot=0.01, sigma_point=0.01, seed=7)
    req, _ = normalized_request(orbit, 2, 3)
    a = OraclePredictor(orbit, noise).predict(req)
    b = OraclePredictor(orbit, noise).predict(req)
    assert np.array_equal(a.tgt_pointmap.xyz, b.tgt_pointmap.xyz)
    assert np.array_equal(a.tgt_conf.c, b.tgt_conf.c)


def test_oracle_rotation_noise_magnitude(orbit):
    # injected rotation is sigma * |N(0, I3)|; the mean recovered angle over
    # many draws should approach sigma * 2 * sqrt(2/pi) = 1.5958 sigma
    sigma = 0.01
    req, _ = normalized_request(orbit, 0, 5)
    clean = OraclePredictor(orbit).predict(req)
    mask = clean.tgt_pointmap.valid
    angles = []
    for seed in range(100):
        noisy = OraclePredictor(orbit, OracleNoiseConfig(sigma_rot=sigma, seed=seed)).predict(req)
        t = umeyama_sim3(clean.tgt_pointmap.xyz[mask], noisy.tgt_pointmap.xyz[mask])
        angles.append(np.sqrt(rotation_geodesic_sq(np.eye(3), t.rotation)))
    assert np.mean(angles) == pytest.approx(sigma * 2 * np.sqrt(2 / np.pi), rel=0.2)


# ---------------------------------------------------------------------------
# oracle confidence model


def test_confidence_fixed_point_on_fresh_chain():
    cfg = OracleNoiseConfig()
    assert oracle_confidence(np.full((4, 4), 0.5), 0.0, cfg) == pytest.approx(1.0, abs=1e-5)


def test_confidence_ignores_noise_when_eta_zero():
    cfg = OracleNoiseConfig(conf_decay_eta=0.0)
    a = oracle_confidence(np.full((2, 2), 0.5), 0.0, cfg)
    b = oracle_confidence(np.full((2, 2), 0.5), 10.0, cfg)
    assert a == b


def test_confidence_decays_along_chain():
    cfg = OracleNoiseConfig(sigma_rot=0.01, conf_decay_eta=1.0)
    mag = cfg.total_magnitude()
    c = 1.0
    values = [c]
    for _ in range(10):
        squashed = np.full((2, 2), c / (1.0 + c))
        c = oracle_confidence(squashed, mag, cfg)
        values.append(c)
    assert all(b < a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# bootstrap pair


def test_init_pair_exact(orbit):
    out = OraclePredictor(orbit).init_pair(0, 1)
    gt_cam = orbit.camera_pointmaps[0]
    assert np.array_equal(out.pointmap_a.xyz, gt_cam.xyz)
    assert np.array_equal(out.pointmap_a.valid, gt_cam.valid)
    # view b expressed in a's camera frame
    expected_b = orbit.poses[0].world_to_camera(orbit.world_pointmaps[1].xyz)
    assert np.max(np.abs(out.pointmap_b.xyz - expected_b)) < 1e-12


def test_init_pair_supports_focal_recovery(orbit):
    out = OraclePredictor(orbit).init_pair(0, 1)
    k = estimate_focal(out.pointmap_a, orbit.intrinsics.cx, orbit.intrinsics.cy)
    assert abs(k.focal - orbit.intrinsics.focal) / orbit.intrinsics.focal < 1e-3


# ---------------------------------------------------------------------------
# toy-net predictor


def test_toynet_predictor_contracts(orbit):
    cfg = ToyNetConfig()
    predictor = ToyNetPredictor(cfg, make_toy_weights(cfg, seed=3))
    req, _ = normalized_request(orbit, 0, 1)
    resp = predictor.predict(req)
    assert resp.tgt_pointmap.xyz.shape == (32, 32, 3)
    assert np.all(resp.tgt_conf.c > 0)
    pair = predictor.init_pair(0, 1, orbit.images[0], orbit.images[1])
    assert pair.pointmap_a.xyz.shape == (32, 32, 3)
    assert np.all(pair.conf_b.c > 0)


# ---------------------------------------------------------------------------
# wire codec


def test_wire_round_trip():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    pm = rng.normal(size=(8, 8, 3)).astype(np.float32)
    payload = wire.encode_payload({"msg": "predict", "ref_view_id": 1},
                                  [("img", img), ("pm", pm)])
    header, tensors = wire.decode_payload(payload)
    assert header["msg"] == "predict"
    assert np.array_equal(tensors["img"], img)
    assert np.array_equal(tensors["pm"], pm)


def test_wire_frame_round_trip_through_stream():
    payload = wire.encode_payload({"msg": "hello", "version": 1}, [])
    stream = io.BytesIO(wire.frame_bytes(payload) * 2)
    assert wire.read_frame(stream) == payload
    assert wire.read_frame(stream) == payload
    assert wire.read_frame(stream) is None


@pytest.mark.parametrize("payload", [
    b"not json at all",
    b"{\"msg\": 5}",
    b"{\"msg\": \"x\", \"tensors\": [{\"name\": \"t\", \"dtype\": \"f64\", \"shape\": [1]}]}",
    b"{\"msg\": \"x\", \"tensors\": [{\"name\": \"t\", \"dtype\": \"f32\", \"shape\": [100]}]}",
    b"{\"msg\": \"x\"}trailing",
    b"{\"msg\": \"x\", \"tensors\": [{\"name\": \"t\", \"dtype\": \"f32\", \"shape\": [-1]}]}",
    b"{unterminated",
])
def test_wire_rejects_malformed_payloads(payload):
    with pytest.raises(ProtocolError):
        wire.decode_payload(payload)


def test_wire_rejects_short_stream():
    payload = wire.encode_payload({"msg": "hello"}, [])
    framed = wire.frame_bytes(payload)
    with pytest.raises(ProtocolError):
        wire.read_frame(io.BytesIO(framed[:-3]))
    with pytest.raises(ProtocolError):
        wire.read_frame(io.BytesIO(framed[:2]))


def test_wire_rejects_oversized_declaration():
    bad = (wire.MAX_PAYLOAD + 1).to_bytes(4, "little") + b"x"
    with pytest.raises(ProtocolError):
        wire.read_frame(io.BytesIO(bad))
