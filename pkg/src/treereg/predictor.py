"""Pluggable stereo predictors behind one contract.

A predictor answers two calls: `init_pair` bootstraps both views of a pair in
the first view's camera frame, and `predict` regresses the target view's
pointmap in the exact frame of the supplied (normalized) reference pointmap.

Three implementations: a ground-truth-backed oracle with a tunable drift
model, the toy network, and a client for an external process speaking the
stdio wire protocol.
"""

from __future__ import annotations

import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wire
from .errors import ProtocolError, ShapeMismatch, UnknownView
from .geometry import (
    ConfidenceMap,
    Pointmap,
    Sim3Transform,
    normalization_params,
    so3_exp,
    umeyama_sim3,
)
from .scene_sim import GroundTruth
from .stereo_model import ToyNetConfig, toy_forward

CONFIDENCE_FLOOR = 1e-6


@dataclass(frozen=True)
class PredictorRequest:
    """One registration step: known reference view, unknown target view."""

    ref_view_id: int
    tgt_view_id: int
    ref_image: np.ndarray
    ref_pointmap: Pointmap  # normalized by the caller before every call
    ref_conf_squashed: np.ndarray  # in (0, 1)
    tgt_image: np.ndarray

    def validate(self) -> None:
        pts = self.ref_pointmap.valid_points()
        if pts.shape[0] == 0:
            raise ShapeMismatch("reference pointmap has no valid pixels")
        mu = pts.mean(axis=0)
        radius = np.linalg.norm(pts - mu, axis=1).mean()
        if np.max(np.abs(mu)) > 1e-6 or abs(radius - 1.0) > 1e-6:
            raise ShapeMismatch(
                f"reference pointmap not normalized (centroid {mu}, radius {radius})")
        if np.any(self.ref_conf_squashed <= 0) or np.any(self.ref_conf_squashed >= 1):
            raise ShapeMismatch("squashed confidence must lie strictly in (0, 1)")


@dataclass(frozen=True)
class PredictorResponse:
    tgt_pointmap: Pointmap  # same frame as the request's reference pointmap
    tgt_conf: ConfidenceMap  # raw, > 0


@dataclass(frozen=True)
class InitPairResult:
    """Bootstrap pair, both pointmaps in view a's camera frame."""

    pointmap_a: Pointmap
    pointmap_b: Pointmap
    conf_a: ConfidenceMap
    conf_b: ConfidenceMap


@dataclass(frozen=True)
class OracleNoiseConfig:
    """Drift model of the oracle; all sigmas act in the normalized frame."""

    sigma_rot: float = 0.0  # radians
    sigma_trans: float = 0.0  # fraction of the normalized scale
    sigma_scale: float = 0.0  # log-scale standard deviation
    sigma_point: float = 0.0  # per-point standard deviation
    conf_decay_eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_rot", "sigma_trans", "sigma_scale", "sigma_point",
                     "conf_decay_eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def total_magnitude(self) -> float:
        return self.sigma_rot + self.sigma_trans + self.sigma_scale + self.sigma_point


def oracle_frame_recovery(ref_supplied: Pointmap, ref_gt_world: Pointmap) -> Sim3Transform:
    """Sim(3) mapping ground-truth world coordinates into the supplied frame.

    Umeyama over the pixels valid in both maps; exact whenever the supplied
    map is a similarity image of the ground truth, so upstream drift in the
    reference propagates through unchanged.
    """
    shared = ref_supplied.valid & ref_gt_world.valid
    return umeyama_sim3(ref_gt_world.xyz[shared], ref_supplied.xyz[shared])


def oracle_confidence(conf_in_squashed: np.ndarray, noise_magnitude: float,
                      cfg: OracleNoiseConfig) -> float:
    """Uniform raw confidence for one oracle answer.

    Fresh chains (squashed input 0.5, zero noise) sit at the fixed point 1;
    decayed inputs and larger noise both lower the output, reproducing the
    confidence decay seen along deep chains.
    """
    ratio = float(np.mean(conf_in_squashed)) / 0.5
    return ratio * float(np.exp(-cfg.conf_decay_eta * noise_magnitude)) + CONFIDENCE_FLOOR


def _rigid_noise(xyz: np.ndarray, centroid: np.ndarray, scale_ref: float,
                 cfg: OracleNoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotation about the centroid, translation, log-scale, per-point jitter."""
    out = xyz
    if cfg.sigma_rot > 0:
        r = so3_exp(cfg.sigma_rot * rng.standard_normal(3))
        out = (out - centroid) @ r.T + centroid
    if cfg.sigma_scale > 0:
        s = float(np.exp(cfg.sigma_scale * rng.standard_normal()))
        out = (out - centroid) * s + centroid
    if cfg.sigma_trans > 0:
        out = out + cfg.sigma_trans * scale_ref * rng.standard_normal(3)
    if cfg.sigma_point > 0:
        out = out + cfg.sigma_point * scale_ref * rng.standard_normal(out.shape)
    return out


class OraclePredictor:
    """Ground-truth-backed predictor with an explicit drift model.

    Noise draws are keyed by (seed, call kind, view ids), so results do not
    depend on call order and concurrent use is safe.
    """

    def __init__(self, gt: GroundTruth, noise: OracleNoiseConfig | None = None):
        self.gt = gt
        self.noise = noise or OracleNoiseConfig()

    def _check_view(self, v: int) -> None:
        if not 0 <= v < self.gt.num_views:
            raise UnknownView(f"view {v} outside 0..{self.gt.num_views - 1}")

    def init_pair(self, view_a: int, view_b: int,
                  image_a=None, image_b=None) -> InitPairResult:
        self._check_view(view_a)
        self._check_view(view_b)
        rng = np.random.default_rng([self.noise.seed, 71, view_a, view_b])
        pm_a = self.gt.camera_pointmaps[view_a]
        world_b = self.gt.world_pointmaps[view_b]
        xyz_b = self.gt.poses[view_a].world_to_camera(
            world_b.xyz.reshape(-1, 3)).reshape(world_b.xyz.shape)

        # both maps of a pair are predictions, so each draws its own noise;
        # that is what makes pairwise inference pay an extra alignment cost
        scale_ref = normalization_params(pm_a).z
        centroid_a = pm_a.xyz[pm_a.valid].mean(axis=0) if pm_a.valid.any() else np.zeros(3)
        xyz_a = _rigid_noise(pm_a.xyz, centroid_a, scale_ref, self.noise, rng)
        centroid_b = xyz_b[world_b.valid].mean(axis=0) if world_b.valid.any() else np.zeros(3)
        xyz_b = _rigid_noise(xyz_b, centroid_b, scale_ref, self.noise, rng)

        c = oracle_confidence(np.full((1,), 0.5), self.noise.total_magnitude(), self.noise)
        shape = (self.gt.image_size, self.gt.image_size)
        return InitPairResult(
            pointmap_a=Pointmap(xyz_a, pm_a.valid),
            pointmap_b=Pointmap(xyz_b, world_b.valid),
            conf_a=ConfidenceMap(np.full(shape, c)),
            conf_b=ConfidenceMap(np.full(shape, c)),
        )

    def predict(self, req: PredictorRequest) -> PredictorResponse:
        # the normalization invariant on req is the caller's contract; the
        # frame recovery below works in whatever frame was actually supplied,
        # which is exactly how upstream drift propagates
        self._check_view(req.ref_view_id)
        self._check_view(req.tgt_view_id)
        rng = np.random.default_rng([self.noise.seed, 37, req.ref_view_id, req.tgt_view_id])

        frame = oracle_frame_recovery(req.ref_pointmap, self.gt.world_pointmaps[req.ref_view_id])
        tgt_world = self.gt.world_pointmaps[req.tgt_view_id]
        xyz = frame.apply(tgt_world.xyz)
        centroid = xyz[tgt_world.valid].mean(axis=0) if tgt_world.valid.any() else np.zeros(3)
        # the request frame is normalized, so sigmas act at unit scale
        xyz = _rigid_noise(xyz, centroid, 1.0, self.noise, rng)

        c = oracle_confidence(req.ref_conf_squashed, self.noise.total_magnitude(), self.noise)
        return PredictorResponse(
            tgt_pointmap=Pointmap(xyz, tgt_world.valid),
            tgt_conf=ConfidenceMap(np.full(req.ref_conf_squashed.shape, c)),
        )


class ToyNetPredictor:
    """Forward passes of the toy network; useful for contract checks only."""

    def __init__(self, cfg: ToyNetConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        self.weights = weights

    def init_pair(self, view_a: int, view_b: int, image_a=None, image_b=None) -> InitPairResult:
        if image_a is None or image_b is None:
            raise UnknownView("toy net bootstrap needs both images")
        blank = np.zeros(image_a.shape[:2] + (3,))
        half = np.full(image_a.shape[:2], 0.5)
        pm_a, conf_a = toy_forward(self.cfg, self.weights, image_a, blank, half, image_a)
        pm_b, conf_b = toy_forward(self.cfg, self.weights, image_a, blank, half, image_b)
        return InitPairResult(pm_a, pm_b, conf_a, conf_b)

    def predict(self, req: PredictorRequest) -> PredictorResponse:
        pm, conf = toy_forward(self.cfg, self.weights, req.ref_image,
                               req.ref_pointmap.xyz, req.ref_conf_squashed,
                               req.tgt_image)
        return PredictorResponse(pm, conf)


class RecordingPredictor:
    """Wraps a predictor and records every answer as a wire payload file.

    The files are exactly what a stub host replays: predict_<ref>_<tgt>.bin
    and init_pair_<a>_<b>.bin, each holding one response payload.
    """

    def __init__(self, inner, answers_dir):
        self.inner = inner
        self.dir = Path(answers_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def init_pair(self, view_a, view_b, image_a=None, image_b=None) -> InitPairResult:
        out = self.inner.init_pair(view_a, view_b, image_a, image_b)
        payload = wire.encode_payload({"msg": "response"}, [
            ("pointmap_a", out.pointmap_a.xyz),
            ("pointmap_b", out.pointmap_b.xyz),
            ("conf_a", out.conf_a.c),
            ("conf_b", out.conf_b.c),
        ])
        (self.dir / f"init_pair_{view_a}_{view_b}.bin").write_bytes(payload)
        return out

    def predict(self, req: PredictorRequest) -> PredictorResponse:
        out = self.inner.predict(req)
        payload = wire.encode_payload({"msg": "response"}, [
            ("tgt_pointmap", out.tgt_pointmap.xyz),
            ("tgt_conf", out.tgt_conf.c),
        ])
        (self.dir / f"predict_{req.ref_view_id}_{req.tgt_view_id}.bin").write_bytes(payload)
        return out


class ExternalPredictor:
    """Client for a child process speaking the stdio wire protocol.

    One request is in flight per connection; a lock keeps concurrent callers
    from interleaving frames.
    """

    def __init__(self, command):
        if isinstance(command, str):
            command = shlex.split(command)
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)
        self._lock = threading.Lock()
        header, _ = self._round_trip({"msg": "hello", "version": wire.PROTOCOL_VERSION}, [])
        if header.get("msg") != "hello" or header.get("version") != wire.PROTOCOL_VERSION:
            self.close()
            raise ProtocolError(f"bad handshake {header!r}")

    def _round_trip(self, header, tensors):
        with self._lock:
            wire.write_frame(self.proc.stdin, wire.encode_payload(header, tensors))
            payload = wire.read_frame(self.proc.stdout)
        if payload is None:
            raise ProtocolError("server closed the stream")
        reply, blobs = wire.decode_payload(payload)
        if reply.get("msg") == "error":
            raise ProtocolError(f"server error: {reply.get('detail')}")
        return reply, blobs

    def _tensor(self, blobs, name, shape):
        if name not in blobs or tuple(blobs[name].shape) != tuple(shape):
            raise ProtocolError(f"response missing tensor {name} of shape {shape}")
        return np.asarray(blobs[name], dtype=float)

    def init_pair(self, view_a: int, view_b: int, image_a=None, image_b=None) -> InitPairResult:
        h, w = image_a.shape[:2]
        _, blobs = self._round_trip(
            {"msg": "init_pair", "view_a": int(view_a), "view_b": int(view_b)},
            [("image_a", image_a), ("image_b", image_b)])
        full = np.ones((h, w), dtype=bool)
        try:
            return InitPairResult(
                Pointmap(self._tensor(blobs, "pointmap_a", (h, w, 3)), full),
                Pointmap(self._tensor(blobs, "pointmap_b", (h, w, 3)), full),
                ConfidenceMap(self._tensor(blobs, "conf_a", (h, w))),
                ConfidenceMap(self._tensor(blobs, "conf_b", (h, w))),
            )
        except ShapeMismatch as e:
            raise ProtocolError(f"invalid init_pair response: {e}") from e

    def predict(self, req: PredictorRequest) -> PredictorResponse:
        h, w = req.tgt_image.shape[:2]
        _, blobs = self._round_trip(
            {"msg": "predict", "ref_view_id": int(req.ref_view_id),
             "tgt_view_id": int(req.tgt_view_id)},
            [("ref_image", req.ref_image),
             ("ref_pointmap", req.ref_pointmap.xyz),
             ("ref_conf", req.ref_conf_squashed),
             ("tgt_image", req.tgt_image)])
        try:
            return PredictorResponse(
                Pointmap(self._tensor(blobs, "tgt_pointmap", (h, w, 3)),
                         np.ones((h, w), dtype=bool)),
                ConfidenceMap(self._tensor(blobs, "tgt_conf", (h, w))),
            )
        except ShapeMismatch as e:
            raise ProtocolError(f"invalid predict response: {e}") from e

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
