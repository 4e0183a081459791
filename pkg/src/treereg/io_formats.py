"""Bit-exact serialization: PMAP pointmap container, pose JSON, similarity
matrices, PLY export, run manifests.

PMAP layout (all little-endian): magic "PMAP", u32 version (1), u32 height,
u32 width, u32 channels, u32 dtype (0 = f32), then height*width*channels f32
values in row-major order, then an optional validity bitmap of one bit per
pixel, row-major, most significant bit first, padded to a whole byte. A file
with no trailing bitmap means every pixel is valid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AsymmetryTooLarge,
    BadMagic,
    EmptyCloud,
    InvalidSimilarity,
    NotSquare,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)
from .geometry import (
    ConfidenceMap,
    Intrinsics,
    Pointmap,
    Se3Pose,
    quat_from_rotation,
    rotation_from_quat,
)
from .view_graph import SimilarityMatrix

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
FRAME_CONVENTION = "camera-to-world rotation, camera center"


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# PMAP container


def write_array_pmap(path, arr: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Write an (H, W, C) float array, with a validity bitmap unless all valid."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    header = PMAP_MAGIC + struct.pack("<IIIII", PMAP_VERSION, h, w, c, 0)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body = header + payload
    if valid is not None and not valid.all():
        bits = np.packbits(np.asarray(valid, dtype=bool).reshape(-1))
        body += bits.tobytes()
    Path(path).write_bytes(body)


def read_array_pmap(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an (H, W, C) float32 array and its (H, W) validity mask."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != PMAP_MAGIC:
        raise BadMagic(f"{path} does not start with {PMAP_MAGIC!r}")
    if len(data) < 24:
        raise TruncatedFile(f"{path}: header needs 24 bytes, file has {len(data)}")
    version, h, w, c, dtype = struct.unpack("<IIIII", data[4:24])
    if version != PMAP_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    if dtype != 0:
        raise UnsupportedVersion(f"{path}: dtype code {dtype}")
    n_payload = h * w * c * 4
    if len(data) < 24 + n_payload:
        raise TruncatedFile(f"{path}: payload short by {24 + n_payload - len(data)} bytes")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=24).reshape(h, w, c)
    rest = data[24 + n_payload:]
    if len(rest) == 0:
        valid = np.ones((h, w), dtype=bool)
    elif len(rest) == (h * w + 7) // 8:
        valid = np.unpackbits(np.frombuffer(rest, dtype=np.uint8),
                              count=h * w).astype(bool).reshape(h, w)
    else:
        raise TruncatedFile(f"{path}: {len(rest)} trailing bytes match no bitmap")
    return arr, valid


def write_pmap(path, pm: Pointmap, conf: ConfidenceMap | None = None) -> None:
    """Write a pointmap, with confidence as a fourth channel when given."""
    arr = pm.xyz
    if conf is not None:
        if conf.c.shape != pm.xyz.shape[:2]:
            raise ShapeMismatch("confidence shape does not match pointmap")
        arr = np.concatenate([arr, conf.c[..., None]], axis=-1)
    write_array_pmap(path, arr, pm.valid)


def read_pmap(path) -> tuple[Pointmap, ConfidenceMap | None]:
    arr, valid = read_array_pmap(path)
    if arr.shape[2] == 3:
        return Pointmap(arr, valid), None
    if arr.shape[2] == 4:
        return Pointmap(arr[..., :3], valid), ConfidenceMap(arr[..., 3])
    raise ShapeMismatch(f"{path}: {arr.shape[2]} channels, expected 3 or 4")


# ---------------------------------------------------------------------------
# pose JSON


@dataclass(frozen=True)
class PoseViewRecord:
    view_id: int
    quat_wxyz: tuple
    center: tuple
    valid: bool
    depth: int


@dataclass(frozen=True)
class PoseSetRecord:
    views: tuple
    intrinsics: Intrinsics | None = None
    frame_convention: str = FRAME_CONVENTION

    def pose_dict(self) -> dict[int, Se3Pose]:
        return {v.view_id: Se3Pose(rotation_from_quat(np.array(v.quat_wxyz)),
                                   np.array(v.center))
                for v in self.views}

    def valid_dict(self) -> dict[int, bool]:
        return {v.view_id: v.valid for v in self.views}

    def depth_dict(self) -> dict[int, int]:
        return {v.view_id: v.depth for v in self.views}


def pose_record_from_result(result) -> PoseSetRecord:
    views = []
    for v in result.registered_views():
        pose = result.poses[v]
        views.append(PoseViewRecord(
            view_id=v,
            quat_wxyz=tuple(quat_from_rotation(pose.rotation).tolist()),
            center=tuple(pose.center.tolist()),
            valid=bool(result.pose_valid.get(v, False)),
            depth=int(result.depths.get(v, 0)),
        ))
    return PoseSetRecord(tuple(views), intrinsics=result.intrinsics)


def pose_record_from_gt(gt) -> PoseSetRecord:
    views = []
    for v, pose in enumerate(gt.poses):
        views.append(PoseViewRecord(
            view_id=v,
            quat_wxyz=tuple(quat_from_rotation(pose.rotation).tolist()),
            center=tuple(pose.center.tolist()),
            valid=True, depth=0,
        ))
    return PoseSetRecord(tuple(views), intrinsics=gt.intrinsics)


def write_poses(path, record: PoseSetRecord) -> None:
    doc = {
        "frame_convention": record.frame_convention,
        "views": [
            {
                "id": v.view_id,
                "quat_wxyz": list(v.quat_wxyz),
                "center": list(v.center),
                "valid": v.valid,
                "depth": v.depth,
            }
            for v in record.views
        ],
    }
    if record.intrinsics is not None:
        doc["intrinsics"] = {"focal": record.intrinsics.focal,
                             "cx": record.intrinsics.cx,
                             "cy": record.intrinsics.cy}
    Path(path).write_text(_canonical_json(doc))


def read_poses(path) -> PoseSetRecord:
    doc = json.loads(Path(path).read_text())
    views = []
    for v in doc["views"]:
        quat = np.asarray(v["quat_wxyz"], dtype=float)
        if abs(np.linalg.norm(quat) - 1.0) > 1e-9:
            raise ShapeMismatch(
                f"{path}: view {v['id']} quaternion norm {np.linalg.norm(quat)}")
        views.append(PoseViewRecord(int(v["id"]), tuple(quat.tolist()),
                                    tuple(float(x) for x in v["center"]),
                                    bool(v["valid"]), int(v["depth"])))
    k = None
    if "intrinsics" in doc:
        ki = doc["intrinsics"]
        k = Intrinsics(float(ki["focal"]), float(ki["cx"]), float(ki["cy"]))
    return PoseSetRecord(tuple(views), intrinsics=k,
                         frame_convention=doc.get("frame_convention", FRAME_CONVENTION))


# ---------------------------------------------------------------------------
# similarity matrices


def write_similarity_csv(path, sim: SimilarityMatrix) -> None:
    lines = [",".join(repr(float(x)) for x in row) for row in sim.s]
    Path(path).write_text("\n".join(lines) + "\n")


def read_similarity(path) -> SimilarityMatrix:
    """Load a similarity matrix from CSV or a single-channel PMAP file.

    Asymmetries up to 1e-6 are averaged away, anything larger is rejected;
    the same tolerance applies to the diagonal and the [0, 1] range.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == PMAP_MAGIC:
        arr, _ = read_array_pmap(path)
        if arr.shape[2] != 1:
            raise NotSquare(f"{path}: matrix pmap must have one channel")
        s = arr[..., 0].astype(float)
    else:
        rows = [line.split(",") for line in raw.decode("utf-8").strip().splitlines()]
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise NotSquare(f"{path}: ragged rows")
        s = np.array([[float(x) for x in row] for row in rows])
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NotSquare(f"{path}: shape {s.shape}")
    gap = float(np.max(np.abs(s - s.T))) if s.size else 0.0
    if gap > 1e-6:
        raise AsymmetryTooLarge(f"{path}: asymmetry {gap}")
    s = 0.5 * (s + s.T)
    if np.max(np.abs(np.diag(s) - 1.0)) > 1e-6:
        raise InvalidSimilarity(f"{path}: diagonal departs from 1")
    if np.min(s) < -1e-6 or np.max(s) > 1 + 1e-6:
        raise InvalidSimilarity(f"{path}: entries outside [0, 1]")
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(np.clip(s, 0.0, 1.0))


# ---------------------------------------------------------------------------
# PLY export


def write_ply(points: np.ndarray, colors: np.ndarray, confidences: np.ndarray,
              path, ascii_mode: bool = False) -> None:
    """Point cloud with colors and per-point confidence, binary by default."""
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyCloud("refusing to write an empty PLY")
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    confidences = np.asarray(confidences, dtype="<f4").reshape(-1)
    if not (len(points) == len(colors) == len(confidences)):
        raise ShapeMismatch("points, colors, confidences lengths differ")

    fmt = "ascii" if ascii_mode else "binary_little_endian"
    header = "\n".join([
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float confidence",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if ascii_mode:
            for p, c, conf in zip(points, colors, confidences):
                f.write(f"{p[0]} {p[1]} {p[2]} {c[0]} {c[1]} {c[2]} {conf}\n"
                        .encode("ascii"))
        else:
            for p, c, conf in zip(points, colors, confidences):
                f.write(struct.pack("<fffBBBf", p[0], p[1], p[2],
                                    c[0], c[1], c[2], conf))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(_canonical_json(manifest))


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
