"""Length-prefixed stdio framing for external stereo predictors.

Frame layout: a 4-byte little-endian unsigned payload length, then the
payload. The payload is a UTF-8 JSON header object followed immediately by
raw little-endian binary blobs in the order the header's `tensors` list
declares them. Blobs are row-major with no padding. Supported dtypes are
"f32" (4 bytes) and "u8" (1 byte); images are u8 HxWx3, pointmaps f32 HxWx3,
confidences f32 HxW.

Handshake: the client sends {"msg": "hello", "version": 1} and the server
answers with the same. Failures travel as {"msg": "error", "detail": ...}.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ProtocolError

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

_DTYPES = {"f32": ("<f4", 4), "u8": ("u1", 1)}


def tensor_spec(name: str, arr: np.ndarray) -> tuple[dict, bytes]:
    """Header entry plus wire bytes for one tensor."""
    if arr.dtype == np.uint8:
        dtype = "u8"
        data = np.ascontiguousarray(arr)
    else:
        dtype = "f32"
        data = np.ascontiguousarray(arr, dtype="<f4")
    return ({"name": name, "dtype": dtype, "shape": list(arr.shape)},
            data.tobytes())


def encode_payload(header: dict, tensors: list[tuple[str, np.ndarray]] | None = None) -> bytes:
    """Serialize a header and its tensors into one payload."""
    tensors = tensors or []
    specs, blobs = [], []
    for name, arr in tensors:
        spec, blob = tensor_spec(name, arr)
        specs.append(spec)
        blobs.append(blob)
    full = dict(header)
    if specs:
        full["tensors"] = specs
    text = json.dumps(full, separators=(",", ":"), sort_keys=True)
    return text.encode("utf-8") + b"".join(blobs)


def frame_bytes(payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds cap")
    return struct.pack("<I", len(payload)) + payload


def _json_object_end(payload: bytes) -> int:
    """Index one past the closing brace of the leading JSON object."""
    if not payload or payload[0:1] != b"{":
        raise ProtocolError("payload does not start with a JSON object")
    depth = 0
    in_string = False
    escaped = False
    for i, byte in enumerate(payload):
        ch = chr(byte)
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    raise ProtocolError("unterminated JSON header")


def decode_payload(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a payload into its header dict and named tensors.

    Raises ProtocolError on any malformed content: bad JSON, unknown dtypes,
    negative or oversized shapes, or blob bytes that do not match the
    declared tensors exactly.
    """
    end = _json_object_end(payload)
    try:
        header = json.loads(payload[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"invalid JSON header: {e}") from e
    if not isinstance(header, dict) or not isinstance(header.get("msg"), str):
        raise ProtocolError("header must be an object with a string 'msg'")

    tensors: dict[str, np.ndarray] = {}
    offset = end
    specs = header.get("tensors", [])
    if not isinstance(specs, list):
        raise ProtocolError("'tensors' must be a list")
    for spec in specs:
        if not isinstance(spec, dict):
            raise ProtocolError("tensor spec must be an object")
        name = spec.get("name")
        dtype = spec.get("dtype")
        shape = spec.get("shape")
        if not isinstance(name, str) or dtype not in _DTYPES or not isinstance(shape, list):
            raise ProtocolError(f"malformed tensor spec {spec!r}")
        if any(not isinstance(d, int) or d < 0 for d in shape):
            raise ProtocolError(f"bad shape {shape!r}")
        np_dtype, itemsize = _DTYPES[dtype]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * itemsize
        if nbytes > MAX_PAYLOAD or offset + nbytes > len(payload):
            raise ProtocolError(f"tensor {name} overruns the payload")
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=offset)
        tensors[name] = arr.reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise ProtocolError(f"{len(payload) - offset} trailing bytes after tensors")
    return header, tensors


def write_frame(stream, payload: bytes) -> None:
    stream.write(frame_bytes(payload))
    stream.flush()


def read_frame(stream) -> bytes | None:
    """Read one payload; None at a clean EOF before the length prefix."""
    prefix = stream.read(4)
    if prefix == b"" or prefix is None:
        return None
    if len(prefix) < 4:
        raise ProtocolError("truncated length prefix")
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {length} bytes exceeds cap")
    payload = b""
    while len(payload) < length:
        chunk = stream.read(length - len(payload))
        if not chunk:
            raise ProtocolError(f"stream ended {length - len(payload)} bytes early")
        payload += chunk
    return payload
