"""File formats: PLY point clouds, JSON-lines frame streams, calibration JSON.

PLY supports ASCII and binary little-endian, points only. Frame streams carry
one frame per line so externally restored (deblurred) feature streams can be
re-ingested in place of the simulator's output.
"""

from __future__ import annotations

import json

import numpy as np

from .blur_sim import SimulatedFrame
from .geometry import RigidTransform


class FrameSchemaError(ValueError):
    """Frame stream violates the schema; carries the offending line number."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def write_ply(path, points: np.ndarray, binary: bool = False):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    if binary:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(pts.astype("<f4").tobytes())
    else:
        with open(path, "w") as f:
            f.write(header)
            for x, y, z in pts:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = None
    count = 0
    props = []
    for line in header:
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element" and tokens[1] == "vertex":
            count = int(tokens[2])
        elif tokens[0] == "property" and len(tokens) == 3:
            props.append((tokens[1], tokens[2]))
    names = [n for _, n in props]
    if names[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected x, y, z as leading vertex properties")
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        vals = np.array(rows, dtype=float).reshape(count, len(props))
        return vals[:, :3]
    if fmt == "binary_little_endian":
        np_types = {"float": "<f4", "float32": "<f4", "double": "<f8",
                    "float64": "<f8", "uchar": "u1", "uint8": "u1",
                    "int": "<i4", "int32": "<i4"}
        dtype = np.dtype([(name, np_types[t]) for t, name in props])
        rec = np.frombuffer(body, dtype=dtype, count=count)
        return np.column_stack(
            [rec["x"].astype(float), rec["y"].astype(float), rec["z"].astype(float)]
        )
    raise ValueError(f"{path}: unsupported PLY format {fmt}")


def _frame_to_dict(frame: SimulatedFrame) -> dict:
    return {
        "index": frame.index,
        "timestamp": frame.timestamp,
        "pose": {
            "t": [float(v) for v in frame.pose.translation],
            "q": [float(v) for v in frame.pose.quat],
        },
        "blur": float(frame.blur_level),
        "features": [
            [int(pid), float(u), float(v)]
            for pid, (u, v) in zip(frame.feature_ids, frame.feature_pixels)
        ],
    }


def write_frames_jsonl(path, frames):
    with open(path, "w") as f:
        for frame in frames:
            f.write(json.dumps(_frame_to_dict(frame), sort_keys=True))
            f.write("\n")


_FRAME_KEYS = {"index", "timestamp", "pose", "blur", "features"}


def read_frames_jsonl(path):
    """Parse and validate a frame stream; raises FrameSchemaError with line numbers."""
    frames = []
    last_ts = -np.inf
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise FrameSchemaError(ln, f"invalid JSON: {e}") from e
            missing = _FRAME_KEYS - set(d)
            if missing:
                raise FrameSchemaError(ln, f"missing fields {sorted(missing)}")
            extra = set(d) - _FRAME_KEYS
            if extra:
                raise FrameSchemaError(ln, f"unknown fields {sorted(extra)}")
            pose = d["pose"]
            if set(pose) != {"t", "q"} or len(pose["t"]) != 3 or len(pose["q"]) != 4:
                raise FrameSchemaError(ln, "field 'pose' must hold t[3] and q[4]")
            tq = np.array(pose["t"] + pose["q"], dtype=float)
            if not np.all(np.isfinite(tq)):
                raise FrameSchemaError(ln, "field 'pose' contains non-finite values")
            if not np.isfinite(d["blur"]) or d["blur"] < 0:
                raise FrameSchemaError(ln, "field 'blur' must be finite and >= 0")
            ts = float(d["timestamp"])
            if not np.isfinite(ts) or ts <= last_ts:
                raise FrameSchemaError(
                    ln, "field 'timestamp' must be finite and strictly increasing"
                )
            last_ts = ts
            feats = d["features"]
            ids, pix = [], []
            for item in feats:
                if len(item) != 3:
                    raise FrameSchemaError(ln, "each feature must be [id, u, v]")
                ids.append(int(item[0]))
                pix.append([float(item[1]), float(item[2])])
            if pix and not np.all(np.isfinite(pix)):
                raise FrameSchemaError(ln, "feature pixels must be finite")
            frames.append(
                SimulatedFrame(
                    index=int(d["index"]),
                    timestamp=ts,
                    pose=RigidTransform(np.array(pose["q"]), np.array(pose["t"])),
                    feature_ids=np.array(ids, dtype=int),
                    feature_pixels=(np.array(pix, dtype=float)
                                    if pix else np.zeros((0, 2))),
                    blur_level=float(d["blur"]),
                )
            )
    return frames


def write_json(path, payload: dict):
    """Canonical JSON: sorted keys, newline-terminated (byte-stable)."""
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)
