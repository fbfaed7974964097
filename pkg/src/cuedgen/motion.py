"""Landmark sequence data model, resampling, averaging, and file I/O.

A motion is an (L, J, 3) array of landmark coordinates in millimeters at a
fixed frame rate, with named joint ranges (lips, fingers, hand_root). Files
come in two flavors: a JSON document (exact round-trip) and a flat binary
variant (little-endian float32) for bulk data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptySet, FormatError, ShapeMismatch

DEFAULT_FPS = 30.0
N_LIPS = 20
N_FINGERS = 9
N_JOINTS = N_LIPS + N_FINGERS + 1

DEFAULT_JOINT_MAP = {
    "lips": (0, N_LIPS),
    "fingers": (N_LIPS, N_LIPS + N_FINGERS),
    "hand_root": (N_LIPS + N_FINGERS, N_JOINTS),
}

_BINARY_MAGIC = b"CGLM"
_BINARY_VERSION = 1


def _validate_joint_map(joint_map: Mapping[str, tuple[int, int]], n_joints: int) -> dict:
    jm = {name: (int(a), int(b)) for name, (a, b) in joint_map.items()}
    covered = np.zeros(n_joints, dtype=bool)
    for name, (a, b) in jm.items():
        if not (0 <= a < b <= n_joints):
            raise ValueError(f"joint_map slice {name}=({a},{b}) out of range for J={n_joints}")
        if covered[a:b].any():
            raise ValueError(f"joint_map slice {name} overlaps another slice")
        covered[a:b] = True
    if not covered.all():
        raise ValueError("joint_map slices must cover every joint")
    return jm


@dataclass
class MotionSequence:
    """Landmark trajectory: frames (L, J, 3) in mm, with named joint ranges."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    joint_map: Mapping[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_JOINT_MAP)
    )
    units: Optional[list] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (L, J, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("motion must have at least one frame")
        if not np.isfinite(self.frames).all():
            bad = np.argwhere(~np.isfinite(self.frames))[0]
            raise ValueError(f"non-finite value at frame {bad[0]}, joint {bad[1]}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.joint_map = _validate_joint_map(self.joint_map, self.frames.shape[1])

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.fps

    def joints(self, name: str) -> np.ndarray:
        a, b = self.joint_map[name]
        return self.frames[:, a:b, :]

    def with_frames(self, frames: np.ndarray) -> "MotionSequence":
        return MotionSequence(frames=frames, fps=self.fps,
                              joint_map=dict(self.joint_map), units=self.units)

    def copy(self) -> "MotionSequence":
        return self.with_frames(self.frames.copy())


@dataclass
class SegmentAnnotation:
    """Ordered, non-overlapping per-unit time segments for one stream.

    Each entry is (unit_index, start_s, end_s); midpoints are derived as
    (start + end) / 2 and exposed via :meth:`midpoints`.
    """

    segments: list[tuple[int, float, float]]
    stream: str = "gesture"

    def __post_init__(self):
        if self.stream not in ("gesture", "audio"):
            raise ValueError(f"stream must be 'gesture' or 'audio', got {self.stream!r}")
        prev_end = -np.inf
        cleaned = []
        for unit_index, start, end in self.segments:
            start, end = float(start), float(end)
            if not start < end:
                raise ValueError(f"segment {unit_index} has start {start} >= end {end}")
            if start < prev_end - 1e-9:
                raise ValueError(f"segment {unit_index} overlaps the previous one")
            prev_end = end
            cleaned.append((int(unit_index), start, end))
        self.segments = cleaned

    def __len__(self) -> int:
        return len(self.segments)

    def midpoints(self) -> np.ndarray:
        return np.array([(s + e) / 2.0 for _, s, e in self.segments])

    def shifted(self, dt: float) -> "SegmentAnnotation":
        return SegmentAnnotation(
            segments=[(i, s + dt, e + dt) for i, s, e in self.segments],
            stream=self.stream,
        )


@dataclass
class MeanMotion:
    """Elementwise average motion over a declared reference set."""

    mean_frames: np.ndarray
    fps: float
    n_sequences: int

    def __post_init__(self):
        self.mean_frames = np.asarray(self.mean_frames, dtype=np.float64)
        if not np.isfinite(self.mean_frames).all():
            raise ValueError("mean motion contains non-finite values")


def resample_motion(motion: MotionSequence, new_length: int) -> MotionSequence:
    """Linear time interpolation to ``new_length`` frames.

    Endpoints are preserved exactly; fps is kept so the resampled clip plays
    at a different wall-clock duration.
    """
    frames = resample_frames(motion.frames, new_length)
    return motion.with_frames(frames)


def resample_frames(frames: np.ndarray, new_length: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if new_length < 1:
        raise ValueError("new_length must be >= 1")
    old_length = frames.shape[0]
    if new_length == old_length:
        return frames.copy()
    if old_length == 1:
        return np.repeat(frames, new_length, axis=0)
    old_t = np.linspace(0.0, 1.0, old_length)
    new_t = np.linspace(0.0, 1.0, new_length)
    flat = frames.reshape(old_length, -1)
    out = np.empty((new_length, flat.shape[1]))
    for col in range(flat.shape[1]):
        out[:, col] = np.interp(new_t, old_t, flat[:, col])
    return out.reshape((new_length,) + frames.shape[1:])


def mean_motion(sequences: Sequence[MotionSequence], length: Optional[int] = None) -> MeanMotion:
    """Elementwise arithmetic mean over a set of motions.

    All inputs must share one length; pass ``length`` to linearly resample
    them to a common frame count first.
    """
    sequences = list(sequences)
    if not sequences:
        raise EmptySet("mean_motion needs at least one sequence")
    if length is not None:
        stacks = [resample_frames(m.frames, length) for m in sequences]
    else:
        lengths = {m.length for m in sequences}
        if len(lengths) != 1:
            raise ShapeMismatch(
                f"sequences have different lengths {sorted(lengths)}; pass length= to resample"
            )
        stacks = [m.frames for m in sequences]
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        raise ShapeMismatch(f"sequences have mixed joint shapes {sorted(shapes)}")
    mean = np.mean(np.stack(stacks, axis=0), axis=0)
    return MeanMotion(mean_frames=mean, fps=sequences[0].fps, n_sequences=len(sequences))


def save_motion(motion: MotionSequence, path) -> None:
    """Write a landmark file; format picked by extension (.json or .bin)."""
    path = str(path)
    if path.endswith(".json"):
        _save_json(motion, path)
    elif path.endswith(".bin"):
        _save_binary(motion, path)
    else:
        raise FormatError(f"unknown landmark file extension for {path!r} (use .json or .bin)")


def load_motion(path) -> MotionSequence:
    path = str(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _BINARY_MAGIC:
        return _load_binary(path)
    return _load_json(path)


def _save_json(motion: MotionSequence, path: str) -> None:
    doc = {
        "format": "cuedgen-landmarks",
        "schema_version": 1,
        "fps": motion.fps,
        "joint_map": {k: list(v) for k, v in motion.joint_map.items()},
        "units": motion.units,
        "frames": motion.frames.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def _load_json(path: str) -> MotionSequence:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a landmark JSON file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != "cuedgen-landmarks":
        raise FormatError(f"{path}: missing 'format: cuedgen-landmarks' header")
    for key in ("fps", "joint_map", "frames"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise FormatError(f"{path}: frames must be nested [L][J][3], got shape {frames.shape}")
    if not np.isfinite(frames).all():
        bad = np.argwhere(~np.isfinite(frames))[0]
        raise FormatError(f"{path}: non-finite value at frame {bad[0]}, joint {bad[1]}")
    joint_map = {k: tuple(v) for k, v in doc["joint_map"].items()}
    try:
        return MotionSequence(frames=frames, fps=float(doc["fps"]),
                              joint_map=joint_map, units=doc.get("units"))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _save_binary(motion: MotionSequence, path: str) -> None:
    meta = json.dumps({
        "joint_map": {k: list(v) for k, v in motion.joint_map.items()},
        "units": motion.units,
    }).encode("utf-8")
    L, J, _ = motion.frames.shape
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<III f I", _BINARY_VERSION, L, J, motion.fps, len(meta)))
        fh.write(meta)
        fh.write(motion.frames.astype("<f4").tobytes())


def _load_binary(path: str) -> MotionSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_fmt = "<III f I"
    header_size = 4 + struct.calcsize(header_fmt)
    if len(blob) < header_size or blob[:4] != _BINARY_MAGIC:
        raise FormatError(f"{path}: not a landmark binary file")
    version, L, J, fps, meta_len = struct.unpack(header_fmt, blob[4:header_size])
    if version != _BINARY_VERSION:
        raise FormatError(f"{path}: unsupported binary version {version}")
    body = blob[header_size:]
    if len(body) < meta_len:
        raise FormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(body[:meta_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block ({exc})") from exc
    payload = body[meta_len:]
    expected = L * J * 3 * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated frame data (expected {expected} bytes, found {len(payload)})"
        )
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(L, J, 3)
    if not np.isfinite(frames).all():
        bad = np.argwhere(~np.isfinite(frames))[0]
        raise FormatError(f"{path}: non-finite value at frame {bad[0]}, joint {bad[1]}")
    joint_map = {k: tuple(v) for k, v in meta["joint_map"].items()}
    try:
        return MotionSequence(frames=frames, fps=float(fps),
                              joint_map=joint_map, units=meta.get("units"))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_segments(annotation: SegmentAnnotation, path) -> None:
    doc = [
        {"unit_index": i, "start": s, "end": e}
        for i, s, e in annotation.segments
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"stream": annotation.stream, "segments": doc}, fh, indent=1)


def load_segments(path) -> SegmentAnnotation:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except ValueError as exc:
        raise FormatError(f"{path}: not a segment JSON file ({exc})") from exc
    if not isinstance(doc, dict) or "segments" not in doc:
        raise FormatError(f"{path}: missing 'segments' field")
    try:
        segments = [(d["unit_index"], d["start"], d["end"]) for d in doc["segments"]]
        return SegmentAnnotation(segments=segments, stream=doc.get("stream", "gesture"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
