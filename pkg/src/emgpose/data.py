"""Recordings of paired sEMG and joint angles: container, file formats,
timeline synchronization, windowing and velocity labels.

Binary layout of an ``.eprc`` file (``emgpose-rec/1``), all little-endian::

    offset  size        field
    0       4           magic  b"EPRC"
    4       4   u32     version (1)
    8       8   f64     emg_rate (Hz)
    16      8   f64     pose_rate (Hz)
    24      4   u32     n_channels
    28      4   u32     n_dof
    32      8   u64     n_emg   (EMG samples)
    40      8   u64     n_pose  (pose frames)
    48      4   u32     meta_len (bytes)
    52      meta_len    meta: UTF-8 JSON object, sorted keys
    ...     8*n_emg     emg_timestamps: i64 microseconds
    ...     8*C*n_emg   emg: f64, channel-major (row c contiguous)
    ...     8*n_pose    pose_timestamps: i64 microseconds
    ...     8*D*n_pose  poses: f64 radians, joint-major

The JSONL form starts with a header line
``{"format": "emgpose-rec/1", "emg_rate": .., "pose_rate": .., "meta": {..}}``
followed by one record per timestamp, ``{"t_us": int, "emg": [8 floats]}``
with an optional ``"pose": [22 floats]`` when a pose frame shares the stamp
(pose-only records omit ``"emg"``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ValidationError

REC_MAGIC = b"EPRC"
REC_VERSION = 1
REC_FORMAT = "emgpose-rec/1"
N_CHANNELS = 8

_HEADER = struct.Struct("<4sIddIIQQI")


@dataclass
class Recording:
    emg: np.ndarray
    emg_t_us: np.ndarray
    poses: np.ndarray
    pose_t_us: np.ndarray
    emg_rate: float = 500.0
    pose_rate: float = 120.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emg = np.asarray(self.emg, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.emg_t_us = np.asarray(self.emg_t_us, dtype=np.int64)
        self.pose_t_us = np.asarray(self.pose_t_us, dtype=np.int64)

    @property
    def n_emg(self):
        return self.emg.shape[1]

    @property
    def synchronized(self):
        return self.pose_t_us.shape == self.emg_t_us.shape and np.array_equal(
            self.pose_t_us, self.emg_t_us
        )

    def validate(self, model=None):
        """Check the container invariants; raise :class:`ValidationError`."""
        if self.emg.ndim != 2 or self.emg.shape[0] != N_CHANNELS:
            raise ValidationError(f"emg must be ({N_CHANNELS}, N), got {self.emg.shape}")
        if self.emg_t_us.shape != (self.emg.shape[1],):
            raise ValidationError("one EMG timestamp per sample is required")
        if self.poses.ndim != 2 or self.pose_t_us.shape != (self.poses.shape[1],):
            raise ValidationError("one pose timestamp per frame is required")
        for name, t in (("emg", self.emg_t_us), ("pose", self.pose_t_us)):
            if np.any(np.diff(t) <= 0):
                raise ValidationError(f"{name} timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.emg)) or np.any(np.abs(self.emg) > 1.0):
            raise ValidationError("emg values must be finite and within [-1, 1]")
        if not np.all(np.isfinite(self.poses)):
            raise ValidationError("poses must be finite")
        if model is not None:
            if self.poses.shape[0] != model.n_dof:
                raise ValidationError(f"poses must have {model.n_dof} rows")
            lo, hi = model.lower[:, None], model.upper[:, None]
            if np.any(self.poses < lo) or np.any(self.poses > hi):
                raise ValidationError("pose frames must lie within joint limits")
        return self

    def slice(self, start, stop):
        """Sub-recording over EMG sample range ``[start, stop)`` (synchronized only)."""
        if not self.synchronized:
            raise ValidationError("slice() requires a synchronized recording")
        return replace(
            self,
            emg=self.emg[:, start:stop].copy(),
            emg_t_us=self.emg_t_us[start:stop].copy(),
            poses=self.poses[:, start:stop].copy(),
            pose_t_us=self.pose_t_us[start:stop].copy(),
            meta=dict(self.meta),
        )


@dataclass
class WindowSample:
    emg: np.ndarray  # (8, W)
    theta_gt: np.ndarray  # (22, W)
    theta0: np.ndarray  # (22,)
    start: int = 0


def timestamps_us(n, rate):
    return np.round(np.arange(n) * (1e6 / rate)).astype(np.int64)


def normalize_emg(raw, zscore=False):
    """Map raw EMG to ``[-1, 1]`` per channel (optionally z-scoring first)."""
    x = np.asarray(raw, dtype=float)
    if zscore:
        sd = x.std(axis=1, keepdims=True)
        x = (x - x.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
    peak = np.abs(x).max(axis=1, keepdims=True)
    return x / np.where(peak > 0, peak, 1.0)


def synchronize(rec):
    """Resample the pose stream onto the EMG timeline by per-joint linear
    interpolation.

    EMG samples outside the pose time span are dropped; their count is
    accumulated in ``meta["sync_truncated"]``. The returned recording has
    ``pose_t_us == emg_t_us`` and ``pose_rate == emg_rate``.
    """
    t_e = rec.emg_t_us
    t_p = rec.pose_t_us
    if len(t_p) == 0:
        raise ValidationError("recording has no pose frames")
    keep = (t_e >= t_p[0]) & (t_e <= t_p[-1])
    n_dropped = int(len(t_e) - keep.sum())
    t_keep = t_e[keep]
    tk = t_keep.astype(np.float64)
    tp = t_p.astype(np.float64)
    poses = np.stack([np.interp(tk, tp, row) for row in rec.poses]) if len(rec.poses) else rec.poses
    meta = dict(rec.meta)
    meta["sync_truncated"] = int(meta.get("sync_truncated", 0)) + n_dropped
    return Recording(
        emg=rec.emg[:, keep],
        emg_t_us=t_keep.copy(),
        poses=poses,
        pose_t_us=t_keep.copy(),
        emg_rate=rec.emg_rate,
        pose_rate=rec.emg_rate,
        meta=meta,
    )


def window_count(n, window, stride):
    if window > n:
        return 0
    return (n - window) // stride + 1


def window_arrays(emg, poses, window, stride, rest):
    """Slice aligned ``(8, N)`` / ``(22, N)`` arrays into training windows.

    ``theta0`` of window ``k`` is the pose at sample ``k * stride - 1``, or
    ``rest`` for the first window.
    """
    n = emg.shape[1]
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be positive")
    if window > n:
        raise ValidationError(f"window {window} is longer than the recording ({n} samples)")
    rest = np.asarray(rest, dtype=float)
    out = []
    for k in range(window_count(n, window, stride)):
        s = k * stride
        theta0 = rest.copy() if s == 0 else poses[:, s - 1].copy()
        out.append(WindowSample(emg[:, s : s + window], poses[:, s : s + window], theta0, s))
    return out


def make_windows(rec, window, stride, rest=None):
    """Windows of length ``window`` advanced by ``stride`` over a synchronized
    recording; ``floor((N - W) / E) + 1`` samples."""
    if not rec.synchronized:
        raise ValidationError("make_windows requires a synchronized recording")
    if rest is None:
        from .hand_model import load_model

        rest = load_model().mid_pose
    return window_arrays(rec.emg, rec.poses, window, stride, rest)


def velocity_labels(theta_gt, theta0):
    """Per-step joint deltas: ``v[0] = theta[0] - theta0``, ``v[t] = theta[t] - theta[t-1]``.

    Works on ``(22, W)`` with ``theta0`` of shape ``(22,)`` or batched
    ``(B, 22, W)`` with ``(B, 22)``.
    """
    theta_gt = np.asarray(theta_gt, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    return np.diff(theta_gt, axis=-1, prepend=theta0[..., None])


# ----------------------------------------------------------------------------
# binary container


def _meta_bytes(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def recording_to_bytes(rec):
    meta = _meta_bytes(rec.meta)
    n_ch, n_e = rec.emg.shape
    n_dof, n_p = rec.poses.shape
    parts = [
        _HEADER.pack(
            REC_MAGIC, REC_VERSION, float(rec.emg_rate), float(rec.pose_rate),
            n_ch, n_dof, n_e, n_p, len(meta),
        ),
        meta,
        rec.emg_t_us.astype("<i8").tobytes(),
        np.ascontiguousarray(rec.emg, dtype="<f8").tobytes(),
        rec.pose_t_us.astype("<i8").tobytes(),
        np.ascontiguousarray(rec.poses, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def recording_from_bytes(buf):
    buf = memoryview(buf)
    if len(buf) < _HEADER.size:
        raise FormatError(
            f"truncated file: header needs {_HEADER.size} bytes, got {len(buf)}",
            section="header", offset=len(buf),
        )
    magic, version, emg_rate, pose_rate, n_ch, n_dof, n_e, n_p, meta_len = _HEADER.unpack_from(buf)
    if magic != REC_MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {REC_MAGIC!r}", "header", 0)
    if version != REC_VERSION:
        raise FormatError(f"unsupported version {version}", "header", 4)
    pos = _HEADER.size

    def take(section, nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(
                f"truncated file: section '{section}' needs {nbytes} bytes at offset {pos}, "
                f"only {len(buf) - pos} available",
                section=section, offset=pos,
            )
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    try:
        meta = json.loads(bytes(take("meta", meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"meta is not valid JSON: {exc}", "meta", _HEADER.size) from None
    emg_t = np.frombuffer(take("emg_timestamps", 8 * n_e), dtype="<i8").astype(np.int64)
    emg = np.frombuffer(take("emg", 8 * n_ch * n_e), dtype="<f8").reshape(n_ch, n_e).astype(np.float64)
    pose_t = np.frombuffer(take("pose_timestamps", 8 * n_p), dtype="<i8").astype(np.int64)
    poses = np.frombuffer(take("poses", 8 * n_dof * n_p), dtype="<f8").reshape(n_dof, n_p).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after poses", "trailer", pos)
    return Recording(emg, emg_t, poses, pose_t, emg_rate, pose_rate, meta)


def save_recording(rec, path):
    """Write ``.eprc`` (binary) or ``.jsonl`` depending on the suffix."""
    path = Path(path)
    if path.suffix == ".jsonl":
        path.write_text(recording_to_jsonl(rec))
    else:
        path.write_bytes(recording_to_bytes(rec))
    return path


def load_recording(path):
    path = Path(path)
    if path.suffix == ".jsonl":
        return recording_from_jsonl(path.read_text())
    return recording_from_bytes(path.read_bytes())


# ----------------------------------------------------------------------------
# JSONL


def recording_to_jsonl(rec):
    header = {
        "format": REC_FORMAT,
        "emg_rate": rec.emg_rate,
        "pose_rate": rec.pose_rate,
        "meta": rec.meta,
    }
    lines = [json.dumps(header, sort_keys=True)]
    i = j = 0
    n_e, n_p = rec.emg.shape[1], rec.poses.shape[1]
    while i < n_e or j < n_p:
        te = rec.emg_t_us[i] if i < n_e else None
        tp = rec.pose_t_us[j] if j < n_p else None
        record = {}
        if tp is None or (te is not None and te <= tp):
            record["t_us"] = int(te)
            record["emg"] = rec.emg[:, i].tolist()
            i += 1
            if tp is not None and tp == te:
                record["pose"] = rec.poses[:, j].tolist()
                j += 1
        else:
            record["t_us"] = int(tp)
            record["pose"] = rec.poses[:, j].tolist()
            j += 1
        lines.append(json.dumps(record))
    return "\n".join(lines) + "\n"


def recording_from_jsonl(text):
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty JSONL recording", "header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header line: {exc}", "header", 1) from None
    if header.get("format") != REC_FORMAT:
        raise FormatError(f"unsupported format {header.get('format')!r}", "header", 1)
    emg_t, emg, pose_t, poses = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            t = int(rec["t_us"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: {exc}", "records", lineno) from None
        if "emg" in rec:
            emg_t.append(t)
            emg.append(rec["emg"])
        if "pose" in rec:
            pose_t.append(t)
            poses.append(rec["pose"])
    emg_arr = np.array(emg, dtype=float).T if emg else np.zeros((N_CHANNELS, 0))
    pose_arr = np.array(poses, dtype=float).T if poses else np.zeros((0, 0))
    return Recording(
        emg_arr, np.array(emg_t, dtype=np.int64), pose_arr, np.array(pose_t, dtype=np.int64),
        float(header["emg_rate"]), float(header["pose_rate"]), header.get("meta", {}),
    )


# ----------------------------------------------------------------------------
# pose and keypoint streams (JSONL)
#
# poses:     {"format": "emgpose-poses/1", "joints": [22 names]}
#            then {"index": int, "t_us": int, "pose": [22 floats], ...extra}
# keypoints: {"format": "emgpose-keypoints/1", "labels": [names], "normalized": bool}
#            then {"t_us": int, "points": [[x, y, z], ...]}

POSES_FORMAT = "emgpose-poses/1"
KEYPOINTS_FORMAT = "emgpose-keypoints/1"


def write_pose_jsonl(path, poses, joint_names, indices=None, t_us=None, extras=None):
    """Write ``(22, n)`` poses, one record per column."""
    poses = np.asarray(poses, dtype=float)
    n = poses.shape[1]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    lines = [json.dumps({"format": POSES_FORMAT, "joints": list(joint_names)})]
    for j in range(n):
        rec = {"index": int(indices[j])}
        if t_us is not None:
            rec["t_us"] = int(t_us[j])
        rec["pose"] = poses[:, j].tolist()
        if extras is not None:
            rec.update(extras[j])
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_jsonl(path):
    """Return ``(indices, poses (22, n), records)`` from a pose stream file."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty pose file", "header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header line: {exc}", "header", 1) from None
    if header.get("format") != POSES_FORMAT:
        raise FormatError(f"unsupported format {header.get('format')!r}", "header", 1)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rec["index"] = int(rec["index"])
            rec["pose"] = [float(x) for x in rec["pose"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: {exc}", "records", lineno) from None
        records.append(rec)
    idx = np.array([r["index"] for r in records], dtype=np.int64)
    poses = np.array([r["pose"] for r in records], dtype=float).T if records else np.zeros((len(header["joints"]), 0))
    return idx, poses, records


def write_keypoint_jsonl(path, frames, labels, t_us=None, normalized=False):
    """Write an iterable of ``(n_labels, 3)`` keypoint arrays."""
    lines = [json.dumps({"format": KEYPOINTS_FORMAT, "labels": list(labels), "normalized": bool(normalized)})]
    for j, pts in enumerate(frames):
        rec = {"t_us": int(t_us[j]) if t_us is not None else j, "points": np.asarray(pts, dtype=float).tolist()}
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoint_jsonl(path):
    """Return ``(labels, normalized, t_us, frames)`` with frames ``(n, n_labels, 3)``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty keypoint file", "header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header line: {exc}", "header", 1) from None
    if header.get("format") != KEYPOINTS_FORMAT or "labels" not in header:
        raise FormatError("header must name format emgpose-keypoints/1 and list labels", "header", 1)
    labels = tuple(header["labels"])
    t_us, frames = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pts = np.array(rec["points"], dtype=float)
            t_us.append(int(rec.get("t_us", lineno - 2)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: {exc}", "records", lineno) from None
        if pts.shape != (len(labels), 3):
            raise FormatError(f"line {lineno}: expected {len(labels)} points of 3 coordinates", "records", lineno)
        frames.append(pts)
    frames = np.array(frames) if frames else np.zeros((0, len(labels), 3))
    return labels, bool(header.get("normalized", False)), np.array(t_us, dtype=np.int64), frames
