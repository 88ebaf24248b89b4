"""Pose-accuracy metrics, evaluation protocols and CSV export."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .data import window_arrays
from .exceptions import ValidationError
from .stream import StreamConfig, StreamingEngine, replay

REPORT_SCHEMA = "emgpose-report/1"

DISCLOSURE = {
    "not_reproduced": [
        "physical grasping success rate (SR) and drop rate (DR) tables",
        "long-horizon teleoperation task results",
    ],
    "reason": (
        "These results need the robot hand, data glove, EMG armband and "
        "wrist trackers; this package runs without hardware."
    ),
    "substitutes": [
        "finite-difference gradient gate",
        "shape conformance checks",
        "retargeting round-trip and safety property tests",
        "velocity-integration oracles",
        "streaming equivalence and determinism tests",
        "held-out MAE on seeded synthetic muscle-synergy recordings",
        "streaming latency budget",
    ],
    "note": (
        "MAE values here come from synthetic data and are a desk-scale analog; "
        "they are not comparable with MAE measured on human recordings."
    ),
}


@dataclass
class EvalReport:
    mae: float
    per_joint_mae: dict
    frames: int
    per_task_mae: dict = None
    protocol: str = None
    extras: dict = field(default_factory=dict)
    disclosure: dict = field(default_factory=lambda: dict(DISCLOSURE))
    schema: str = REPORT_SCHEMA

    def to_dict(self):
        d = asdict(self)
        if d["per_task_mae"] is None:
            del d["per_task_mae"]
        return d


def mae_report(pred, gt, joint_names, tasks=None, protocol=None):
    """Mean absolute joint-angle error of ``(22, N)`` predictions.

    ``tasks`` is an optional length-``N`` sequence of task labels; when given,
    the report also breaks the error down by task.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValidationError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.shape[0] != len(joint_names):
        raise ValidationError("one joint name per row is required")
    n = pred.shape[1]
    if n == 0:
        raise ValidationError("no frames to evaluate")
    err = np.abs(pred - gt)
    per_joint = err.mean(axis=1)
    per_task = None
    if tasks is not None:
        tasks = np.asarray(tasks)
        if tasks.shape != (n,):
            raise ValidationError("one task label per frame is required")
        per_task = {str(t): float(err[:, tasks == t].mean()) for t in dict.fromkeys(tasks.tolist())}
    return EvalReport(
        mae=float(err.mean()),
        per_joint_mae={name: float(v) for name, v in zip(joint_names, per_joint)},
        frames=int(n),
        per_task_mae=per_task,
        protocol=protocol,
    )


def anchored_predictions(params, emg, poses, window, anchor=None, batch_size=16):
    """Predict consecutive non-overlapping windows, each starting from the
    true pose just before it and a zero LSTM state.

    Returns ``(pred, covered)`` where ``pred`` is ``(22, n)`` for the first
    ``n = covered`` samples (a whole number of windows).
    """
    anchor = poses[:, 0] if anchor is None else anchor
    samples = window_arrays(emg, poses, window, window, anchor)
    chunks = []
    for start in range(0, len(samples), batch_size):
        chunks.append(net.predict_windows(params, samples[start : start + batch_size]))
    if not chunks:
        return np.zeros((poses.shape[0], 0)), 0
    pred = np.concatenate(chunks, axis=0)  # (n_win, 22, W)
    pred = pred.transpose(1, 0, 2).reshape(poses.shape[0], -1)
    return pred, pred.shape[1]


def stream_predictions(params, emg, window, execute, anchor=None):
    """Free-running streaming predictions. Returns ``(pred, first_index)``:
    command ``j`` corresponds to input sample ``first_index + j``."""
    engine = StreamingEngine(params, StreamConfig(window=window, execute=execute))
    if anchor is not None:
        engine.state = net.DecoderState(engine.state.h, engine.state.c, np.asarray(anchor, dtype=float).copy())
    out = replay(engine, emg, block=execute)
    return out, window - execute


def evaluate_holdout(params, rec, joint_names, split=0.8, window=None, execute=20):
    """Evaluate on the tail ``1 - split`` of a synchronized recording.

    The headline MAE uses anchored windows (see :func:`anchored_predictions`).
    Extras report free-running streaming MAE and two reference baselines: the
    constant mid-range pose and holding each window's anchor pose.
    """
    if not rec.synchronized:
        raise ValidationError("evaluation needs a synchronized recording")
    if not 0 < split < 1:
        raise ValidationError("split must lie in (0, 1)")
    window = window or params.config.chunk_len
    n = rec.n_emg
    cut = int(round(split * n))
    if cut < 1 or n - cut < window:
        raise ValidationError(f"held-out part ({n - cut} samples) is shorter than one window ({window})")
    emg, poses = rec.emg[:, cut:], rec.poses[:, cut:]
    anchor = rec.poses[:, cut - 1]
    pred, covered = anchored_predictions(params, emg, poses, window, anchor)
    gt = poses[:, :covered]
    tasks = None
    if "task" in rec.meta:
        tasks = [str(rec.meta["task"])] * covered
    report = mae_report(pred, gt, joint_names, tasks=tasks, protocol="anchored-windows")

    starts = np.arange(0, covered, window)
    hold = np.concatenate(
        [np.repeat((anchor if s == 0 else poses[:, s - 1])[:, None], window, axis=1) for s in starts], axis=1
    )
    s_pred, first = stream_predictions(params, emg, window, execute, anchor)
    report.extras = {
        "split": split,
        "window": window,
        "heldout_samples": int(n - cut),
        "baseline_mid_pose_mae": float(np.abs(gt - params["theta0"][:, None]).mean()),
        "baseline_hold_anchor_mae": float(np.abs(gt - hold).mean()),
        "stream_execute": execute,
        "stream_mae": float(np.abs(s_pred - poses[:, first : first + s_pred.shape[1]]).mean())
        if s_pred.shape[1]
        else None,
    }
    return report


# ----------------------------------------------------------------------------
# CSV


def canonical_joint(label, joint_names):
    """Resolve a joint label, accepting spaces for underscores (``THUMB CMC FE``)."""
    key = str(label).strip().upper().replace(" ", "_")
    if key not in joint_names:
        raise ValidationError(f"unknown joint {label!r}; valid labels: {', '.join(joint_names)}")
    return key


def export_joint_csv(poses_pred, poses_gt, joints, path, joint_names=None):
    """Write selected joint trajectories as ``frame,<joint>_gt,<joint>_pred,...``.

    Values are written with ``repr`` so parsing the file recovers every
    float exactly.
    """
    if joint_names is None:
        from .hand_model import load_model

        joint_names = load_model().joint_names
    joint_names = list(joint_names)
    poses_pred = np.asarray(poses_pred, dtype=float)
    poses_gt = np.asarray(poses_gt, dtype=float)
    if poses_pred.shape != poses_gt.shape:
        raise ValidationError("predicted and ground-truth trajectories must have equal shapes")
    if poses_pred.ndim != 2 or poses_pred.shape[0] != len(joint_names):
        raise ValidationError(f"trajectories must have shape ({len(joint_names)}, N)")
    names = [canonical_joint(j, joint_names) for j in joints]
    rows = [joint_names.index(n) for n in names]
    header = ["frame"]
    for n in names:
        header += [f"{n}_gt", f"{n}_pred"]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(poses_pred.shape[1]):
            line = [str(t)]
            for r in rows:
                line += [repr(float(poses_gt[r, t])), repr(float(poses_pred[r, t]))]
            w.writerow(line)
    return path


def read_joint_csv(path):
    """Parse a file written by :func:`export_joint_csv` into ``{column: ndarray}``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, v in zip(header, row):
                cols[h].append(int(v) if h == "frame" else float(v))
    return {h: np.array(v) for h, v in cols.items()}
