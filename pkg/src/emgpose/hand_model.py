"""22-DOF hand kinematics: model file loading, forward kinematics, joint
limits and analytic capsule self-collision checks.

A pose is a plain float64 array of shape ``(22,)`` (radians). Batched
functions accept ``(B, 22)``. All frames are expressed in the hand-base frame
with the wrist at the origin, ``+x`` toward the index CMC and ``+z`` along the
dorsal palm normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .geometry import axis_angle_matrices, segment_distances

MODEL_FORMAT = "emgpose-hand/1"
N_DOF = 22
N_KEYPOINTS = 35


@dataclass(frozen=True)
class JointSpec:
    name: str
    axis: tuple
    parent_link: int
    origin_offset: tuple
    limit_lo: float
    limit_hi: float


@dataclass(frozen=True)
class Capsule:
    link: int
    a: tuple
    b: tuple
    radius: float


@dataclass(frozen=True)
class KeypointFrame:
    name: str
    link: int
    offset: tuple


@dataclass(frozen=True)
class KeypointSet:
    """Labelled 3D points in the hand-base frame (meters)."""

    points: np.ndarray
    labels: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"keypoints must have shape (N, 3), got {pts.shape}")
        if len(self.labels) != pts.shape[0]:
            raise ValidationError("one label per keypoint is required")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("keypoint coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return len(self.labels)

    def index(self, label):
        return self.labels.index(label)

    def select(self, labels):
        idx = [self.index(lbl) for lbl in labels]
        return KeypointSet(self.points[idx], tuple(labels))


@dataclass(frozen=True)
class KinematicModel:
    """Immutable hand description. Build it with :func:`load_model`."""

    joints: tuple
    capsules: tuple
    keypoint_frames: tuple
    derived: dict = field(default_factory=dict)
    correspondence: tuple = ()
    correspondence_weights: tuple = ()
    palm_width_labels: tuple = ("INDEX_CMC", "PINKY_CMC")
    collision_margin: float = 0.002
    name: str = ""
    note: str = ""

    @property
    def n_dof(self):
        return len(self.joints)

    @cached_property
    def joint_names(self):
        return tuple(j.name for j in self.joints)

    @cached_property
    def lower(self):
        return np.array([j.limit_lo for j in self.joints])

    @cached_property
    def upper(self):
        return np.array([j.limit_hi for j in self.joints])

    @cached_property
    def rest_pose(self):
        """All-zero configuration; the model's rest layout."""
        return np.zeros(self.n_dof)

    @cached_property
    def mid_pose(self):
        return 0.5 * (self.lower + self.upper)

    @cached_property
    def keypoint_labels(self):
        return tuple(k.name for k in self.keypoint_frames)

    @cached_property
    def all_labels(self):
        return self.keypoint_labels + tuple(self.derived)

    @cached_property
    def palm_width(self):
        pts = keypoint_positions(self, self.rest_pose[None], self.palm_width_labels)[0]
        return float(np.linalg.norm(pts[0] - pts[1]))

    @cached_property
    def _parent_of_link(self):
        parent = [-1]
        parent += [j.parent_link for j in self.joints]
        return parent

    @cached_property
    def _joint_moves_link(self):
        """Boolean (n_links, n_dof): whether joint j is an ancestor of link l."""
        n_links = self.n_dof + 1
        out = np.zeros((n_links, self.n_dof), dtype=bool)
        for link in range(1, n_links):
            node = link
            while node > 0:
                out[link, node - 1] = True
                node = self._parent_of_link[node]
        return out

    @cached_property
    def collision_pairs(self):
        """Index pairs into ``capsules`` that are checked for contact.

        Capsules on the same link and on adjacent links are skipped. Links
        without capsules are transparent when deciding adjacency.
        """
        has_capsule = {c.link for c in self.capsules}

        def body(link):
            while link > 0 and link not in has_capsule:
                link = self._parent_of_link[link]
            return link

        def adjacent(i, j):
            return i == j or (i > 0 and body(self._parent_of_link[i]) == j) or (
                j > 0 and body(self._parent_of_link[j]) == i
            )

        pairs = []
        for a in range(len(self.capsules)):
            for b in range(a + 1, len(self.capsules)):
                if not adjacent(self.capsules[a].link, self.capsules[b].link):
                    pairs.append((a, b))
        return np.array(pairs, dtype=int).reshape(-1, 2)

    # cached arrays for the vectorized kernels
    @cached_property
    def _kp_links(self):
        return np.array([k.link for k in self.keypoint_frames])

    @cached_property
    def _kp_offsets(self):
        return np.array([k.offset for k in self.keypoint_frames], dtype=float)

    @cached_property
    def _cap_arrays(self):
        links = np.array([c.link for c in self.capsules])
        a = np.array([c.a for c in self.capsules], dtype=float)
        b = np.array([c.b for c in self.capsules], dtype=float)
        r = np.array([c.radius for c in self.capsules], dtype=float)
        return links, a, b, r


def _validate(model):
    if len(model.joints) != N_DOF:
        raise ValidationError(f"expected {N_DOF} joints, got {len(model.joints)}")
    if len(model.keypoint_frames) != N_KEYPOINTS:
        raise ValidationError(
            f"expected {N_KEYPOINTS} keypoint frames, got {len(model.keypoint_frames)}"
        )
    for i, j in enumerate(model.joints):
        if not j.limit_lo < j.limit_hi:
            raise ValidationError(f"joint {j.name}: limit_lo must be < limit_hi")
        if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
            raise ValidationError(f"joint {j.name}: axis must have unit norm")
        # link i + 1 is the child of joint i; its parent must already exist
        if not 0 <= j.parent_link <= i:
            raise ValidationError(f"joint {j.name}: parent_link out of topological order")
    for c in model.capsules:
        if c.radius <= 0:
            raise ValidationError("capsule radii must be positive")
    if not model.correspondence:
        raise ValidationError("correspondence set must be non-empty")
    unknown = set(model.correspondence) - set(model.all_labels)
    if unknown:
        raise ValidationError(f"unknown correspondence labels: {sorted(unknown)}")
    ok, clearance = collision_free(model, model.rest_pose)
    if not ok:
        raise ValidationError(f"model is in self-collision at rest (clearance {clearance:.4g} m)")


def model_from_dict(doc):
    if doc.get("format") != MODEL_FORMAT:
        raise ValidationError(f"unsupported hand model format {doc.get('format')!r}")
    joints = tuple(
        JointSpec(
            name=j["name"],
            axis=tuple(float(x) for x in j["axis"]),
            parent_link=int(j["parent_link"]),
            origin_offset=tuple(float(x) for x in j["origin"]),
            limit_lo=float(j["limits"][0]),
            limit_hi=float(j["limits"][1]),
        )
        for j in doc["joints"]
    )
    capsules = tuple(
        Capsule(int(c["link"]), tuple(c["a"]), tuple(c["b"]), float(c["radius"]))
        for c in doc["capsules"]
    )
    frames = tuple(
        KeypointFrame(k["name"], int(k["link"]), tuple(k["offset"])) for k in doc["keypoints"]
    )
    derived = {d["name"]: tuple(d["mean_of"]) for d in doc.get("derived_keypoints", [])}
    corr = doc.get("correspondence", [])
    model = KinematicModel(
        joints=joints,
        capsules=capsules,
        keypoint_frames=frames,
        derived=derived,
        correspondence=tuple(c["name"] for c in corr),
        correspondence_weights=tuple(float(c.get("weight", 1.0)) for c in corr),
        palm_width_labels=tuple(doc.get("palm_width", ("INDEX_CMC", "PINKY_CMC"))),
        collision_margin=float(doc.get("collision_margin", 0.002)),
        name=doc.get("name", ""),
        note=doc.get("note", ""),
    )
    _validate(model)
    return model


def model_to_dict(model):
    return {
        "format": MODEL_FORMAT,
        "name": model.name,
        "note": model.note,
        "collision_margin": model.collision_margin,
        "joints": [
            {
                "name": j.name,
                "parent_link": j.parent_link,
                "origin": list(j.origin_offset),
                "axis": list(j.axis),
                "limits": [j.limit_lo, j.limit_hi],
            }
            for j in model.joints
        ],
        "capsules": [
            {"link": c.link, "a": list(c.a), "b": list(c.b), "radius": c.radius}
            for c in model.capsules
        ],
        "keypoints": [
            {"name": k.name, "link": k.link, "offset": list(k.offset)}
            for k in model.keypoint_frames
        ],
        "derived_keypoints": [
            {"name": n, "mean_of": list(m)} for n, m in model.derived.items()
        ],
        "palm_width": list(model.palm_width_labels),
        "correspondence": [
            {"name": n, "weight": w}
            for n, w in zip(model.correspondence, model.correspondence_weights)
        ],
    }


_CANONICAL = None


def load_model(path=None):
    """Load a hand model file; ``None`` returns the bundled canonical model.

    The canonical model is a stand-in with plausible human proportions. It is
    not the geometry of any particular robot hand.
    """
    global _CANONICAL
    if path is None:
        if _CANONICAL is None:
            text = resources.files("emgpose.models").joinpath("canonical_hand.json").read_text()
            _CANONICAL = model_from_dict(json.loads(text))
        return _CANONICAL
    return model_from_dict(json.loads(Path(path).read_text()))


def check_pose(model, pose):
    q = np.asarray(pose, dtype=float)
    if q.shape != (model.n_dof,):
        raise ValidationError(f"pose must have shape ({model.n_dof},), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("pose must be finite")
    return q


def link_frames(model, poses):
    """World rotations ``(B, L, 3, 3)`` and origins ``(B, L, 3)`` of every link."""
    poses = np.atleast_2d(poses)
    B = poses.shape[0]
    n_links = model.n_dof + 1
    R = np.empty((B, n_links, 3, 3))
    p = np.empty((B, n_links, 3))
    R[:, 0] = np.eye(3)
    p[:, 0] = 0.0
    for j, joint in enumerate(model.joints):
        par = joint.parent_link
        p[:, j + 1] = p[:, par] + R[:, par] @ np.asarray(joint.origin_offset)
        R[:, j + 1] = R[:, par] @ axis_angle_matrices(joint.axis, poses[:, j])
    return R, p


def fk_batch(model, poses):
    """Positions of the 35 keypoint frames for a batch of poses, ``(B, 35, 3)``."""
    R, p = link_frames(model, poses)
    links = model._kp_links
    return p[:, links] + np.einsum("bkij,kj->bki", R[:, links], model._kp_offsets)


def keypoint_positions(model, poses, labels):
    """Positions of arbitrary labels, including derived ones, ``(B, len(labels), 3)``."""
    pts = fk_batch(model, poses)
    index = {name: i for i, name in enumerate(model.keypoint_labels)}
    cols = []
    for lbl in labels:
        if lbl in index:
            cols.append(pts[:, index[lbl]])
        elif lbl in model.derived:
            members = [index[m] for m in model.derived[lbl]]
            cols.append(pts[:, members].mean(axis=1))
        else:
            raise ValidationError(f"unknown keypoint label {lbl!r}")
    return np.stack(cols, axis=1)


def fk_keypoints(model, pose):
    """Forward kinematics of one pose to the 35 named keypoints."""
    q = check_pose(model, pose)
    return KeypointSet(fk_batch(model, q[None])[0], model.keypoint_labels)


def keypoint_jacobian(model, pose, labels):
    """Analytic position Jacobian ``(len(labels) * 3, n_dof)`` for revolute chains."""
    q = check_pose(model, pose)
    R, p = link_frames(model, q[None])
    R, p = R[0], p[0]
    links = model._kp_links
    pts = p[links] + np.einsum("kij,kj->ki", R[links], model._kp_offsets)
    index = {name: i for i, name in enumerate(model.keypoint_labels)}
    moves = model._joint_moves_link
    J = np.zeros((len(labels), 3, model.n_dof))
    for row, lbl in enumerate(labels):
        members = [lbl] if lbl in index else list(model.derived[lbl])
        for m in members:
            k = index[m]
            for j in np.flatnonzero(moves[links[k]]):
                # joint j sits at the origin of link j + 1
                axis = R[model.joints[j].parent_link] @ np.asarray(model.joints[j].axis)
                J[row, :, j] += np.cross(axis, pts[k] - p[j + 1]) / len(members)
    return J.reshape(len(labels) * 3, model.n_dof)


def clamp_limits(model, pose):
    """Clip every angle into its joint range. Works on ``(22,)`` or ``(B, 22)``."""
    return np.clip(np.asarray(pose, dtype=float), model.lower, model.upper)


def within_limits(model, pose, tol=0.0):
    q = np.asarray(pose, dtype=float)
    return bool(np.all(q >= model.lower - tol) and np.all(q <= model.upper + tol))


def capsule_endpoints(model, poses):
    """World capsule axis endpoints ``(B, C, 3)`` x2 and radii ``(C,)``."""
    R, p = link_frames(model, poses)
    links, a, b, r = model._cap_arrays
    Rl = R[:, links]
    A = p[:, links] + np.einsum("bcij,cj->bci", Rl, a)
    Bp = p[:, links] + np.einsum("bcij,cj->bci", Rl, b)
    return A, Bp, r


def pair_clearances(model, poses):
    """Surface distance for every checked capsule pair, ``(B, P)`` (negative = overlap)."""
    A, Bp, r = capsule_endpoints(model, np.atleast_2d(poses))
    i, j = model.collision_pairs[:, 0], model.collision_pairs[:, 1]
    d = segment_distances(A[:, i], Bp[:, i], A[:, j], Bp[:, j])
    return d - r[i] - r[j]


def min_clearance(model, poses):
    """Minimum pairwise clearance per pose, ``(B,)``."""
    return pair_clearances(model, poses).min(axis=1)


def collision_free(model, pose, margin=None):
    """Analytic self-collision test.

    Returns
    -------
    ok : bool
        True when every non-adjacent capsule pair is at least ``margin``
        apart (default: the model's collision margin).
    clearance : float
        Smallest pairwise surface distance in meters.
    """
    margin = model.collision_margin if margin is None else margin
    q = check_pose(model, pose)
    clearance = float(min_clearance(model, q[None])[0])
    return clearance >= margin, clearance
