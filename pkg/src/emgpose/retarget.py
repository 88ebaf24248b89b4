"""Keypoint retargeting: human landmarks to robot joint angles.

Minimizes the weighted squared keypoint distance with a projected
Levenberg-Marquardt loop, then projects the result back onto the set of
collision-free configurations by bisection along the segment from the last
known-safe pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hand_model as hm
from .exceptions import SafetyInvariantError, ValidationError

HUMAN_WRIST = "WRIST"


@dataclass
class RetargetConfig:
    """Solver settings.

    ``labels`` defaults to the model's correspondence set and ``weights`` to
    the weights declared in the model file. ``active_joints`` restricts the
    optimization to a subset of joints; the others stay at ``q_init``.
    """

    labels: tuple = None
    weights: tuple = None
    max_iters: int = 50
    tol_step: float = 1e-5
    tol_residual: float = 1e-4
    damping: float = 1e-3
    fd_step: float = 1e-6
    jacobian: str = "fd"
    active_joints: tuple = None
    collision_weight: float = 100.0
    restarts: tuple = ("mid", "quarter", "three_quarter")

    def resolve(self, model):
        labels = tuple(self.labels) if self.labels is not None else model.correspondence
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
        elif self.labels is None:
            weights = np.asarray(model.correspondence_weights, dtype=float)
        else:
            lookup = dict(zip(model.correspondence, model.correspondence_weights))
            weights = np.array([lookup.get(lbl, 1.0) for lbl in labels])
        if weights.shape != (len(labels),):
            raise ValidationError("one weight per correspondence label is required")
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValidationError("weights must be nonnegative with at least one positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.tol_step <= 0 or self.tol_residual <= 0 or self.fd_step <= 0:
            raise ValidationError("tolerances and fd_step must be positive")
        if self.damping < 0:
            raise ValidationError("damping must be >= 0")
        if self.jacobian not in ("fd", "analytic"):
            raise ValidationError("jacobian must be 'fd' or 'analytic'")
        if self.active_joints is None:
            active = np.arange(model.n_dof)
        else:
            names = list(model.joint_names)
            try:
                active = np.array([names.index(n) for n in self.active_joints])
            except ValueError as exc:
                raise ValidationError(f"unknown joint in active_joints: {exc}") from None
        return labels, weights, active


@dataclass
class RetargetResult:
    pose: np.ndarray
    residual: float
    iterations: int
    clamped: bool
    converged: bool
    history: list = field(default_factory=list, repr=False)


def target_points(model, keypoints, labels):
    """Pick ``labels`` out of a keypoint set, synthesizing derived labels
    (e.g. the palm center) from their members when absent."""
    out = []
    for lbl in labels:
        if lbl in keypoints.labels:
            out.append(keypoints.points[keypoints.index(lbl)])
        elif lbl in model.derived:
            members = [keypoints.points[keypoints.index(m)] for m in model.derived[lbl]]
            out.append(np.mean(members, axis=0))
        else:
            raise ValidationError(f"keypoint set is missing {lbl!r}")
    return np.array(out)


def _fd_jacobian(model, q, labels, active, h):
    n = len(active)
    probes = np.repeat(q[None], 2 * n, axis=0)
    probes[np.arange(n), active] += h
    probes[n + np.arange(n), active] -= h
    pts = hm.keypoint_positions(model, probes, labels).reshape(2 * n, -1)
    return ((pts[:n] - pts[n:]) / (2.0 * h)).T


def _safe_start(model, q_init, q_prev_safe):
    if q_prev_safe is not None:
        return hm.check_pose(model, q_prev_safe)
    if hm.within_limits(model, q_init) and hm.collision_free(model, q_init)[0]:
        return q_init
    return model.rest_pose


class _LeastSquares:
    """Weighted keypoint residual plus a collision penalty that is exactly
    zero on the collision-free set (so it cannot move a safe minimizer)."""

    def __init__(self, model, targets, labels, weights, active, config):
        self.model = model
        self.targets = targets
        self.labels = labels
        self.active = active
        self.config = config
        self.sw = np.repeat(np.sqrt(weights), 3)
        self.wsum = weights.sum()
        self.n_kp = 3 * len(labels)
        self.sc = np.sqrt(config.collision_weight)

    def _penalty(self, poses):
        if self.sc == 0:
            return np.zeros((len(poses), 0))
        clear = hm.pair_clearances(self.model, poses)
        return self.sc * np.maximum(0.0, self.model.collision_margin - clear)

    def residual(self, q):
        pred = hm.keypoint_positions(self.model, q[None], self.labels)[0]
        return np.concatenate([self.sw * (pred - self.targets).ravel(), self._penalty(q[None])[0]])

    def jacobian(self, q):
        active, h = self.active, self.config.fd_step
        if self.config.jacobian == "analytic":
            J = hm.keypoint_jacobian(self.model, q, self.labels)[:, active]
        else:
            J = _fd_jacobian(self.model, q, self.labels, active, h)
        J = self.sw[:, None] * J
        if self.sc == 0:
            return J
        n = len(active)
        probes = np.repeat(q[None], 2 * n, axis=0)
        probes[np.arange(n), active] += h
        probes[n + np.arange(n), active] -= h
        pen = self._penalty(probes)
        return np.vstack([J, ((pen[:n] - pen[n:]) / (2.0 * h)).T])

    def rms(self, r):
        """Weighted RMS keypoint distance (meters); ignores the penalty rows."""
        e = r[: self.n_kp]
        return float(np.sqrt(e @ e / self.wsum))

    def done(self, r):
        return self.rms(r) < self.config.tol_residual and not np.any(r[self.n_kp:])

    def solve(self, q):
        """Projected Levenberg-Marquardt from ``q``; returns (q, r, iterations, converged, costs)."""
        model, active, cfg = self.model, self.active, self.config
        lo, hi = model.lower[active], model.upper[active]
        r = self.residual(q)
        cost = r @ r
        lam = cfg.damping
        history = [cost]
        iterations = 0
        for _ in range(cfg.max_iters):
            if self.done(r):
                return q, r, iterations, True, history
            iterations += 1
            J = self.jacobian(q)
            g = J.T @ r
            # joints pinned at a bound whose descent direction points outward
            qa = q[active]
            free = ~(((qa <= lo) & (g > 0)) | ((qa >= hi) & (g < 0)))
            Jf = J[:, free]
            M = Jf.T @ Jf + lam * np.eye(Jf.shape[1])
            try:
                delta = -np.linalg.solve(M, g[free])
            except np.linalg.LinAlgError:
                delta = -np.linalg.lstsq(M, g[free], rcond=None)[0]
            q_new = q.copy()
            q_new[active[free]] += delta
            q_new = hm.clamp_limits(model, q_new)
            step = float(np.max(np.abs(q_new - q)))
            r_new = self.residual(q_new)
            cost_new = r_new @ r_new
            if cost_new < cost:
                q, r, cost = q_new, r_new, cost_new
                history.append(cost)
                lam = lam / 10.0
            else:
                lam = lam * 10.0 if lam > 0 else 1e-3
            if step < cfg.tol_step:
                # accepted step below tolerance, or no descent left from here
                return q, r, iterations, True, history
        return q, r, iterations, self.done(r), history


def retarget_pose(model, human_keypoints, config=None, q_init=None, q_prev_safe=None):
    """Solve for the joint angles whose keypoints best match ``human_keypoints``.

    Parameters
    ----------
    model : KinematicModel
    human_keypoints : KeypointSet
        Targets already expressed in the robot hand-base frame (see
        :func:`normalize_human_frame`). Must contain the correspondence labels
        or the members of derived ones.
    config : RetargetConfig, optional
    q_init : ndarray of shape (22,), optional
        Starting pose; defaults to the rest pose. Pass the previous frame's
        solution when tracking a stream.
    q_prev_safe : ndarray of shape (22,), optional
        Known collision-free pose used as the anchor of the safety clamp.
        Defaults to ``q_init`` when that is safe, else the rest pose.

    Returns
    -------
    RetargetResult
        The pose is always within joint limits and collision-free.

    Notes
    -----
    When the solve from ``q_init`` stalls above ``tol_residual`` it is
    repeated from each pose in ``config.restarts`` (frozen joints keep their
    ``q_init`` values) and the best safe result is kept. Iteration counts
    accumulate across attempts.
    """
    config = config or RetargetConfig()
    labels, weights, active = config.resolve(model)
    q0 = model.rest_pose.copy() if q_init is None else hm.check_pose(model, q_init).copy()
    q0 = hm.clamp_limits(model, q0)
    targets = target_points(model, human_keypoints, labels)
    if not np.all(np.isfinite(targets)):
        raise ValidationError("target keypoints must be finite")
    problem = _LeastSquares(model, targets, labels, weights, active, config)

    q, r, iterations, converged, history = problem.solve(q0)
    if not problem.done(r):
        for name in config.restarts:
            start = q0.copy()
            start[active] = _restart_pose(model, name)[active]
            q2, r2, it2, conv2, _ = problem.solve(start)
            iterations += it2
            if _rank(problem, r2) < _rank(problem, r):
                q, r, converged = q2, r2, conv2
            if problem.done(r):
                break

    clamped = False
    if not hm.collision_free(model, q)[0]:
        q = clamp_to_safe_manifold(model, q, _safe_start(model, q0, q_prev_safe))
        r = problem.residual(q)
        clamped = True
    return RetargetResult(
        pose=q,
        residual=problem.rms(r),
        iterations=iterations,
        clamped=clamped,
        converged=bool(converged),
        history=history,
    )


def _restart_pose(model, name):
    if name == "mid":
        return model.mid_pose
    if name == "rest":
        return model.rest_pose
    if name == "quarter":
        return model.lower + 0.25 * (model.upper - model.lower)
    if name == "three_quarter":
        return model.lower + 0.75 * (model.upper - model.lower)
    raise ValidationError(f"unknown restart pose {name!r}")


def _rank(problem, r):
    # collision-free results first, then by keypoint residual
    return (bool(np.any(r[problem.n_kp:])), problem.rms(r))


def clamp_to_safe_manifold(model, q_star, q_prev_safe, resolution=1e-4):
    """Pull ``q_star`` back toward ``q_prev_safe`` until it is collision-free.

    Returns ``q_star`` unchanged when it is already safe. Otherwise bisects the
    straight joint-space segment ``q_prev_safe -> q_star`` and returns the
    farthest pose found to be safe, bracketed to ``resolution`` radians
    (infinity norm).

    Raises
    ------
    SafetyInvariantError
        If ``q_prev_safe`` itself is in collision or out of limits.
    """
    q_star = hm.check_pose(model, q_star)
    q_safe = hm.check_pose(model, q_prev_safe)
    if not hm.within_limits(model, q_safe) or not hm.collision_free(model, q_safe)[0]:
        raise SafetyInvariantError("q_prev_safe is not a collision-free, in-limits pose")
    q_star = hm.clamp_limits(model, q_star)
    if hm.collision_free(model, q_star)[0]:
        return q_star
    delta = q_star - q_safe
    span = float(np.max(np.abs(delta)))
    margin = model.collision_margin
    lo, hi = 0.0, 1.0
    while (hi - lo) * span > resolution:
        mid = 0.5 * (lo + hi)
        if hm.min_clearance(model, (q_safe + mid * delta)[None])[0] >= margin:
            lo = mid
        else:
            hi = mid
    return q_safe + lo * delta


def normalize_human_frame(raw, model=None):
    """Express raw human keypoints in the robot hand-base frame.

    Translates the wrist to the origin, rotates so the wrist-to-index-CMC
    direction is ``+x`` and the palm normal (pinky-CMC x index-CMC) is ``+z``,
    then scales uniformly so the index-to-pinky CMC distance equals the robot's.
    """
    model = model or hm.load_model()
    needed = (HUMAN_WRIST,) + tuple(model.palm_width_labels)
    missing = [lbl for lbl in needed if lbl not in raw.labels]
    if missing:
        raise ValidationError(f"raw keypoints must include {missing}")
    wrist = raw.points[raw.index(HUMAN_WRIST)]
    index_cmc = raw.points[raw.index(model.palm_width_labels[0])] - wrist
    pinky_cmc = raw.points[raw.index(model.palm_width_labels[1])] - wrist
    normal = np.cross(pinky_cmc, index_cmc)
    scale_ref = np.linalg.norm(pinky_cmc) * np.linalg.norm(index_cmc)
    if scale_ref == 0 or np.linalg.norm(normal) < 1e-9 * scale_ref:
        raise ValidationError("degenerate palm: wrist and CMC keypoints are collinear")
    x = index_cmc / np.linalg.norm(index_cmc)
    z = normal / np.linalg.norm(normal)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    width = np.linalg.norm(index_cmc - pinky_cmc)
    scale = model.palm_width / width
    pts = scale * (raw.points - wrist) @ rot.T
    return hm.KeypointSet(pts, raw.labels)


def robot_keypoints_with_wrist(model, pose):
    """Robot keypoints plus a ``WRIST`` label at the origin, in the human-input layout."""
    kps = hm.fk_keypoints(model, pose)
    return hm.KeypointSet(
        np.vstack([np.zeros((1, 3)), kps.points]), (HUMAN_WRIST,) + kps.labels
    )
