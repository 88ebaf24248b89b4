import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from emgpose import hand_model as hm
from emgpose import retarget as rt
from emgpose.exceptions import SafetyInvariantError, ValidationError

from conftest import random_safe_poses


def targets_for(model, q, labels=None):
    labels = labels or model.correspondence
    pts = hm.keypoint_positions(model, q[None], labels)[0]
    return hm.KeypointSet(pts, labels)


def test_default_correspondence_and_weights(model):
    assert set(model.correspondence) == {"THUMB_TIP", "INDEX_TIP", "MIDDLE_TIP", "RING_TIP", "PINKY_TIP", "PALM_CENTER"}
    w = dict(zip(model.correspondence, model.correspondence_weights))
    assert w["PALM_CENTER"] == 0.5
    assert all(w[k] == 1.0 for k in w if k.endswith("_TIP"))


def test_round_trip_recovers_pose(model):
    q_true = random_safe_poses(model, 1, seed=3)[0]
    res = rt.retarget_pose(model, targets_for(model, q_true), q_init=model.rest_pose)
    assert res.residual < 1e-4
    assert hm.within_limits(model, res.pose) and hm.collision_free(model, res.pose)[0]


def test_round_trip_full_keypoint_set_recovers_angles(model):
    # with every keypoint as a target the chain has no null space left
    q_true = random_safe_poses(model, 1, seed=3)[0]
    labels = model.keypoint_labels
    cfg = rt.RetargetConfig(labels=labels, weights=np.ones(len(labels)))
    res = rt.retarget_pose(model, targets_for(model, q_true, labels), cfg, q_init=model.rest_pose)
    assert res.residual < 1e-4
    assert np.max(np.abs(res.pose - q_true)) < 1e-2


def test_rest_targets_fixed_point(model):
    res = rt.retarget_pose(model, targets_for(model, model.rest_pose), q_init=model.rest_pose)
    assert res.converged
    assert res.iterations <= 2
    assert res.residual < 1e-9
    assert not res.clamped


def test_targets_may_include_extra_labels(model):
    # a full 35-point set supplies the palm center through its members
    kps = hm.fk_keypoints(model, model.rest_pose)
    res = rt.retarget_pose(model, kps, q_init=model.rest_pose)
    assert res.residual < 1e-9


def test_missing_target_label(model):
    kps = targets_for(model, model.rest_pose, ("THUMB_TIP",))
    with pytest.raises(ValidationError):
        rt.retarget_pose(model, kps)


def test_non_finite_q_init(model):
    q = model.rest_pose.copy()
    q[0] = np.nan
    with pytest.raises(ValidationError):
        rt.retarget_pose(model, targets_for(model, model.rest_pose), q_init=q)


@pytest.mark.parametrize(
    "kwargs",
    [dict(max_iters=0), dict(tol_step=0.0), dict(tol_residual=-1.0), dict(damping=-1e-3), dict(weights=(0,) * 6)],
)
def test_config_invariants(model, kwargs):
    with pytest.raises(ValidationError):
        rt.RetargetConfig(**kwargs).resolve(model)


def _grid_objective(model, q_base, j1, j2, grid1, grid2, target):
    Q = np.repeat(q_base[None], len(grid1) * len(grid2), axis=0)
    g1, g2 = np.meshgrid(grid1, grid2, indexing="ij")
    Q[:, j1] = g1.ravel()
    Q[:, j2] = g2.ravel()
    tip = hm.keypoint_positions(model, Q, ("INDEX_TIP",))[:, 0]
    return ((tip - target) ** 2).sum(axis=1).reshape(len(grid1), len(grid2))


@pytest.mark.parametrize("offset", [np.zeros(3), np.array([0.0, 0.012, 0.0])])
def test_two_dof_matches_grid_search(model, offset):
    names = model.joint_names
    j1, j2 = names.index("INDEX_MCP_FE"), names.index("INDEX_PIP_FE")
    q_true = model.rest_pose.copy()
    q_true[j1], q_true[j2] = 0.6, 0.8
    # the second case moves the target sideways out of the finger's plane,
    # so the grid minimum is not a zero-residual point
    target = hm.keypoint_positions(model, q_true[None], ("INDEX_TIP",))[0, 0] + offset
    cfg = rt.RetargetConfig(
        labels=("INDEX_TIP",), weights=(1.0,), active_joints=("INDEX_MCP_FE", "INDEX_PIP_FE"),
        collision_weight=0.0, max_iters=200, tol_step=1e-10, tol_residual=1e-12,
    )
    res = rt.retarget_pose(model, hm.KeypointSet(target[None], ("INDEX_TIP",)), cfg, q_init=model.rest_pose)
    grid1 = np.linspace(model.lower[j1], model.upper[j1], 500)
    grid2 = np.linspace(model.lower[j2], model.upper[j2], 500)
    obj = _grid_objective(model, model.rest_pose, j1, j2, grid1, grid2, target)
    i1, i2 = np.unravel_index(obj.argmin(), obj.shape)
    step1, step2 = grid1[1] - grid1[0], grid2[1] - grid2[0]
    assert abs(res.pose[j1] - grid1[i1]) <= step1
    assert abs(res.pose[j2] - grid2[i2]) <= step2
    # and the solver's objective is no worse than the best grid point
    tip = hm.keypoint_positions(model, res.pose[None], ("INDEX_TIP",))[0, 0]
    assert ((tip - target) ** 2).sum() <= obj.min() + 1e-12
    # frozen joints stay where q_init put them
    others = np.setdiff1d(np.arange(22), [j1, j2])
    assert np.array_equal(res.pose[others], model.rest_pose[others])


def test_monotone_descent(model):
    rng = np.random.default_rng(31)
    for q_true in random_safe_poses(model, 5, seed=31):
        kps = targets_for(model, q_true)
        kps = hm.KeypointSet(kps.points + rng.normal(scale=0.003, size=kps.points.shape), kps.labels)
        res = rt.retarget_pose(model, kps, q_init=model.rest_pose)
        assert np.all(np.diff(res.history) <= 0)


def test_warm_start_needs_fewer_iterations(model):
    poses = random_safe_poses(model, 1, seed=40)
    q_true = poses[0]
    near = q_true + 0.02
    near = hm.clamp_limits(model, near)
    cold = rt.retarget_pose(model, targets_for(model, q_true), q_init=model.rest_pose)
    warm = rt.retarget_pose(model, targets_for(model, q_true), q_init=near)
    assert warm.iterations <= cold.iterations


def test_analytic_and_fd_jacobians_agree(model):
    q_true = random_safe_poses(model, 1, seed=44)[0]
    kps = targets_for(model, q_true)
    a = rt.retarget_pose(model, kps, rt.RetargetConfig(jacobian="analytic"), q_init=model.rest_pose)
    b = rt.retarget_pose(model, kps, rt.RetargetConfig(jacobian="fd"), q_init=model.rest_pose)
    assert a.residual < 1e-4 and b.residual < 1e-4


def test_weight_scaling_bit_identical(model):
    q_true = random_safe_poses(model, 1, seed=45)[0]
    labels = model.keypoint_labels
    kps = targets_for(model, q_true, labels)
    base = dict(labels=labels, damping=0.0, collision_weight=0.0, jacobian="analytic")
    a = rt.retarget_pose(model, kps, rt.RetargetConfig(weights=np.ones(35), **base), q_init=model.mid_pose)
    b = rt.retarget_pose(model, kps, rt.RetargetConfig(weights=np.full(35, 4.0), **base), q_init=model.mid_pose)
    assert np.array_equal(a.pose, b.pose)
    assert a.iterations == b.iterations


def test_results_always_safe_on_random_targets(model):
    rng = np.random.default_rng(50)
    cfg = rt.RetargetConfig(max_iters=8, restarts=())
    q_prev = model.rest_pose
    for _ in range(1000):
        # raw random poses (often colliding) plus noise: many targets are unreachable
        q = rng.uniform(model.lower, model.upper)
        kps = targets_for(model, q)
        kps = hm.KeypointSet(kps.points + rng.normal(scale=0.005, size=kps.points.shape), kps.labels)
        res = rt.retarget_pose(model, kps, cfg, q_init=q_prev, q_prev_safe=q_prev)
        assert hm.within_limits(model, res.pose)
        assert hm.collision_free(model, res.pose)[0]
        assert res.residual >= 0
        q_prev = res.pose


# clamp_to_safe_manifold


def colliding_poses(model, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        q = rng.uniform(model.lower, model.upper)
        if not hm.collision_free(model, q)[0]:
            out.append(q)
    return out


def test_clamp_identity_when_safe(model):
    q = random_safe_poses(model, 1, seed=60)[0]
    assert np.array_equal(rt.clamp_to_safe_manifold(model, q, model.rest_pose), q)


def test_clamp_degenerate_segment(model):
    q = random_safe_poses(model, 1, seed=61)[0]
    assert np.array_equal(rt.clamp_to_safe_manifold(model, q, q), q)


def test_clamp_boundary_property(model):
    res = 1e-4
    for q_star in colliding_poses(model, 40, seed=62):
        out = rt.clamp_to_safe_manifold(model, q_star, model.rest_pose, resolution=res)
        assert hm.collision_free(model, out)[0]
        delta = q_star - model.rest_pose
        t = (out - model.rest_pose) / np.where(delta != 0, delta, 1.0)
        t = t[delta != 0]
        assert np.ptp(t) < 1e-9 and 0 <= t[0] < 1
        np.testing.assert_allclose(out, model.rest_pose + t[0] * delta, atol=1e-12)
        direction = delta / np.max(np.abs(delta))
        beyond = out + res * direction
        assert hm.min_clearance(model, beyond[None])[0] < model.collision_margin


def test_clamp_idempotent(model):
    for q_star in colliding_poses(model, 5, seed=63):
        once = rt.clamp_to_safe_manifold(model, q_star, model.rest_pose)
        assert np.array_equal(rt.clamp_to_safe_manifold(model, once, model.rest_pose), once)


def test_clamp_rejects_unsafe_anchor(model):
    bad = colliding_poses(model, 1, seed=64)[0]
    with pytest.raises(SafetyInvariantError):
        rt.clamp_to_safe_manifold(model, model.rest_pose, bad)


# normalize_human_frame


def test_normalize_idempotent_on_robot_frame(model):
    q = random_safe_poses(model, 1, seed=70)[0]
    kps = rt.robot_keypoints_with_wrist(model, q)
    out = rt.normalize_human_frame(kps, model)
    np.testing.assert_allclose(out.points, kps.points, atol=1e-12)


def _human_like(model, seed):
    q = random_safe_poses(model, 1, seed=seed)[0]
    return rt.robot_keypoints_with_wrist(model, q)


def test_normalize_rigid_invariance(model):
    kps = _human_like(model, 71)
    rot = Rotation.random(random_state=5).as_matrix()
    moved = hm.KeypointSet(kps.points @ rot.T + np.array([0.3, -0.1, 1.2]), kps.labels)
    a = rt.normalize_human_frame(kps, model).points
    b = rt.normalize_human_frame(moved, model).points
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_normalize_scale_invariance(model):
    kps = _human_like(model, 72)
    scaled = hm.KeypointSet(1.3 * kps.points, kps.labels)
    np.testing.assert_allclose(
        rt.normalize_human_frame(scaled, model).points, rt.normalize_human_frame(kps, model).points, atol=1e-9
    )


def test_normalize_degenerate_palm(model):
    pts = np.array([[0, 0, 0], [0.02, 0, 0], [0.04, 0, 0]], dtype=float)
    kps = hm.KeypointSet(pts, ("WRIST", "INDEX_CMC", "PINKY_CMC"))
    with pytest.raises(ValidationError):
        rt.normalize_human_frame(kps, model)


def test_normalize_missing_wrist(model):
    kps = hm.fk_keypoints(model, model.rest_pose)
    with pytest.raises(ValidationError):
        rt.normalize_human_frame(kps, model)


def test_normalized_human_hand_retargets(model):
    # a larger, rotated "human" hand is brought into the robot frame and solved
    q_true = random_safe_poses(model, 1, seed=73)[0]
    kps = rt.robot_keypoints_with_wrist(model, q_true)
    rot = Rotation.random(random_state=9).as_matrix()
    human = hm.KeypointSet(1.15 * kps.points @ rot.T + 0.5, kps.labels)
    res = rt.retarget_pose(model, rt.normalize_human_frame(human, model), q_init=model.rest_pose)
    assert res.residual < 1e-4
