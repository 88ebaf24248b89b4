import json

import numpy as np
import pytest

from emgpose import net
from emgpose.data import synchronize
from emgpose.evaluation import (
    DISCLOSURE,
    anchored_predictions,
    canonical_joint,
    evaluate_holdout,
    export_joint_csv,
    mae_report,
    read_joint_csv,
)
from emgpose.exceptions import ValidationError
from emgpose.synth import SynthConfig, gen_synth


def test_perfect_prediction_has_zero_error(model):
    gt = np.random.default_rng(0).uniform(size=(22, 50))
    r = mae_report(gt, gt.copy(), model.joint_names)
    assert r.mae == 0.0 and all(v == 0.0 for v in r.per_joint_mae.values())


def test_constant_prediction_matches_hand_computation(model):
    rng = np.random.default_rng(1)
    gt = rng.uniform(-1, 1, size=(22, 40))
    pred = np.repeat(model.mid_pose[:, None], 40, axis=1)
    expect = sum(abs(pred[i, t] - gt[i, t]) for i in range(22) for t in range(40)) / (22 * 40)
    r = mae_report(pred, gt, model.joint_names)
    assert r.mae == pytest.approx(expect, rel=1e-12)
    # equal frame counts per joint, so the per-joint mean is the overall mean
    assert np.mean(list(r.per_joint_mae.values())) == pytest.approx(r.mae, rel=1e-12)
    assert r.frames == 40


def test_per_task_breakdown(model):
    gt = np.zeros((22, 4))
    pred = np.zeros((22, 4))
    pred[:, 2:] = 1.0
    r = mae_report(pred, gt, model.joint_names, tasks=["grip", "grip", "pinch", "pinch"])
    assert r.per_task_mae == {"grip": 0.0, "pinch": 1.0}
    with pytest.raises(ValidationError):
        mae_report(pred, gt, model.joint_names, tasks=["grip"])


@pytest.mark.parametrize("shapes", [((22, 5), (22, 6)), ((21, 5), (21, 5)), ((22, 0), (22, 0))])
def test_mae_rejects_bad_shapes(model, shapes):
    a, b = shapes
    with pytest.raises(ValidationError):
        mae_report(np.zeros(a), np.zeros(b), model.joint_names)


def test_report_is_json_with_disclosure(model):
    r = mae_report(np.zeros((22, 3)), np.ones((22, 3)), model.joint_names, protocol="anchored")
    d = json.loads(json.dumps(r.to_dict()))
    assert d["mae"] == 1.0 and d["protocol"] == "anchored"
    assert d["disclosure"] == json.loads(json.dumps(DISCLOSURE))
    assert d["disclosure"]["not_reproduced"] and d["disclosure"]["substitutes"]


def test_csv_round_trip_is_exact(model, tmp_path):
    rng = np.random.default_rng(2)
    gt, pred = rng.normal(size=(22, 30)), rng.normal(size=(22, 30))
    path = export_joint_csv(pred, gt, ["THUMB CMC FE", "index_pip_fe"], tmp_path / "j.csv", model.joint_names)
    cols = read_joint_csv(path)
    assert list(cols) == ["frame", "THUMB_CMC_FE_gt", "THUMB_CMC_FE_pred", "INDEX_PIP_FE_gt", "INDEX_PIP_FE_pred"]
    i = model.joint_names.index("INDEX_PIP_FE")
    assert np.array_equal(cols["INDEX_PIP_FE_pred"], pred[i]) and np.array_equal(cols["INDEX_PIP_FE_gt"], gt[i])
    assert np.array_equal(cols["frame"], np.arange(30))


def test_csv_with_no_frames_is_header_only(model, tmp_path):
    path = export_joint_csv(np.zeros((22, 0)), np.zeros((22, 0)), ["INDEX_PIP_FE"], tmp_path / "e.csv")
    assert path.read_text() == "frame,INDEX_PIP_FE_gt,INDEX_PIP_FE_pred\n"
    assert read_joint_csv(path)["frame"].size == 0


def test_unknown_joint_lists_valid_labels(model, tmp_path):
    with pytest.raises(ValidationError, match="INDEX_PIP_FE"):
        export_joint_csv(np.zeros((22, 2)), np.zeros((22, 2)), ["PINKY_TIP_FE"], tmp_path / "x.csv")
    assert canonical_joint(" thumb ip fe ", model.joint_names) == "THUMB_IP_FE"


def test_anchored_protocol_starts_each_window_from_truth():
    p = net.init_params(net.ModelConfig(chunk_len=32, lstm_hidden=8, mlp_hidden=8, ff_hidden=8), seed=0)
    rng = np.random.default_rng(3)
    emg, poses = rng.normal(size=(8, 100)), rng.uniform(-0.1, 0.1, size=(22, 100))
    pred, covered = anchored_predictions(p, emg, poses, 32, anchor=poses[:, 0])
    assert covered == 96 and pred.shape == (22, 96)
    for k in range(3):
        anchor = poses[:, 0] if k == 0 else poses[:, 32 * k - 1]
        state = net.DecoderState.fresh(p)
        state.last_pose = anchor.copy()
        chunk, _ = net.model_forward(p, emg[:, 32 * k : 32 * k + 32], state)
        assert np.allclose(pred[:, 32 * k : 32 * k + 32], chunk, atol=1e-12)


def test_holdout_reports_baselines(model):
    rec = synchronize(gen_synth(SynthConfig(seed=1, duration=4.0)))
    p = net.init_params(net.ModelConfig(chunk_len=64, lstm_hidden=8, mlp_hidden=8, ff_hidden=8), seed=0)
    r = evaluate_holdout(p, rec, model.joint_names, execute=16)
    assert r.frames == 384 and 0 < r.mae < 1
    assert {"baseline_mid_pose_mae", "baseline_hold_anchor_mae", "stream_mae"} <= set(r.extras)
    assert r.extras["heldout_samples"] == 400
