import json
import struct

import numpy as np
import pytest

from emgpose import data
from emgpose.data import Recording
from emgpose.exceptions import FormatError, ValidationError


def small_recording(n_e=50, n_p=14, seed=0, meta=None):
    rng = np.random.default_rng(seed)
    emg = rng.uniform(-1, 1, size=(8, n_e))
    poses = rng.uniform(-0.2, 0.2, size=(22, n_p))
    return Recording(
        emg, data.timestamps_us(n_e, 500), poses, data.timestamps_us(n_p, 120), 500.0, 120.0,
        meta or {"subject": "s1", "task": "t"},
    )


def parse_eprc(buf):
    """Reader written from the documented byte table alone."""
    out = {}
    out["magic"] = buf[0:4]
    (out["version"],) = struct.unpack("<I", buf[4:8])
    out["emg_rate"], out["pose_rate"] = struct.unpack("<dd", buf[8:24])
    n_ch, n_dof = struct.unpack("<II", buf[24:32])
    n_e, n_p = struct.unpack("<QQ", buf[32:48])
    (meta_len,) = struct.unpack("<I", buf[48:52])
    pos = 52
    out["meta"] = json.loads(buf[pos : pos + meta_len].decode())
    pos += meta_len
    out["emg_t"] = [struct.unpack("<q", buf[pos + 8 * i : pos + 8 * i + 8])[0] for i in range(n_e)]
    pos += 8 * n_e
    out["emg"] = [
        [struct.unpack("<d", buf[pos + 8 * (c * n_e + i) : pos + 8 * (c * n_e + i) + 8])[0] for i in range(n_e)]
        for c in range(n_ch)
    ]
    pos += 8 * n_ch * n_e
    out["pose_t"] = [struct.unpack("<q", buf[pos + 8 * i : pos + 8 * i + 8])[0] for i in range(n_p)]
    pos += 8 * n_p
    out["poses"] = [
        [struct.unpack("<d", buf[pos + 8 * (d * n_p + i) : pos + 8 * (d * n_p + i) + 8])[0] for i in range(n_p)]
        for d in range(n_dof)
    ]
    pos += 8 * n_dof * n_p
    out["end"] = pos
    return out


# synchronize


def test_synchronize_linear_ramp():
    # a pose ramp sampled at 120 Hz must interpolate exactly onto 500 Hz stamps
    n_p = 13
    t_p = data.timestamps_us(n_p, 120)
    slope = np.linspace(-1, 1, 22)[:, None]
    poses = slope * t_p[None] * 1e-6
    rec = Recording(np.zeros((8, 50)), data.timestamps_us(50, 500), poses, t_p)
    out = data.synchronize(rec)
    assert out.synchronized and out.pose_rate == 500.0
    np.testing.assert_allclose(out.poses, slope * out.emg_t_us[None] * 1e-6, atol=1e-12)


def test_synchronize_exact_at_pose_stamps():
    # pose stamps that coincide with EMG stamps are reproduced exactly
    t = data.timestamps_us(40, 500)
    rng = np.random.default_rng(1)
    poses = rng.normal(size=(22, 10))
    rec = Recording(np.zeros((8, 40)), t, poses, t[::4][:10])
    out = data.synchronize(rec)
    for k in range(10):
        col = np.flatnonzero(out.emg_t_us == t[4 * k])[0]
        assert np.array_equal(out.poses[:, col], poses[:, k])


def test_synchronize_drops_uncovered_samples():
    rec = small_recording(n_e=60, n_p=14)  # pose span ends at 108333 us
    out = data.synchronize(rec)
    assert out.emg_t_us[-1] <= rec.pose_t_us[-1]
    assert out.n_emg + out.meta["sync_truncated"] == 60
    assert out.meta["sync_truncated"] > 0


def test_synchronize_idempotent():
    once = data.synchronize(small_recording())
    twice = data.synchronize(once)
    assert np.array_equal(once.poses, twice.poses)
    assert np.array_equal(once.emg, twice.emg)
    assert twice.meta["sync_truncated"] == once.meta["sync_truncated"]


# windows


def test_window_count_exhaustive():
    for n in range(1, 51):
        for w in range(1, n + 1):
            for e in range(1, n + 1):
                expected = len(range(0, n - w + 1, e))
                assert data.window_count(n, w, e) == expected


def test_windows_1000_400_20():
    emg = np.zeros((8, 1000))
    poses = np.tile(np.arange(1000.0), (22, 1))
    wins = data.window_arrays(emg, poses, 400, 20, np.full(22, -1.0))
    assert len(wins) == 31
    assert wins[-1].start == 600


def test_single_window_boundary():
    wins = data.window_arrays(np.zeros((8, 400)), np.zeros((22, 400)), 400, 1, np.zeros(22))
    assert len(wins) == 1


def test_window_overlap_and_theta0():
    rng = np.random.default_rng(2)
    emg = rng.uniform(-1, 1, (8, 300))
    poses = rng.normal(size=(22, 300))
    rest = np.full(22, 9.0)
    wins = data.window_arrays(emg, poses, 100, 30, rest)
    assert np.array_equal(wins[0].theta0, rest)
    for a, b in zip(wins, wins[1:]):
        assert np.array_equal(a.emg[:, 30:], b.emg[:, :70])
        assert np.array_equal(a.theta_gt[:, 30:], b.theta_gt[:, :70])
        assert np.array_equal(b.theta0, poses[:, b.start - 1])


def test_window_longer_than_recording():
    with pytest.raises(ValidationError):
        data.window_arrays(np.zeros((8, 10)), np.zeros((22, 10)), 11, 1, np.zeros(22))


def test_make_windows_requires_sync():
    with pytest.raises(ValidationError):
        data.make_windows(small_recording(), 10, 5)


def test_make_windows_defaults_to_mid_pose(model):
    rec = data.synchronize(small_recording())
    wins = data.make_windows(rec, 10, 5)
    assert np.array_equal(wins[0].theta0, model.mid_pose)


# velocity labels


def test_velocity_constant_is_zero():
    theta0 = np.linspace(0, 1, 22)
    assert not np.any(data.velocity_labels(np.tile(theta0[:, None], (1, 30)), theta0))


def test_velocity_ramp():
    theta0 = np.random.default_rng(3).normal(size=22)
    theta = theta0[:, None] + 0.01 * np.arange(1, 41)[None]
    np.testing.assert_allclose(data.velocity_labels(theta, theta0), 0.01, atol=1e-12)


def test_velocity_inverse_of_cumsum():
    rng = np.random.default_rng(4)
    theta0 = rng.normal(size=(3, 22))
    theta = rng.normal(size=(3, 22, 50))
    v = data.velocity_labels(theta, theta0)
    np.testing.assert_allclose(theta0[..., None] + np.cumsum(v, axis=-1), theta, atol=1e-12)


# validation


def test_validate_rejects_out_of_range_emg():
    rec = small_recording()
    rec.emg[0, 0] = 1.5
    with pytest.raises(ValidationError):
        rec.validate()


def test_validate_rejects_non_monotone_time():
    rec = small_recording()
    rec.emg_t_us[5] = rec.emg_t_us[4]
    with pytest.raises(ValidationError):
        rec.validate()


def test_validate_rejects_pose_outside_limits(model):
    rec = small_recording()
    rec.poses[0, 0] = model.upper[0] + 1.0
    with pytest.raises(ValidationError):
        rec.validate(model)


def test_normalize_emg_range():
    raw = np.random.default_rng(5).normal(scale=40, size=(8, 100))
    out = data.normalize_emg(raw)
    assert np.allclose(np.abs(out).max(axis=1), 1.0)
    z = data.normalize_emg(raw, zscore=True)
    assert np.abs(z).max() <= 1.0


# binary container


def test_eprc_round_trip(tmp_path):
    rec = small_recording()
    path = data.save_recording(rec, tmp_path / "a.eprc")
    back = data.load_recording(path)
    for name in ("emg", "emg_t_us", "poses", "pose_t_us"):
        assert np.array_equal(getattr(back, name), getattr(rec, name))
    assert back.meta == rec.meta and back.emg_rate == 500.0 and back.pose_rate == 120.0
    data.save_recording(back, tmp_path / "b.eprc")
    assert (tmp_path / "a.eprc").read_bytes() == (tmp_path / "b.eprc").read_bytes()


def test_eprc_matches_documented_layout():
    rec = small_recording(n_e=7, n_p=3)
    buf = data.recording_to_bytes(rec)
    parsed = parse_eprc(buf)
    assert parsed["magic"] == b"EPRC" and parsed["version"] == 1
    assert parsed["emg_rate"] == 500.0 and parsed["pose_rate"] == 120.0
    assert parsed["meta"] == rec.meta
    assert parsed["emg_t"] == rec.emg_t_us.tolist()
    assert parsed["emg"] == rec.emg.tolist()
    assert parsed["pose_t"] == rec.pose_t_us.tolist()
    assert parsed["poses"] == rec.poses.tolist()
    assert parsed["end"] == len(buf)


def test_eprc_bad_magic():
    buf = bytearray(data.recording_to_bytes(small_recording()))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError) as err:
        data.recording_from_bytes(bytes(buf))
    assert err.value.offset == 0 and err.value.section == "header"


def test_eprc_bad_version():
    buf = bytearray(data.recording_to_bytes(small_recording()))
    buf[4:8] = struct.pack("<I", 7)
    with pytest.raises(FormatError) as err:
        data.recording_from_bytes(bytes(buf))
    assert err.value.offset == 4


@pytest.mark.parametrize(
    "cut, section",
    [(10, "header"), (52 + 3, "meta"), (-1, "poses")],
)
def test_eprc_truncation_names_section(cut, section):
    buf = data.recording_to_bytes(small_recording())
    with pytest.raises(FormatError) as err:
        data.recording_from_bytes(buf[:cut])
    assert err.value.section == section
    assert section in str(err.value)


def test_eprc_truncation_every_section():
    rec = small_recording(n_e=5, n_p=2)
    buf = data.recording_to_bytes(rec)
    meta_len = len(json.dumps(rec.meta, sort_keys=True, separators=(",", ":")))
    starts = {
        "meta": 52,
        "emg_timestamps": 52 + meta_len,
        "emg": 52 + meta_len + 40,
        "pose_timestamps": 52 + meta_len + 40 + 320,
        "poses": 52 + meta_len + 40 + 320 + 16,
    }
    for section, start in starts.items():
        with pytest.raises(FormatError) as err:
            data.recording_from_bytes(buf[: start + 1])
        assert err.value.section == section
        assert err.value.offset == start


def test_eprc_trailing_bytes():
    buf = data.recording_to_bytes(small_recording()) + b"\0"
    with pytest.raises(FormatError) as err:
        data.recording_from_bytes(buf)
    assert err.value.section == "trailer"


# JSONL


def test_jsonl_round_trip(tmp_path):
    rec = small_recording()
    path = data.save_recording(rec, tmp_path / "r.jsonl")
    back = data.load_recording(path)
    for name in ("emg", "emg_t_us", "poses", "pose_t_us"):
        assert np.array_equal(getattr(back, name), getattr(rec, name))
    assert back.meta == rec.meta
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])["format"] == "emgpose-rec/1"
    first = json.loads(lines[1])
    assert first["t_us"] == 0 and len(first["emg"]) == 8 and len(first["pose"]) == 22


def test_jsonl_bad_line_reports_line_number(tmp_path):
    path = data.save_recording(small_recording(), tmp_path / "r.jsonl")
    lines = path.read_text().splitlines()
    lines[3] = "{not json"
    path.write_text("\n".join(lines))
    with pytest.raises(FormatError) as err:
        data.load_recording(path)
    assert err.value.offset == 4


def test_pose_jsonl_round_trip(tmp_path, model):
    poses = np.random.default_rng(6).normal(size=(22, 5))
    data.write_pose_jsonl(tmp_path / "p.jsonl", poses, model.joint_names, indices=[380, 381, 382, 383, 384],
                          extras=[{"residual": 0.1 * i} for i in range(5)])
    idx, back, records = data.read_pose_jsonl(tmp_path / "p.jsonl")
    assert idx.tolist() == [380, 381, 382, 383, 384]
    assert np.array_equal(back, poses)
    assert records[2]["residual"] == 0.2


def test_keypoint_jsonl_round_trip(tmp_path):
    frames = np.random.default_rng(7).normal(size=(4, 3, 3))
    data.write_keypoint_jsonl(tmp_path / "k.jsonl", frames, ("WRIST", "INDEX_CMC", "PINKY_CMC"))
    labels, normalized, t_us, back = data.read_keypoint_jsonl(tmp_path / "k.jsonl")
    assert labels == ("WRIST", "INDEX_CMC", "PINKY_CMC") and not normalized
    assert t_us.tolist() == [0, 1, 2, 3]
    assert np.array_equal(back, frames)


def test_keypoint_jsonl_wrong_point_count(tmp_path):
    path = tmp_path / "k.jsonl"
    path.write_text(
        json.dumps({"format": "emgpose-keypoints/1", "labels": ["A", "B"]}) + "\n"
        + json.dumps({"t_us": 0, "points": [[0, 0, 0]]}) + "\n"
    )
    with pytest.raises(FormatError) as err:
        data.read_keypoint_jsonl(path)
    assert err.value.offset == 2
