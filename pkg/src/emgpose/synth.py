"""Seeded synthetic recordings driven by a small set of muscle synergies.

Each synergy ``k`` has a smooth activation ``a_k(t)``, a sum of one to five
sinusoids between 0.2 and 2 Hz with amplitudes summing to one. Joint angles
follow ``theta = clamp(theta_mid + S a(t))`` and are then pulled onto the
collision-free set by bisection toward the mid-range pose. EMG channel ``c``
is an activity envelope multiplying a band-limited unit-variance carrier,
plus sensor noise, renormalized to ``[-1, 1]`` per channel. The envelope is
driven by the synergy speeds ``|a_k'(t)|`` (weighted by ``|W_ck|``) and,
unless disabled, by a tonic term that tracks how far each synergy is held
from neutral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import hand_model as hm
from .data import N_CHANNELS, Recording, normalize_emg, timestamps_us
from .exceptions import SafetyInvariantError, ValidationError


@dataclass
class SynthConfig:
    """Generator settings.

    ``synergy_to_pose`` (22 x K) and ``synergy_to_emg`` (8 x K) are drawn
    from the seed when left as ``None``. ``noise_snr`` is the ratio in dB
    between a fully driven carrier (unit envelope) and the sensor noise.
    Drawn pose synergies couple neighbouring fingers (correlation
    ``finger_coupling`` between adjacent long fingers) and move the splay and
    palm-arch joints by ``splay_scale`` of what flexion joints move, which
    keeps most generated frames clear of self-collision.
    ``activation_gain`` scales every activation; 0 gives a motionless hand.
    ``directional`` makes each EMG channel respond to one direction of a
    synergy's motion only (agonist/antagonist style), using the sign of
    ``W_ck``; with the default ``False`` channels respond to speed in both
    directions. ``tonic`` adds a posture-holding drive: channel ``c`` also
    follows ``W_ck+ [a_k]+ + W_ck- [-a_k]+`` (the channels on the side a
    synergy is deflected toward stay active while it is held there). Both
    drives are scaled to unit mean before mixing, so ``tonic`` is the ratio
    of tonic to speed-driven activity; 0 disables it.
    """

    seed: int = 0
    n_synergies: int = 6
    synergy_to_pose: np.ndarray = None
    synergy_to_emg: np.ndarray = None
    carrier_band: tuple = (20.0, 150.0)
    noise_snr: float = 20.0
    duration: float = 60.0
    emg_rate: float = 500.0
    pose_rate: float = 120.0
    pose_scale: float = 0.8
    finger_coupling: float = 0.9
    splay_scale: float = 0.2
    activation_gain: float = 1.0
    envelope_cutoff: float = 6.0
    directional: bool = False
    tonic: float = 1.0
    enforce_collision: bool = True

    def validate(self, n_dof=22):
        K = self.n_synergies
        if K < 1:
            raise ValidationError("n_synergies must be >= 1")
        if self.duration <= 0 or self.emg_rate <= 0 or self.pose_rate <= 0:
            raise ValidationError("duration and rates must be positive")
        lo, hi = self.carrier_band
        if not (0 < lo < hi < self.emg_rate / 2):
            raise ValidationError(f"carrier_band must lie within (0, {self.emg_rate / 2}) Hz")
        if not (np.isfinite(self.tonic) and self.tonic >= 0):
            raise ValidationError("tonic must be a finite, nonnegative ratio")
        if not 0 < self.envelope_cutoff < self.emg_rate / 2:
            raise ValidationError("envelope_cutoff must lie below the Nyquist rate")
        for name, mat, rows in (
            ("synergy_to_pose", self.synergy_to_pose, n_dof),
            ("synergy_to_emg", self.synergy_to_emg, N_CHANNELS),
        ):
            if mat is None:
                continue
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (rows, K) or not np.all(np.isfinite(mat)):
                raise ValidationError(f"{name} must be a finite ({rows}, {K}) matrix")
        return self


class _Activations:
    """Synergy activations and their exact time derivatives."""

    def __init__(self, rng, K, gain):
        self.terms = []
        for _ in range(K):
            m = int(rng.integers(1, 6))
            freq = rng.uniform(0.2, 2.0, size=m)
            phase = rng.uniform(0.0, 2 * np.pi, size=m)
            amp = rng.uniform(0.5, 1.0, size=m)
            self.terms.append((freq, phase, gain * amp / amp.sum()))

    def value(self, t):
        return np.stack(
            [(A[:, None] * np.sin(2 * np.pi * f[:, None] * t + p[:, None])).sum(0) for f, p, A in self.terms]
        )

    def rate(self, t):
        return np.stack(
            [(A[:, None] * 2 * np.pi * f[:, None] * np.cos(2 * np.pi * f[:, None] * t + p[:, None])).sum(0)
             for f, p, A in self.terms]
        )


def draw_pose_synergies(rng, model, K, scale=0.8, coupling=0.9, splay=0.2, independent=0.2):
    """Random ``(n_dof, K)`` synergy-to-pose matrix with finger coupling.

    Each joint follows its finger's shared factor (plus a small independent
    part); long-finger factors are correlated as ``coupling ** |i - j|``.
    """
    fingers = [name.split("_")[0] for name in model.joint_names]
    order = list(dict.fromkeys(fingers))
    fid = np.array([order.index(f) for f in fingers])
    n_f = len(order)
    corr = np.eye(n_f)
    for i in range(1, n_f):
        for j in range(1, n_f):
            corr[i, j] = coupling ** abs(i - j)
    shared = np.linalg.cholesky(corr) @ rng.normal(size=(n_f, K))
    own = rng.normal(size=(model.n_dof, K))
    S = np.sqrt(1 - independent**2) * shared[fid] + independent * own
    span = model.upper - model.lower
    S *= (scale * span / np.sqrt(K))[:, None]
    minor = np.array(
        ["_AA" in n or (n.endswith("CMC_FE") and not n.startswith(order[0])) for n in model.joint_names]
    )
    S[minor] *= splay
    return S


def _safe_trajectory(model, poses, resolution=1e-4):
    """Pull colliding frames toward the mid-range pose until they clear.

    Same bisection as :func:`~emgpose.retarget.clamp_to_safe_manifold` with
    the mid pose as the safe anchor, run on all colliding frames at once.
    """
    anchor = model.mid_pose
    if not hm.collision_free(model, anchor)[0]:
        raise SafetyInvariantError("mid-range pose of the model is not collision-free")
    out = poses.copy()
    bad = np.flatnonzero(hm.min_clearance(model, poses.T) < model.collision_margin)
    if len(bad) == 0:
        return out
    delta = poses[:, bad].T - anchor
    span = np.abs(delta).max(axis=1)
    lo = np.zeros(len(bad))
    hi = np.ones(len(bad))
    while np.any((hi - lo) * span > resolution):
        mid = 0.5 * (lo + hi)
        ok = hm.min_clearance(model, anchor + mid[:, None] * delta) >= model.collision_margin
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    out[:, bad] = (anchor + lo[:, None] * delta).T
    return out


def _unit_mean(x):
    m = np.abs(x).mean()
    return x / m if m > 0 else x


def gen_synth(cfg=None, model=None):
    """Generate a synthetic :class:`~emgpose.data.Recording` from ``cfg``.

    Output is fully determined by ``cfg`` (including its seed) and always
    passes ``Recording.validate(model)``; every pose frame is collision-free.
    """
    cfg = cfg or SynthConfig()
    model = model or hm.load_model()
    cfg.validate(model.n_dof)
    rng = np.random.default_rng(cfg.seed)
    K = cfg.n_synergies

    acts = _Activations(rng, K, cfg.activation_gain)
    if cfg.synergy_to_pose is None:
        S = draw_pose_synergies(rng, model, K, cfg.pose_scale, cfg.finger_coupling, cfg.splay_scale)
    else:
        S = np.asarray(cfg.synergy_to_pose, dtype=float)
    if cfg.synergy_to_emg is None:
        W = rng.normal(size=(N_CHANNELS, K))
    else:
        W = np.asarray(cfg.synergy_to_emg, dtype=float)

    n_e = int(round(cfg.duration * cfg.emg_rate))
    emg_t = timestamps_us(n_e, cfg.emg_rate)
    # enough pose frames to cover the last EMG stamp
    n_p = int(np.ceil(emg_t[-1] * 1e-6 * cfg.pose_rate)) + 1
    pose_t = timestamps_us(n_p, cfg.pose_rate)

    poses = model.mid_pose[:, None] + S @ acts.value(pose_t * 1e-6)
    poses = np.clip(poses, model.lower[:, None], model.upper[:, None])
    if cfg.enforce_collision:
        poses = _safe_trajectory(model, poses)

    rates = acts.rate(emg_t * 1e-6)
    pos = np.where(W > 0, W, 0.0)
    neg = np.where(W < 0, -W, 0.0)
    if cfg.directional:
        drive = pos @ np.maximum(0.0, rates) + neg @ np.maximum(0.0, -rates)
    else:
        drive = np.abs(W) @ np.abs(rates)
    drive = _unit_mean(drive)
    if cfg.tonic:
        level = acts.value(emg_t * 1e-6)
        drive = drive + cfg.tonic * _unit_mean(pos @ np.maximum(0.0, level) + neg @ np.maximum(0.0, -level))
    sos_env = signal.butter(2, cfg.envelope_cutoff, btype="low", fs=cfg.emg_rate, output="sos")
    envelope = np.maximum(0.0, signal.sosfiltfilt(sos_env, drive, axis=1))

    sos_band = signal.butter(4, cfg.carrier_band, btype="band", fs=cfg.emg_rate, output="sos")
    carrier = signal.sosfiltfilt(sos_band, rng.standard_normal((N_CHANNELS, n_e)), axis=1)
    carrier /= carrier.std(axis=1, keepdims=True)
    noise = 10.0 ** (-cfg.noise_snr / 20.0) * rng.standard_normal((N_CHANNELS, n_e))
    emg = normalize_emg(envelope * carrier + noise)

    meta = {
        "generator": "synergy",
        "seed": int(cfg.seed),
        "subject": "synthetic",
        "session": f"seed-{cfg.seed}",
        "task": "synergy",
        "n_synergies": K,
    }
    return Recording(emg, emg_t, poses, pose_t, cfg.emg_rate, cfg.pose_rate, meta)
