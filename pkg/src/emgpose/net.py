"""EMG2Pose network in plain numpy with hand-written reverse-mode gradients.

Layout (per sample, ``T`` divisible by 4)::

    emg (8, T)
      -> Conv1d(8->16, k=5, stride 2) -> ReLU -> LayerNorm     (16, T/2)
      -> Conv1d(16->32, k=5, stride 2) -> ReLU -> LayerNorm    (32, T/4)
      -> TDS stage x2                                          (32, T/4)
      -> linear resample to T                                  (32, T)
      -> LSTM over time, fed [feature_t, theta_{t-1} - theta0]  (pose feedback optional)
      -> MLP -> joint velocity v_t                             (22, T)
      -> theta_t = clamp(theta_{t-1} + v_t)                    (22, T)

A TDS stage views the 32 channels as ``groups x width``; its time
convolution mixes groups with a kernel shared across the width axis (same
padding), followed by ReLU, a residual add and LayerNorm over channels. A
two-layer feedforward block with ReLU, residual and LayerNorm follows.

LayerNorm always normalizes over channels per time step; a constant vector
normalizes to zero. Everything is float64.

All internal functions work on a leading batch axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, TrainingError, ValidationError

LN_EPS = 1e-5
NET_MAGIC = b"EPNT"
NET_VERSION = 1
NET_FORMAT = "emgpose-net/1"
FIXED_PARAMS = ("theta0", "limit_lo", "limit_hi")


@dataclass
class ModelConfig:
    in_channels: int = 8
    conv_channels: tuple = (16, 32)
    conv_kernel: int = 5
    conv_strides: tuple = (2, 2)
    tds_stages: int = 2
    tds_groups: int = 4
    tds_kernel: int = 9
    ff_hidden: int = 128
    lstm_hidden: int = 64
    mlp_hidden: int = 64
    out_dof: int = 22
    chunk_len: int = 400
    velocity_scale: float = 0.01
    clamp_output: bool = True
    pose_feedback: bool = True

    @property
    def lstm_input(self):
        return self.feat_channels + (self.out_dof if self.pose_feedback else 0)

    @property
    def feat_channels(self):
        return self.conv_channels[-1]

    @property
    def downsample(self):
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self):
        rf, jump = 1, 1
        for s in self.conv_strides:
            rf += (self.conv_kernel - 1) * jump
            jump *= s
        rf += self.tds_stages * (self.tds_kernel - 1) * jump
        return rf

    def validate(self):
        if self.in_channels != 8:
            raise ValidationError("in_channels must be 8")
        if self.out_dof != 22:
            raise ValidationError("out_dof must be 22")
        if len(self.conv_channels) != 2 or len(self.conv_strides) != 2:
            raise ValidationError("exactly two conv blocks are supported")
        if self.downsample != 4:
            raise ValidationError("conv strides must multiply to 4")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValidationError("conv_kernel must be odd")
        if self.tds_kernel < 1 or self.tds_kernel % 2 == 0:
            raise ValidationError("tds_kernel must be odd (same padding)")
        if self.feat_channels % self.tds_groups:
            raise ValidationError("feature channels must divide evenly into tds_groups")
        if min(self.ff_hidden, self.lstm_hidden, self.mlp_hidden, self.tds_stages + 1) < 1:
            raise ValidationError("layer sizes must be positive")
        if self.chunk_len % 4 or self.chunk_len < 8:
            raise ValidationError("chunk_len must be a multiple of 4 and at least 8")
        return self

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv_channels", "conv_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def param_shapes(cfg):
    """Ordered ``name -> shape`` of every array in a parameter set."""
    C1, C2 = cfg.conv_channels
    K, G, F = cfg.conv_kernel, cfg.tds_groups, cfg.ff_hidden
    H, M, D = cfg.lstm_hidden, cfg.mlp_hidden, cfg.out_dof
    shapes = {
        "conv1.w": (C1, cfg.in_channels, K), "conv1.b": (C1,), "ln1.g": (C1,), "ln1.b": (C1,),
        "conv2.w": (C2, C1, K), "conv2.b": (C2,), "ln2.g": (C2,), "ln2.b": (C2,),
    }
    for s in range(cfg.tds_stages):
        p = f"tds{s}."
        shapes.update({
            p + "conv.w": (G, G, cfg.tds_kernel), p + "conv.b": (G,),
            p + "ln1.g": (C2,), p + "ln1.b": (C2,),
            p + "ff1.w": (F, C2), p + "ff1.b": (F,),
            p + "ff2.w": (C2, F), p + "ff2.b": (C2,),
            p + "ln2.g": (C2,), p + "ln2.b": (C2,),
        })
    shapes.update({
        "lstm.wx": (4 * H, cfg.lstm_input), "lstm.wh": (4 * H, H), "lstm.b": (4 * H,),
        "mlp1.w": (M, H), "mlp1.b": (M,), "mlp2.w": (D, M), "mlp2.b": (D,),
        "theta0": (D,), "limit_lo": (D,), "limit_hi": (D,),
    })
    return shapes


@dataclass
class NetworkParams:
    config: ModelConfig
    arrays: dict

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def trainable(self):
        return [n for n in self.arrays if n not in FIXED_PARAMS]

    def copy(self):
        return NetworkParams(ModelConfig.from_dict(self.config.to_dict()),
                             {k: v.copy() for k, v in self.arrays.items()})

    def validate(self):
        self.config.validate()
        shapes = param_shapes(self.config)
        if list(self.arrays) != list(shapes):
            raise ValidationError("parameter names or order do not match the config")
        for name, shape in shapes.items():
            a = self.arrays[name]
            if a.shape != shape:
                raise ValidationError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} has non-finite values")
        return self

    def n_trainable(self):
        return sum(self.arrays[n].size for n in self.trainable)


def init_params(cfg=None, seed=0, model=None):
    """Random initial parameters; ``theta0`` is the mid-range pose of ``model``."""
    from .hand_model import load_model

    cfg = (cfg or ModelConfig()).validate()
    model = model or load_model()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[-1]
        if name == "theta0":
            arrays[name] = model.mid_pose.copy()
        elif name == "limit_lo":
            arrays[name] = model.lower.copy()
        elif name == "limit_hi":
            arrays[name] = model.upper.copy()
        elif kind == "g":
            arrays[name] = np.ones(shape)
        elif name == "lstm.b":
            b = np.zeros(shape)
            H = cfg.lstm_hidden
            b[H : 2 * H] = 1.0  # forget gate
            arrays[name] = b
        elif kind == "b":
            arrays[name] = np.zeros(shape)
        elif name.startswith("lstm."):
            bound = 1.0 / np.sqrt(cfg.lstm_hidden)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if name == "mlp2.w":
                std *= 0.1
            arrays[name] = rng.normal(0.0, std, size=shape)
    return NetworkParams(cfg, arrays).validate()


# ----------------------------------------------------------------------------
# layers (batched: x has shape (B, C, T))


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv1d_forward(x, w, b, stride, pad):
    B, C, T = x.shape
    O, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    n_out = (T + 2 * pad - K) // stride + 1
    cols = np.stack([xp[:, :, k : k + stride * (n_out - 1) + 1 : stride] for k in range(K)], axis=2)
    cols = cols.reshape(B, C * K, n_out)
    y = w.reshape(O, C * K) @ cols + b[None, :, None]
    return y, (cols, x.shape, stride, pad)


def conv1d_backward(dy, w, cache):
    cols, xshape, stride, pad = cache
    B, C, T = xshape
    K = w.shape[2]
    n_out = dy.shape[2]
    O = w.shape[0]
    dw = np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(O, C, K)
    db = dy.sum(axis=(0, 2))
    dcols = (w.reshape(O, C * K).T @ dy).reshape(B, C, K, n_out)
    dxp = np.zeros((B, C, T + 2 * pad))
    for k in range(K):
        dxp[:, :, k : k + stride * (n_out - 1) + 1 : stride] += dcols[:, :, k, :]
    return dxp[:, :, pad : pad + T], dw, db


def layernorm_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g[None, :, None] * xhat + b[None, :, None], (xhat, inv)


def layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 2))
    db = dy.sum(axis=(0, 2))
    dxhat = dy * g[None, :, None]
    dx = inv * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dg, db


def _tds_conv_forward(x, w, b, groups):
    B, C, L = x.shape
    K = w.shape[2]
    pad = K // 2
    xg = x.reshape(B, groups, C // groups, L)
    xp = np.pad(xg, ((0, 0), (0, 0), (0, 0), (pad, pad)))
    # cols: (B, Wd, G*K, L)
    cols = np.stack([xp[..., k : k + L] for k in range(K)], axis=3)
    cols = cols.transpose(0, 2, 1, 3, 4).reshape(B, C // groups, groups * K, L)
    y = w.reshape(groups, groups * K) @ cols  # (B, Wd, G, L)
    y = y.transpose(0, 2, 1, 3) + b[None, :, None, None]
    return y.reshape(B, C, L), cols


def _tds_conv_backward(dy, w, cols, groups):
    B, C, L = dy.shape
    K = w.shape[2]
    pad = K // 2
    Wd = C // groups
    dyg = dy.reshape(B, groups, Wd, L).transpose(0, 2, 1, 3)  # (B, Wd, G, L)
    dw = np.tensordot(dyg, cols, axes=([0, 1, 3], [0, 1, 3])).reshape(groups, groups, K)
    db = dyg.sum(axis=(0, 1, 3))
    dcols = w.reshape(groups, groups * K).T @ dyg  # (B, Wd, G*K, L)
    dcols = dcols.reshape(B, Wd, groups, K, L).transpose(0, 2, 1, 3, 4)
    dxp = np.zeros((B, groups, Wd, L + 2 * pad))
    for k in range(K):
        dxp[..., k : k + L] += dcols[:, :, :, k, :]
    return dxp[..., pad : pad + L].reshape(B, C, L), dw, db


def tds_forward_batch(P, prefix, x, groups):
    """One TDS stage on ``(B, C, L)``; returns output and backward cache."""
    y, cols = _tds_conv_forward(x, P[prefix + "conv.w"], P[prefix + "conv.b"], groups)
    r = _relu(y)
    x1, ln1 = layernorm_forward(x + r, P[prefix + "ln1.g"], P[prefix + "ln1.b"])
    h = P[prefix + "ff1.w"] @ x1 + P[prefix + "ff1.b"][None, :, None]
    hr = _relu(h)
    f = P[prefix + "ff2.w"] @ hr + P[prefix + "ff2.b"][None, :, None]
    out, ln2 = layernorm_forward(x1 + f, P[prefix + "ln2.g"], P[prefix + "ln2.b"])
    return out, (cols, y, ln1, x1, h, hr, ln2)


def tds_backward_batch(P, prefix, dout, cache, groups, grads):
    cols, y, ln1, x1, h, hr, ln2 = cache
    ds, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = layernorm_backward(dout, P[prefix + "ln2.g"], ln2)
    grads[prefix + "ff2.w"] = np.tensordot(ds, hr, axes=([0, 2], [0, 2]))
    grads[prefix + "ff2.b"] = ds.sum(axis=(0, 2))
    dh = (P[prefix + "ff2.w"].T @ ds) * (h > 0)
    grads[prefix + "ff1.w"] = np.tensordot(dh, x1, axes=([0, 2], [0, 2]))
    grads[prefix + "ff1.b"] = dh.sum(axis=(0, 2))
    dx1 = ds + P[prefix + "ff1.w"].T @ dh
    ds1, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = layernorm_backward(dx1, P[prefix + "ln1.g"], ln1)
    dy = ds1 * (y > 0)
    dx, grads[prefix + "conv.w"], grads[prefix + "conv.b"] = _tds_conv_backward(dy, P[prefix + "conv.w"], cols, groups)
    return dx + ds1


def resample_matrix(n_in, n_out):
    """``(n_in, n_out)`` linear-interpolation matrix on a uniform grid with
    both endpoints mapped exactly."""
    if n_out < 1:
        raise ValidationError("target_len must be >= 1")
    if n_in < 2:
        raise ValidationError("resampling needs at least 2 input samples")
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    M = np.zeros((n_in, n_out))
    cols = np.arange(n_out)
    M[i0, cols] = 1.0 - frac
    M[i0 + 1, cols] += frac
    return M


def resample_linear(x, target_len):
    """Linearly resample a ``(C, L)`` (or ``(B, C, L)``) sequence to ``target_len`` steps."""
    x = np.asarray(x, dtype=float)
    return x @ resample_matrix(x.shape[-1], target_len)


# ----------------------------------------------------------------------------
# encoder


def _check_emg(cfg, emg):
    if emg.ndim != 3 or emg.shape[1] != cfg.in_channels:
        raise ValidationError(f"emg must have shape (B, {cfg.in_channels}, T), got {emg.shape}")
    T = emg.shape[2]
    if T % cfg.downsample:
        raise ValidationError(f"window length {T} is not divisible by {cfg.downsample}")
    # shorter windows than the receptive field are allowed: same padding
    # keeps every shape defined, the edge frames just see zero context
    if T < 2 * cfg.downsample:
        raise ValidationError(f"window length {T} is too short; need at least {2 * cfg.downsample} samples")
    if not np.all(np.isfinite(emg)):
        raise ValidationError("emg contains non-finite values")


def encoder_forward_batch(params, emg, keep_cache=False):
    cfg, P = params.config, params.arrays
    _check_emg(cfg, emg)
    pad = cfg.conv_kernel // 2
    caches = {}
    x = emg
    for i, stride in enumerate(cfg.conv_strides, start=1):
        y, caches[f"conv{i}"] = conv1d_forward(x, P[f"conv{i}.w"], P[f"conv{i}.b"], stride, pad)
        caches[f"relu{i}"] = y
        x, caches[f"ln{i}"] = layernorm_forward(_relu(y), P[f"ln{i}.g"], P[f"ln{i}.b"])
    for s in range(cfg.tds_stages):
        x, caches[f"tds{s}"] = tds_forward_batch(P, f"tds{s}.", x, cfg.tds_groups)
    return (x, caches) if keep_cache else x


def encoder_backward_batch(params, dfeat, caches, grads):
    cfg, P = params.config, params.arrays
    d = dfeat
    for s in reversed(range(cfg.tds_stages)):
        d = tds_backward_batch(P, f"tds{s}.", d, caches[f"tds{s}"], cfg.tds_groups, grads)
    for i in reversed(range(1, len(cfg.conv_strides) + 1)):
        d, grads[f"ln{i}.g"], grads[f"ln{i}.b"] = layernorm_backward(d, P[f"ln{i}.g"], caches[f"ln{i}"])
        d = d * (caches[f"relu{i}"] > 0)
        d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv1d_backward(d, P[f"conv{i}.w"], caches[f"conv{i}"])
    return d


def encoder_forward(params, emg):
    """Features of shape ``(32, T/4)`` for one ``(8, T)`` window."""
    emg = np.asarray(emg, dtype=float)
    if emg.ndim != 2:
        raise ValidationError(f"emg must have shape (8, T), got {emg.shape}")
    return encoder_forward_batch(params, emg[None])[0]


def tds_stage_forward(params, stage, x):
    """Apply TDS stage ``stage`` to a ``(32, L)`` feature sequence."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != params.config.feat_channels:
        raise ValidationError("features must have shape (32, L)")
    return tds_forward_batch(params.arrays, f"tds{stage}.", x[None], params.config.tds_groups)[0][0]


# ----------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    last_pose: np.ndarray

    @classmethod
    def fresh(cls, params, batch=None):
        H = params.config.lstm_hidden
        theta0 = params["theta0"]
        if batch is None:
            return cls(np.zeros(H), np.zeros(H), theta0.copy())
        return cls(np.zeros((batch, H)), np.zeros((batch, H)), np.repeat(theta0[None], batch, axis=0))

    def copy(self):
        return DecoderState(self.h.copy(), self.c.copy(), self.last_pose.copy())


@dataclass
class _DecoderTrace:
    poses: np.ndarray  # (T, B, D)
    vel: np.ndarray  # (T, B, D)
    hs: np.ndarray  # (T+1, B, H), hs[0] = initial
    cs: np.ndarray  # (T+1, B, H)
    gates: np.ndarray = None  # (T, B, 4H) activated
    tanh_c: np.ndarray = None
    u: np.ndarray = None
    mask: np.ndarray = None
    theta_in: np.ndarray = None  # (T, B, D) theta_{t-1} - theta0
    feats: np.ndarray = None  # (T, B, C)


def decoder_forward_batch(params, feats, state, keep_cache=False, clamp=None):
    """Run the recurrent decoder over ``feats`` of shape ``(B, C, T)``.

    ``state`` is a batched :class:`DecoderState`. Returns a trace with poses,
    velocities and per-step hidden/cell states (``hs[t + 1]`` is the state
    after step ``t``).
    """
    cfg, P = params.config, params.arrays
    clamp = cfg.clamp_output if clamp is None else clamp
    B, C, T = feats.shape
    H, D = cfg.lstm_hidden, cfg.out_dof
    wx = P["lstm.wx"]
    wf_T = np.ascontiguousarray(wx[:, :C].T)
    fb = cfg.pose_feedback
    wt_T = np.ascontiguousarray(wx[:, C:].T)
    wh_T = np.ascontiguousarray(P["lstm.wh"].T)
    m1_T = np.ascontiguousarray(P["mlp1.w"].T)
    m2_T = np.ascontiguousarray(P["mlp2.w"].T) * cfg.velocity_scale
    m1b = P["mlp1.b"]
    m2b = P["mlp2.b"] * cfg.velocity_scale
    theta0, lo, hi = P["theta0"], P["limit_lo"], P["limit_hi"]

    ft = np.ascontiguousarray(feats.transpose(2, 0, 1))  # (T, B, C)
    xin = ft @ wf_T + P["lstm.b"]  # (T, B, 4H)

    poses = np.empty((T, B, D))
    vel = np.empty((T, B, D))
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    hs[0], cs[0] = state.h, state.c
    if keep_cache:
        gates = np.empty((T, B, 4 * H))
        tanh_c = np.empty((T, B, H))
        us = np.empty((T, B, cfg.mlp_hidden))
        masks = np.empty((T, B, D), dtype=bool)
        theta_in = np.empty((T, B, D))

    h, c, theta = state.h, state.c, state.last_pose
    for t in range(T):
        tin = theta - theta0
        z = xin[t] + h @ wh_T
        if fb:
            z += tin @ wt_T
        a = _sigmoid(z)
        g = np.tanh(z[:, 2 * H : 3 * H])
        i, f, o = a[:, :H], a[:, H : 2 * H], a[:, 3 * H :]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        u = np.maximum(h @ m1_T + m1b, 0.0)
        v = u @ m2_T + m2b
        pre = theta + v
        theta = np.minimum(np.maximum(pre, lo), hi) if clamp else pre
        poses[t], vel[t], hs[t + 1], cs[t + 1] = theta, v, h, c
        if keep_cache:
            a[:, 2 * H : 3 * H] = g
            gates[t], tanh_c[t], us[t], theta_in[t] = a, tc, u, tin
            masks[t] = (pre >= lo) & (pre <= hi) if clamp else True
    trace = _DecoderTrace(poses, vel, hs, cs)
    if keep_cache:
        trace.gates, trace.tanh_c, trace.u, trace.mask = gates, tanh_c, us, masks
        trace.theta_in, trace.feats = theta_in, ft
    return trace


def decoder_backward_batch(params, trace, d_pose, d_vel, grads):
    """Backpropagate through the decoder.

    ``d_pose`` and ``d_vel`` are ``(T, B, D)`` loss gradients with respect to
    the emitted poses and velocities. Fills decoder entries of ``grads`` and
    returns the feature gradient ``(B, C, T)``.
    """
    cfg, P = params.config, params.arrays
    T, B, D = trace.poses.shape
    H, C = cfg.lstm_hidden, trace.feats.shape[2]
    vs = cfg.velocity_scale
    wx, wh = P["lstm.wx"], P["lstm.wh"]
    wt = wx[:, C:]
    m1, m2 = P["mlp1.w"], P["mlp2.w"] * vs

    dz_all = np.empty((T, B, 4 * H))
    dout_all = np.empty((T, B, D))
    du_all = np.empty((T, B, cfg.mlp_hidden))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dtheta_next = np.zeros((B, D))
    for t in range(T - 1, -1, -1):
        dpre = (d_pose[t] + dtheta_next) * trace.mask[t]
        dv = dpre + d_vel[t]
        dout_all[t] = dv
        du = (dv @ m2) * (trace.u[t] > 0)
        du_all[t] = du
        dh = du @ m1 + dh_next
        a = trace.gates[t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = trace.tanh_c[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.empty((B, 4 * H))
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * trace.cs[t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dz_all[t] = dz
        dc_next = dc * f
        dh_next = dz @ wh
        dtheta_next = dpre + dz @ wt if cfg.pose_feedback else dpre

    if cfg.pose_feedback:
        inp = np.concatenate([trace.feats, trace.theta_in], axis=2)  # (T, B, C + D)
    else:
        inp = trace.feats
    def outer(a, b):
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    grads["lstm.wx"] = outer(dz_all, inp)
    grads["lstm.wh"] = outer(dz_all, trace.hs[:-1])
    grads["lstm.b"] = dz_all.sum(axis=(0, 1))
    grads["mlp2.w"] = vs * outer(dout_all, trace.u)
    grads["mlp2.b"] = vs * dout_all.sum(axis=(0, 1))
    grads["mlp1.w"] = outer(du_all, trace.hs[1:])
    grads["mlp1.b"] = du_all.sum(axis=(0, 1))
    dfeat = dz_all @ wx[:, :C]  # (T, B, C)
    return dfeat.transpose(1, 2, 0)


def _decode_single(params, feats, state, carry_index, clamp=None):
    """Unbatched decoder loop for low-latency inference.

    Same recursion as :func:`decoder_forward_batch` on 1-D vectors, with the
    recurrent and pose-feedback products fused into one matrix. Results agree
    with the batched path to rounding.

    The per-step body works in preallocated buffers, and all four gates share
    one ``tanh`` call through sigmoid(x) = (1 + tanh(x / 2)) / 2, with the
    halving folded into the weights of the sigmoid gates.
    """
    cfg, P = params.config, params.arrays
    clamp = cfg.clamp_output if clamp is None else clamp
    C, T = feats.shape
    H, D = cfg.lstm_hidden, cfg.out_dof
    wx = P["lstm.wx"]
    # pose feedback weights; zero when the network does not use feedback
    wt = wx[:, C:] if cfg.pose_feedback else np.zeros((4 * H, D))
    scale = np.full(4 * H, 0.5)
    scale[2 * H : 3 * H] = 1.0
    xin = (feats.T @ np.ascontiguousarray(wx[:, :C].T) + (P["lstm.b"] - wt @ P["theta0"])) * scale
    w_rec = np.ascontiguousarray(np.vstack([P["lstm.wh"].T, wt.T]) * scale)  # (H + D, 4H)
    m1 = np.ascontiguousarray(P["mlp1.w"].T)
    b1 = P["mlp1.b"]
    m2 = np.ascontiguousarray(P["mlp2.w"].T) * cfg.velocity_scale
    b2 = P["mlp2.b"] * cfg.velocity_scale
    lo, hi = P["limit_lo"], P["limit_hi"]

    poses = np.empty((T, D))
    vel = np.empty((T, D))
    rec = np.empty(H + D)  # [h, theta]; h and theta below are views into it
    rec[:H] = state.h
    rec[H:] = state.last_pose
    h, theta = rec[:H], rec[H:]
    c = np.array(state.c, dtype=float)
    z = np.empty(4 * H)
    gates = np.empty(4 * H)
    u = np.empty(cfg.mlp_hidden)
    tc = np.empty(H)
    gi, gf, gg, go = (slice(k * H, (k + 1) * H) for k in range(4))
    tanh, dot, add, mul, mx, mn = np.tanh, np.dot, np.add, np.multiply, np.maximum, np.minimum
    carried = None
    for t in range(T):
        dot(rec, w_rec, out=z)
        add(z, xin[t], out=z)
        tanh(z, out=z)
        mul(z, 0.5, out=gates)
        add(gates, 0.5, out=gates)
        mul(gates[gf], c, out=c)
        c += gates[gi] * z[gg]
        tanh(c, out=tc)
        mul(gates[go], tc, out=h)
        dot(h, m1, out=u)
        add(u, b1, out=u)
        mx(u, 0.0, out=u)
        v = vel[t]
        dot(u, m2, out=v)
        add(v, b2, out=v)
        add(theta, v, out=theta)
        if clamp:
            mx(theta, lo, out=theta)
            mn(theta, hi, out=theta)
        poses[t] = theta
        if t == carry_index:
            carried = DecoderState(h.copy(), c.copy(), theta.copy())
    return poses.T, vel.T, carried


def _as_state(params, state):
    state = state if state is not None else DecoderState.fresh(params)
    H = params.config.lstm_hidden
    if state.h.shape != (H,) or state.c.shape != (H,) or np.shape(state.last_pose) != (params.config.out_dof,):
        raise ValidationError("decoder state does not match the network configuration")
    return state


def decoder_forward(params, feats, state=None, carry_index=None):
    """Integrate decoder velocities into a pose chunk.

    Parameters
    ----------
    feats : ndarray of shape (32, T)
    state : DecoderState, optional
        Fresh state (zero LSTM state, pose ``theta0``) when omitted.
    carry_index : int, optional
        Step after which the returned state is taken; defaults to the last.

    Returns
    -------
    chunk : (22, T) poses
    velocities : (22, T)
    new_state : DecoderState
    """
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] != params.config.feat_channels:
        raise ValidationError(f"features must have shape ({params.config.feat_channels}, T)")
    T = feats.shape[1]
    idx = T - 1 if carry_index is None else int(carry_index)
    if not 0 <= idx < T:
        raise ValidationError(f"carry_index must lie in [0, {T})")
    return _decode_single(params, feats, _as_state(params, state), idx)


def run_model(params, emg, state=None, carry_index=None):
    """Full forward pass on one window; returns ``(chunk, velocities, new_state)``."""
    emg = np.asarray(emg, dtype=float)
    if emg.ndim != 2:
        raise ValidationError(f"emg must have shape (8, T), got {emg.shape}")
    feats = encoder_forward_batch(params, emg[None])[0]
    feats = resample_linear(feats, emg.shape[1])
    return decoder_forward(params, feats, state, carry_index)


def model_forward(params, emg, state=None):
    """Map an ``(8, T)`` EMG window to a ``(22, T)`` pose chunk and the decoder
    state after its last step."""
    chunk, _, new_state = run_model(params, emg, state)
    return chunk, new_state


# ----------------------------------------------------------------------------
# loss and gradients


def _stack_batch(batch):
    emg = np.stack([s.emg for s in batch]).astype(float)
    theta = np.stack([s.theta_gt for s in batch]).astype(float)
    theta0 = np.stack([s.theta0 for s in batch]).astype(float)
    return emg, theta, theta0


def loss_and_grad(params, batch, lam=1.0, clamp=None, return_parts=False):
    """Mean over the batch of ``MSE(v, dtheta_gt) + lam * MSE(theta, theta_gt)``.

    Returns ``(loss, grads)`` where ``grads`` maps every parameter name to an
    array of its shape (zeros for the fixed entries ``theta0`` and limits).
    The first velocity label is ``theta_gt[0] - theta0`` of each sample, and
    the decoder starts from that ``theta0`` with a zero LSTM state.
    """
    from .data import velocity_labels

    emg, theta_gt, theta0 = _stack_batch(batch)
    B, D, T = theta_gt.shape
    feats, enc_cache = encoder_forward_batch(params, emg, keep_cache=True)
    R = resample_matrix(feats.shape[2], T)
    feats_up = feats @ R
    H = params.config.lstm_hidden
    state = DecoderState(np.zeros((B, H)), np.zeros((B, H)), theta0)
    trace = decoder_forward_batch(params, feats_up, state, keep_cache=True, clamp=clamp)

    v_gt = velocity_labels(theta_gt, theta0).transpose(2, 0, 1)  # (T, B, D)
    p_gt = theta_gt.transpose(2, 0, 1)
    ev = trace.vel - v_gt
    ep = trace.poses - p_gt
    per_sample_v = (ev * ev).mean(axis=(0, 2))
    per_sample_p = (ep * ep).mean(axis=(0, 2))
    per_sample = per_sample_v + lam * per_sample_p
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if len(bad):
        raise TrainingError(f"non-finite loss for batch sample {bad[0]}", sample_index=int(bad[0]))
    loss = float(per_sample.mean())

    n = B * D * T
    grads = {}
    dfeat_up = decoder_backward_batch(params, trace, (2.0 * lam / n) * ep, (2.0 / n) * ev, grads)
    encoder_backward_batch(params, dfeat_up @ R.T, enc_cache, grads)
    for name in FIXED_PARAMS:
        grads[name] = np.zeros_like(params[name])
    grads = {name: grads[name] for name in params.arrays}
    if return_parts:
        return loss, grads, (float(per_sample_v.mean()), float(per_sample_p.mean()))
    return loss, grads


def batch_loss(params, batch, lam=1.0, clamp=None):
    """Loss only (no gradients), for validation curves."""
    emg, theta_gt, theta0 = _stack_batch(batch)
    from .data import velocity_labels

    B, D, T = theta_gt.shape
    feats = encoder_forward_batch(params, emg)
    feats = feats @ resample_matrix(feats.shape[2], T)
    H = params.config.lstm_hidden
    trace = decoder_forward_batch(params, feats, DecoderState(np.zeros((B, H)), np.zeros((B, H)), theta0), clamp=clamp)
    ev = trace.vel - velocity_labels(theta_gt, theta0).transpose(2, 0, 1)
    ep = trace.poses - theta_gt.transpose(2, 0, 1)
    return float(((ev * ev).mean(axis=(0, 2)) + lam * (ep * ep).mean(axis=(0, 2))).mean())


def predict_windows(params, batch):
    """Pose chunks ``(B, 22, T)`` for windows anchored at their ``theta0``."""
    emg, _, theta0 = _stack_batch(batch)
    B, _, T = emg.shape
    feats = encoder_forward_batch(params, emg)
    feats = feats @ resample_matrix(feats.shape[2], T)
    H = params.config.lstm_hidden
    trace = decoder_forward_batch(params, feats, DecoderState(np.zeros((B, H)), np.zeros((B, H)), theta0))
    return trace.poses.transpose(1, 2, 0)


# ----------------------------------------------------------------------------
# training


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    clip_norm: float = 5.0
    epochs: int = 10
    lam: float = 1.0
    seed: int = 0
    divergence: float = 1e6
    lr_decay: float = 1.0
    weight_decay: float = 0.0
    emg_noise: float = 0.0
    gain_jitter: float = 0.0
    anchor_jitter: float = 0.0
    polarity_flip: bool = False
    time_shift: int = 0

    def validate(self):
        if self.weight_decay < 0 or self.emg_noise < 0 or self.anchor_jitter < 0 or self.time_shift < 0:
            raise ValidationError("weight_decay, emg_noise, anchor_jitter and time_shift must be >= 0")
        if not 0 <= self.gain_jitter < 1:
            raise ValidationError("gain_jitter must lie in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.clip_norm <= 0:
            raise ValidationError("invalid optimizer settings")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValidationError("betas must lie in [0, 1)")
        return self


@dataclass
class TrainResult:
    params: NetworkParams
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.names = params.trainable
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params, grads, lr):
        b1, b2 = self.cfg.betas
        self.t += 1
        norm = np.sqrt(sum(float((grads[n] ** 2).sum()) for n in self.names))
        scale = min(1.0, self.cfg.clip_norm / norm) if norm > 0 else 1.0
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n in self.names:
            g = grads[n] * scale
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            if lr:
                step = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.cfg.eps)
                if self.cfg.weight_decay and params[n].ndim > 1:
                    step = step + self.cfg.weight_decay * params[n]
                params.arrays[n] = params.arrays[n] - lr * step
        return norm


def train(params, dataset, optimizer_config=None, val_set=None, callback=None):
    """Fit ``params`` on a list of :class:`~emgpose.data.WindowSample`.

    Mini-batches are drawn from a seeded permutation each epoch. With
    ``emg_noise`` or ``gain_jitter`` set, each batch sees a fresh copy of its
    EMG with additive Gaussian noise and random per-channel gains drawn from
    the same seeded generator. ``polarity_flip`` inverts random channels and
    ``time_shift`` delays each channel by up to that many samples; both leave
    the signal envelope intact while changing its fine structure.
    ``anchor_jitter`` (radians) perturbs each
    window's starting pose the same way, so the decoder has to steer back to
    the pose the EMG indicates instead of replaying trajectories it has seen. ``weight_decay`` is decoupled (applied to
    weight matrices only, not biases or norm gains). Returns a
    :class:`TrainResult` holding a trained copy of the parameters and
    per-epoch mean train (and validation) loss.

    Raises
    ------
    TrainingError
        When a batch loss exceeds ``optimizer_config.divergence`` or is
        non-finite.
    """
    cfg = (optimizer_config or OptimizerConfig()).validate()
    if len(dataset) == 0:
        raise ValidationError("training set is empty")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg)
    result = TrainResult(params)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [dataset[i] for i in idx]
            if cfg.emg_noise or cfg.gain_jitter or cfg.anchor_jitter or cfg.polarity_flip or cfg.time_shift:
                batch = _augment(batch, rng, cfg, params["limit_lo"], params["limit_hi"])
            try:
                loss, grads = loss_and_grad(params, batch, lam=cfg.lam)
            except TrainingError as exc:
                raise TrainingError(
                    f"epoch {epoch}: {exc}", sample_index=int(idx[exc.sample_index])
                ) from None
            if loss > cfg.divergence:
                raise TrainingError(f"epoch {epoch}: loss {loss:.3g} exceeds divergence threshold")
            opt.step(params, grads, lr)
            losses.append(loss)
            weights.append(len(idx))
        result.train_loss.append(float(np.average(losses, weights=weights)))
        if val_set:
            result.val_loss.append(evaluate_loss(params, val_set, cfg.batch_size, cfg.lam))
        if callback is not None:
            callback(epoch, result)
    return result


def _augment(batch, rng, cfg, lo, hi):
    from dataclasses import replace

    out = []
    for s in batch:
        theta0 = s.theta0
        if cfg.anchor_jitter:
            theta0 = np.clip(theta0 + cfg.anchor_jitter * rng.standard_normal(theta0.shape), lo, hi)
        emg = s.emg
        C, T = emg.shape
        if cfg.time_shift:
            # independent small lags per channel, edges held
            lag = rng.integers(-cfg.time_shift, cfg.time_shift + 1, size=(C, 1))
            emg = np.take_along_axis(emg, np.clip(np.arange(T) - lag, 0, T - 1), axis=1)
        if cfg.polarity_flip:
            emg = emg * rng.choice([-1.0, 1.0], size=(C, 1))
        if cfg.gain_jitter:
            emg = emg * rng.uniform(1 - cfg.gain_jitter, 1 + cfg.gain_jitter, size=(emg.shape[0], 1))
        if cfg.emg_noise:
            emg = emg + cfg.emg_noise * rng.standard_normal(emg.shape)
        out.append(replace(s, emg=emg, theta0=theta0))
    return out


def evaluate_loss(params, samples, batch_size=16, lam=1.0):
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        total += batch_loss(params, chunk, lam) * len(chunk)
    return total / len(samples)


# ----------------------------------------------------------------------------
# parameter file
#
# layout (little-endian):
#   4s magic b"EPNT" | u32 version | u32 config_len | config JSON (utf-8,
#   sorted keys) | u32 n_arrays | per array: u16 name_len, name (utf-8),
#   u8 ndim, u32 dims[ndim], f64 data[prod(dims)] (C order)


def params_to_bytes(params):
    params.validate()
    cfg = json.dumps({"format": NET_FORMAT, **params.config.to_dict()}, sort_keys=True).encode()
    out = [NET_MAGIC, struct.pack("<II", NET_VERSION, len(cfg)), cfg, struct.pack("<I", len(params.arrays))]
    for name, arr in params.arrays.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(buf):
    buf = memoryview(buf)
    pos = 0

    def take(n, section):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(
                f"truncated parameter file: section '{section}' needs {n} bytes at offset {pos}",
                section=section, offset=pos,
            )
        out = buf[pos : pos + n]
        pos += n
        return out

    magic = bytes(take(4, "header"))
    if magic != NET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NET_MAGIC!r}", "header", 0)
    version, cfg_len = struct.unpack("<II", take(8, "header"))
    if version != NET_VERSION:
        raise FormatError(f"unsupported version {version}", "header", 4)
    try:
        cfg_dict = json.loads(bytes(take(cfg_len, "config")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config is not valid JSON: {exc}", "config", 12) from None
    cfg_dict.pop("format", None)
    cfg = ModelConfig.from_dict(cfg_dict)
    (count,) = struct.unpack("<I", take(4, "array_count"))
    arrays = {}
    for k in range(count):
        section = f"array[{k}]"
        (name_len,) = struct.unpack("<H", take(2, section))
        name = bytes(take(name_len, section)).decode()
        section = name
        (ndim,) = struct.unpack("<B", take(1, section))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, section))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size, section), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", "trailer", pos)
    try:
        return NetworkParams(cfg, arrays).validate()
    except ValidationError as exc:
        raise FormatError(str(exc), "arrays", None) from None


def save_params(params, path):
    Path(path).write_bytes(params_to_bytes(params))
    return Path(path)


def load_params(path):
    return params_from_bytes(Path(path).read_bytes())
