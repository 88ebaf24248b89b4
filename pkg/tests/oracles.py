"""Independent reference implementations used by the tests.

None of these reuse production kernels: forward kinematics multiplies 4x4
homogeneous transforms built from scipy rotations, segment distances come
from dense sampling refined by alternating point projections, and
convolutions are written as explicit loops.
"""

import numpy as np
from scipy.spatial.transform import Rotation


def homogeneous(rot=None, trans=None):
    T = np.eye(4)
    if rot is not None:
        T[:3, :3] = rot
    if trans is not None:
        T[:3, 3] = trans
    return T


def link_transforms(model, q):
    """World 4x4 transform of every link, link 0 being the palm."""
    Ts = [np.eye(4)]
    for j, joint in enumerate(model.joints):
        axis = np.asarray(joint.axis, dtype=float)
        rot = Rotation.from_rotvec(axis * q[j]).as_matrix()
        Ts.append(Ts[joint.parent_link] @ homogeneous(trans=joint.origin_offset) @ homogeneous(rot=rot))
    return Ts


def fk_oracle(model, q):
    Ts = link_transforms(model, q)
    return np.array([(Ts[k.link] @ np.append(k.offset, 1.0))[:3] for k in model.keypoint_frames])


def capsule_world(model, q):
    Ts = link_transforms(model, q)
    out = []
    for c in model.capsules:
        T = Ts[c.link]
        out.append(((T @ np.append(c.a, 1.0))[:3], (T @ np.append(c.b, 1.0))[:3], c.radius))
    return out


def _project(points, a, b):
    d = b - a
    dd = np.einsum("...i,...i->...", d, d)
    t = np.einsum("...i,...i->...", points - a, d) / np.where(dd > 0, dd, 1.0)
    return np.clip(t, 0.0, 1.0)


def segment_distance_oracle(a0, a1, b0, b1, samples=50, rounds=200):
    """Distance between segment batches ``(..., 3)`` by dense sampling then
    alternating projections (block coordinate descent on a convex problem)."""
    s = np.linspace(0.0, 1.0, samples)
    pa = a0[..., None, :] + s[:, None] * (a1 - a0)[..., None, :]
    pb = b0[..., None, :] + s[:, None] * (b1 - b0)[..., None, :]
    diff = pa[..., :, None, :] - pb[..., None, :, :]
    d2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
    flat = d2.reshape(d2.shape[:-2] + (-1,)).argmin(axis=-1)
    si, ti = np.unravel_index(flat, (samples, samples))
    sa, tb = s[si], s[ti]
    for _ in range(rounds):
        pb_pt = b0 + tb[..., None] * (b1 - b0)
        sa = _project(pb_pt, a0, a1)
        pa_pt = a0 + sa[..., None] * (a1 - a0)
        tb = _project(pa_pt, b0, b1)
    pa_pt = a0 + sa[..., None] * (a1 - a0)
    pb_pt = b0 + tb[..., None] * (b1 - b0)
    best = np.sqrt(((pa_pt - pb_pt) ** 2).sum(-1))
    return np.minimum(best, np.sqrt(d2.min(axis=(-1, -2))))


def clearance_oracle(model, q):
    caps = capsule_world(model, q)
    pairs = model.collision_pairs
    A0 = np.array([caps[i][0] for i, _ in pairs])
    A1 = np.array([caps[i][1] for i, _ in pairs])
    B0 = np.array([caps[j][0] for _, j in pairs])
    B1 = np.array([caps[j][1] for _, j in pairs])
    r = np.array([caps[i][2] + caps[j][2] for i, j in pairs])
    return segment_distance_oracle(A0, A1, B0, B1) - r


def conv1d_loops(x, w, b, stride, pad):
    C, T = x.shape
    O, _, K = w.shape
    xp = np.zeros((C, T + 2 * pad))
    xp[:, pad : pad + T] = x
    n_out = (T + 2 * pad - K) // stride + 1
    y = np.zeros((O, n_out))
    for o in range(O):
        for t in range(n_out):
            acc = b[o]
            for c in range(C):
                for k in range(K):
                    acc += w[o, c, k] * xp[c, stride * t + k]
            y[o, t] = acc
    return y


def layernorm_loops(x, g, b, eps=1e-5):
    C, T = x.shape
    y = np.zeros_like(x)
    for t in range(T):
        col = x[:, t]
        mu = sum(col) / C
        var = sum((v - mu) ** 2 for v in col) / C
        for c in range(C):
            y[c, t] = g[c] * (col[c] - mu) / np.sqrt(var + eps) + b[c]
    return y


def tds_loops(P, prefix, x, groups):
    C, L = x.shape
    width = C // groups
    w, bias = P[prefix + "conv.w"], P[prefix + "conv.b"]
    K = w.shape[2]
    pad = K // 2
    y = np.zeros_like(x)
    for go in range(groups):
        for wi in range(width):
            for t in range(L):
                acc = bias[go]
                for gi in range(groups):
                    for k in range(K):
                        src = t + k - pad
                        if 0 <= src < L:
                            acc += w[go, gi, k] * x[gi * width + wi, src]
                y[go * width + wi, t] = acc
    x1 = layernorm_loops(x + np.maximum(y, 0.0), P[prefix + "ln1.g"], P[prefix + "ln1.b"])
    h = np.maximum(P[prefix + "ff1.w"] @ x1 + P[prefix + "ff1.b"][:, None], 0.0)
    f = P[prefix + "ff2.w"] @ h + P[prefix + "ff2.b"][:, None]
    return layernorm_loops(x1 + f, P[prefix + "ln2.g"], P[prefix + "ln2.b"])
