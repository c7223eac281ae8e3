"""Rotation and pose math: plain-numpy helpers plus tape-differentiable builders.

Quaternions are (w, x, y, z). Camera extrinsics are world-to-camera: a point
p_w maps to p_c = R p_w + t with x right, y down, z forward (positive depth).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


# -- numpy quaternion helpers -----------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """w >= 0 form, so serialization round-trips are deterministic."""
    q = np.asarray(q)
    flip = q[..., :1] < 0
    return np.where(flip, -q, q)


def quat_to_mat(q):
    """(..., 4) unit quaternion -> (..., 3, 3) rotation matrix."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def mat_to_quat(R):
    """(3, 3) rotation matrix -> unit quaternion, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diagonal(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(quat_normalize(q))


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(w):
    """Rotation vector (axis * angle, radians) -> unit quaternion."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]) / np.sqrt(
            1.0 + 0.25 * theta * theta
        )
    axis = w / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def so3_exp(w):
    """Rodrigues: rotation vector -> 3x3 matrix (numpy)."""
    w = np.asarray(w, dtype=np.float64)
    s = float(w @ w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if s < 1e-8:
        A = 1.0 - s / 6.0 + s * s / 120.0
        B = 0.5 - s / 24.0 + s * s / 720.0
    else:
        t = np.sqrt(s)
        A = np.sin(t) / t
        B = (1.0 - np.cos(t)) / s
    return np.eye(3) + A * K + B * (K @ K)


def rotation_geodesic_deg(Ra, Rb):
    """Angle in degrees between two rotations."""
    c = (np.trace(Ra.T @ Rb) - 1.0) * 0.5
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=0)
    t = -R @ eye
    return R, t


# -- tape-differentiable builders ---------------------------------------------------


def quat_to_mat_t(q):
    """Tape version: (N, 4) normalized quaternions -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    cols = [
        1.0 - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0,
        (x * y + w * z) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0,
        (x * z - w * y) * 2.0, (y * z + w * x) * 2.0, 1.0 - (x * x + y * y) * 2.0,
    ]
    return ad.stack(cols, axis=1).reshape((-1, 3, 3))


def _rot_coeff(s, which):
    """sin(sqrt s)/sqrt s ('a') or (1 - cos(sqrt s))/s ('b'), smooth at s = 0."""
    sv = s.value if isinstance(s, ad.Tensor) else np.asarray(s)
    small = sv <= 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.sqrt(sv)
        if which == "a":
            exact = np.sin(t) / t
            series = 1.0 - sv / 6.0 + sv * sv / 120.0
            dexact = (t * np.cos(t) - np.sin(t)) / (2.0 * t ** 3)
            dseries = -1.0 / 6.0 + sv / 60.0 - sv * sv / 1680.0
        else:
            exact = (1.0 - np.cos(t)) / sv
            series = 0.5 - sv / 24.0 + sv * sv / 720.0
            dexact = (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (2.0 * sv * sv)
            dseries = -1.0 / 24.0 + sv / 360.0 - sv * sv / 13440.0
    val = np.where(small, series, exact)
    dval = np.where(small, dseries, dexact)
    if not (isinstance(s, ad.Tensor) and s.requires_grad):
        return ad.Tensor(val)

    def bwd(g):
        s._accum(g * dval)

    return ad.Tensor._from_op(val, (s,), bwd)


def so3_exp_t(w):
    """Tape Rodrigues: rotation-vector Tensor (3,) -> (3, 3) rotation Tensor.

    Exact for any angle; the s -> 0 limit (the usual evaluation point for
    pose increments) uses series coefficients so gradients stay finite.
    """
    s = ad.tsum(w * w)
    A = _rot_coeff(s, "a")
    B = _rot_coeff(s, "b")
    w0, w1, w2 = w[0], w[1], w[2]
    zero = ad.Tensor(np.zeros((), dtype=w.value.dtype))
    K = ad.stack([zero, -w2, w1, w2, zero, -w0, -w1, w0, zero]).reshape((3, 3))
    eye = ad.Tensor(np.eye(3, dtype=w.value.dtype))
    return eye + A * K + B * (K @ K)
