"""Core data model: Gaussians, cameras, scene bundles, static/dynamic partition.

Gaussian attributes live in unconstrained parameter space: scales are stored
as logs (exp > 0 by construction), opacity as a logit (sigmoid in (0, 1)),
rotations as quaternions renormalized after every optimizer step. Dynamic
Gaussians additionally carry a motion-coefficient vector of length B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import DataContractError

SH_C0 = 0.28209479177387814


def sh_degree_to_count(deg: int) -> int:
    return (deg + 1) ** 2


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb) - 0.5) / SH_C0


def sh_dc_to_rgb(dc):
    return np.asarray(dc) * SH_C0 + 0.5


def inverse_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log(x / (1.0 - x))


def covariance_from(rot, scale):
    """Sigma = R S S^T R^T for unit quaternion(s) and linear-domain scale(s).

    Accepts a single (4,) / (3,) pair or batched (..., 4) / (..., 3) arrays;
    symmetric PSD by construction.
    """
    R = geometry.quat_to_mat(rot)
    M = R * np.asarray(scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian3D:
    """One primitive in canonical configuration."""

    mean_c: np.ndarray           # (3,)
    rot_c: np.ndarray            # (4,) unit quaternion, w first
    scale_c: np.ndarray          # (3,) log-scales
    opacity_raw: float
    sh_coeffs: np.ndarray        # (3, K) with K = (L+1)^2
    motion_coeffs: np.ndarray | None = None  # (B,) for dynamic Gaussians

    @property
    def is_dynamic(self):
        return self.motion_coeffs is not None

    def covariance(self):
        return covariance_from(self.rot_c, np.exp(self.scale_c))

    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_raw))


class GaussianBlock:
    """Column store for a group of Gaussians sharing one parameter layout."""

    def __init__(self, means, rots, log_scales, opacity_raw, sh, motion_coeffs=None):
        self.means = np.asarray(means)
        self.rots = np.asarray(rots)
        self.log_scales = np.asarray(log_scales)
        self.opacity_raw = np.asarray(opacity_raw)
        self.sh = np.asarray(sh)
        self.motion_coeffs = None if motion_coeffs is None else np.asarray(motion_coeffs)
        n = len(self.means)
        if not (len(self.rots) == len(self.log_scales) == len(self.opacity_raw) == len(self.sh) == n):
            raise DataContractError("gaussian attribute arrays disagree on count")
        if self.motion_coeffs is not None and len(self.motion_coeffs) != n:
            raise DataContractError("motion coefficient rows disagree with gaussian count")

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian3D:
        mc = None if self.motion_coeffs is None else self.motion_coeffs[i]
        return Gaussian3D(self.means[i], self.rots[i], self.log_scales[i],
                          float(self.opacity_raw[i]), self.sh[i], mc)

    @staticmethod
    def empty(sh_coeffs=16, motion_dim=None, dtype=np.float32):
        mc = None if motion_dim is None else np.zeros((0, motion_dim), dtype=dtype)
        return GaussianBlock(
            np.zeros((0, 3), dtype=dtype), np.zeros((0, 4), dtype=dtype),
            np.zeros((0, 3), dtype=dtype), np.zeros((0,), dtype=dtype),
            np.zeros((0, 3, sh_coeffs), dtype=dtype), mc)

    def arrays(self):
        out = {"means": self.means, "rots": self.rots, "log_scales": self.log_scales,
               "opacity_raw": self.opacity_raw, "sh": self.sh}
        if self.motion_coeffs is not None:
            out["motion_coeffs"] = self.motion_coeffs
        return out


@dataclass
class GaussianSet:
    """Disjoint static/dynamic partition; rendering composites the union."""

    statics: GaussianBlock
    dynamics: GaussianBlock

    def __len__(self):
        return len(self.statics) + len(self.dynamics)

    @property
    def motion_dim(self):
        mc = self.dynamics.motion_coeffs
        return 0 if mc is None else mc.shape[1]


@dataclass
class CameraPose:
    """Pinhole intrinsics + world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray    # (4,) unit quaternion, w first
    trans: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataContractError("focal lengths must be positive")
        self.rot = geometry.quat_normalize(self.rot)
        self.trans = np.asarray(self.trans, dtype=np.float64)

    @property
    def R(self):
        return geometry.quat_to_mat(self.rot)

    @property
    def center(self):
        return -self.R.T @ self.trans

    def world_to_cam(self, pts):
        return np.asarray(pts) @ self.R.T + self.trans

    def to_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.trans
        return m

    @classmethod
    def from_matrix(cls, m, fx, fy, cx, cy, width, height):
        m = np.asarray(m, dtype=np.float64)
        return cls(fx, fy, cx, cy, width, height,
                   geometry.mat_to_quat(m[:3, :3]), m[:3, 3].copy())

    def replaced(self, rot=None, trans=None):
        return CameraPose(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          self.rot if rot is None else rot,
                          self.trans if trans is None else trans)


@dataclass
class TestView:
    cam: CameraPose
    t: int
    image: np.ndarray  # (H, W, 3) in [0, 1]


@dataclass
class SceneBundle:
    """In-memory form of the on-disk dataset directory."""

    frames: np.ndarray            # (T, H, W, 3) float32 in [0, 1]
    depths: np.ndarray            # (T, H, W) float32, 0 marks no-geometry
    masks: np.ndarray             # (T, H, W) bool motion masks
    cam_init: list                # T CameraPose (possibly corrupted)
    cam_gt: list                  # T CameraPose (evaluation only)
    timesteps: np.ndarray         # strictly increasing ints 0..T-1
    test_views: list = field(default_factory=list)
    bg_color: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def image_hw(self):
        return self.frames.shape[1], self.frames.shape[2]

    def validate(self):
        T, H, W, _ = self.frames.shape
        if self.depths.shape != (T, H, W):
            raise DataContractError("depth maps do not align with frames")
        if self.masks.shape != (T, H, W):
            raise DataContractError("motion masks do not align with frames")
        if len(self.cam_init) != T or len(self.cam_gt) != T:
            raise DataContractError("camera list length does not match frame count")
        if np.any(np.diff(self.timesteps) <= 0):
            raise DataContractError("timesteps must be strictly increasing")
        if np.any(self.depths < 0):
            raise DataContractError("depth maps must be non-negative")
        for cam in list(self.cam_init) + list(self.cam_gt) + [v.cam for v in self.test_views]:
            if (cam.width, cam.height) != (W, H):
                raise DataContractError("camera image size disagrees with frames")
        return self


@dataclass
class PointCloud:
    """Unprojected pixels with their provenance, used to seed Gaussians."""

    xyz: np.ndarray       # (M, 3)
    rgb: np.ndarray       # (M, 3)
    frame_idx: np.ndarray  # (M,)
    pix_y: np.ndarray     # (M,)
    pix_x: np.ndarray     # (M,)

    def __len__(self):
        return len(self.xyz)


def unproject_bundle(bundle: SceneBundle, stride: int = 1, use_gt_cams: bool = False) -> PointCloud:
    """Lift every valid (depth > 0) pixel of every frame into world space."""
    cams = bundle.cam_gt if use_gt_cams else bundle.cam_init
    xs, cs, fi, py, px = [], [], [], [], []
    for t in range(bundle.n_frames):
        cam = cams[t]
        depth = bundle.depths[t][::stride, ::stride]
        frame = bundle.frames[t][::stride, ::stride]
        H, W = depth.shape
        yy, xx = np.mgrid[0:H, 0:W]
        yy = yy * stride
        xx = xx * stride
        valid = depth > 0
        z = depth[valid].astype(np.float64)
        u = xx[valid].astype(np.float64)
        v = yy[valid].astype(np.float64)
        pc = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=-1)
        pw = (pc - cam.trans) @ cam.R
        xs.append(pw)
        cs.append(frame[valid])
        fi.append(np.full(len(pw), t, dtype=np.int64))
        py.append(yy[valid])
        px.append(xx[valid])
    return PointCloud(np.concatenate(xs), np.concatenate(cs), np.concatenate(fi),
                      np.concatenate(py), np.concatenate(px))


def _init_log_scales(xyz, cap_quantile=0.9):
    """Isotropic log-scale: log mean distance to the 3 nearest init neighbors.

    Sparse regions (horizon points in a desk-scale cloud) produce huge
    neighbor distances; capping at a quantile keeps those splats from
    blanketing the image.
    """
    n = len(xyz)
    if n < 2:
        d = np.full(n, 0.1)
    else:
        k = min(4, n)
        dist, _ = cKDTree(xyz).query(xyz, k=k)
        d = dist[:, 1:].mean(axis=1)
        d = np.minimum(d, np.quantile(d, cap_quantile))
    d = np.maximum(d, 1e-7)
    return np.repeat(np.log(d)[:, None], 3, axis=1)


def split_by_mask(points: PointCloud, masks, n_sample: int, *, rng,
                  motion_dim: int = 16, coeff_scale: float = 0.1,
                  sh_coeffs: int = 16, dtype=np.float32) -> GaussianSet:
    """Seed static/dynamic Gaussians from an unprojected point cloud.

    Points whose source pixel lies inside the frame's motion mask become
    dynamic, all others static. Exactly ``min(n_sample, len(points))`` points
    are drawn uniformly without replacement. Initial attributes follow the
    3DGS convention: isotropic log-scale from neighbor distances, opacity 0.1
    (pre-sigmoid), identity rotation, SH degree 0 from the pixel color.
    """
    masks = np.asarray(masks)
    total = len(points)
    if n_sample > total:
        raise DataContractError(f"n_sample {n_sample} exceeds available points {total}")
    idx = rng.choice(total, size=n_sample, replace=False)
    idx.sort()

    xyz = points.xyz[idx]
    rgb = points.rgb[idx]
    dyn = masks[points.frame_idx[idx], points.pix_y[idx], points.pix_x[idx]].astype(bool)

    log_scales = _init_log_scales(xyz)
    opacity = np.full(n_sample, float(inverse_sigmoid(0.1)))
    rots = np.zeros((n_sample, 4))
    rots[:, 0] = 1.0
    sh = np.zeros((n_sample, 3, sh_coeffs))
    sh[:, :, 0] = rgb_to_sh_dc(rgb)

    def block(sel, with_motion):
        mc = None
        if with_motion:
            mc = (coeff_scale * rng.standard_normal((int(sel.sum()), motion_dim))).astype(dtype)
        return GaussianBlock(xyz[sel].astype(dtype), rots[sel].astype(dtype),
                             log_scales[sel].astype(dtype), opacity[sel].astype(dtype),
                             sh[sel].astype(dtype), mc)

    return GaussianSet(statics=block(~dyn, False), dynamics=block(dyn, True))
