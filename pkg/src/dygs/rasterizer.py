"""Differentiable CPU splatting: EWA projection + front-to-back compositing.

The projection/shading half is expressed in tape ops, so gradients w.r.t.
Gaussian attributes, motion outputs, and the camera's local SE(3) increment
come from the tape. The per-pixel compositing half is one custom op with a
handwritten vectorized backward: pairs (gaussian, covered pixel) are built
with 3-sigma bounding boxes, stably sorted by pixel (preserving depth order),
and blended with exclusive-prefix transmittances computed per pixel segment.
All reductions use np.bincount / fixed-order cumsums, so results are
bit-identical regardless of worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import motion as motion_mod
from .geometry import mat_to_quat, quat_to_mat_t, so3_exp, so3_exp_t
from .scene_model import CameraPose, GaussianSet

NEAR_PLANE = 0.01
COV2D_REG = 0.3          # pixel^2, added before inversion (3DGS convention)
CUTOFF_MAHA = 9.0        # 3-sigma Mahalanobis support
ALPHA_FLOOR = 1.0 / 255.0
ALPHA_CEIL = 0.9999      # keeps log1p(-a) finite
DEPTH_ALPHA_MIN = 1e-4   # below this accumulated alpha the depth is sentinel 0

SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray           # (2,) pixels
    cov2d: np.ndarray            # (2, 2) unregularized screen covariance
    depth_cam: float
    color: np.ndarray | None = None
    alpha: float | None = None


@dataclass
class RenderOutput:
    color: np.ndarray            # (H, W, 3)
    depth: np.ndarray            # (H, W) alpha-normalized expected depth
    alpha_acc: np.ndarray        # (H, W)


class CameraParams:
    """A base pose plus an optimizable local increment (omega, delta).

    The increment acts about the camera center: orientation is perturbed as
    R = exp([omega]x) R0 while the center moves by delta in world units, so
    rotation steps never drag the camera position (t = -R (c0 + delta)).
    Gradients are taken at omega = delta = 0 and folded into the base pose by
    ``retract`` after each optimizer step.
    """

    def __init__(self, cam: CameraPose, dtype=np.float32, trainable=True):
        self.base = cam
        self.dtype = dtype
        self.omega = ad.Param(np.zeros(3, dtype=dtype)) if trainable else None
        self.delta = ad.Param(np.zeros(3, dtype=dtype)) if trainable else None
        self._rot_cache = None

    def rotation_tensor(self):
        R0 = ad.Tensor(self.base.R.astype(self.dtype))
        if self.omega is None:
            return R0
        self._rot_cache = so3_exp_t(self.omega) @ R0
        return self._rot_cache

    def translation_tensor(self):
        if self.delta is None:
            return ad.Tensor(self.base.trans.astype(self.dtype))
        R = self._rot_cache if self._rot_cache is not None else self.rotation_tensor()
        cen = ad.Tensor(self.base.center.astype(self.dtype)) + self.delta
        return (R @ cen.reshape((3, 1))).reshape(3) * -1.0

    def params(self):
        return [] if self.omega is None else [self.omega, self.delta]

    def retract(self, step_omega, step_delta):
        """Fold an increment into the base pose; increments stay at zero.

        Exactly-zero steps leave the stored pose bit-identical (no matrix
        round trips), so frozen poses stay frozen.
        """
        so = np.asarray(step_omega, dtype=np.float64)
        sd = np.asarray(step_delta, dtype=np.float64)
        self._rot_cache = None
        if not (np.any(so != 0.0) or np.any(sd != 0.0)):
            return
        R = so3_exp(so) @ self.base.R if np.any(so != 0.0) else self.base.R
        center = self.base.center + sd
        self.base = self.base.replaced(rot=mat_to_quat(R), trans=-R @ center)

    def pose(self) -> CameraPose:
        return self.base


# -- spherical harmonics -------------------------------------------------------------


def eval_sh(sh, dirs, degree):
    """View-dependent color: (N, 3, K) coeffs x (N, 3) unit dirs -> (N, 3).

    Follows the 3DGS convention: result is offset by +0.5 and clamped at 0
    by the caller.
    """
    n = dirs.value.shape[0]
    one = ad.Tensor(np.ones(n, dtype=dirs.value.dtype))
    basis = [one * 0.28209479177387814]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis += [y * -SH_C1, z * SH_C1, x * -SH_C1]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis += [xy * SH_C2[0], yz * SH_C2[1], (zz * 2.0 - xx - yy) * SH_C2[2],
                  xz * SH_C2[3], (xx - yy) * SH_C2[4]]
    if degree >= 3:
        basis += [(xx * 3.0 - yy) * y * SH_C3[0], xy * z * SH_C3[1],
                  (zz * 4.0 - xx - yy) * y * SH_C3[2],
                  (zz * 2.0 - xx * 3.0 - yy * 3.0) * z * SH_C3[3],
                  (zz * 4.0 - xx - yy) * x * SH_C3[4],
                  (xx - yy) * z * SH_C3[5], (xx - yy * 3.0) * x * SH_C3[6]]
    k = len(basis)
    bmat = ad.stack(basis, axis=1)                      # (N, k)
    return ad.tsum(sh[:, :, 0:k] * bmat.reshape((n, 1, k)), axis=2)


# -- compositing custom op -----------------------------------------------------------


def _radii_from_cov(cov, alpha=None):
    """Support radius per Gaussian: 3 sigma, shrunk to the alpha-floor level set.

    Pairs with alpha * G below ALPHA_FLOOR are discarded by compositing, so a
    Gaussian with peak alpha only needs radius sigma * sqrt(2 ln(255 alpha));
    using it for the bounding box changes nothing in the output.
    """
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    cut = np.full(len(a), CUTOFF_MAHA)
    if alpha is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            thr = 2.0 * np.log(np.maximum(alpha, 0.0) / ALPHA_FLOOR)
        cut = np.minimum(cut, np.maximum(thr, 0.0))
    return np.ceil(np.sqrt(cut * np.maximum(lam_max, 0.0)))


def composite(mean2d, conic, color, alpha, depth, radii, H, W):
    """Alpha-composite projected Gaussians front to back.

    Inputs are Tensors over N visible Gaussians; `radii` is a plain array of
    bounding-box radii. Returns an (H, W, 5) Tensor packing [rgb, alpha_acc,
    unnormalized expected depth]; slicing it keeps one backward pass.
    Gaussians are depth-sorted internally (stable: ties keep input order).
    """
    mv, cov_abc, colv = mean2d.value, conic.value, color.value
    av, zv = alpha.value, depth.value
    dtype = colv.dtype
    n = len(av)
    HW = H * W
    zero_img = np.zeros((H, W, 5), dtype=dtype)
    parents = (mean2d, conic, color, alpha, depth)
    if n == 0:
        return ad.custom_op(zero_img, parents, lambda g: None)

    order = np.argsort(zv, kind="stable")
    r = radii[order]
    mx, my = mv[order, 0], mv[order, 1]
    x0 = np.maximum(np.floor(mx - r), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(mx + r), W - 1).astype(np.int64)
    y0 = np.maximum(np.floor(my - r), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(my + r), H - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    live = (nx > 0) & (ny > 0)
    gsel = order[live]
    x0, y0, nx, ny = x0[live], y0[live], nx[live], ny[live]
    counts = nx * ny
    P = int(counts.sum())
    if P == 0:
        return ad.custom_op(zero_img, parents, lambda g: None)

    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pid = np.repeat(np.arange(len(gsel)), counts)
    off = np.arange(P, dtype=np.int64) - starts[pid]
    px = x0[pid] + off % nx[pid]
    py = y0[pid] + off // nx[pid]
    gg = gsel[pid]                                   # original gaussian per pair

    dx = px.astype(dtype) - mv[gg, 0]
    dy = py.astype(dtype) - mv[gg, 1]
    A, B, C = cov_abc[gg, 0], cov_abc[gg, 1], cov_abc[gg, 2]
    maha = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    # cheap prefilter (slightly loose), then the exact alpha-floor test
    pre = maha <= CUTOFF_MAHA
    pix_all = py * W + px
    gg, dx, dy, maha = gg[pre], dx[pre], dy[pre], maha[pre]
    pix_all = pix_all[pre]
    G = np.exp(-0.5 * maha)
    aeff = av[gg] * G
    keep = aeff >= ALPHA_FLOOR
    pix = pix_all[keep]
    gg, dx, dy, G, aeff = gg[keep], dx[keep], dy[keep], G[keep], aeff[keep]
    if len(pix) == 0:
        return ad.custom_op(zero_img, parents, lambda g: None)

    # stable pixel sort keeps the per-pixel depth order from pair generation
    ord2 = np.argsort(pix, kind="stable")
    pix, gg, dx, dy, G, aeff = (a[ord2] for a in (pix, gg, dx, dy, G, aeff))
    clamped = aeff > ALPHA_CEIL
    aeff = np.minimum(aeff, ALPHA_CEIL)

    a64 = aeff.astype(np.float64)
    log1m = np.log1p(-a64)
    csum = np.cumsum(log1m)
    excl = csum - log1m
    is_start = np.empty(len(pix), dtype=bool)
    is_start[0] = True
    is_start[1:] = pix[1:] != pix[:-1]
    seg_of = np.cumsum(is_start) - 1
    seg_start = np.flatnonzero(is_start)
    t_before = np.exp(excl - excl[seg_start][seg_of])
    w = a64 * t_before

    buf = np.zeros((HW, 5), dtype=np.float64)
    for ch in range(3):
        buf[:, ch] = np.bincount(pix, weights=w * colv[gg, ch], minlength=HW)
    buf[:, 3] = np.bincount(pix, weights=w, minlength=HW)
    buf[:, 4] = np.bincount(pix, weights=w * zv[gg], minlength=HW)
    out_val = buf.reshape(H, W, 5).astype(dtype)

    def bwd(g):
        gf = g.reshape(HW, 5).astype(np.float64)
        gp = gf[pix]                                  # (P, 5)
        u = (gp[:, 0:3] * colv[gg]).sum(axis=1) + gp[:, 3] + gp[:, 4] * zv[gg]
        v = u * w
        cv = np.cumsum(v)
        base = cv[seg_start] - v[seg_start]
        incl = cv - base[seg_of]
        seg_tot = np.bincount(seg_of, weights=v)[seg_of]
        suffix = seg_tot - incl
        da = u * t_before - suffix / (1.0 - a64)
        da[clamped] = 0.0
        dalpha = G * da
        dG = av[gg] * da
        dmaha = -0.5 * G * dG
        dA = dx * dx * dmaha
        dB = 2.0 * dx * dy * dmaha
        dC = dy * dy * dmaha
        Ak, Bk, Ck = cov_abc[gg, 0], cov_abc[gg, 1], cov_abc[gg, 2]
        dmx = -(2.0 * Ak * dx + 2.0 * Bk * dy) * dmaha
        dmy = -(2.0 * Bk * dx + 2.0 * Ck * dy) * dmaha

        def acc(weights):
            return np.bincount(gg, weights=weights, minlength=n)

        if color.requires_grad:
            gc = np.stack([acc(w * gp[:, ch]) for ch in range(3)], axis=1)
            color._accum(gc.astype(dtype))
        if depth.requires_grad:
            depth._accum(acc(w * gp[:, 4]).astype(dtype))
        if alpha.requires_grad:
            alpha._accum(acc(dalpha).astype(dtype))
        if conic.requires_grad:
            gk = np.stack([acc(dA), acc(dB), acc(dC)], axis=1)
            conic._accum(gk.astype(dtype))
        if mean2d.requires_grad:
            gm = np.stack([acc(dmx), acc(dmy)], axis=1)
            mean2d._accum(gm.astype(dtype))

    return ad.custom_op(out_val, parents, bwd)


# -- projection + full render graph ---------------------------------------------------


def _project_graph(means, cov3, cam_rot, cam_trans, fx, fy, cx, cy):
    """Tape EWA projection. Returns (mean2d, cov2d_raw, z) for all Gaussians."""
    n = means.value.shape[0]
    p_cam = means @ cam_rot.swapaxes(0, 1) + cam_trans
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    m2x = x * inv_z * fx + cx
    m2y = y * inv_z * fy + cy
    mean2d = ad.stack([m2x, m2y], axis=1)

    zero = ad.Tensor(np.zeros(n, dtype=means.value.dtype))
    inv_z2 = inv_z * inv_z
    j = ad.stack([inv_z * fx, zero, x * inv_z2 * (-fx),
                  zero, inv_z * fy, y * inv_z2 * (-fy)], axis=1).reshape((n, 2, 3))
    cov_cam = cam_rot @ cov3 @ cam_rot.swapaxes(0, 1)
    cov2 = j @ cov_cam @ j.swapaxes(1, 2)
    return mean2d, cov2, z


def _conic_from_cov(cov2reg):
    a = cov2reg[:, 0, 0]
    b = cov2reg[:, 0, 1]
    c = cov2reg[:, 1, 1]
    det = a * c - b * b
    return ad.stack([c / det, b / (-det), a / det], axis=1)


def render_graph(means, quats, log_scales, opacity_raw, sh, sh_degree,
                 cam_rot, cam_trans, fx, fy, cx, cy, width, height,
                 bg, near=NEAR_PLANE):
    """Build the differentiable render graph for already time-resolved Gaussians.

    All gaussian arguments are Tensors; `cam_rot`/`cam_trans` come from
    CameraParams. Returns a dict with `color`, `depth`, `alpha` output Tensors
    plus retained intermediates (`mean2d` for densification statistics,
    `visible` index array).
    """
    dtype = means.value.dtype
    bg = np.asarray(bg, dtype=dtype)
    n = means.value.shape[0]

    qn = ad.normalize(quats, axis=1) if n else quats
    scales = ad.exp(log_scales)
    Rg = quat_to_mat_t(qn) if n else ad.Tensor(np.zeros((0, 3, 3), dtype=dtype))
    M = Rg * scales.reshape((n, 1, 3))
    cov3 = M @ M.swapaxes(1, 2)

    mean2d_all, cov2_all, z_all = _project_graph(means, cov3, cam_rot, cam_trans, fx, fy, cx, cy)
    visible = np.flatnonzero(z_all.value > near) if n else np.zeros(0, dtype=np.int64)

    mean2d = mean2d_all[visible].retain_grad()
    cov2 = cov2_all[visible]
    zvis = z_all[visible]
    eye2 = np.zeros((1, 2, 2), dtype=dtype)
    eye2[0, 0, 0] = eye2[0, 1, 1] = COV2D_REG
    cov2reg = cov2 + ad.Tensor(eye2)
    conic = _conic_from_cov(cov2reg)
    alpha = ad.sigmoid(opacity_raw)[visible]
    radii = (_radii_from_cov(cov2reg.value, alpha.value) if len(visible)
             else np.zeros(0))

    cam_center = -(cam_rot.swapaxes(0, 1) @ cam_trans.reshape((3, 1))).reshape(3)
    dirs = ad.normalize(means[visible] - cam_center, axis=1)
    rgb = eval_sh(sh[visible], dirs, sh_degree)
    rgb = ad.maximum(rgb + 0.5, 0.0)

    packed = composite(mean2d, conic, rgb, alpha, zvis, radii, height, width)
    alpha_img = packed[:, :, 3]
    color = packed[:, :, 0:3] + (1.0 - alpha_img).reshape((height, width, 1)) * ad.Tensor(bg)
    depth_valid = alpha_img.value > DEPTH_ALPHA_MIN
    depth = ad.where(depth_valid,
                     packed[:, :, 4] / ad.maximum(alpha_img, 1e-12),
                     ad.Tensor(np.zeros((height, width), dtype=dtype)))
    return {"color": color, "depth": depth, "alpha": alpha_img,
            "mean2d": mean2d, "visible": visible, "radii": radii,
            "n_gaussians": n}


def scene_tensors(gset: GaussianSet, net=None, t=0, t_max=None, trainable=False):
    """Lift a GaussianSet into tape tensors, displacing dynamics to time t.

    Returns (means, quats, log_scales, opacity_raw, sh) concatenated in
    statics-then-dynamics order. With zero motion coefficients the dynamic
    half renders bit-identically to an equivalent static set.
    """
    make = ad.Param if trainable else ad.Tensor
    parts = []
    for block in (gset.statics, gset.dynamics):
        if len(block) == 0:
            continue
        attrs = [make(block.means), make(block.rots), make(block.log_scales),
                 make(block.opacity_raw), make(block.sh)]
        if block.motion_coeffs is not None and net is not None and len(block):
            if t_max is None:
                raise ValueError("t_max required to render dynamic Gaussians")
            if t_max >= 1:
                b_mu, b_q = motion_mod.eval_bases(net, t, t_max)
            else:
                b_mu = ad.Tensor(np.zeros((gset.motion_dim, 3), dtype=block.means.dtype))
                b_q = ad.Tensor(np.zeros((gset.motion_dim, 4), dtype=block.means.dtype))
            coeffs = make(block.motion_coeffs)
            mu_t, q_t = motion_mod.displace_block(attrs[0], attrs[1], coeffs, b_mu, b_q)
            attrs[0], attrs[1] = mu_t, q_t
        parts.append(attrs)
    if not parts:
        dtype = gset.statics.means.dtype
        return (ad.Tensor(np.zeros((0, 3), dtype=dtype)), ad.Tensor(np.zeros((0, 4), dtype=dtype)),
                ad.Tensor(np.zeros((0, 3), dtype=dtype)), ad.Tensor(np.zeros((0,), dtype=dtype)),
                ad.Tensor(np.zeros((0, 3, 16), dtype=dtype)))
    if len(parts) == 1:
        return tuple(parts[0])
    return tuple(ad.concatenate([a, b], axis=0) for a, b in zip(*parts))


def render(gset: GaussianSet, net, cam: CameraPose, t: int, bg=(0.0, 0.0, 0.0),
           t_max=None, sh_degree=0, near=NEAR_PLANE) -> RenderOutput:
    """Forward render of a scene at timestep t (pure; numpy in/out)."""
    if len(gset.dynamics) and net is not None and t_max is None:
        t_max = t if t >= 1 else 1
    tensors = scene_tensors(gset, net=net, t=t, t_max=t_max, trainable=False)
    cp = CameraParams(cam, dtype=tensors[0].value.dtype, trainable=False)
    out = render_graph(*tensors, sh_degree, cp.rotation_tensor(), cp.translation_tensor(),
                       cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, bg, near)
    return RenderOutput(color=out["color"].value.copy(), depth=out["depth"].value.copy(),
                        alpha_acc=out["alpha"].value.copy())


def project(mean, quat, scale, cam: CameraPose, near=NEAR_PLANE,
            sh=None, opacity_raw=None, sh_degree=0):
    """Project one time-resolved Gaussian; None if culled by the near plane.

    `scale` is linear-domain (not log). The returned cov2d is the raw EWA
    covariance; the +0.3 px^2 regularizer is applied only on the compositing
    path before inversion.
    """
    from .geometry import quat_normalize
    from .scene_model import covariance_from

    mean = np.asarray(mean, dtype=np.float64)
    cov3 = covariance_from(quat_normalize(quat), np.asarray(scale, dtype=np.float64))
    cp = CameraParams(cam, dtype=np.float64, trainable=False)
    mean_t = ad.Tensor(mean[None])
    m2, c2, z = _project_graph(mean_t, ad.Tensor(cov3[None]),
                               cp.rotation_tensor(), cp.translation_tensor(),
                               cam.fx, cam.fy, cam.cx, cam.cy)
    depth = float(z.value[0])
    if depth <= near:
        return None
    color = None
    alpha = None
    if sh is not None:
        dirs = ad.normalize(mean_t - ad.Tensor(cam.center[None]), axis=1)
        col = eval_sh(ad.Tensor(np.asarray(sh, dtype=np.float64)[None]), dirs, sh_degree)
        color = np.clip(col.value[0] + 0.5, 0.0, None)
    if opacity_raw is not None:
        alpha = float(1.0 / (1.0 + np.exp(-opacity_raw)))
    return ProjectedGaussian(mean2d=m2.value[0].copy(), cov2d=c2.value[0].copy(),
                             depth_cam=depth, color=color, alpha=alpha)
