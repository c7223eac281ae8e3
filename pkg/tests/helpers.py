"""Shared test utilities: finite-difference gradient checking and
well-conditioned random scene sampling for rasterizer Jacobian tests."""

import numpy as np

from dygs import autodiff as ad
from dygs.scene_model import CameraPose, covariance_from, inverse_sigmoid

FD_EPS = 1e-4


def fd_gradcheck(build, arrays, rtol=1e-4, atol=1e-8, eps=FD_EPS, rng=None,
                 max_per_param=None):
    """Compare tape gradients of build(tensors)->scalar against central FD.

    `arrays` maps names to float64 arrays. Returns a list of mismatch
    descriptions (empty = pass).
    """
    params = {k: ad.Param(a) for k, a in arrays.items()}
    out = build(params)
    out.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
             for k, p in params.items()}

    def value():
        consts = {k: ad.Tensor(a) for k, a in arrays.items()}
        return float(build(consts).item())

    failures = []
    for k, a in arrays.items():
        flat = a.ravel()
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = (rng or np.random.default_rng(0)).choice(
                flat.size, size=max_per_param, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            fp = value()
            flat[i] = old - eps
            fm = value()
            flat[i] = old
            fd = (fp - fm) / (2 * eps)
            an = grads[k].ravel()[i]
            if abs(an - fd) > atol + rtol * max(abs(an), abs(fd)):
                failures.append(f"{k}[{i}]: analytic {an:.8g} vs fd {fd:.8g}")
    return failures


def make_camera(width=16, height=16, f=20.0):
    return CameraPose(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height,
                      rot=np.array([1.0, 0, 0, 0]), trans=np.zeros(3))


def sh_basis_np(dirs, degree):
    """Real SH basis values (N, (degree+1)^2), independent numpy evaluation."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, 0.28209479177387814)]
    if degree >= 1:
        c1 = 0.4886025119029199
        cols += [-c1 * y, c1 * z, -c1 * x]
    if degree >= 2:
        c2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
              -1.0925484305920792, 0.5462742152960396)
        cols += [c2[0] * x * y, c2[1] * y * z, c2[2] * (2 * z * z - x * x - y * y),
                 c2[3] * x * z, c2[4] * (x * x - y * y)]
    if degree >= 3:
        c3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
              0.3731763325901154, -0.4570457994644658, 1.445305721320277,
              -0.5900435899266435)
        cols += [c3[0] * y * (3 * x * x - y * y), c3[1] * x * y * z,
                 c3[2] * y * (4 * z * z - x * x - y * y),
                 c3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y),
                 c3[4] * x * (4 * z * z - x * x - y * y),
                 c3[5] * z * (x * x - y * y), c3[6] * x * (x * x - 3 * y * y)]
    return np.stack(cols, axis=1)


def _pair_margins(vals, cam, near=0.01):
    """Recompute pair-level quantities independently of the rasterizer and
    report the smallest margins to any cull/cutoff boundary."""
    from dygs.rasterizer import ALPHA_FLOOR, COV2D_REG, CUTOFF_MAHA

    means = vals["means"]
    quats = vals["quats"] / np.linalg.norm(vals["quats"], axis=1, keepdims=True)
    scales = np.exp(vals["log_scales"])
    alphas = 1.0 / (1.0 + np.exp(-vals["opacity_raw"]))
    R = cam.R
    cov3 = covariance_from(quats, scales)
    p_cam = means @ R.T + cam.trans
    z = p_cam[:, 2]
    z_margin = (z - near).min()
    maha_margin = np.inf
    alpha_margin = np.inf
    degree = int(np.sqrt(vals["sh"].shape[2])) - 1
    dirs = means - cam.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    basis = sh_basis_np(dirs, degree)
    color_pre = np.einsum("nck,nk->nc", vals["sh"], basis) + 0.5
    color_margin = np.abs(color_pre).min()
    H, W = cam.height, cam.width
    for i in range(len(means)):
        if z[i] <= near:
            continue
        x, y, zz = p_cam[i]
        J = np.array([[cam.fx / zz, 0, -cam.fx * x / zz ** 2],
                      [0, cam.fy / zz, -cam.fy * y / zz ** 2]])
        cov2 = J @ R @ cov3[i] @ R.T @ J.T + COV2D_REG * np.eye(2)
        conic = np.linalg.inv(cov2)
        mx = cam.fx * x / zz + cam.cx
        my = cam.fy * y / zz + cam.cy
        cut = min(CUTOFF_MAHA, max(2.0 * np.log(alphas[i] / ALPHA_FLOOR), 0.0))
        yy, xx = np.mgrid[0:H, 0:W]
        d = np.stack([xx.ravel() - mx, yy.ravel() - my], axis=1)
        m = np.einsum("pi,ij,pj->p", d, conic, d)
        maha_margin = min(maha_margin, np.abs(m - cut).min())
        aeff = alphas[i] * np.exp(-0.5 * m)
        alpha_margin = min(alpha_margin,
                           (np.abs(aeff - ALPHA_FLOOR) / ALPHA_FLOOR).min())
    return z_margin, maha_margin, alpha_margin, color_margin


def reference_render(vals, cam, bg, sh_degree=0, near=0.01):
    """Brute-force per-pixel loop renderer, independent of the vectorized
    compositing path (same mathematical definition: EWA projection, peak-1
    Gaussian weights, 3-sigma + alpha-floor cutoffs, front-to-back blending,
    alpha-normalized expected depth)."""
    from dygs.rasterizer import (ALPHA_CEIL, ALPHA_FLOOR, COV2D_REG,
                                 CUTOFF_MAHA, DEPTH_ALPHA_MIN)

    means = np.asarray(vals["means"], dtype=np.float64)
    quats = np.asarray(vals["quats"], dtype=np.float64)
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    scales = np.exp(np.asarray(vals["log_scales"], dtype=np.float64))
    alphas = 1.0 / (1.0 + np.exp(-np.asarray(vals["opacity_raw"], dtype=np.float64)))
    sh = np.asarray(vals["sh"], dtype=np.float64)
    R = cam.R
    H, W = cam.height, cam.width
    n = len(means)

    items = []
    for i in range(n):
        p = R @ means[i] + cam.trans
        if p[2] <= near:
            continue
        x, y, z = p
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z ** 2],
                      [0, cam.fy / z, -cam.fy * y / z ** 2]])
        cov3 = covariance_from(quats[i], scales[i])
        cov2 = J @ R @ cov3 @ R.T @ J.T + COV2D_REG * np.eye(2)
        conic = np.linalg.inv(cov2)
        m2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        d = means[i] - cam.center
        d = d / np.linalg.norm(d)
        color = np.maximum(sh[i] @ sh_basis_np(d[None], sh_degree)[0] + 0.5, 0.0)
        items.append((z, m2, conic, color, alphas[i]))
    items.sort(key=lambda it: it[0])

    color_img = np.zeros((H, W, 3))
    alpha_img = np.zeros((H, W))
    depth_raw = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            T = 1.0
            for z, m2, conic, color, alpha in items:
                dd = np.array([px, py], dtype=np.float64) - m2
                maha = dd @ conic @ dd
                if maha > CUTOFF_MAHA:
                    continue
                a = alpha * np.exp(-0.5 * maha)
                if a < ALPHA_FLOOR:
                    continue
                a = min(a, ALPHA_CEIL)
                w = a * T
                color_img[py, px] += w * color
                alpha_img[py, px] += w
                depth_raw[py, px] += w * z
                T *= 1.0 - a
    color_img += (1.0 - alpha_img)[:, :, None] * np.asarray(bg)
    depth = np.where(alpha_img > DEPTH_ALPHA_MIN,
                     depth_raw / np.maximum(alpha_img, 1e-12), 0.0)
    return color_img, depth, alpha_img


def random_scene(rng, n_gauss=6, width=16, height=16, sh_degree=0,
                 max_tries=200, near=0.01):
    """Random Gaussian attributes + camera, rejection-sampled so no pair sits
    near a cull/cutoff/clamp boundary.

    A central-difference step of 1e-4 moves any pair's Mahalanobis value by
    at most ~1e-2 at these scene scales, so the margins below guarantee FD
    never flips a pair's membership.
    """
    cam = make_camera(width, height)
    k = (sh_degree + 1) ** 2
    for _ in range(max_tries):
        means = np.stack([rng.uniform(-1.6, 1.6, n_gauss),
                          rng.uniform(-1.2, 1.2, n_gauss),
                          rng.uniform(3.5, 7.0, n_gauss)], axis=1)
        vals = {
            "means": means,
            "quats": rng.standard_normal((n_gauss, 4)) + np.array([2.0, 0, 0, 0]),
            "log_scales": np.log(rng.uniform(0.12, 0.45, (n_gauss, 3))),
            "opacity_raw": inverse_sigmoid(rng.uniform(0.25, 0.9, n_gauss)),
            "sh": np.concatenate([
                rng.uniform(-1.2, 1.4, (n_gauss, 3, 1)),
                rng.uniform(-0.25, 0.25, (n_gauss, 3, k - 1)),
            ], axis=2) if k > 1 else rng.uniform(-1.2, 1.4, (n_gauss, 3, 1)),
        }
        zm, mm, am, cm = _pair_margins(vals, cam, near)
        if zm > 0.1 and mm > 0.02 and am > 0.01 and cm > 0.02:
            return vals, cam
    raise RuntimeError("could not sample a well-conditioned scene")
