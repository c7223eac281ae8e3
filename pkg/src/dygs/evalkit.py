"""Image-quality and trajectory metrics plus the pose-free test-camera
alignment protocol (nearest training camera, then photometric refinement).

Trajectory evaluation aligns estimated camera centers to ground truth with a
closed-form Sim(3) (Umeyama) fit; ATE is the RMSE of aligned positions, RPE
is evaluated on consecutive-frame relative transforms after scale correction
(rotation part in degrees, translation in scene units).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from .rasterizer import CameraParams, render_graph, scene_tensors
from .scene_model import CameraPose


def psnr(a, b):
    """10 log10(1 / MSE) for [0,1] images; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b):
    """Windowed SSIM (11x11 Gaussian, sigma 1.5) on [0,1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    return float(losses_mod.ssim(ad.Tensor(a), ad.Tensor(b)).item())


@dataclass
class TrajectoryMetrics:
    ate: float
    rpe_t: float
    rpe_r: float
    alignment: dict

    def to_dict(self):
        return {"ate": self.ate, "rpe_t": self.rpe_t, "rpe_r_deg": self.rpe_r,
                "alignment": self.alignment}


def umeyama(src, dst):
    """Least-squares similarity dst ~ s R src + t. Returns (s, R, t)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    var_s = (xs * xs).sum() / n
    if var_s <= 0:
        raise ValueError("degenerate trajectory: all positions identical")
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def _rel_transform(cam_a: CameraPose, cam_b: CameraPose):
    """Relative motion a->b expressed in a's camera frame: (R_rel, t_rel)."""
    R_rel = cam_a.R @ cam_b.R.T
    t_rel = cam_a.R @ (cam_b.center - cam_a.center)
    return R_rel, t_rel


def trajectory_metrics(est, gt) -> TrajectoryMetrics:
    """ATE / RPE between two equal-length pose sequences (>= 2 poses)."""
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    p_est = np.stack([c.center for c in est])
    p_gt = np.stack([c.center for c in gt])
    s, R, t = umeyama(p_est, p_gt)
    aligned = p_est @ (s * R).T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned - p_gt) ** 2, axis=1))))

    rot_errs = []
    trans_errs = []
    for i in range(len(est) - 1):
        Re, te = _rel_transform(est[i], est[i + 1])
        Rg, tg = _rel_transform(gt[i], gt[i + 1])
        cosang = (np.trace(Re.T @ Rg) - 1.0) * 0.5
        rot_errs.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        trans_errs.append(np.linalg.norm(s * te - tg))
    from .geometry import mat_to_quat

    alignment = {"scale": s, "rotation_quat": mat_to_quat(R).tolist(),
                 "translation": t.tolist()}
    return TrajectoryMetrics(ate=ate, rpe_t=float(np.mean(trans_errs)),
                             rpe_r=float(np.mean(rot_errs)), alignment=alignment)


# -- rendering a trained model ---------------------------------------------------------


def render_model(model, cam: CameraPose, t: int, cam_params: CameraParams = None):
    """Render a TrainedModel at (cam, t); returns the graph output dict."""
    tensors = scene_tensors(model.gaussians, net=model.net, t=t, t_max=model.t_max)
    cp = cam_params or CameraParams(cam, dtype=tensors[0].value.dtype, trainable=False)
    pose = cp.pose()
    return render_graph(*tensors, model.sh_degree, cp.rotation_tensor(),
                        cp.translation_tensor(), pose.fx, pose.fy, pose.cx, pose.cy,
                        pose.width, pose.height,
                        np.asarray(model.bg_color, dtype=tensors[0].value.dtype))


def align_test_camera(train_cams, test_image, model, t, *, nominal_pose=None,
                      dataset_cams=None, refine_steps=200, lr_rot=1e-5,
                      lr_trans=1e-6, patience=50):
    """Pose a held-out view: nearest calibrated training camera, then refine.

    The nearest neighbor is picked by position distance between the view's
    recorded pose and the dataset's cameras (both live in the dataset frame);
    the matching refined training camera seeds 6-DoF photometric refinement
    with the model frozen. If the loss fails to improve for `patience`
    consecutive steps the best-so-far pose is returned with diverged=True.
    """
    if nominal_pose is None:
        idx = 0
    else:
        ref = dataset_cams if dataset_cams is not None else train_cams
        centers = np.stack([c.center for c in ref])
        idx = int(np.argmin(np.linalg.norm(centers - nominal_pose.center, axis=1)))
    init = train_cams[idx]
    info = {"nn_index": idx, "diverged": False, "refine_steps": refine_steps}
    if refine_steps <= 0:
        return init.replaced(), info

    from .trainer import _Adam  # shared Adam core

    dtype = np.float64
    cp = CameraParams(init.replaced(), dtype=dtype, trainable=True)
    target = np.asarray(test_image, dtype=dtype)
    adam_o = _Adam(3, dtype)
    adam_d = _Adam(3, dtype)
    best = (np.inf, cp.pose(), 0)
    stall = 0
    for it in range(refine_steps):
        out = render_model(model, None, t, cam_params=cp)
        loss = losses_mod.recon_loss(out["color"], target)
        val = float(loss.item())
        if val < best[0]:
            best = (val, cp.pose(), it)
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                info["diverged"] = True
                break
        loss.backward()
        step_o = adam_o.step(cp.omega.grad, lr_rot, 0.9, 0.999, 1e-15)
        step_d = adam_d.step(cp.delta.grad, lr_trans, 0.9, 0.999, 1e-15)
        cp.retract(step_o, step_d)
        cp.omega.grad = None
        cp.delta.grad = None
    final = cp.pose()
    out = render_model(model, None, t, cam_params=CameraParams(final, trainable=False))
    final_loss = float(losses_mod.recon_loss(ad.Tensor(out["color"].value.astype(np.float64)),
                                             target).item())
    if final_loss > best[0]:
        final = best[1]
    info["loss"] = min(final_loss, best[0])
    return final, info


def evaluate_model(model, bundle, *, align="refine", refine_steps=200,
                   view_subset=None, n_workers=1, lr_rot=1e-5, lr_trans=1e-6):
    """Score a trained model on a bundle's held-out views + camera trajectory.

    align: 'none' renders at each view's recorded pose, 'nearest' at the
    nearest refined training camera, 'refine' adds photometric pose
    refinement (the pose-free protocol).
    """
    views = bundle.test_views
    if view_subset is not None:
        views = [views[i] for i in view_subset]

    dataset_cams = bundle.cam_init

    def score(view):
        if align == "none":
            pose, info = view.cam.replaced(), {"mode": "none"}
        else:
            steps = refine_steps if align == "refine" else 0
            pose, info = align_test_camera(model.cams, view.image, model, view.t,
                                           nominal_pose=view.cam, dataset_cams=dataset_cams,
                                           refine_steps=steps, lr_rot=lr_rot,
                                           lr_trans=lr_trans)
        out = render_model(model, pose, view.t)
        rendered = np.clip(out["color"].value, 0.0, 1.0)
        return {"t": int(view.t), "psnr": psnr(rendered, view.image),
                "ssim": ssim(rendered, view.image),
                "align": info, "rendered": rendered}

    if n_workers > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            per_view = list(ex.map(score, views))
    else:
        per_view = [score(v) for v in views]

    result = {
        "n_views": len(per_view),
        "psnr_mean": float(np.mean([v["psnr"] for v in per_view])) if per_view else None,
        "ssim_mean": float(np.mean([v["ssim"] for v in per_view])) if per_view else None,
        "views": [{k: v[k] for k in ("t", "psnr", "ssim", "align")} for v in per_view],
    }
    if len(model.cams) == len(bundle.cam_gt) >= 2:
        tm = trajectory_metrics(model.cams, bundle.cam_gt)
        result["trajectory"] = tm.to_dict()
    renders = [(v["t"], v["rendered"]) for v in per_view]
    return result, renders
