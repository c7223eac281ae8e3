"""Joint optimization of Gaussian attributes, motion bases/coefficients, and
camera poses, with warmup-cosine camera schedules and staged SH degrees.

One optimization step renders one training frame, assembles the weighted
objective, backpropagates through the tape, and applies per-group Adam
updates (camera increments are retracted onto SE(3)). All randomness flows
through one seeded generator in a fixed per-iteration order, so a run is
reproducible and checkpoint/restore resumes bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import motion as motion_mod
from .errors import DataContractError, NumericalError
from .io import TrainLog, load_checkpoint, save_checkpoint
from .losses import (GeomRegConfig, LocalPearsonConfig, LossWeights, l1_loss,
                     pearson_depth_loss, ssim, surface_smooth_loss,
                     distance_preserving_loss, total_loss)
from .motion import (MotionBasisNet, MotionWeights, coefficient_locality_loss,
                     sparsity_losses)
from .neighbors import knn_indices
from .rasterizer import CameraParams, render_graph
from .scene_model import (CameraPose, GaussianBlock, GaussianSet, SceneBundle,
                          sh_degree_to_count, split_by_mask, unproject_bundle)

log = logging.getLogger(__name__)

_BLOCK_ATTRS = ("means", "rots", "scales", "opacity", "sh")
_LR_KEY = {"means": "lr_means", "rots": "lr_rots", "scales": "lr_scales",
           "opacity": "lr_opacity", "sh": "lr_sh", "coeffs": "lr_motion_coeffs"}


@dataclass
class DensifyConfig:
    enabled: bool = False
    interval: int = 500
    start_step: int = 500
    stop_step: int = 5000
    grad_threshold: float = 2e-4
    opacity_floor: float = 0.005
    percent_dense: float = 0.01


@dataclass
class TrainConfig:
    main_steps: int = 7000
    sh_warmup_steps: int = 5000
    sh_increase_interval: int = 1000
    sh_max_degree: int = 3
    lr_cam_rot: float = 1e-5
    lr_cam_trans: float = 1e-6
    warmup_fraction: float = 0.10
    lr_means: float = 1.6e-4
    lr_means_final_ratio: float = 0.01
    scale_means_lr_by_extent: bool = True
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rots: float = 1e-3
    lr_motion_coeffs: float = 1e-3
    lr_motion_net: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    n_sample: int = 120_000
    init_stride: int = 1
    init_from_gt_cams: bool = False
    motion_dim: int = 16
    motion_weight_mode: str = "weighted"      # uniform | weighted
    use_depth_loss: bool = True
    use_geom_reg: bool = True
    use_motion_reg: bool = True
    use_sparsity: bool = True
    use_coeff_reg: bool = False               # locality-regularized baseline
    coeff_lambda_w: float = 2.0
    pose_opt: bool = True
    depth_alpha_thresh: float = 0.5
    sh_degree_render_cap: int = 3
    dtype: str = "float32"
    checkpoint_interval: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    geom: GeomRegConfig = field(default_factory=GeomRegConfig)
    local_pearson: LocalPearsonConfig = field(default_factory=LocalPearsonConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def total_steps(self):
        return self.main_steps + self.sh_warmup_steps

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainedModel:
    """What rendering/evaluation needs from a finished run."""

    gaussians: GaussianSet
    net: MotionBasisNet
    cams: list
    t_max: int
    sh_degree: int
    bg_color: np.ndarray


class _Adam:
    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, grad, lr, b1, b2, eps):
        self.t += 1
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        mh = self.m / (1.0 - b1 ** self.t)
        vh = self.v / (1.0 - b2 ** self.t)
        return (-lr) * mh / (np.sqrt(vh) + eps)

    def state(self):
        return self.m, self.v, self.t

    def load(self, m, v, t):
        self.m = np.array(m, dtype=self.m.dtype)
        self.v = np.array(v, dtype=self.v.dtype)
        self.t = int(t)


def _schedule_warmup_cosine(peak, it, total, warmup_fraction):
    if peak == 0.0 or total <= 0:
        return 0.0
    w = max(1.0, warmup_fraction * total)
    if it < w:
        return peak * (it + 1) / w
    frac = (it - w) / max(total - w, 1.0)
    return peak * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))


def _schedule_exp(init, final_ratio, it, total):
    if init == 0.0:
        return 0.0
    frac = min(it / max(total, 1), 1.0)
    return init * (final_ratio ** frac)


class Trainer:
    def __init__(self, bundle: SceneBundle, cfg: TrainConfig, gaussians: GaussianSet = None,
                 net: MotionBasisNet = None):
        bundle.validate()
        self.bundle = bundle
        self.cfg = cfg
        self.dtype = cfg.np_dtype()
        self.rng = np.random.default_rng(cfg.seed)
        self.t_max = max(bundle.n_frames - 1, 1)

        if gaussians is None:
            points = unproject_bundle(bundle, stride=cfg.init_stride,
                                      use_gt_cams=cfg.init_from_gt_cams)
            if len(points) == 0:
                raise DataContractError("bundle has no valid depth to initialize from")
            n_sample = min(cfg.n_sample, len(points))
            gaussians = split_by_mask(points, bundle.masks, n_sample, rng=self.rng,
                                      motion_dim=cfg.motion_dim,
                                      sh_coeffs=sh_degree_to_count(cfg.sh_max_degree),
                                      dtype=self.dtype)
        self.net = net or MotionBasisNet(cfg.motion_dim, rng=self.rng, dtype=self.dtype)
        self._adopt_gaussians(gaussians)

        self.cams = [CameraParams(c.replaced(), dtype=self.dtype, trainable=cfg.pose_opt)
                     for c in bundle.cam_init]
        self._cam_adam = {}
        centers = np.stack([c.center for c in bundle.cam_init])
        self.scene_extent = float(np.linalg.norm(centers, axis=1).max())

        if cfg.motion_weight_mode == "uniform":
            self.motion_weights = MotionWeights.uniform(cfg.motion_dim)
        else:
            self.motion_weights = MotionWeights.cumulative_exponential(cfg.motion_dim)

        self.iteration = 0
        self.loss_history = []
        self._frame_order = np.zeros(0, dtype=np.int64)
        self._frame_ptr = 0
        self._knn_sample = None
        self._knn_idx = None
        self._knn_built_at = -1

    # -- parameter plumbing ------------------------------------------------------

    def _adopt_gaussians(self, gset: GaussianSet):
        self.params = {}
        self._adam = {}
        for prefix, block in (("s", gset.statics), ("d", gset.dynamics)):
            arrays = {"means": block.means, "rots": block.rots, "scales": block.log_scales,
                      "opacity": block.opacity_raw, "sh": block.sh}
            if prefix == "d":
                arrays["coeffs"] = (block.motion_coeffs if block.motion_coeffs is not None
                                    else np.zeros((len(block), self.cfg.motion_dim)))
            for attr, arr in arrays.items():
                p = ad.Param(np.array(arr, dtype=self.dtype))
                self.params[f"{prefix}_{attr}"] = p
                self._adam[f"{prefix}_{attr}"] = _Adam(p.value.shape, self.dtype)
        for name, p in self.net._named_params():
            self._adam[f"net.{name}"] = _Adam(p.value.shape, self.dtype)
        self.n_static = len(gset.statics)
        self.n_dynamic = len(gset.dynamics)
        self._grad_sum = np.zeros(self.n_static + self.n_dynamic, dtype=np.float64)
        self._grad_cnt = np.zeros(self.n_static + self.n_dynamic, dtype=np.int64)
        self._knn_sample = None
        self._knn_idx = None
        self._knn_built_at = -1

    def gaussian_set(self) -> GaussianSet:
        p = self.params
        statics = GaussianBlock(p["s_means"].value.copy(), p["s_rots"].value.copy(),
                                p["s_scales"].value.copy(), p["s_opacity"].value.copy(),
                                p["s_sh"].value.copy())
        dynamics = GaussianBlock(p["d_means"].value.copy(), p["d_rots"].value.copy(),
                                 p["d_scales"].value.copy(), p["d_opacity"].value.copy(),
                                 p["d_sh"].value.copy(), p["d_coeffs"].value.copy())
        return GaussianSet(statics=statics, dynamics=dynamics)

    def refined_cams(self):
        return [cp.pose() for cp in self.cams]

    def model(self) -> TrainedModel:
        return TrainedModel(self.gaussian_set(), self.net, self.refined_cams(),
                            self.t_max, self.sh_degree_at(self.iteration),
                            np.asarray(self.bundle.bg_color, dtype=np.float64))

    # -- schedules ----------------------------------------------------------------

    def sh_degree_at(self, it):
        cfg = self.cfg
        if it < cfg.main_steps or cfg.sh_warmup_steps == 0:
            return 0
        raised = (it - cfg.main_steps) // cfg.sh_increase_interval + 1
        return int(min(raised, cfg.sh_max_degree, cfg.sh_degree_render_cap))

    def _lr(self, name, it):
        cfg = self.cfg
        total = cfg.total_steps()
        if name.startswith("net."):
            return cfg.lr_motion_net
        attr = name.split("_", 1)[1]
        lr = getattr(cfg, _LR_KEY[attr])
        if attr == "means":
            lr = _schedule_exp(lr, cfg.lr_means_final_ratio, it, total)
            if cfg.scale_means_lr_by_extent:
                lr *= self.scene_extent
        return lr

    def _cam_lrs(self, it):
        cfg = self.cfg
        total = cfg.total_steps()
        return (_schedule_warmup_cosine(cfg.lr_cam_rot, it, total, cfg.warmup_fraction),
                _schedule_warmup_cosine(cfg.lr_cam_trans, it, total, cfg.warmup_fraction))

    # -- per-iteration pieces --------------------------------------------------------

    def _next_frame(self):
        if self._frame_ptr >= len(self._frame_order):
            self._frame_order = self.rng.permutation(self.bundle.n_frames)
            self._frame_ptr = 0
        t = int(self._frame_order[self._frame_ptr])
        self._frame_ptr += 1
        return t

    def _dyn_tensors(self, t):
        """Displaced dynamic means/quats at frame t (Tensors), or None."""
        if self.n_dynamic == 0:
            return None
        b_mu, b_q = motion_mod.eval_bases(self.net, t, self.t_max)
        mu, q = motion_mod.displace_block(self.params["d_means"], self.params["d_rots"],
                                          self.params["d_coeffs"], b_mu, b_q)
        return mu, q

    def _scene_tensors(self, t):
        p = self.params
        dyn = self._dyn_tensors(t)
        if self.n_static and dyn is None:
            return (p["s_means"], p["s_rots"], p["s_scales"], p["s_opacity"], p["s_sh"]), None
        if self.n_static == 0 and dyn is not None:
            mu_d, q_d = dyn
            return (mu_d, q_d, p["d_scales"], p["d_opacity"], p["d_sh"]), mu_d
        mu_d, q_d = dyn
        means = ad.concatenate([p["s_means"], mu_d], axis=0)
        quats = ad.concatenate([p["s_rots"], q_d], axis=0)
        scales = ad.concatenate([p["s_scales"], p["d_scales"]], axis=0)
        opac = ad.concatenate([p["s_opacity"], p["d_opacity"]], axis=0)
        sh = ad.concatenate([p["s_sh"], p["d_sh"]], axis=0)
        return (means, quats, scales, opac, sh), mu_d

    def _refresh_knn(self):
        cfg = self.cfg
        k = cfg.geom.k_neighbors
        n_s = min(cfg.geom.n_sampled_gaussians, self.n_dynamic)
        if n_s < k + 1:
            self._knn_sample = None
            return
        sample = np.sort(self.rng.choice(self.n_dynamic, size=n_s, replace=False))
        canon = self.params["d_means"].value[sample]
        self._knn_sample = sample
        self._knn_idx = knn_indices(canon, k)
        self._knn_built_at = self.iteration

    def _geom_losses(self, t, mu_t_full):
        cfg = self.cfg
        if (self._knn_built_at < 0 or
                self.iteration - self._knn_built_at >= cfg.geom.knn_refresh_interval):
            self._refresh_knn()
        if self._knn_sample is None:
            return None
        n_t = cfg.geom.n_sampled_timesteps
        T = self.bundle.n_frames
        ts = self.rng.choice(T, size=min(n_t, T), replace=False)
        mu_t = mu_t_full[self._knn_sample]
        coeffs = self.params["d_coeffs"][self._knn_sample]
        means_c = self.params["d_means"][self._knn_sample]
        b_mu, _ = self.net.forward(ts.astype(np.float64) / self.t_max)
        mu_samples = [means_c + coeffs @ b_mu[j] for j in range(len(ts))]
        l_tc = distance_preserving_loss(mu_t, mu_samples, self._knn_idx)
        l_s = surface_smooth_loss(mu_t, self._knn_idx)
        return l_tc, l_s

    # -- optimizer ---------------------------------------------------------------------

    def _apply_updates(self):
        cfg = self.cfg
        it = self.iteration
        for name, p in list(self.params.items()) + \
                [(f"net.{n}", q) for n, q in self.net._named_params()]:
            lr = self._lr(name, it)
            if lr == 0.0 or p.grad is None or p.value.size == 0:
                p.grad = None
                continue
            step = self._adam[name].step(p.grad, lr, cfg.adam_beta1, cfg.adam_beta2,
                                         cfg.adam_eps)
            p.value += step
            p.grad = None
            if name.endswith("_rots"):
                norms = np.linalg.norm(p.value, axis=1, keepdims=True)
                p.value /= np.maximum(norms, 1e-12)

    def _apply_camera_update(self, t):
        cfg = self.cfg
        cp = self.cams[t]
        if cp.omega is None or cp.omega.grad is None:
            return
        lr_rot, lr_trans = self._cam_lrs(self.iteration)
        key = (t, "omega")
        if key not in self._cam_adam:
            self._cam_adam[(t, "omega")] = _Adam(3, self.dtype)
            self._cam_adam[(t, "delta")] = _Adam(3, self.dtype)
        s_o = self._cam_adam[(t, "omega")].step(cp.omega.grad, lr_rot,
                                                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        s_d = self._cam_adam[(t, "delta")].step(cp.delta.grad, lr_trans,
                                                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        cp.retract(s_o, s_d)
        cp.omega.grad = None
        cp.delta.grad = None

    # -- one step ----------------------------------------------------------------------

    def step(self):
        cfg = self.cfg
        t = self._next_frame()
        cam = self.cams[t]
        pose = cam.pose()
        (means, quats, scales, opac, sh), mu_dyn = self._scene_tensors(t)
        out = render_graph(means, quats, scales, opac, sh, self.sh_degree_at(self.iteration),
                           cam.rotation_tensor(), cam.translation_tensor(),
                           pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height,
                           self.bundle.bg_color.astype(self.dtype))
        if len(out["visible"]) == 0:
            log.warning("frame %d: no visible Gaussians, skipping", t)
            self.iteration += 1
            return {"skipped": True, "frame": t, "total": np.nan, "breakdown": {}}

        target = self.bundle.frames[t].astype(self.dtype)
        comps = {"l1": l1_loss(out["color"], target),
                 "ssim": (1.0 - ssim(out["color"], ad.Tensor(target))) * 0.5}

        if cfg.use_depth_loss and (cfg.weights.depth_g > 0 or cfg.weights.depth_l > 0):
            prior = self.bundle.depths[t].astype(self.dtype)
            valid = (out["alpha"].value > cfg.depth_alpha_thresh) & (prior > 0)
            glob, loc = pearson_depth_loss(out["depth"], prior, valid,
                                           local_cfg=cfg.local_pearson, rng=self.rng)
            comps["depth_g"] = glob
            comps["depth_l"] = loc

        if cfg.use_geom_reg and mu_dyn is not None and (cfg.weights.tc > 0 or cfg.weights.s > 0):
            geom = self._geom_losses(t, mu_dyn)
            if geom is not None:
                comps["tc"], comps["s"] = geom

        if cfg.use_motion_reg and self.n_dynamic and self.t_max >= 2 and cfg.weights.mc > 0:
            comps["mc"] = motion_mod.motion_continuity_loss(self.net, self.motion_weights,
                                                            self.t_max)
        if cfg.use_sparsity and self.n_dynamic:
            l_m, l_ms = sparsity_losses(self.params["d_coeffs"])
            comps["m"] = l_m
            comps["ms"] = l_ms
        if cfg.use_coeff_reg and self.n_dynamic > cfg.geom.k_neighbors:
            comps["coeff"] = coefficient_locality_loss(
                self.params["d_coeffs"], self.params["d_means"],
                cfg.geom.k_neighbors, cfg.coeff_lambda_w)

        total, breakdown = total_loss(comps, cfg.weights)
        total.backward()

        g2d = out["mean2d"].grad
        if g2d is not None and len(out["visible"]):
            norms = np.linalg.norm(g2d.astype(np.float64), axis=1)
            self._grad_sum[out["visible"]] += norms
            self._grad_cnt[out["visible"]] += 1

        self._apply_updates()
        if cfg.pose_opt:
            self._apply_camera_update(t)

        total_val = float(total.item())
        self.loss_history.append(total_val)
        self.iteration += 1

        if (cfg.densify.enabled and cfg.densify.start_step <= self.iteration <= cfg.densify.stop_step
                and self.iteration % cfg.densify.interval == 0):
            self._run_densify()
        return {"skipped": False, "frame": t, "total": total_val, "breakdown": breakdown}

    def _run_densify(self):
        stats = DensifyStats(self._grad_sum.copy(), self._grad_cnt.copy())
        gset = densify_prune(self.gaussian_set(), stats, self.cfg.densify,
                             self.scene_extent, self.rng, n_static=self.n_static)
        if len(gset) == 0:
            raise DataContractError("densify/prune removed every Gaussian (empty scene)")
        net_adam = {k: v for k, v in self._adam.items() if k.startswith("net.")}
        self._adopt_gaussians(gset)  # resets Gaussian optimizer moments (new rows)
        self._adam.update(net_adam)

    # -- run loop ----------------------------------------------------------------------

    def run(self, n_steps=None, log_writer: TrainLog = None, checkpoint_dir=None):
        cfg = self.cfg
        n_steps = cfg.total_steps() if n_steps is None else n_steps
        last_good = None
        target_it = self.iteration + n_steps
        while self.iteration < target_it:
            try:
                info = self.step()
            except NumericalError:
                if checkpoint_dir is not None and last_good is not None:
                    log.error("aborting at iteration %d; last good checkpoint: %s",
                              self.iteration, last_good)
                raise
            if log_writer is not None and not info.get("skipped"):
                log_writer.append(self.iteration, info["breakdown"], info["total"])
            if (checkpoint_dir is not None and cfg.checkpoint_interval > 0
                    and self.iteration % cfg.checkpoint_interval == 0):
                last_good = f"{checkpoint_dir}/ckpt_{self.iteration:06d}.dygs"
                self.save(last_good)
        return self

    # -- checkpointing -------------------------------------------------------------------

    def save(self, path):
        arrays = {}
        for name, p in self.params.items():
            arrays[f"param.{name}"] = p.value
        for name, arr in self.net.state_arrays().items():
            arrays[f"net.{name}"] = arr
        for name, st in self._adam.items():
            arrays[f"adam.{name}.m"] = st.m
            arrays[f"adam.{name}.v"] = st.v
        cam_q = np.stack([cp.base.rot for cp in self.cams])
        cam_t = np.stack([cp.base.trans for cp in self.cams])
        arrays["cams.rot"] = cam_q
        arrays["cams.trans"] = cam_t
        arrays["frame_order"] = self._frame_order
        arrays["grad_sum"] = self._grad_sum
        arrays["grad_cnt"] = self._grad_cnt
        arrays["loss_history"] = np.asarray(self.loss_history, dtype=np.float32)
        if self._knn_sample is not None:
            arrays["knn_sample"] = self._knn_sample
            arrays["knn_idx"] = self._knn_idx
        cam_adam_meta = []
        for (t, kind), st in sorted(self._cam_adam.items()):
            arrays[f"cam_adam.{t}.{kind}.m"] = st.m
            arrays[f"cam_adam.{t}.{kind}.v"] = st.v
            cam_adam_meta.append([t, kind, st.t])

        cam0 = self.cams[0].base
        meta = {
            "kind": "train_state",
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "n_static": self.n_static,
            "n_dynamic": self.n_dynamic,
            "motion_dim": self.cfg.motion_dim,
            "sh_degree": self.sh_degree_at(self.iteration),
            "t_max": self.t_max,
            "bg_color": np.asarray(self.bundle.bg_color, dtype=float).tolist(),
            "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
                           "width": cam0.width, "height": cam0.height},
            "adam_steps": {name: st.t for name, st in self._adam.items()},
            "cam_adam_steps": cam_adam_meta,
            "frame_ptr": self._frame_ptr,
            "knn_built_at": self._knn_built_at,
            "rng_state": _rng_state_to_json(self.rng),
        }
        save_checkpoint(path, arrays, meta)
        return path

    @classmethod
    def restore(cls, bundle: SceneBundle, path):
        arrays, meta = load_checkpoint(path)
        cfg = _config_from_dict(meta["config"])
        self = cls.__new__(cls)
        self.bundle = bundle.validate()
        self.cfg = cfg
        self.dtype = cfg.np_dtype()
        self.t_max = meta["t_max"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = _rng_state_from_json(meta["rng_state"])
        self.net = MotionBasisNet(cfg.motion_dim, dtype=self.dtype)
        self.net.load_state_arrays({k[len("net."):]: v for k, v in arrays.items()
                                    if k.startswith("net.")})
        gset = _gaussians_from_arrays(arrays, self.dtype)
        self._adopt_gaussians(gset)
        for name, st in self._adam.items():
            st.load(arrays[f"adam.{name}.m"], arrays[f"adam.{name}.v"],
                    meta["adam_steps"][name])
        intr = meta["intrinsics"]
        self.cams = []
        for t in range(len(arrays["cams.rot"])):
            pose = CameraPose(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                              intr["width"], intr["height"],
                              arrays["cams.rot"][t], arrays["cams.trans"][t])
            self.cams.append(CameraParams(pose, dtype=self.dtype, trainable=cfg.pose_opt))
        self._cam_adam = {}
        for t, kind, steps in meta.get("cam_adam_steps", []):
            st = _Adam(3, self.dtype)
            st.load(arrays[f"cam_adam.{t}.{kind}.m"], arrays[f"cam_adam.{t}.{kind}.v"], steps)
            self._cam_adam[(int(t), kind)] = st
        centers = np.stack([c.center for c in bundle.cam_init])
        self.scene_extent = float(np.linalg.norm(centers, axis=1).max())
        if cfg.motion_weight_mode == "uniform":
            self.motion_weights = MotionWeights.uniform(cfg.motion_dim)
        else:
            self.motion_weights = MotionWeights.cumulative_exponential(cfg.motion_dim)
        self.iteration = meta["iteration"]
        self.loss_history = list(arrays.get("loss_history", np.zeros(0)))
        self._frame_order = arrays["frame_order"].astype(np.int64)
        self._frame_ptr = meta["frame_ptr"]
        self._grad_sum = arrays["grad_sum"].astype(np.float64)
        self._grad_cnt = arrays["grad_cnt"].astype(np.int64)
        self._knn_built_at = meta["knn_built_at"]
        if "knn_sample" in arrays:
            self._knn_sample = arrays["knn_sample"].astype(np.int64)
            self._knn_idx = arrays["knn_idx"].astype(np.int64)
        else:
            self._knn_sample = None
            self._knn_idx = None
        return self


# -- densification ----------------------------------------------------------------------


@dataclass
class DensifyStats:
    grad_sum: np.ndarray
    count: np.ndarray


def _densify_block(block: GaussianBlock, grad_sum, count, cfg: DensifyConfig,
                   extent, rng):
    n = len(block)
    if n == 0:
        return block
    opacity = 1.0 / (1.0 + np.exp(-block.opacity_raw.astype(np.float64)))
    keep = opacity >= cfg.opacity_floor
    avg = grad_sum / np.maximum(count, 1)
    hot = (avg > cfg.grad_threshold) & keep
    big = np.exp(block.log_scales).max(axis=1) > cfg.percent_dense * extent
    clone_sel = hot & ~big
    split_sel = hot & big

    def pick(sel):
        return {k: v[sel] for k, v in block.arrays().items()}

    survivors = pick(keep & ~split_sel)
    clones = pick(clone_sel)
    parents = pick(split_sel)
    children = {}
    if split_sel.any():
        reps = {k: np.repeat(v, 2, axis=0) for k, v in parents.items()}
        from .scene_model import covariance_from

        cov = covariance_from(reps["rots"], np.exp(reps["log_scales"]))
        jitter = np.einsum("nij,nj->ni", cov, rng.standard_normal(reps["means"].shape))
        reps["means"] = (reps["means"] + jitter).astype(block.means.dtype)
        reps["log_scales"] = (reps["log_scales"] - np.log(1.6)).astype(block.log_scales.dtype)
        children = reps

    def cat(key):
        pieces = [survivors[key], clones.get(key, survivors[key][:0])]
        if children:
            pieces.append(children[key])
        return np.concatenate(pieces, axis=0)

    keys = list(block.arrays().keys())
    merged = {k: cat(k) for k in keys}
    return GaussianBlock(merged["means"], merged["rots"], merged["log_scales"],
                         merged["opacity_raw"], merged["sh"],
                         merged.get("motion_coeffs"))


def densify_prune(gset: GaussianSet, stats: DensifyStats, cfg: DensifyConfig,
                  extent, rng, n_static=None) -> GaussianSet:
    """Prune low-opacity Gaussians and clone/split high-gradient ones.

    Rules follow the 3DGS convention: prune alpha < opacity_floor; where the
    accumulated mean screen-space positional gradient exceeds grad_threshold,
    small Gaussians (max scale <= percent_dense * extent) are cloned as-is
    (+1 each) and large ones are replaced by two children sampled from the
    parent with scales shrunk by 1.6 (+1 each). Dynamic clones and children
    inherit motion coefficients. Disabled configs return the set unchanged.
    """
    if not cfg.enabled:
        return gset
    n_static = len(gset.statics) if n_static is None else n_static
    s_block = _densify_block(gset.statics, stats.grad_sum[:n_static],
                             stats.count[:n_static], cfg, extent, rng)
    d_block = _densify_block(gset.dynamics, stats.grad_sum[n_static:],
                             stats.count[n_static:], cfg, extent, rng)
    return GaussianSet(statics=s_block, dynamics=d_block)


# -- (de)serialization helpers -------------------------------------------------------------


def _gaussians_from_arrays(arrays, dtype):
    def block(prefix, with_motion):
        mc = arrays.get(f"param.{prefix}_coeffs") if with_motion else None
        return GaussianBlock(arrays[f"param.{prefix}_means"].astype(dtype),
                             arrays[f"param.{prefix}_rots"].astype(dtype),
                             arrays[f"param.{prefix}_scales"].astype(dtype),
                             arrays[f"param.{prefix}_opacity"].astype(dtype),
                             arrays[f"param.{prefix}_sh"].astype(dtype),
                             None if mc is None else mc.astype(dtype))
    return GaussianSet(statics=block("s", False), dynamics=block("d", True))


def _rng_state_to_json(rng):
    import json as _json

    return _json.dumps(rng.bit_generator.state)


def _rng_state_from_json(s):
    import json as _json

    return _json.loads(s)


def _config_from_dict(d):
    d = dict(d)
    d["weights"] = LossWeights(**d.get("weights", {}))
    d["geom"] = GeomRegConfig(**d.get("geom", {}))
    d["local_pearson"] = LocalPearsonConfig(**d.get("local_pearson", {}))
    d["densify"] = DensifyConfig(**d.get("densify", {}))
    return TrainConfig(**d)


def load_model(path) -> TrainedModel:
    """Load just what rendering/evaluation needs from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    dtype = np.float32 if meta["config"].get("dtype", "float32") == "float32" else np.float64
    gset = _gaussians_from_arrays(arrays, dtype)
    net = MotionBasisNet(meta["motion_dim"], dtype=dtype)
    net.load_state_arrays({k[len("net."):]: v for k, v in arrays.items()
                           if k.startswith("net.")})
    intr = meta["intrinsics"]
    cams = [CameraPose(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                       intr["width"], intr["height"], q, t)
            for q, t in zip(arrays["cams.rot"], arrays["cams.trans"])]
    return TrainedModel(gset, net, cams, meta["t_max"], meta["sh_degree"],
                        np.asarray(meta["bg_color"]))


def train(bundle: SceneBundle, cfg: TrainConfig, log_writer=None, checkpoint_dir=None,
          n_steps=None):
    """Spec-level entry: initialize, optimize, return the trained pieces."""
    tr = Trainer(bundle, cfg)
    tr.run(n_steps=n_steps, log_writer=log_writer, checkpoint_dir=checkpoint_dir)
    return tr.gaussian_set(), tr.net, tr.refined_cams(), tr
