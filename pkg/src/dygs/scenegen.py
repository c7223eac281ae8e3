"""Procedural scene generator: circular camera rig, parametric objects on
rigid trajectories, analytic ray-traced ground truth (frames, z-depth,
motion masks), and the prior-corruption stage that stands in for learned
pose/depth/mask estimators.

The ray renderer is independent of the splatting rasterizer: every pixel is
intersected against the parametric primitives directly, so generator output
can serve as an oracle for the optimization stack.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import ConfigError
from .scene_model import CameraPose, SceneBundle, TestView

_LIGHT = np.array([0.35, 0.2, 0.91])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.35


@dataclass
class Trajectory:
    """Rigid translation path, C^1 within each family; s is normalized time."""

    kind: str                    # static | linear | circular | parabolic
    p0: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0
    phase: float = 0.0
    sweep: float = 0.0
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def position(self, s):
        if self.kind == "static":
            return self.p0
        if self.kind == "linear":
            return self.p0 + self.v * s
        if self.kind == "circular":
            a = self.phase + self.sweep * s
            return self.center + np.array([self.radius * np.cos(a),
                                           self.radius * np.sin(a), 0.0]) + np.array([0, 0, self.p0[2]])
        if self.kind == "parabolic":
            return self.p0 + self.v * s + 0.5 * self.accel * s * s
        raise ConfigError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class SceneObject:
    kind: str                    # sphere | box
    size: np.ndarray             # (1,) radius or (3,) half extents
    color_a: np.ndarray
    color_b: np.ndarray
    checker: float
    traj: Trajectory
    dynamic: bool


@dataclass
class SceneGenConfig:
    n_frames: int = 100
    width: int = 64
    height: int = 64
    radius_range: tuple = (15.0, 20.0)
    elevation_range_deg: tuple = (30.0, 60.0)
    n_objects_static: int = 12
    n_objects_dynamic: int = 8
    trajectory_kinds: tuple = ("linear", "circular", "parabolic")
    fov_deg: float = 50.0
    placement_radius: float = 4.0
    look_at_height: float = 1.0  # world z the rig cameras aim at
    plane_checker: float = 0.5   # checker frequency of the ground plane (1/units)
    bg_color: tuple = (0.275, 0.369, 0.510)
    supersample: int = 2         # anti-aliasing factor for the analytic renderer
    image_blur_px: float = 0.0   # optional Gaussian bandlimit on rendered frames
    texture_fade: tuple = (14.0, 30.0)  # world-radius range over which checker detail fades
    seed: int = 0

    def validate(self):
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise ConfigError("radius_range must be positive and ordered")
        if self.n_frames < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("frames and image size must be positive")
        if self.n_objects_static + self.n_objects_dynamic == 0:
            raise ConfigError("need at least one object in the scene")
        return self


@dataclass
class PriorCorruption:
    """Noise model emulating estimated poses, monocular depth, and masks."""

    pose_rot_noise_deg: float = 0.0
    pose_trans_noise: float = 0.0
    depth_affine_a: tuple = (1.0, 1.0)
    depth_affine_b: tuple = (0.0, 0.0)
    depth_pixel_noise: float = 0.0
    mask_erode_dilate: int = 0
    mask_flip_rate: float = 0.0

    def validate(self):
        if self.pose_rot_noise_deg < 0 or self.pose_trans_noise < 0:
            raise ConfigError("pose noise must be non-negative")
        if self.depth_affine_a[0] <= 0:
            raise ConfigError("depth affine scale must stay positive")
        return self


# -- camera rig ---------------------------------------------------------------------


def _rig_camera(cfg, radius, elev_rad, azimuth, target=None):
    eye = radius * np.array([np.cos(elev_rad) * np.cos(azimuth),
                             np.cos(elev_rad) * np.sin(azimuth),
                             np.sin(elev_rad)])
    if target is None:
        target = (0.0, 0.0, cfg.look_at_height)
    R, t = geometry.look_at(eye, np.asarray(target))
    f = 0.5 * cfg.width / np.tan(np.radians(cfg.fov_deg) / 2.0)
    return CameraPose(fx=f, fy=f, cx=(cfg.width - 1) / 2.0, cy=(cfg.height - 1) / 2.0,
                      width=cfg.width, height=cfg.height,
                      rot=geometry.mat_to_quat(R), trans=t)


def project_point(cam: CameraPose, p):
    """Pixel (u, v) and camera depth of a world point; None if behind."""
    pc = cam.world_to_cam(np.asarray(p, dtype=np.float64))
    if pc[2] <= 0:
        return None
    return np.array([cam.fx * pc[0] / pc[2] + cam.cx,
                     cam.fy * pc[1] / pc[2] + cam.cy]), pc[2]


# -- analytic intersection ------------------------------------------------------------


def _checker(u):
    return np.floor(u).astype(np.int64)


def _albedo(obj, pts, center):
    local = pts - center
    if obj.kind == "sphere":
        r = obj.size[0]
        theta = np.arctan2(local[:, 1], local[:, 0])
        phi = np.arccos(np.clip(local[:, 2] / r, -1.0, 1.0))
        par = (_checker(theta / np.pi * obj.checker) + _checker(phi / np.pi * obj.checker)) % 2
    else:
        u = (local / obj.size + 1.0) * (0.5 * obj.checker)
        par = (_checker(u[:, 0]) + _checker(u[:, 1]) + _checker(u[:, 2])) % 2
    return np.where(par[:, None] == 0, obj.color_a, obj.color_b)


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    a = (d * d).sum(axis=1)
    b = 2.0 * (d * oc).sum(axis=1)
    c = (oc * oc).sum() - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.full(len(d), np.inf)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    tt = np.where(t1 > 1e-6, t1, np.where(t2 > 1e-6, t2, np.inf))
    t[hit] = tt[hit]
    return t


def _intersect_box(o, d, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        lo = (center - half - o) * inv
        hi = (center + half - o) * inv
    tmin = np.minimum(lo, hi)
    tmax = np.maximum(lo, hi)
    t_in = np.nanmax(tmin, axis=1)
    t_out = np.nanmin(tmax, axis=1)
    t = np.where((t_out >= t_in) & (t_out > 1e-6),
                 np.where(t_in > 1e-6, t_in, np.inf), np.inf)
    return t, tmin


def _box_normal(d, tmin, t):
    axis = np.argmax(np.where(np.isfinite(tmin), tmin, -np.inf), axis=1)
    n = np.zeros((len(d), 3))
    n[np.arange(len(d)), axis] = 1.0
    return -np.sign(d[np.arange(len(d)), axis])[:, None] * n


_PLANE_COL_A = np.array([0.62, 0.60, 0.55])
_PLANE_COL_B = np.array([0.33, 0.36, 0.40])


def _trace(cfg, objects, cam, s, xs, ys):
    """Cast rays through pixel coordinates (xs, ys); camera z = 1 per ray, so
    the ray parameter is z-depth. Returns (rgb, depth, mask) per sample."""
    n_ray = len(xs)
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                      np.ones(n_ray)], axis=1)
    R = cam.R
    d = d_cam @ R            # R^T applied row-wise
    o = cam.center[None, :]

    best_t = np.full(n_ray, np.inf)
    best_obj = np.full(n_ray, -1, dtype=np.int64)
    cache = []
    for i, obj in enumerate(objects):
        center = obj.traj.position(s)
        if obj.kind == "sphere":
            t = _intersect_sphere(o, d, center, obj.size[0])
            tmin = None
        else:
            t, tmin = _intersect_box(o, d, center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, i, best_obj)
        cache.append((center, tmin))

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = -o[0, 2] / d[:, 2]
    plane_hit = (d[:, 2] < 0) & (t_plane > 1e-6) & (t_plane < best_t)
    best_t = np.where(plane_hit, t_plane, best_t)
    best_obj = np.where(plane_hit, -2, best_obj)

    rgb = np.tile(np.asarray(cfg.bg_color, dtype=np.float64), (n_ray, 1))
    depth = np.zeros(n_ray)
    mask = np.zeros(n_ray, dtype=bool)
    hit_any = best_obj != -1
    pts = o + best_t[:, None] * d

    sel = best_obj == -2
    if sel.any():
        p = pts[sel]
        par = (_checker(p[:, 0] * cfg.plane_checker) + _checker(p[:, 1] * cfg.plane_checker)) % 2
        alb = np.where(par[:, None] == 0, _PLANE_COL_A, _PLANE_COL_B)
        # band-limit: distant checker fades to its mean so point-sampled
        # images stay consistent across views; the fade is a function of the
        # world position only (a baked texture), never of the viewpoint
        d0, d1 = cfg.texture_fade
        r_world = np.linalg.norm(p[:, 0:2], axis=1)
        fade = np.clip((r_world - d0) / max(d1 - d0, 1e-6), 0.0, 1.0)[:, None]
        alb = alb * (1 - fade) + 0.5 * (_PLANE_COL_A + _PLANE_COL_B) * fade
        lam = _AMBIENT + (1 - _AMBIENT) * max(_LIGHT[2], 0.0)
        rgb[sel] = alb * lam

    for i, obj in enumerate(objects):
        sel = best_obj == i
        if not sel.any():
            continue
        center, tmin = cache[i]
        p = pts[sel]
        if obj.kind == "sphere":
            n = (p - center) / obj.size[0]
        else:
            n = _box_normal(d[sel], tmin[sel], best_t[sel])
        lam = _AMBIENT + (1 - _AMBIENT) * np.maximum(n @ _LIGHT, 0.0)
        rgb[sel] = _albedo(obj, p, center) * lam[:, None]
        if obj.dynamic:
            mask[sel] = True

    depth[hit_any] = best_t[hit_any]
    return np.clip(rgb, 0.0, 1.0), depth, mask


def render_frame(cfg: SceneGenConfig, objects, cam: CameraPose, s):
    """Ray-evaluate the scene at normalized time s from one camera.

    Color is supersampled (cfg.supersample^2 rays per pixel, box filter);
    depth and the motion mask come from the pixel-center rays so unprojecting
    a pixel lands exactly on the analytic surface.
    """
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    xs, ys = xx.ravel(), yy.ravel()
    ss = max(int(cfg.supersample), 1)
    if ss == 1:
        rgb, depth, mask = _trace(cfg, objects, cam, s, xs, ys)
    else:
        off = (np.arange(ss) + 0.5) / ss - 0.5
        acc = np.zeros((H * W, 3))
        for oy in off:
            for ox in off:
                rgb_s, _, _ = _trace(cfg, objects, cam, s, xs + ox, ys + oy)
                acc += rgb_s
        rgb = acc / (ss * ss)
        _, depth, mask = _trace(cfg, objects, cam, s, xs, ys)
    rgb = rgb.reshape(H, W, 3)
    if cfg.image_blur_px > 0:
        rgb = ndimage.gaussian_filter(rgb, sigma=(cfg.image_blur_px, cfg.image_blur_px, 0),
                                      mode="nearest")
    return (rgb.astype(np.float32),
            depth.reshape(H, W).astype(np.float32),
            mask.reshape(H, W))


# -- object sampling ------------------------------------------------------------------


def _sample_trajectory(rng, cfg, kind, z_lo=1.2, z_hi=3.2):
    r_xy = cfg.placement_radius
    p0 = np.array([rng.uniform(-r_xy, r_xy), rng.uniform(-r_xy, r_xy),
                   rng.uniform(z_lo, z_hi)])
    if kind == "linear":
        v = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.3, 0.3)])
        v = v / max(np.linalg.norm(v), 1e-6) * rng.uniform(1.5, 3.5)
        return Trajectory("linear", p0=p0 - 0.5 * v, v=v)
    if kind == "circular":
        # radius * sweep^2 <= ~10 keeps per-frame velocity steps under 1e-3
        # on the default 100-frame grid
        rad = rng.uniform(1.0, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        sweep = rng.uniform(np.pi / 2, 0.7 * np.pi) * rng.choice([-1.0, 1.0])
        center = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0])
        return Trajectory("circular", p0=p0, center=center, radius=rad,
                          phase=phase, sweep=sweep)
    if kind == "parabolic":
        g = rng.uniform(3.0, 6.0)
        v = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.5 * g])
        return Trajectory("parabolic", p0=p0, v=v, accel=np.array([0, 0, -g]))
    raise ConfigError(f"unknown trajectory kind {kind!r}")


def _sample_objects(rng, cfg):
    objects = []
    palette = rng.uniform(0.15, 0.95, size=(64, 3))

    def colors():
        i = rng.integers(0, len(palette))
        j = (i + 1 + rng.integers(0, len(palette) - 1)) % len(palette)
        return palette[i].copy(), palette[j].copy()

    for _ in range(cfg.n_objects_static):
        kind = "sphere" if rng.random() < 0.5 else "box"
        if kind == "sphere":
            size = np.array([rng.uniform(0.5, 1.2)])
            z = size[0]
        else:
            size = rng.uniform(0.4, 1.0, 3)
            z = size[2]
        p0 = np.array([rng.uniform(-cfg.placement_radius, cfg.placement_radius),
                       rng.uniform(-cfg.placement_radius, cfg.placement_radius), z])
        ca, cb = colors()
        objects.append(SceneObject(kind, size, ca, cb, rng.uniform(2, 4),
                                   Trajectory("static", p0=p0), dynamic=False))
    for _ in range(cfg.n_objects_dynamic):
        kind = "sphere" if rng.random() < 0.6 else "box"
        size = np.array([rng.uniform(0.5, 1.1)]) if kind == "sphere" else rng.uniform(0.35, 0.8, 3)
        traj_kind = cfg.trajectory_kinds[rng.integers(0, len(cfg.trajectory_kinds))]
        ca, cb = colors()
        objects.append(SceneObject(kind, size, ca, cb, rng.uniform(2, 4),
                                   _sample_trajectory(rng, cfg, traj_kind), dynamic=True))
    return objects


def _in_view_fraction(cfg, cams, obj):
    T = len(cams)
    ok = 0
    for t in range(T):
        s = t / max(T - 1, 1)
        pr = project_point(cams[t], obj.traj.position(s))
        if pr is None:
            continue
        (u, v), _ = pr
        if -2 <= u <= cfg.width + 1 and -2 <= v <= cfg.height + 1:
            ok += 1
    return ok / T


def generate(cfg: SceneGenConfig, n_workers: int = 1) -> SceneBundle:
    """Produce a ground-truth SceneBundle; bit-deterministic for a seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    radius = rng.uniform(*cfg.radius_range)
    elev = np.radians(rng.uniform(*cfg.elevation_range_deg))

    objects = _sample_objects(rng, cfg)
    cams = [_rig_camera(cfg, radius, elev, 2 * np.pi * t / cfg.n_frames)
            for t in range(cfg.n_frames)]
    for obj in objects:
        if not obj.dynamic:
            continue
        tries = 0
        while _in_view_fraction(cfg, cams, obj) < 0.9 and tries < 20:
            obj.traj = _sample_trajectory(rng, cfg, obj.traj.kind)
            tries += 1
    return generate_from_objects(cfg, objects, radius=radius, elevation_rad=elev,
                                 n_workers=n_workers)


def generate_from_objects(cfg: SceneGenConfig, objects, *, radius=None,
                          elevation_rad=None, n_workers: int = 1) -> SceneBundle:
    """Render a bundle for an explicit object list (rig sampled from cfg.seed
    unless radius/elevation are given)."""
    rng = np.random.default_rng(cfg.seed)
    if radius is None:
        radius = rng.uniform(*cfg.radius_range)
    if elevation_rad is None:
        elevation_rad = np.radians(rng.uniform(*cfg.elevation_range_deg))
    elev = elevation_rad
    T = cfg.n_frames
    cams = [_rig_camera(cfg, radius, elev, 2 * np.pi * t / T) for t in range(T)]

    def frame_job(t):
        s = t / max(T - 1, 1)
        return render_frame(cfg, objects, cams[t], s)

    def test_job(t):
        s = t / max(T - 1, 1)
        return render_frame(cfg, objects, cams[0], s)[0]

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            results = list(ex.map(frame_job, range(T)))
            test_images = list(ex.map(test_job, range(T)))
    else:
        results = [frame_job(t) for t in range(T)]
        test_images = [test_job(t) for t in range(T)]

    frames = np.stack([r[0] for r in results])
    depths = np.stack([r[1] for r in results])
    masks = np.stack([r[2] for r in results])
    test_views = [TestView(cam=cams[0], t=t, image=img) for t, img in enumerate(test_images)]

    meta = {"config": _config_dict(cfg), "seed": cfg.seed, "radius": float(radius),
            "elevation_deg": float(np.degrees(elev)),
            "test_split": list(range(T))}
    bundle = SceneBundle(frames=frames, depths=depths, masks=masks,
                         cam_init=[c.replaced() for c in cams], cam_gt=cams,
                         timesteps=np.arange(T), test_views=test_views,
                         bg_color=np.asarray(cfg.bg_color, dtype=np.float32), meta=meta)
    return bundle.validate()


def _config_dict(cfg):
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


# -- prior corruption -----------------------------------------------------------------


def corrupt(bundle: SceneBundle, c: PriorCorruption, seed: int = 0) -> SceneBundle:
    """Return a bundle whose init cameras / depths / masks are noise-corrupted.

    Ground-truth cameras, frames, and test views are untouched. Pose noise
    perturbs camera center and orientation; depth noise applies a per-frame
    positive affine warp plus multiplicative pixel noise (the scale/shift
    ambiguity the Pearson loss is built to absorb); mask noise erodes or
    dilates a fraction of frames.
    """
    c.validate()
    rng = np.random.default_rng(seed)
    T = bundle.n_frames

    cam_init = []
    pose_noise = c.pose_rot_noise_deg > 0 or c.pose_trans_noise > 0
    for cam in bundle.cam_gt:
        if not pose_noise:
            cam_init.append(cam.replaced())
            continue
        R, center = cam.R, cam.center
        if c.pose_rot_noise_deg > 0:
            w = rng.standard_normal(3)
            w = w / max(np.linalg.norm(w), 1e-12) * np.radians(rng.normal(0, c.pose_rot_noise_deg))
            R = geometry.so3_exp(w) @ R
        if c.pose_trans_noise > 0:
            center = center + rng.normal(0, c.pose_trans_noise, 3)
        cam_init.append(cam.replaced(rot=geometry.mat_to_quat(R), trans=-R @ center))

    depths = bundle.depths.copy()
    for t in range(T):
        a = rng.uniform(*c.depth_affine_a)
        b = rng.uniform(*c.depth_affine_b)
        d = depths[t]
        valid = d > 0
        warped = a * d[valid] + b
        if c.depth_pixel_noise > 0:
            warped = warped * (1.0 + rng.normal(0, c.depth_pixel_noise, warped.shape))
        depths[t][valid] = np.maximum(warped, 1e-3)

    masks = bundle.masks.copy()
    if c.mask_erode_dilate > 0 and c.mask_flip_rate > 0:
        for t in range(T):
            if rng.random() >= c.mask_flip_rate:
                continue
            op = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
            masks[t] = op(masks[t], iterations=c.mask_erode_dilate)

    meta = dict(bundle.meta)
    meta["corruption"] = {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in asdict(c).items()}
    meta["corruption_seed"] = seed
    return SceneBundle(frames=bundle.frames, depths=depths, masks=masks,
                       cam_init=cam_init, cam_gt=bundle.cam_gt,
                       timesteps=bundle.timesteps, test_views=bundle.test_views,
                       bg_color=bundle.bg_color, meta=meta)
