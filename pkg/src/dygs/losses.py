"""Optimization objectives: photometric, depth-correlation, geometry and
motion regularizers, and total-loss assembly.

All losses take/return tape Tensors so gradients reach Gaussian attributes,
motion parameters, and camera increments. Weighted-moment Pearson statistics
use validity masks so partially covered pixels and patches are handled
without NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .errors import NumericalError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Per-term weights of the total objective."""

    l1: float = 0.8
    ssim: float = 0.2
    depth_g: float = 0.05
    depth_l: float = 0.15
    tc: float = 0.5
    s: float = 0.5
    mc: float = 0.1
    m: float = 0.05
    ms: float = 0.002
    coeff: float = 0.0   # locality baseline term, off unless explicitly enabled

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class GeomRegConfig:
    k_neighbors: int = 8
    n_sampled_gaussians: int = 4096
    n_sampled_timesteps: int = 4
    knn_refresh_interval: int = 100

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class LocalPearsonConfig:
    patch_size: int = 16
    n_patches: int = 16
    min_valid_frac: float = 0.5


# -- SSIM ------------------------------------------------------------------------


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter_valid(x):
    """Separable 11x11 Gaussian filter, valid region only ((H,W,C) Tensor)."""
    half = SSIM_WINDOW // 2
    k = _KERNEL.astype(x.value.dtype)

    def run(arr):
        out = correlate1d(arr, k, axis=0, mode="constant")
        out = correlate1d(out, k, axis=1, mode="constant")
        return out[half:-half, half:-half]

    val = run(x.value)
    if not x.requires_grad:
        return ad.Tensor(val)

    def bwd(g):
        pad = np.zeros(x.value.shape, dtype=g.dtype)
        pad[half:-half, half:-half] = g
        out = correlate1d(pad, k, axis=0, mode="constant")
        out = correlate1d(out, k, axis=1, mode="constant")
        x._accum(out)

    return ad.Tensor._from_op(val, (x,), bwd)


def _as_hwc(img):
    img = ad.as_tensor(img)
    if img.value.ndim == 2:
        img = img.reshape(img.value.shape + (1,))
    return img


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), [0,1] range."""
    a, b = _as_hwc(a), _as_hwc(b)
    H, W = a.value.shape[:2]
    if a.value.shape != b.value.shape:
        raise ValueError("ssim inputs must share a shape")
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a * mu_a
    var_b = _filter_valid(b * b) - mu_b * mu_b
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return ad.tmean(num / den)


def l1_loss(a, b):
    return ad.tmean(ad.absolute(ad.as_tensor(a) - ad.as_tensor(b)))


def recon_loss(rendered, target, weights: LossWeights = None):
    """lambda_l1 |I_hat - I|_1 + lambda_ssim (1 - SSIM)/2; target is detached."""
    weights = weights or LossWeights()
    rendered = ad.as_tensor(rendered)
    target = ad.Tensor(np.asarray(target.value if isinstance(target, ad.Tensor) else target))
    if rendered.value.shape != target.value.shape:
        raise ValueError("recon_loss image shapes differ")
    return l1_loss(rendered, target) * weights.l1 + \
        (1.0 - ssim(rendered, target)) * (0.5 * weights.ssim)


# -- Pearson depth supervision ------------------------------------------------------


def _masked_pearson(x, y, mask):
    """Pearson correlation of Tensor x vs array y over a boolean mask.

    Zero variance on either side yields the guard value: correlation 0.
    """
    m = mask.astype(x.value.dtype)
    cnt = float(m.sum())
    if cnt < 2:
        return ad.Tensor(np.asarray(0.0, dtype=x.value.dtype))
    mw = ad.Tensor(m)
    yv = ad.Tensor(np.asarray(y, dtype=x.value.dtype))
    ex = ad.tsum(x * mw) * (1.0 / cnt)
    ey = ad.tsum(yv * mw) * (1.0 / cnt)
    exy = ad.tsum(x * yv * mw) * (1.0 / cnt)
    exx = ad.tsum(x * x * mw) * (1.0 / cnt)
    eyy = ad.tsum(yv * yv * mw) * (1.0 / cnt)
    var_x = exx - ex * ex
    var_y = eyy - ey * ey
    eps = 1e-12 if x.value.dtype == np.float64 else 1e-8
    if var_x.item() <= eps or var_y.item() <= eps:
        return ad.Tensor(np.asarray(0.0, dtype=x.value.dtype))
    return (exy - ex * ey) / ad.sqrt(var_x * var_y)


def pearson_depth_loss(rendered_depth, prior_depth, valid_mask, *,
                       local_cfg: LocalPearsonConfig = None, rng=None):
    """(global, local) depth-correlation losses, each 1 - Pearson.

    Correlation is computed over valid pixels only (typically alpha_acc above
    threshold AND prior depth > 0). The local term averages 1 - Pearson over
    randomly placed square patches that are at least half valid; degenerate
    statistics contribute the guard value 1 (correlation treated as 0).
    """
    local_cfg = local_cfg or LocalPearsonConfig()
    x = ad.as_tensor(rendered_depth)
    y = np.asarray(prior_depth)
    mask = np.asarray(valid_mask, dtype=bool)
    if x.value.shape != y.shape or mask.shape != y.shape:
        raise ValueError("depth maps and mask must share a shape")
    glob = 1.0 - _masked_pearson(x, y, mask)

    ps = local_cfg.patch_size
    H, W = y.shape
    if rng is None or H < ps or W < ps:
        return glob, ad.Tensor(np.asarray(0.0, dtype=x.value.dtype))
    terms = []
    tries = 0
    while len(terms) < local_cfg.n_patches and tries < local_cfg.n_patches * 8:
        tries += 1
        i = int(rng.integers(0, H - ps + 1))
        j = int(rng.integers(0, W - ps + 1))
        sub_m = mask[i:i + ps, j:j + ps]
        if sub_m.mean() < local_cfg.min_valid_frac:
            continue
        corr = _masked_pearson(x[i:i + ps, j:j + ps], y[i:i + ps, j:j + ps], sub_m)
        terms.append(1.0 - corr)
    if not terms:
        return glob, ad.Tensor(np.asarray(0.0, dtype=x.value.dtype))
    local = terms[0]
    for t in terms[1:]:
        local = local + t
    return glob, local * (1.0 / len(terms))


# -- object-geometry regularizers ----------------------------------------------------


def _neighbor_sq_dists(mu, knn_idx):
    """Squared distances (G, K): first G rows of mu vs. their neighbors."""
    g = knn_idx.shape[0]
    diff = mu[0:g].reshape((g, 1, 3)) - mu[knn_idx]
    return ad.tsum(diff * diff, axis=2)


def distance_preserving_loss(mu_t, mu_samples, knn_idx):
    """Temporal consistency of pairwise squared neighbor distances.

    mu_t: (P, 3) Tensor of sampled dynamic means at the training timestep;
    mu_samples: means of the same Gaussians at each sampled comparison time.
    knn_idx (G, K) holds each query's neighbor rows (queries are the first G
    rows). Zero for any common rigid motion of the sampled set.
    """
    g, k = knn_idx.shape
    if mu_t.value.shape[0] < k + 1:
        raise ValueError("need at least K+1 sampled Gaussians")
    if len(mu_samples) < 1:
        raise ValueError("need at least one sampled timestep")
    d_t = _neighbor_sq_dists(mu_t, knn_idx)
    acc = None
    for mu_s in mu_samples:
        diff = d_t - _neighbor_sq_dists(mu_s, knn_idx)
        term = ad.tsum(diff * diff)
        acc = term if acc is None else acc + term
    return acc * (1.0 / (g * k * len(mu_samples)))


def surface_smooth_loss(mu_t, knn_idx):
    """Pull each Gaussian toward the centroid of its K neighbors."""
    g, k = knn_idx.shape
    if mu_t.value.shape[0] < k + 1:
        raise ValueError("need at least K+1 sampled Gaussians")
    centroid = ad.tmean(mu_t[knn_idx], axis=1)
    return ad.tsum((mu_t[0:g] - centroid) ** 2.0) * (1.0 / g)


# -- total objective -----------------------------------------------------------------


_WEIGHT_OF = {"l1": "l1", "ssim": "ssim", "depth_g": "depth_g", "depth_l": "depth_l",
              "tc": "tc", "s": "s", "mc": "mc", "m": "m", "ms": "ms", "coeff": "coeff"}


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum of loss components; NaN components abort with a diagnostic.

    `components` maps names (subset of l1/ssim/depth_g/depth_l/tc/s/mc/m/ms/
    coeff) to scalar Tensors. The ssim entry is the raw (1 - SSIM)/2 term.
    Returns (total Tensor, {name: (raw value, weighted value)}).
    """
    total = None
    breakdown = {}
    for name, tensor in components.items():
        if name not in _WEIGHT_OF:
            raise ValueError(f"unknown loss component '{name}'")
        raw = float(tensor.item())
        if not np.isfinite(raw):
            raise NumericalError(f"loss component '{name}' is not finite", component=name)
        lam = getattr(weights, _WEIGHT_OF[name])
        breakdown[name] = (raw, lam * raw)
        if lam == 0.0:
            continue
        term = tensor * float(lam)
        total = term if total is None else total + term
    if total is None:
        total = ad.Tensor(np.asarray(0.0))
    return total, breakdown
