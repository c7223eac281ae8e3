"""Learnable motion bases, per-Gaussian displacement, and motion regularizers.

A shared time encoder feeds B prediction heads; head i emits a translation
basis b_mu_i(t) in R^3 and a quaternion basis b_q_i(t) in R^4. A dynamic
Gaussian with coefficients m moves as mu(t) = mu_c + m . b_mu(t) and
q(t) = q_c + m . b_q(t) (componentwise quaternion addition, renormalized at
render time).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .neighbors import knn_indices

N_FREQ = 26
EMBED_DIM = 2 * N_FREQ


def embed_time(t_norm):
    """Sinusoidal features [sin(2^k s), cos(2^k s)] for k = 0..25.

    Accepts a scalar or (M,) array of normalized times; returns (M, 52).
    """
    s = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    freqs = 2.0 ** np.arange(N_FREQ)
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _linear_init(rng, fan_in, fan_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return ad.Param(w.astype(dtype)), ad.Param(b.astype(dtype))


class MotionBasisNet:
    """Shared 3-layer encoder (width 128, GELU) + B two-layer heads (width 64).

    Heads are independent two-layer MLPs; they are stored stacked (first
    layers concatenated, second layers batched per head) so one forward costs
    two matmuls instead of 2B. Head output layers start at zero so every
    basis is exactly zero at initialization and optimization departs from the
    static configuration.
    """

    def __init__(self, basis_count=16, hidden=128, head_hidden=64, *,
                 rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.basis_count = basis_count
        self.head_hidden = head_hidden
        self.dtype = dtype
        e1 = _linear_init(rng, EMBED_DIM, hidden, dtype)
        e2 = _linear_init(rng, hidden, hidden, dtype)
        e3 = _linear_init(rng, hidden, hidden, dtype)
        self.encoder = [e1, e2, e3]
        w1s, b1s = [], []
        for _ in range(basis_count):
            w, b = _linear_init(rng, hidden, head_hidden, dtype)
            w1s.append(w.value)
            b1s.append(b.value)
        self.head_w1 = ad.Param(np.stack(w1s))                       # (B, H, h)
        self.head_b1 = ad.Param(np.stack(b1s))                       # (B, h)
        self.head_w2 = ad.Param(np.zeros((basis_count, head_hidden, 7), dtype=dtype))
        self.head_b2 = ad.Param(np.zeros((basis_count, 7), dtype=dtype))

    def parameters(self):
        ps = []
        for w, b in self.encoder:
            ps += [w, b]
        ps += [self.head_w1, self.head_b1, self.head_w2, self.head_b2]
        return ps

    def forward(self, t_norm):
        """(M,) normalized times -> (b_mu (M, B, 3), b_q (M, B, 4)) Tensors."""
        x = ad.Tensor(embed_time(t_norm).astype(self.dtype))
        (w1, b1), (w2, b2), (w3, b3) = self.encoder
        x = ad.gelu(x @ w1 + b1)
        x = ad.gelu(x @ w2 + b2)
        x = x @ w3 + b3                                              # (M, H)
        m = x.value.shape[0]
        h = ad.gelu(x @ self.head_w1 + self.head_b1.reshape(
            (self.basis_count, 1, self.head_hidden)))                # (B, M, h)
        out = h @ self.head_w2 + self.head_b2.reshape((self.basis_count, 1, 7))
        out = out.swapaxes(0, 1)                                     # (M, B, 7)
        return out[:, :, 0:3], out[:, :, 3:7]

    def state_arrays(self):
        """Flat name -> array mapping in deterministic layer order."""
        out = {}
        for name, p in self._named_params():
            out[name] = p.value
        return out

    def load_state_arrays(self, arrays):
        for name, param in self._named_params():
            param.value = np.array(arrays[name], dtype=self.dtype)

    def _named_params(self):
        for i, (w, b) in enumerate(self.encoder):
            yield f"enc{i}_w", w
            yield f"enc{i}_b", b
        yield "head_w1", self.head_w1
        yield "head_b1", self.head_b1
        yield "head_w2", self.head_w2
        yield "head_b2", self.head_b2


def eval_bases(net: MotionBasisNet, t: int, t_max: int):
    """Bases at integer timestep t of a sequence with max timestep t_max.

    Returns (b_mu (B, 3), b_q (B, 4)) Tensors; differentiable w.r.t. the
    network weights.
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if not 0 <= t <= t_max:
        raise ValueError(f"timestep {t} outside [0, {t_max}]")
    b_mu, b_q = net.forward(np.array([t / t_max]))
    return b_mu[0], b_q[0]


def displace_block(means, quats, coeffs, b_mu, b_q):
    """Apply basis motion to a block: (N,3),(N,4),(N,B) x (B,3),(B,4).

    Quaternions are returned as raw componentwise sums; rendering normalizes.
    """
    return means + coeffs @ b_mu, quats + coeffs @ b_q


def displace(g, bases):
    """Single-Gaussian convenience wrapper; raw (mean, quat) numpy values."""
    if g.motion_coeffs is None:
        raise ValueError("displace requires a dynamic Gaussian (motion_coeffs set)")
    b_mu, b_q = bases
    b_mu = b_mu.value if isinstance(b_mu, ad.Tensor) else np.asarray(b_mu)
    b_q = b_q.value if isinstance(b_q, ad.Tensor) else np.asarray(b_q)
    m = np.asarray(g.motion_coeffs)
    return np.asarray(g.mean_c) + m @ b_mu, np.asarray(g.rot_c) + m @ b_q


@dataclass
class MotionWeights:
    """Per-basis steady-motion regularization weights."""

    w: np.ndarray
    mode: str = "uniform"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w < 0):
            raise ValueError("regularization weights must be non-negative")

    @classmethod
    def uniform(cls, basis_count):
        return cls(np.ones(basis_count), "uniform")

    @classmethod
    def cumulative_exponential(cls, basis_count, tau=None, w_max=1.0):
        """w_i = w_max (1 - exp(-i / tau)), i = 1..B; later bases smoothed harder."""
        tau = tau if tau is not None else basis_count / 4.0
        i = np.arange(1, basis_count + 1, dtype=np.float64)
        return cls(w_max * (1.0 - np.exp(-i / tau)), "weighted")


def motion_continuity_loss(net: MotionBasisNet, weights: MotionWeights, t_max: int):
    """Steady-motion penalty on consecutive basis outputs.

    (1 / (B (T-1))) sum_{t=2..T} sum_i w_i || phi_i(t/T) - phi_i((t-1)/T) ||^2
    with phi_i the concatenated 7-vector (b_mu_i, b_q_i).
    """
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    B = net.basis_count
    ts = np.arange(1, t_max + 1, dtype=np.float64) / t_max
    b_mu, b_q = net.forward(ts)                       # (T, B, 3), (T, B, 4)
    phi = ad.concatenate([b_mu, b_q], axis=2)         # (T, B, 7)
    diff = phi[1:, :, :] - phi[:-1, :, :]             # (T-1, B, 7)
    per_basis = ad.tsum(diff * diff, axis=(0, 2))     # (B,)
    w = ad.Tensor(weights.w.astype(phi.value.dtype))
    return ad.tsum(per_basis * w) * (1.0 / (B * (t_max - 1)))


def _row_max(a):
    """Row-wise max of (N, B) with gradient routed to the first argmax."""
    v = a.value.max(axis=1)
    if not a.requires_grad:
        return ad.Tensor(v)
    hit = a.value == v[:, None]
    first = hit & (np.cumsum(hit, axis=1) == 1)

    def bwd(g):
        a._accum(first * g[:, None])

    return ad.Tensor._from_op(v, (a,), bwd)


def sparsity_losses(coeffs):
    """(L_m, L_ms) on an (N, B) coefficient Tensor.

    L_m is the plain mean |m|; L_ms normalizes each row by its max |m| so the
    penalty pushes toward one dominant basis. Rows that are entirely zero
    contribute 0 to L_ms (guarded, never NaN).
    """
    coeffs = ad.as_tensor(coeffs)
    n, b = coeffs.value.shape
    if n < 1 or b < 1:
        raise ValueError("coefficient matrix must be non-empty")
    absm = ad.absolute(coeffs)
    l_m = ad.tmean(absm)
    row_max = _row_max(absm)                          # (N,)
    nz = row_max.value > 0
    safe = ad.maximum(row_max, np.finfo(coeffs.value.dtype).tiny)
    ratio_mean = ad.tmean(absm, axis=1) / safe        # (N,)
    l_ms = ad.tsum(ad.where(nz, ratio_mean, ad.Tensor(np.zeros_like(ratio_mean.value)))) * (1.0 / n)
    return l_m, l_ms


def coefficient_locality_loss(coeffs, means, k, lambda_w):
    """Locality penalty on motion coefficients (DynMF-style baseline).

    (1/(N k)) sum_i sum_{j in NN_k(i)} exp(-lambda_w ||mu_i - mu_j||^2) ||m_i - m_j||^2.
    Every ordered (i, neighbor) pair contributes, so a symmetric neighbor pair
    is counted from both sides.
    """
    coeffs = ad.as_tensor(coeffs)
    means = ad.as_tensor(means)
    n = coeffs.value.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} Gaussians, got {n}")
    nbr = knn_indices(means.value, k)                 # (N, k)
    mu_i = means.reshape((n, 1, 3))
    mu_j = means[nbr]                                 # (N, k, 3)
    dm = coeffs.reshape((n, 1, -1)) - coeffs[nbr]     # (N, k, B)
    d2 = ad.tsum((mu_i - mu_j) ** 2.0, axis=2)        # (N, k)
    kernel = ad.exp(d2 * (-float(lambda_w)))
    return ad.tsum(kernel * ad.tsum(dm * dm, axis=2)) * (1.0 / (n * k))
