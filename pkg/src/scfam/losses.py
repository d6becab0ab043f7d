"""Semantic prediction, domain adaptation, attention and consistency losses.

Every loss here is a positive negative-log-likelihood. The adversarial
direction of the domain terms comes from gradient reversal in front of the
discriminators, so the total objective weights them by ``abs(lambda1)``
rather than by the negative ``lambda1`` itself.

All functions accept a leading batch axis; per-image losses are averaged
over it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, adaptive_max_pool, adaptive_mean_pool, as_tensor, channel_max, clip, log, stop_gradient

SOURCE, TARGET = 0, 1
DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = -1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    gamma: float = 5.0
    eps_clamp: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0 < self.eps_clamp < 0.5:
            raise ValueError(f"eps_clamp must lie in (0, 0.5), got {self.eps_clamp}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")

    @property
    def w_da(self) -> float:
        return abs(self.lambda1)


def _check_domain(d) -> int:
    if d not in (SOURCE, TARGET):
        raise ValueError(f"domain tag must be 0 (source) or 1 (target), got {d!r}")
    return int(d)


def _same_shape(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{name}: prediction shape {a.shape} != target shape {b.shape}")


def binary_cross_entropy(p, target, eps: float = DEFAULT_EPS) -> Tensor:
    """Elementwise BCE with probabilities clamped to ``[eps, 1 - eps]``."""
    p = clip(as_tensor(p), eps, 1.0 - eps)
    t = as_tensor(target)
    return -(t * log(p) + (1.0 - t) * log(1.0 - p))


def loss_spm_local(p_local, target, eps: float = DEFAULT_EPS) -> Tensor:
    """Foreground/background BCE averaged over the F1 grid."""
    p_local, target = as_tensor(p_local), as_tensor(target)
    _same_shape("loss_spm_local", p_local, target)
    return binary_cross_entropy(p_local, target, eps).mean()


def loss_spm_mid(p_mid, target, eps: float = DEFAULT_EPS) -> Tensor:
    """Summed over the class axis (-3), averaged over positions and batch."""
    p_mid, target = as_tensor(p_mid), as_tensor(target)
    _same_shape("loss_spm_mid", p_mid, target)
    return binary_cross_entropy(p_mid, target, eps).sum(axis=-3).mean()


def loss_spm_global(p_global, target, eps: float = DEFAULT_EPS) -> Tensor:
    p_global, target = as_tensor(p_global), as_tensor(target)
    _same_shape("loss_spm_global", p_global, target)
    per = binary_cross_entropy(p_global, target, eps).sum(axis=-1)
    return per.mean() if per.ndim else per


def _domain_bce(d_map: Tensor, d: int, eps: float) -> Tensor:
    p = clip(d_map, eps, 1.0 - eps)
    return -log(p) if d == TARGET else -log(1.0 - p)


def loss_da_pixel(d_map, d, eps: float = DEFAULT_EPS) -> Tensor:
    d = _check_domain(d)
    return _domain_bce(as_tensor(d_map), d, eps).mean()


def loss_da_pixel_attended(d_map, d, weight, eps: float = DEFAULT_EPS) -> Tensor:
    d = _check_domain(d)
    d_map, weight = as_tensor(d_map), as_tensor(weight)
    _same_shape("loss_da_pixel_attended", d_map, weight)
    return (weight * _domain_bce(d_map, d, eps)).mean()


def loss_da_global(d_global, d, gamma: float = 5.0, eps: float = DEFAULT_EPS) -> Tensor:
    """Focal-modulated domain BCE for the image-level discriminator."""
    d = _check_domain(d)
    p = clip(as_tensor(d_global), eps, 1.0 - eps)
    if d == TARGET:
        per = (1.0 - p) ** gamma * -log(p) if gamma else -log(p)
    else:
        per = p**gamma * -log(1.0 - p) if gamma else -log(1.0 - p)
    return per.mean()


def attention_weight_local(p_local) -> Tensor:
    return 1.0 + as_tensor(p_local)


def attention_weight_mid(p_mid) -> Tensor:
    """``2 - max_c P^c`` per position. Accepts (K, H, W) or (N, K, H, W)."""
    p_mid = as_tensor(p_mid)
    if p_mid.ndim == 3:
        return 2.0 - channel_max(p_mid.reshape((1,) + p_mid.shape)).reshape(p_mid.shape[1:])
    return 2.0 - channel_max(p_mid)


def pooled_class_scores(p_mid, pool_hw) -> Tensor:
    """Adaptive mean pool to ``pool_hw`` then adaptive max pool to 1x1; (N, K)."""
    p_mid = as_tensor(p_mid)
    batched = p_mid.ndim == 4
    x = p_mid if batched else p_mid.reshape((1,) + p_mid.shape)
    ha, wa = pool_hw
    if ha > x.shape[2] or wa > x.shape[3]:
        raise ValueError(f"pool size {tuple(pool_hw)} exceeds mid grid {x.shape[2:]}")
    y = adaptive_max_pool(adaptive_mean_pool(x, ha, wa), 1, 1)
    y = y.reshape(x.shape[0], x.shape[1])
    return y if batched else y.reshape(x.shape[1])


def loss_consistency(p_mid, y_global, pool_hw=(10, 10), eps: float = DEFAULT_EPS) -> Tensor:
    """Tie pooled mid-level class scores to the global prediction.

    The global prediction is the target and carries no gradient. Source
    images only.
    """
    y_m = pooled_class_scores(p_mid, pool_hw)
    y_g = stop_gradient(as_tensor(y_global))
    _same_shape("loss_consistency", y_m, y_g)
    per = binary_cross_entropy(y_m, y_g, eps).sum(axis=-1)
    return per.mean() if per.ndim else per


def total_loss(
    l_det=0.0,
    l_local=0.0,
    l_mid=0.0,
    l_global=0.0,
    l_sl=0.0,
    l_sm=0.0,
    l_sg=0.0,
    l_cr=0.0,
    weights: LossWeights = LossWeights(),
):
    """Weighted sum; works on floats or Tensors alike."""
    return (
        l_det
        + weights.w_da * (l_local + l_mid + l_global)
        + weights.lambda2 * (l_sl + l_sm + l_sg)
        + weights.lambda3 * l_cr
    )
