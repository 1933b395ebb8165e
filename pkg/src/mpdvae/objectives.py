"""Training objectives: ELBO, mutual posterior diversity and its two regularizers.

Batch conventions: ``x`` is (B, D) binary, ``noise`` is (B, K) standard normal,
posteriors are a :class:`DiagGaussian` with (B, K) parameters.  Pairwise terms
run over the B(B-1) ordered pairs of distinct batch entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    DiagGaussian,
    kl_diag,
    kl_to_standard_per_dim,
    log_density,
    reparam_sample,
)
from .models import STANDARD, VaeModel

SMOOTH_EPS = 1e-8


@dataclass
class RegWeights:
    eta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.eta < 0 or self.gamma < 0:
            raise ValueError(f"regularization weights must be nonnegative, got {self}")


@dataclass
class ElboTerms:
    elbo: Tensor
    reconstruction_error: Tensor
    kl: Tensor
    kl_per_dim: Tensor | None
    posterior: DiagGaussian
    z: Tensor


@dataclass
class LossBreakdown:
    elbo: Tensor
    reconstruction_error: Tensor
    kl: Tensor
    l_diverse: Tensor
    l_smooth: Tensor
    mpd: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in
                ("elbo", "reconstruction_error", "kl", "l_diverse", "l_smooth", "mpd", "total")}


def free_bits_kl(kl_per_dim, lambda_fb: float) -> Tensor:
    """Sum over dimensions of max(kl_k, lambda_fb)."""
    if lambda_fb < 0:
        raise ValueError("free-bits threshold must be nonnegative")
    return ad.clamp(kl_per_dim, lo=lambda_fb).sum(axis=-1)


def elbo_loss(model: VaeModel, x, noise, params=None, free_bits: float = 0.0) -> ElboTerms:
    """Single-sample negative ELBO, averaged over the batch.

    ``kl`` is always the raw divergence; with ``free_bits > 0`` the ``elbo``
    field uses the clamped per-dimension KL instead.
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    q = model.encode(x, params)
    if noise.shape != q.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != posterior shape {q.mean.shape}")
    z = reparam_sample(q, noise)
    re = -model.log_likelihood(z, x, params).mean()
    if model.config.prior_kind == STANDARD:
        kl_per_dim = kl_to_standard_per_dim(q).mean(axis=0)
        kl = kl_per_dim.sum()
        kl_obj = free_bits_kl(kl_per_dim, free_bits) if free_bits > 0 else kl
    else:
        # Monte Carlo KL with the same reparameterized sample
        kl_per_dim = None
        kl = (log_density(q, z) - model.prior_log_density(z, params)).mean()
        kl_obj = ad.clamp(kl, lo=free_bits * model.K) if free_bits > 0 else kl
    return ElboTerms(re + kl_obj, re, kl, kl_per_dim, q, z)


def _pair_mask(b: int) -> np.ndarray:
    return 1.0 - np.eye(b)


def pairwise_kl(posteriors: DiagGaussian) -> Tensor:
    """Per-dimension KL(q_i || q_j) for all i, j: shape (B, B, K)."""
    b, k = posteriors.mean.shape
    q1 = DiagGaussian(posteriors.mean.reshape(b, 1, k), posteriors.log_var.reshape(b, 1, k))
    q2 = DiagGaussian(posteriors.mean.reshape(1, b, k), posteriors.log_var.reshape(1, b, k))
    return kl_diag(q1, q2)[1]


def _check_batch(posteriors: DiagGaussian) -> int:
    b = posteriors.mean.shape[0] if posteriors.mean.ndim == 2 else 0
    if b < 2:
        raise ValueError("pairwise objectives need a batch of at least two posteriors")
    return b


def mpd_estimate(posteriors: DiagGaussian, pair_kl: Tensor | None = None) -> Tensor:
    """Mean total KL over ordered pairs of distinct batch entries."""
    b = _check_batch(posteriors)
    totals = (pairwise_kl(posteriors) if pair_kl is None else pair_kl).sum(axis=-1)
    return ad.mask_multiply(totals, _pair_mask(b)).sum() / (b * (b - 1))


def diverse_loss(posteriors: DiagGaussian, pair_kl: Tensor | None = None) -> Tensor:
    b = _check_batch(posteriors)
    per_dim = pairwise_kl(posteriors) if pair_kl is None else pair_kl
    terms = ad.softplus(-per_dim).sum(axis=-1)
    return ad.mask_multiply(terms, _pair_mask(b)).sum() / (b * (b - 1))


def smooth_loss(posteriors: DiagGaussian, pair_kl: Tensor | None = None) -> Tensor:
    """Population std of the pairwise total KLs, as sqrt(var + 1e-8)."""
    b = _check_batch(posteriors)
    totals = (pairwise_kl(posteriors) if pair_kl is None else pair_kl).sum(axis=-1)
    mask = _pair_mask(b)
    m = b * (b - 1)
    mean = ad.mask_multiply(totals, mask).sum() / m
    var = ad.mask_multiply(ad.square(totals - mean), mask).sum() / m
    return ad.sqrt(var + SMOOTH_EPS)


def std_of_values(values) -> float:
    """Reference form of the smoothness statistic for a plain list of KL values."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(v.var() + SMOOTH_EPS))


def mae_loss(model: VaeModel, x, weights: RegWeights, noise, params=None,
             free_bits: float = 0.0) -> LossBreakdown:
    """ELBO plus eta * L_diverse plus gamma * L_smooth."""
    terms = elbo_loss(model, x, noise, params, free_bits)
    total = terms.elbo
    if len(terms.z) < 2:
        if weights.eta or weights.gamma:
            raise ValueError("pairwise regularizers need a batch of at least two")
        # no pairs: the pair statistics are reported as zero
        zero = ad.as_tensor(0.0)
        return LossBreakdown(terms.elbo, terms.reconstruction_error, terms.kl, zero, zero, zero, total)
    pair_kl = pairwise_kl(terms.posterior)
    l_div = diverse_loss(terms.posterior, pair_kl)
    l_smooth = smooth_loss(terms.posterior, pair_kl)
    mpd = mpd_estimate(terms.posterior, pair_kl)
    if weights.eta or weights.gamma:
        total = total + weights.eta * l_div + weights.gamma * l_smooth
    return LossBreakdown(terms.elbo, terms.reconstruction_error, terms.kl, l_div, l_smooth, mpd, total)
