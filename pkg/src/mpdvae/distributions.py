"""Diagonal Gaussian posteriors and the Bernoulli pixel likelihood.

All functions accept numpy arrays or :class:`~mpdvae.autodiff.Tensor` and
return tensors, so they sit inside differentiable objectives unchanged.
Leading axes are batch axes; the last axis is the latent dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_VAR_MIN = -7.0
LOG_VAR_MAX = 7.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class DiagGaussian:
    """Factorized Gaussian N(mean, diag(exp(log_var)))."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.log_var = ad.as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @classmethod
    def clamped(cls, mean, log_var) -> "DiagGaussian":
        return cls(mean, ad.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def standard(cls, k: int) -> "DiagGaussian":
        return cls(np.zeros(k), np.zeros(k))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, index) -> "DiagGaussian":
        return DiagGaussian(self.mean[index], self.log_var[index])


def _check_dims(q1: DiagGaussian, q2: DiagGaussian) -> None:
    if q1.dim != q2.dim:
        raise ValueError(f"latent dimension mismatch: {q1.dim} vs {q2.dim}")


def kl_diag(q1: DiagGaussian, q2: DiagGaussian) -> tuple[Tensor, Tensor]:
    """KL(q1 || q2) as ``(total, per_dim)``; batch axes broadcast."""
    _check_dims(q1, q2)
    ratio = ad.exp(q1.log_var - q2.log_var)
    diff2 = ad.square(q1.mean - q2.mean) * ad.exp(-q2.log_var)
    per_dim = 0.5 * ((q2.log_var - q1.log_var) + ratio + diff2 - 1.0)
    return per_dim.sum(axis=-1), per_dim


def kl_to_standard(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)), summed over the last axis."""
    return kl_to_standard_per_dim(q).sum(axis=-1)


def kl_to_standard_per_dim(q: DiagGaussian) -> Tensor:
    return 0.5 * (ad.square(q.mean) + ad.exp(q.log_var) - q.log_var - 1.0)


def reparam_sample(q: DiagGaussian, eps) -> Tensor:
    eps = np.asarray(eps, dtype=np.float64)
    return q.mean + ad.exp(0.5 * q.log_var) * eps


def log_density(q: DiagGaussian, z) -> Tensor:
    z = ad.as_tensor(z)
    if z.shape[-1] != q.dim:
        raise ValueError(f"z has dimension {z.shape[-1]}, expected {q.dim}")
    quad = ad.square(z - q.mean) * ad.exp(-q.log_var)
    return (-HALF_LOG_2PI - 0.5 * q.log_var - 0.5 * quad).sum(axis=-1)


def standard_normal_log_density(z) -> Tensor:
    z = ad.as_tensor(z)
    return (-HALF_LOG_2PI - 0.5 * ad.square(z)).sum(axis=-1)


def bernoulli_log_likelihood(logits, x) -> Tensor:
    """Sum over the last axis of log Bernoulli(x | sigmoid(logits)).

    Uses x*log_sigmoid(l) + (1-x)*log_sigmoid(-l) = x*l - softplus(l).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli_log_likelihood needs binary observations")
    logits = ad.as_tensor(logits)
    if logits.shape[-1] != x.shape[-1]:
        raise ValueError(f"logits have {logits.shape[-1]} pixels, x has {x.shape[-1]}")
    return (logits * x - ad.softplus(logits)).sum(axis=-1)
