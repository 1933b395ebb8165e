"""Mutual posterior-divergence regularized VAEs on a small numpy autodiff core."""

from .autodiff import Tensor, grad_check, value_and_grad
from .distributions import DiagGaussian, kl_diag, kl_to_standard
from .models import ModelConfig, VaeModel
from .objectives import RegWeights, diverse_loss, elbo_loss, mae_loss, mpd_estimate, smooth_loss
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad_check",
    "value_and_grad",
    "DiagGaussian",
    "kl_diag",
    "kl_to_standard",
    "ModelConfig",
    "VaeModel",
    "RegWeights",
    "diverse_loss",
    "elbo_loss",
    "mae_loss",
    "mpd_estimate",
    "smooth_loss",
    "TrainConfig",
    "train",
]
