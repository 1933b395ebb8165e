"""Minibatch training with Adam, gradient clipping and Polyak averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .data import dynamic_binarize
from .evaluation import MetricsRecord, diagnostics
from .models import VaeModel
from .objectives import RegWeights, mae_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite {component} at step {step}")
        self.component = component
        self.step = step


@dataclass
class TrainConfig:
    eta: float = 0.0
    gamma: float = 0.0
    learning_rate: float = 0.001
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0
    free_bits_lambda: float = 0.0
    polyak_alpha: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    dynamic_binarization: bool = True
    log_eval_size: int = 100
    log_importance_samples: int = 16

    def __post_init__(self):
        RegWeights(self.eta, self.gamma)
        if (self.eta > 0 or self.gamma > 0) and self.batch_size < 2:
            raise ValueError("pairwise regularizers need batch_size >= 2")
        for name in ("learning_rate", "batch_size", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.free_bits_lambda < 0:
            raise ValueError("epochs and free_bits_lambda must be nonnegative")
        if not 0.0 <= self.polyak_alpha <= 1.0:
            raise ValueError("polyak_alpha must lie in [0, 1]")

    @property
    def weights(self) -> RegWeights:
        return RegWeights(self.eta, self.gamma)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              lr: float = 0.001, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``state`` and ``params``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def polyak_update(avg: dict[str, np.ndarray], params: Mapping[str, np.ndarray], alpha: float) -> None:
    """avg <- alpha * avg + (1 - alpha) * params, in place."""
    for name, p in params.items():
        a = avg[name]
        if a.shape != p.shape:
            raise ValueError(f"average for {name} has shape {a.shape}, parameter {p.shape}")
        avg[name] = alpha * a + (1.0 - alpha) * p


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    with np.errstate(over="ignore"):
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class TrainResult:
    model: VaeModel
    polyak_model: VaeModel
    history: list[MetricsRecord]
    step_losses: list[dict[str, float]]


def train(model: VaeModel, images: np.ndarray, config: TrainConfig,
          on_epoch: Callable[[MetricsRecord, VaeModel], None] | None = None) -> TrainResult:
    """Train ``model`` on intensities (N, D) in [0, 1].

    The input model is not modified; the returned models are copies.
    ``on_epoch(record, model)`` sees the live model after each epoch.  With
    ``dynamic_binarization`` the pixels are resampled at the start of every
    epoch, otherwise ``images`` must already be binary.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or len(images) == 0:
        raise ValueError("training needs a nonempty (N, D) array")
    rng = np.random.default_rng(config.seed)
    current = model.copy()
    avg = {k: v.copy() for k, v in current.params.items()}
    state = AdamState()
    weights = config.weights
    history: list[MetricsRecord] = []
    step_losses: list[dict[str, float]] = []
    eval_rng = np.random.default_rng([config.seed, 1])
    eval_idx = eval_rng.choice(len(images), size=min(config.log_eval_size, len(images)), replace=False)
    n = len(images)
    step = 0

    for epoch in range(config.epochs):
        data = dynamic_binarize(images, rng) if config.dynamic_binarization else images
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            if len(batch) < 2 and (config.eta or config.gamma):
                continue
            noise = rng.standard_normal((len(batch), current.K))

            def objective(leaves):
                parts = mae_loss(current, batch, weights, noise, leaves, config.free_bits_lambda)
                objective.parts = parts
                return parts.total

            try:
                _, grads = ad.value_and_grad(objective, current.params)
            except ad.NumericError as exc:
                raise TrainingDiverged(str(exc), step) from exc
            floats = objective.parts.as_floats()
            for name, value in floats.items():
                if not math.isfinite(value):
                    raise TrainingDiverged(name, step)
            if not math.isfinite(clip_by_global_norm(grads, config.clip_norm)):
                raise TrainingDiverged("gradient norm", step)
            adam_step(state, current.params, grads, config.learning_rate,
                      (config.beta1, config.beta2), config.adam_eps)
            polyak_update(avg, current.params, config.polyak_alpha)
            step_losses.append(floats)
            step += 1

        eval_data = dynamic_binarize(images[eval_idx], eval_rng) if config.dynamic_binarization else images[eval_idx]
        try:
            record = diagnostics(current, eval_data, config.log_importance_samples, eval_rng,
                                 batch_size=config.batch_size)
        except ad.NumericError as exc:
            raise TrainingDiverged(f"evaluation ({exc})", step) from exc
        record.epoch = epoch
        history.append(record)
        log.info("epoch %d elbo %.3f kl %.3f mpd %.3f", epoch, record.elbo, record.kl, record.mpd)
        if on_epoch is not None:
            on_epoch(record, current)

    return TrainResult(current, VaeModel(current.config, avg), history, step_losses)
