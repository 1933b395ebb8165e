"""Encoder, decoders and priors for small binary-image VAEs.

Parameters live in a flat ``dict[str, np.ndarray]`` so the whole model can be
handed to :func:`mpdvae.autodiff.value_and_grad`.  Every forward function takes
the parameter mapping explicitly; pass tensors to differentiate, or leave
``params=None`` to run on the model's own (constant) values.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import DiagGaussian, bernoulli_log_likelihood, standard_normal_log_density

FACTORIZED = "factorized"
AUTOREGRESSIVE = "autoregressive"
STANDARD = "standard"
FLOW = "flow"
LOG_SCALE_MIN, LOG_SCALE_MAX = -5.0, 5.0
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# MADE connectivity
# ---------------------------------------------------------------------------


@dataclass
class MadeMask:
    """Masks for a MADE network.

    ``hidden[l]`` has shape (fan_in, fan_out) and is applied with ``x @ (W * M)``;
    ``output`` connects the last hidden layer (or the input) to the outputs.
    ``order`` lists input units from first to last in the autoregressive order.
    """

    hidden: list[np.ndarray]
    output: np.ndarray
    order: np.ndarray
    direct: np.ndarray

    def connectivity(self) -> np.ndarray:
        """Path counts from input j to output i, as an (n_out, n_in) matrix."""
        m = np.eye(self.output.shape[0] if not self.hidden else self.hidden[0].shape[0])
        for mask in self.hidden:
            m = m @ mask
        return (m @ self.output).T


def made_mask(n_units: int, hidden_sizes, order=None) -> MadeMask:
    order = np.arange(n_units) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(n_units)):
        raise ValueError("order must be a permutation of the units")
    degrees_in = np.empty(n_units, dtype=int)
    degrees_in[order] = np.arange(1, n_units + 1)
    degrees = [degrees_in]
    for h in hidden_sizes:
        # hidden degrees cycle through 1..D-1; units of degree D would be useless
        degrees.append(np.arange(h) % max(1, n_units - 1) + min(1, n_units - 1))
    hidden = [(d0[:, None] <= d1[None, :]).astype(np.float64) for d0, d1 in zip(degrees[:-1], degrees[1:])]
    output = (degrees[-1][:, None] < degrees_in[None, :]).astype(np.float64)
    direct = (degrees_in[:, None] < degrees_in[None, :]).astype(np.float64)
    return MadeMask(hidden, output, order, direct)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    data_dim: int
    latent_dim: int = 16
    encoder_hidden: tuple[int, ...] = (256, 256)
    decoder_hidden: tuple[int, ...] = (256,)
    decoder_kind: str = AUTOREGRESSIVE
    decoder_direct: bool = True
    prior_kind: str = STANDARD
    n_flows: int = 2
    flow_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        self.flow_hidden = tuple(int(h) for h in self.flow_hidden)
        if self.decoder_kind not in (FACTORIZED, AUTOREGRESSIVE):
            raise ValueError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.prior_kind not in (STANDARD, FLOW):
            raise ValueError(f"unknown prior_kind {self.prior_kind!r}")
        if self.data_dim < 1 or self.latent_dim < 1:
            raise ValueError("data_dim and latent_dim must be positive")


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))


def _masked_dense(rng, mask):
    # scale by the number of live inputs per unit, not the full fan-in
    fan_in = max(mask.sum(axis=0).mean(), 1.0)
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=mask.shape)


@dataclass
class VaeModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        c = self.config
        self.decoder_mask = made_mask(c.data_dim, c.decoder_hidden) if c.decoder_kind == AUTOREGRESSIVE else None
        self.flow_masks = []
        if c.prior_kind == FLOW:
            for f in range(c.n_flows):
                order = np.arange(c.latent_dim)
                self.flow_masks.append(made_mask(c.latent_dim, c.flow_hidden, order if f % 2 == 0 else order[::-1]))

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "VaeModel":
        model = cls(config)
        model.params = model.init_params(np.random.default_rng(seed))
        return model

    @property
    def D(self) -> int:
        return self.config.data_dim

    @property
    def K(self) -> int:
        return self.config.latent_dim

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        p: dict[str, np.ndarray] = {}
        widths = (c.data_dim,) + c.encoder_hidden
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"enc.W{i}"] = _dense(rng, a, b)
            p[f"enc.b{i}"] = np.zeros(b)
        p["enc.Wout"] = _dense(rng, widths[-1], 2 * c.latent_dim, 0.1)
        p["enc.bout"] = np.zeros(2 * c.latent_dim)

        if c.decoder_kind == FACTORIZED:
            widths = (c.latent_dim,) + c.decoder_hidden
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                p[f"dec.W{i}"] = _dense(rng, a, b)
                p[f"dec.b{i}"] = np.zeros(b)
            p["dec.Wout"] = _dense(rng, widths[-1], c.data_dim)
            p["dec.bout"] = np.zeros(c.data_dim)
        else:
            mask = self.decoder_mask
            for i, m in enumerate(mask.hidden):
                p[f"dec.W{i}"] = _masked_dense(rng, m)
                p[f"dec.b{i}"] = np.zeros(m.shape[1])
                # z enters through zero-init weights: the decoder starts as a pure
                # autoregressive model and must learn to use the latent
                p[f"dec.V{i}"] = np.zeros((c.latent_dim, m.shape[1]))
            m = mask.output
            p["dec.Wout"] = _masked_dense(rng, m)
            p["dec.bout"] = np.zeros(c.data_dim)
            if c.decoder_direct:
                p["dec.Wdirect"] = np.zeros((c.data_dim, c.data_dim))

        for f, mask in enumerate(self.flow_masks):
            for i, m in enumerate(mask.hidden):
                p[f"flow{f}.W{i}"] = _dense(rng, m.shape[0], m.shape[1])
                p[f"flow{f}.b{i}"] = np.zeros(m.shape[1])
            m = mask.output
            # start near the identity transform
            p[f"flow{f}.Wout"] = _dense(rng, m.shape[0], 2 * m.shape[1], 0.01)
            p[f"flow{f}.bout"] = np.zeros(2 * m.shape[1])
        return p

    def leaves(self, params: Mapping | None) -> Mapping:
        return self.params if params is None else params

    def copy(self) -> "VaeModel":
        return VaeModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # --- forward paths -----------------------------------------------------

    def encode(self, x, params: Mapping | None = None) -> DiagGaussian:
        p = self.leaves(params)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.D:
            raise ValueError(f"input has {x.shape[-1]} pixels, model expects {self.D}")
        h = ad.as_tensor(x)
        for i in range(len(self.config.encoder_hidden)):
            h = ad.tanh(h @ p[f"enc.W{i}"] + p[f"enc.b{i}"])
        out = h @ p["enc.Wout"] + p["enc.bout"]
        k = self.K
        return DiagGaussian.clamped(out[..., :k], out[..., k:])

    def decode(self, z, x=None, params: Mapping | None = None) -> Tensor:
        """Per-pixel logits; ``x`` is the teacher-forcing input for the autoregressive decoder."""
        if self.config.decoder_kind == FACTORIZED:
            return self.decode_factorized(z, params)
        if x is None:
            raise ValueError("the autoregressive decoder needs conditioning pixels x")
        return self.decode_autoregressive(z, x, params)

    def _check_z(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.K:
            raise ValueError(f"z has dimension {z.shape[-1]}, model expects {self.K}")
        return z

    def decode_factorized(self, z, params: Mapping | None = None) -> Tensor:
        p = self.leaves(params)
        h = self._check_z(z)
        for i in range(len(self.config.decoder_hidden)):
            h = ad.tanh(h @ p[f"dec.W{i}"] + p[f"dec.b{i}"])
        return h @ p["dec.Wout"] + p["dec.bout"]

    def decode_autoregressive(self, z, x, params: Mapping | None = None) -> Tensor:
        p = self.leaves(params)
        z = self._check_z(z)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.D:
            raise ValueError(f"x has {x.shape[-1]} pixels, model expects {self.D}")
        mask = self.decoder_mask
        h = ad.as_tensor(x)
        for i, m in enumerate(mask.hidden):
            h = ad.tanh(h @ ad.mask_multiply(p[f"dec.W{i}"], m) + p[f"dec.b{i}"] + z @ p[f"dec.V{i}"])
        logits = h @ ad.mask_multiply(p["dec.Wout"], mask.output) + p["dec.bout"]
        if self.config.decoder_direct:
            logits = logits + x @ ad.mask_multiply(p["dec.Wdirect"], mask.direct)
        return logits

    def log_likelihood(self, z, x, params: Mapping | None = None) -> Tensor:
        """log p(x|z) per datum (teacher-forced for the autoregressive decoder)."""
        return bernoulli_log_likelihood(self.decode(z, x, params), x)

    def sample_autoregressive(self, z, rng: np.random.Generator, params: Mapping | None = None) -> np.ndarray:
        """Ancestral sampling, one decoder pass per pixel."""
        z = np.asarray(z, dtype=np.float64)
        if self.config.decoder_kind == FACTORIZED:
            probs = 1.0 / (1.0 + np.exp(-self.decode_factorized(z, params).data))
            return (rng.random(probs.shape) < probs).astype(np.float64)
        x = np.zeros(z.shape[:-1] + (self.D,))
        for i in self.decoder_mask.order:
            logit = self.decode_autoregressive(z, x, params).data[..., i]
            x[..., i] = rng.random(logit.shape) < 1.0 / (1.0 + np.exp(-logit))
        return x

    # --- prior ---------------------------------------------------------------

    def _flow_step(self, f: int, u, p):
        mask = self.flow_masks[f]
        h = u
        for i, m in enumerate(mask.hidden):
            h = ad.tanh(h @ ad.mask_multiply(p[f"flow{f}.W{i}"], m) + p[f"flow{f}.b{i}"])
        full = np.concatenate([mask.output, mask.output], axis=1)
        out = h @ ad.mask_multiply(p[f"flow{f}.Wout"], full) + p[f"flow{f}.bout"]
        k = self.K
        return out[..., :k], ad.clamp(out[..., k:], LOG_SCALE_MIN, LOG_SCALE_MAX)

    def prior_log_density(self, z, params: Mapping | None = None) -> Tensor:
        z = self._check_z(z)
        if self.config.prior_kind == STANDARD:
            return standard_normal_log_density(z)
        p = self.leaves(params)
        e = z
        log_det = 0.0
        for f in range(len(self.flow_masks)):
            shift, log_scale = self._flow_step(f, e, p)
            e = (e - shift) * ad.exp(-log_scale)
            log_det = log_det - log_scale.sum(axis=-1)
        return standard_normal_log_density(e) + log_det

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        e = rng.standard_normal((n, self.K))
        if self.config.prior_kind == STANDARD:
            return e
        for f in reversed(range(len(self.flow_masks))):
            u = np.zeros_like(e)
            for i in self.flow_masks[f].order:
                shift, log_scale = self._flow_step(f, u, self.params)
                u[:, i] = e[:, i] * np.exp(log_scale.data[:, i]) + shift.data[:, i]
            e = u
        return e

    # --- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "VaeModel":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        model = cls(ModelConfig(**meta["config"]), params)
        missing = set(model.init_params(np.random.default_rng(0))) - set(params)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
        return model


@dataclass
class LinearGaussianModel:
    """One real pixel, one latent: z ~ N(0, 1), x | z ~ N(w z + b, e^log_noise).

    The encoder is q(z|x) = N(u x + v, e^log_q).  Its marginal likelihood and
    ELBO are available in closed form, which makes it a reference for the
    Monte Carlo estimators.  Exposes the same hooks as :class:`VaeModel`.
    """

    params: dict[str, np.ndarray]
    config: ModelConfig = field(default_factory=lambda: ModelConfig(1, 1, (), (), FACTORIZED))

    @classmethod
    def create(cls, w=1.0, b=0.0, log_noise=0.0, u=0.5, v=0.0, log_q=np.log(0.5)) -> "LinearGaussianModel":
        names = ("w", "b", "log_noise", "u", "v", "log_q")
        return cls({n: np.array([float(val)]) for n, val in zip(names, (w, b, log_noise, u, v, log_q))})

    K = 1
    D = 1

    def leaves(self, params):
        return self.params if params is None else params

    def encode(self, x, params: Mapping | None = None) -> DiagGaussian:
        p = self.leaves(params)
        x = np.asarray(x, dtype=np.float64)
        mean = ad.as_tensor(x) * p["u"] + p["v"]
        return DiagGaussian(mean, ad.broadcast_to(ad.as_tensor(p["log_q"]), mean.shape))

    def log_likelihood(self, z, x, params: Mapping | None = None) -> Tensor:
        p = self.leaves(params)
        x = np.asarray(x, dtype=np.float64)
        resid = x - (ad.as_tensor(z) * p["w"] + p["b"])
        log_noise = ad.as_tensor(p["log_noise"])
        per_dim = -0.5 * (np.log(2 * np.pi) + log_noise + ad.square(resid) * ad.exp(-log_noise))
        return per_dim.sum(axis=-1)

    def prior_log_density(self, z, params: Mapping | None = None) -> Tensor:
        return standard_normal_log_density(z)

    def log_marginal(self, x) -> np.ndarray:
        """Exact log p(x): x ~ N(b, w^2 + noise variance)."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)[..., 0]
        var = p["w"][0] ** 2 + np.exp(p["log_noise"][0])
        return -0.5 * (np.log(2 * np.pi * var) + (x - p["b"][0]) ** 2 / var)

    def exact_elbo(self, x) -> np.ndarray:
        """E_q[log p(x|z)] - KL(q || N(0, 1)), per datum."""
        p = {k: v[0] for k, v in self.params.items()}
        x = np.asarray(x, dtype=np.float64)[..., 0]
        m, s2, n2 = p["u"] * x + p["v"], np.exp(p["log_q"]), np.exp(p["log_noise"])
        expected_sq = (x - p["w"] * m - p["b"]) ** 2 + p["w"] ** 2 * s2
        recon = -0.5 * (np.log(2 * np.pi * n2) + expected_sq / n2)
        kl = 0.5 * (m * m + s2 - np.log(s2) - 1.0)
        return recon - kl
