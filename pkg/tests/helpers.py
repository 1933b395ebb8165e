import numpy as np

from mpdvae import autodiff as ad
from mpdvae.models import ModelConfig, VaeModel


def toy_model(decoder_kind="autoregressive", prior_kind="standard", seed=0, K=4, D=9, hidden=16):
    cfg = ModelConfig(D, K, encoder_hidden=(hidden, hidden), decoder_hidden=(hidden,),
                      decoder_kind=decoder_kind, prior_kind=prior_kind, n_flows=2, flow_hidden=(hidden,))
    return VaeModel.create(cfg, seed=seed)


def toy_batch(D=9, B=6, K=4, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((B, D)) < 0.5).astype(float), rng.standard_normal((B, K))


def flatten(params):
    names = sorted(params)
    return names, np.concatenate([params[n].ravel() for n in names])


def unflatten(names, shapes, vec):
    out, i = {}, 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = vec[i:i + size].reshape(shapes[n]) if isinstance(vec, np.ndarray) else ad.reshape(vec[i:i + size], shapes[n])
        i += size
    return out


def model_grad_error(model, loss_of_params, h=1e-4):
    """Relative error of the analytic gradient of ``loss_of_params`` over every model parameter."""
    return model_grad_errors(model, lambda p: {"loss": loss_of_params(p)}, h)["loss"]


def model_grad_errors(model, losses_of_params, h=1e-4):
    """Like ``model_grad_error`` for a dict of scalar losses sharing one set of perturbed evaluations.

    Uses the same error measure as ``ad.grad_check``.
    """
    names, flat = flatten(model.params)
    shapes = {n: model.params[n].shape for n in names}
    leaf = ad.Tensor(flat, name="theta", requires_grad=True)
    outs = losses_of_params(unflatten(names, shapes, leaf))
    analytic = {k: ad.gradients(v, [leaf])["theta"] for k, v in outs.items()}
    numeric = {k: np.zeros_like(flat) for k in outs}
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = losses_of_params(unflatten(names, shapes, xp))
        fm = losses_of_params(unflatten(names, shapes, xm))
        for k in outs:
            numeric[k][i] = (float(fp[k]) - float(fm[k])) / (2 * h)
    errors = {}
    for k, a in analytic.items():
        n = numeric[k]
        errors[k] = float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)))
    return errors
