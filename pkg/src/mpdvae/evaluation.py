"""Likelihood estimates, posterior diagnostics and representation probes.

Evaluation runs on plain numpy values (no gradient recording).  The probes
(k-means, nearest neighbours, logistic regression) work on any (N, K) array
of representations; :func:`extract_representations` produces posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .distributions import DiagGaussian, log_density
from .models import STANDARD, VaeModel
from .objectives import diverse_loss, mpd_estimate, pairwise_kl, smooth_loss

METRIC_FIELDS = ("epoch", "elbo", "re", "kl", "mpd", "std", "l_diverse", "l_smooth", "nll_iw")


@dataclass
class MetricsRecord:
    """Per-datum averages in nats."""

    epoch: int = -1
    elbo: float = 0.0
    re: float = 0.0
    kl: float = 0.0
    mpd: float = 0.0
    std: float = 0.0
    l_diverse: float = 0.0
    l_smooth: float = 0.0
    nll_iw: float = 0.0
    n_data: int = 0
    importance_samples: int = 0


def logmeanexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_importance_weights(model: VaeModel, x, S: int, rng: np.random.Generator,
                           chunk: int = 4096) -> np.ndarray:
    """log p(x|z) + log p(z) - log q(z|x) for S posterior draws: shape (S, B)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = model.encode(x)
    mean, log_var = q.mean.data, q.log_var.data
    b, k = mean.shape
    per_chunk = max(1, chunk // b)
    out = np.empty((S, b))
    for s0 in range(0, S, per_chunk):
        s1 = min(S, s0 + per_chunk)
        eps = rng.standard_normal((s1 - s0, b, k))
        z = mean + np.exp(0.5 * log_var) * eps
        zf = z.reshape(-1, k)
        xf = np.broadcast_to(x, (s1 - s0,) + x.shape).reshape(-1, x.shape[-1])
        log_px = model.log_likelihood(zf, xf).data
        log_pz = model.prior_log_density(zf).data
        log_q = log_density(DiagGaussian(np.tile(mean, (s1 - s0, 1)), np.tile(log_var, (s1 - s0, 1))), zf).data
        out[s0:s1] = (log_px + log_pz - log_q).reshape(s1 - s0, b)
    return out


def iw_nll(model: VaeModel, x, S: int, rng: np.random.Generator) -> np.ndarray | float:
    """Importance-weighted estimate of -log p(x), per datum.

    A single (D,) input gives a float; a (B, D) batch gives a (B,) array.
    """
    if S < 1:
        raise ValueError("need at least one importance sample")
    single = np.ndim(x) == 1
    est = -logmeanexp(log_importance_weights(model, x, S, rng), axis=0)
    return float(est[0]) if single else est


def iw_nll_with_se(model: VaeModel, x, S: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-datum IW-NLL with a delta-method standard error, std(w) / (sqrt(S) mean(w))."""
    if S < 1:
        raise ValueError("need at least one importance sample")
    lw = log_importance_weights(model, x, S, rng)
    w = np.exp(lw - lw.max(axis=0, keepdims=True))
    se = w.std(axis=0, ddof=1) / (np.sqrt(S) * w.mean(axis=0)) if S > 1 else np.full(lw.shape[1], np.inf)
    return -logmeanexp(lw, axis=0), se


def diagnostics(model: VaeModel, data, S: int, rng: np.random.Generator,
                batch_size: int = 100) -> MetricsRecord:
    """RE, KL, MPD, STD, both regularizers, ELBO and IW-NLL averaged over ``data``.

    Pair statistics are computed within random minibatches of ``batch_size``
    (self-pairs excluded) and averaged with weights proportional to pair counts.
    """
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if n == 0:
        raise ValueError("diagnostics needs a nonempty dataset")
    q = model.encode(data)
    mean, log_var = q.mean.data, q.log_var.data
    noise = rng.standard_normal(mean.shape)
    z = mean + np.exp(0.5 * log_var) * noise
    re = float(np.mean(-model.log_likelihood(z, data).data))
    kl = float(np.mean(log_density(q, z).data - model.prior_log_density(z).data)) \
        if model.config.prior_kind != STANDARD else \
        float(np.mean(0.5 * np.sum(mean ** 2 + np.exp(log_var) - log_var - 1.0, axis=-1)))

    order = rng.permutation(n)
    sums = np.zeros(4)
    total_pairs = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        post = DiagGaussian(mean[idx], log_var[idx])
        pk = pairwise_kl(post)
        pairs = len(idx) * (len(idx) - 1)
        spread = float(smooth_loss(post, pk))
        sums += pairs * np.array([float(mpd_estimate(post, pk)), spread, float(diverse_loss(post, pk)), spread])
        total_pairs += pairs
    mpd, std, l_div, l_smooth = sums / total_pairs if total_pairs else (0.0, 0.0, 0.0, 0.0)

    nll = float(np.mean(iw_nll(model, data, S, rng))) if S > 0 else float("nan")
    return MetricsRecord(elbo=re + kl, re=re, kl=kl, mpd=float(mpd), std=float(std),
                         l_diverse=float(l_div), l_smooth=float(l_smooth), nll_iw=nll,
                         n_data=n, importance_samples=S)


def extract_representations(model: VaeModel, data, batch_size: int = 1000) -> np.ndarray:
    """Posterior means, one row per datum."""
    data = np.asarray(data, dtype=np.float64)
    parts = [model.encode(data[i:i + batch_size]).mean.data for i in range(0, len(data), batch_size)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, model.K))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    heads: np.ndarray
    distortions: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(points, n_clusters: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding, until assignments stop changing."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    rng = np.random.default_rng(seed)

    heads = np.empty((n_clusters, x.shape[1]))
    heads[0] = x[rng.integers(n)]
    closest = _sq_dists(x, heads[:1])[:, 0]
    for c in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        heads[c] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, heads[c:c + 1])[:, 0])

    assign = np.full(n, -1)
    distortions = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, heads)
        new = d.argmin(axis=1)
        distortions.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        for c in range(n_clusters):
            members = x[assign == c]
            if len(members):
                heads[c] = members.mean(axis=0)
            # empty clusters keep their stale head
    return KMeansResult(assign, heads, distortions, it)


def cluster_accuracy(heads, assignments, train_reps, train_labels, eval_labels) -> float:
    """Label each cluster by the training sample nearest its head and score the assignment."""
    heads = np.asarray(heads, dtype=np.float64)
    train_reps = np.asarray(train_reps, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    assignments = np.asarray(assignments)
    eval_labels = np.asarray(eval_labels)
    if len(assignments) != len(eval_labels) or len(train_reps) != len(train_labels):
        raise ValueError("inconsistent sizes")
    head_labels = train_labels[_sq_dists(heads, train_reps).argmin(axis=1)]
    return float(np.mean(head_labels[assignments] == eval_labels))


# ---------------------------------------------------------------------------
# semi-supervised probes
# ---------------------------------------------------------------------------


def knn_predict(train_reps, train_labels, test_reps, k: int = 10) -> np.ndarray:
    """Majority vote over the k nearest training points (Euclidean).

    Ties go to the label with the smallest summed distance among the voters.
    """
    train = np.asarray(train_reps, dtype=np.float64)
    labels = np.asarray(train_labels)
    test = np.atleast_2d(np.asarray(test_reps, dtype=np.float64))
    if len(train) == 0:
        raise ValueError("empty training set")
    if k > len(train) or k < 1:
        raise ValueError(f"k={k} invalid for {len(train)} training points")
    d = np.sqrt(_sq_dists(test, train))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    out = np.empty(len(test), dtype=labels.dtype)
    for row, idx in enumerate(nearest):
        votes = labels[idx]
        cand, counts = np.unique(votes, return_counts=True)
        tied = cand[counts == counts.max()]
        if len(tied) == 1:
            out[row] = tied[0]
        else:
            dist = [d[row, idx][votes == t].sum() for t in tied]
            out[row] = tied[int(np.argmin(dist))]
    return out


def knn_classify(train_reps, train_labels, test_reps, test_labels, k: int = 10) -> float:
    pred = knn_predict(train_reps, train_labels, test_reps, k)
    return float(np.mean(pred == np.asarray(test_labels)))


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    losses: list[float]

    def predict(self, reps) -> np.ndarray:
        x = (np.asarray(reps, dtype=np.float64) - self.center) / self.scale
        return self.classes[np.argmax(x @ self.weights + self.bias, axis=1)]


def fit_logistic(train_reps, train_labels, l2: float = 1e-4, iters: int = 500,
                 lr: float = 0.5) -> LogisticModel:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training statistics first.
    """
    x = np.asarray(train_reps, dtype=np.float64)
    y = np.asarray(train_labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("logistic probe needs at least two classes in the training set")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (x - center) / scale
    n, k = x.shape
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    w = np.zeros((k, len(classes)))
    b = np.zeros(len(classes))
    losses = []
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        losses.append(float(-(onehot * logp).sum() / n + 0.5 * l2 * (w * w).sum()))
        resid = np.exp(logp) - onehot
        w -= lr * (x.T @ resid / n + l2 * w)
        b -= lr * resid.mean(axis=0)
    return LogisticModel(w, b, classes, center, scale, losses)


def logistic_probe(train_reps, train_labels, test_reps, test_labels, l2: float = 1e-4,
                   iters: int = 500, lr: float = 0.5) -> float:
    model = fit_logistic(train_reps, train_labels, l2, iters, lr)
    return float(np.mean(model.predict(test_reps) == np.asarray(test_labels)))


def stratified_subset(labels, budget: int | None, seed: int) -> np.ndarray:
    """Indices of a class-balanced labelled subset; ``None`` means all data."""
    labels = np.asarray(labels)
    if budget is None or budget >= len(labels):
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    take = []
    i = 0
    # round-robin over classes so every class gets floor or ceil of budget / n_classes
    while len(take) < budget:
        for members in per_class:
            if i < len(members) and len(take) < budget:
                take.append(members[i])
        i += 1
    return np.sort(np.array(take))


def metrics_as_row(record: MetricsRecord) -> dict:
    return {f.name: getattr(record, f.name) for f in fields(record) if f.name in METRIC_FIELDS}
