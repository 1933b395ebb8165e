import itertools
import math

import numpy as np
import pytest

from mpdvae.distributions import kl_diag, log_density
from mpdvae.evaluation import (
    cluster_accuracy,
    diagnostics,
    extract_representations,
    fit_logistic,
    iw_nll,
    iw_nll_with_se,
    kmeans,
    knn_classify,
    knn_predict,
    logistic_probe,
    logmeanexp,
    stratified_subset,
)
from mpdvae.models import LinearGaussianModel

from helpers import toy_model


def collapsed_model(decoder="factorized"):
    """Encoder outputs the prior; the decoder ignores z."""
    model = toy_model(decoder)
    for k in model.params:
        if k.startswith("enc.") or (k.startswith("dec.") and decoder == "factorized" and k != "dec.bout"):
            model.params[k][:] = 0.0
    model.params["dec.bout"] = np.linspace(-2, 2, 9)
    return model


def binary(n, d=9, seed=0):
    return (np.random.default_rng(seed).random((n, d)) < 0.5).astype(float)


class TestLogmeanexp:
    def test_matches_naive(self):
        a = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(logmeanexp(a, 0), np.log(np.exp(a).mean(0)), rtol=1e-14)

    def test_no_overflow(self):
        assert logmeanexp(np.array([1000.0, 1000.0])) == 1000.0
        assert logmeanexp(np.array([-1000.0, -1000.0])) == -1000.0


class TestIwNll:
    def test_collapsed_model_is_exact(self):
        model = collapsed_model()
        x = binary(4)
        p = 1 / (1 + np.exp(-model.params["dec.bout"]))
        exact = -np.sum(x * np.log(p) + (1 - x) * np.log(1 - p), axis=1)
        for s in (1, 7, 64):
            np.testing.assert_allclose(iw_nll(model, x, s, np.random.default_rng(s)), exact, atol=1e-12)

    def test_single_sample_is_elbo(self):
        # one draw: log p(x|z) + log p(z) - log q(z|x), i.e. the ELBO with a sampled KL
        model = toy_model(seed=2)
        x = binary(5, seed=1)
        noise = np.random.default_rng(3).standard_normal((1, 5, 4))[0]
        q = model.encode(x)
        z = q.mean.data + np.exp(0.5 * q.log_var.data) * noise
        expected = -(model.log_likelihood(z, x).data + model.prior_log_density(z).data - log_density(q, z).data)
        np.testing.assert_allclose(iw_nll(model, x, 1, np.random.default_rng(3)), expected, atol=1e-12)

    def test_linear_gaussian_marginal(self):
        model = LinearGaussianModel.create(w=1.5, b=0.3, log_noise=math.log(0.4), u=0.4, v=0.1,
                                           log_q=math.log(0.3))
        x = np.array([[0.7], [-1.2], [2.0]])
        est, se = iw_nll_with_se(model, x, 1024, np.random.default_rng(0))
        assert np.all(np.abs(est + model.log_marginal(x)) <= 3 * se)

    def test_exact_posterior_has_zero_variance(self):
        # q(z|x) equal to the true posterior makes every weight equal p(x)
        w, n2 = 1.2, 0.5
        post_var = 1 / (1 + w * w / n2)
        model = LinearGaussianModel.create(w=w, b=0.0, log_noise=math.log(n2), u=post_var * w / n2, v=0.0,
                                           log_q=math.log(post_var))
        x = np.array([[0.4], [-2.0]])
        np.testing.assert_allclose(iw_nll(model, x, 3, np.random.default_rng(1)), -model.log_marginal(x),
                                   atol=1e-12)

    def test_single_datum_gives_float(self):
        assert isinstance(iw_nll(toy_model(), binary(1)[0], 4, np.random.default_rng(0)), float)

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            iw_nll(toy_model(), binary(2), 0, np.random.default_rng(0))


class TestDiagnostics:
    def test_collapsed_model(self):
        rec = diagnostics(collapsed_model("autoregressive"), binary(30), 4, np.random.default_rng(0))
        assert rec.kl == 0.0
        assert rec.mpd == 0.0
        assert rec.std <= 1e-4

    def test_elbo_is_re_plus_kl(self):
        rec = diagnostics(toy_model(seed=5), binary(30), 4, np.random.default_rng(0))
        assert abs(rec.elbo - (rec.re + rec.kl)) <= 1e-9

    def test_mpd_matches_exhaustive_pairs(self):
        model = toy_model(seed=6)
        data = binary(12, seed=2)
        rec = diagnostics(model, data, 1, np.random.default_rng(0), batch_size=100)
        q = model.encode(data)
        pairs = [float(kl_diag(q[i], q[j])[0]) for i, j in itertools.permutations(range(12), 2)]
        assert rec.mpd == pytest.approx(np.mean(pairs), abs=1e-12)
        assert rec.std == pytest.approx(math.sqrt(np.var(pairs) + 1e-8), abs=1e-12)


class TestRepresentations:
    def test_zero_encoder(self):
        model = collapsed_model()
        np.testing.assert_array_equal(extract_representations(model, binary(7)), 0.0)

    def test_duplicates_identical(self):
        x = binary(1)
        reps = extract_representations(toy_model(seed=1), np.vstack([x, x]))
        np.testing.assert_array_equal(reps[0], reps[1])

    def test_matches_encoder_mean(self):
        model = toy_model(seed=2)
        x = binary(25)
        np.testing.assert_array_equal(extract_representations(model, x, batch_size=10), model.encode(x).mean.data)


def two_clouds(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(20, 2)) * 0.1
    b = rng.normal(size=(20, 2)) * 0.1 + 10.0
    return np.vstack([a, b]), np.repeat([0, 1], 20)


class TestKMeans:
    def test_recovers_separated_clouds(self):
        pts, labels = two_clouds()
        res = kmeans(pts, 2, seed=0)
        assert len(set(res.assignments[:20])) == 1 and len(set(res.assignments[20:])) == 1
        assert res.assignments[0] != res.assignments[-1]

    def test_one_cluster_per_point(self):
        pts = np.random.default_rng(1).normal(size=(6, 3))
        res = kmeans(pts, 6, seed=0)
        assert res.distortions[-1] == pytest.approx(0.0, abs=1e-12)
        assert sorted(res.assignments) == list(range(6))

    def test_distortion_non_increasing(self):
        pts = np.random.default_rng(2).normal(size=(300, 4))
        res = kmeans(pts, 8, seed=3)
        assert res.n_iter > 2
        assert all(b <= a + 1e-9 for a, b in zip(res.distortions, res.distortions[1:]))

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)

    def test_deterministic(self):
        pts = np.random.default_rng(4).normal(size=(100, 2))
        np.testing.assert_array_equal(kmeans(pts, 5, seed=1).assignments, kmeans(pts, 5, seed=1).assignments)


class TestClusterAccuracy:
    def test_perfect(self):
        pts, labels = two_clouds()
        res = kmeans(pts, 2, seed=0)
        assert cluster_accuracy(res.heads, res.assignments, pts, labels, labels) == 1.0

    def test_single_cluster_two_classes(self):
        pts, labels = two_clouds()
        res = kmeans(pts, 1, seed=0)
        assert cluster_accuracy(res.heads, res.assignments, pts, labels, labels) == 0.5

    def test_hand_case(self):
        train = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [9.0, 0.0]])
        train_labels = np.array([7, 3, 1, 2])
        heads = np.array([[0.8, 0.1], [5.5, 5.0], [8.0, 0.0]])
        # head 0 -> [1, 0] (label 3), head 1 -> [5, 5] (label 1), head 2 -> [9, 0] (label 2)
        assignments = np.array([0, 0, 1, 2, 2])
        eval_labels = np.array([3, 7, 1, 2, 1])
        assert cluster_accuracy(heads, assignments, train, train_labels, eval_labels) == pytest.approx(3 / 5)


class TestKnn:
    def test_duplicate_point(self):
        train = np.random.default_rng(0).normal(size=(10, 2))
        labels = np.arange(10)
        assert knn_predict(train, labels, train[4], k=1)[0] == 4

    def test_constant_labels(self):
        train = np.random.default_rng(1).normal(size=(10, 2))
        test = np.random.default_rng(2).normal(size=(5, 2))
        assert knn_classify(train, np.full(10, 3), test, np.full(5, 3), k=4) == 1.0

    def test_matches_brute_force_vote(self):
        rng = np.random.default_rng(3)
        train = rng.integers(0, 5, size=(15, 2)).astype(float) + rng.normal(scale=0.01, size=(15, 2))
        labels = rng.integers(0, 3, size=15)
        test = rng.uniform(0, 5, size=(20, 2))
        pred = knn_predict(train, labels, test, k=3)
        for t, p in zip(test, pred):
            d = np.linalg.norm(train - t, axis=1)
            idx = sorted(range(15), key=lambda i: d[i])[:3]
            votes = {}
            for i in idx:
                count, dist = votes.get(labels[i], (0, 0.0))
                votes[labels[i]] = (count + 1, dist + d[i])
            best = sorted(votes.items(), key=lambda kv: (-kv[1][0], kv[1][1]))[0][0]
            assert p == best

    def test_tie_goes_to_closer_label(self):
        train = np.array([[0.0], [3.0]])
        assert knn_predict(train, np.array([5, 6]), np.array([[1.0]]), k=2)[0] == 5
        assert knn_predict(train, np.array([5, 6]), np.array([[2.0]]), k=2)[0] == 6

    def test_empty_train(self):
        with pytest.raises(ValueError):
            knn_predict(np.zeros((0, 2)), np.zeros(0), np.zeros((1, 2)))


class TestLogistic:
    def test_separable(self):
        pts, labels = two_clouds()
        assert logistic_probe(pts, labels, pts, labels) == 1.0

    def test_zero_iterations_is_chance(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(90, 3))
        labels = np.repeat([0, 1, 2], 30)
        # zero weights tie every class; argmax picks the first, right for a third of the data
        assert logistic_probe(pts, labels, pts, labels, iters=0) == pytest.approx(1 / 3)

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(200, 4))
        labels = (pts[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(int) + (pts[:, 1] > 1)
        model = fit_logistic(pts, labels, iters=200, lr=0.1)
        assert all(b <= a for a, b in zip(model.losses, model.losses[1:]))

    def test_single_class(self):
        with pytest.raises(ValueError, match="two classes"):
            fit_logistic(np.zeros((4, 2)), np.zeros(4))


class TestStratifiedSubset:
    def test_balanced(self):
        labels = np.repeat(np.arange(10), 50)
        idx = stratified_subset(labels, 100, seed=0)
        assert len(idx) == 100
        assert np.all(np.bincount(labels[idx]) == 10)

    def test_all(self):
        np.testing.assert_array_equal(stratified_subset(np.arange(5), None, 0), np.arange(5))

    def test_reproducible(self):
        labels = np.repeat(np.arange(3), 20)
        np.testing.assert_array_equal(stratified_subset(labels, 10, 4), stratified_subset(labels, 10, 4))
