import math

import numpy as np
import pytest

from mpdvae.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_by_global_norm,
    polyak_update,
    train,
)

from helpers import toy_model


def unrolled_adam(grads, p0, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_first_step_is_lr(self):
        params = {"w": np.array([0.5, -2.0, 3.0])}
        adam_step(AdamState(), params, {"w": np.ones(3)}, lr=0.001)
        np.testing.assert_allclose(params["w"], [0.5 - 0.001, -2.0 - 0.001, 3.0 - 0.001], atol=1e-10)

    def test_zero_gradient_is_a_no_op(self):
        params = {"w": np.array([1.0, 2.0])}
        state = AdamState()
        for _ in range(10):
            adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_matches_unrolled_recurrence(self):
        grads = [0.3, -1.2, 0.05]
        params = {"w": np.array(0.7)}
        state = AdamState()
        for g in grads:
            adam_step(state, params, {"w": np.array(g)})
        assert abs(float(params["w"]) - unrolled_adam(grads, 0.7)) <= 1e-12
        assert state.step == 3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestPolyak:
    def test_alpha_zero(self):
        avg = {"w": np.array([5.0])}
        polyak_update(avg, {"w": np.array([2.0])}, 0.0)
        assert avg["w"][0] == 2.0

    def test_alpha_one(self):
        avg = {"w": np.array([5.0])}
        polyak_update(avg, {"w": np.array([2.0])}, 1.0)
        assert avg["w"][0] == 5.0

    def test_two_updates(self):
        avg = {"w": np.array(0.0)}
        polyak_update(avg, {"w": np.array(1.0)}, 0.999)
        polyak_update(avg, {"w": np.array(2.0)}, 0.999)
        assert abs(float(avg["w"]) - 0.002999) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            polyak_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)


class TestClip:
    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(grads, 1.0) == 5.0
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3])}
        clip_by_global_norm(grads, 5.0)
        assert grads["a"][0] == 0.3


def toy_images(n=40, d=9, seed=11):
    rng = np.random.default_rng(seed)
    return rng.random((n, d))


class TestTrain:
    def test_zero_epochs(self):
        model = toy_model()
        result = train(model, toy_images(), TrainConfig(epochs=0))
        assert result.history == []
        for k, v in model.params.items():
            np.testing.assert_array_equal(result.model.params[k], v)
            np.testing.assert_array_equal(result.polyak_model.params[k], v)

    def test_input_model_not_modified(self):
        model = toy_model()
        before = {k: v.copy() for k, v in model.params.items()}
        train(model, toy_images(), TrainConfig(epochs=1, batch_size=10))
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k], v)

    def test_step_count_and_history(self):
        result = train(toy_model(), toy_images(n=45), TrainConfig(epochs=3, batch_size=10, eta=1.0, gamma=0.5))
        assert len(result.step_losses) == 3 * 5
        assert [r.epoch for r in result.history] == [0, 1, 2]

    def test_single_datum_overfits(self):
        x = (np.random.default_rng(1).random((1, 9)) < 0.5).astype(float)
        cfg = TrainConfig(epochs=50, batch_size=1, learning_rate=0.01, dynamic_binarization=False)
        result = train(toy_model(), x, cfg)
        losses = [s["total"] for s in result.step_losses]
        assert len(losses) == 50
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])

    def test_plain_vae_total_is_elbo(self):
        result = train(toy_model(), toy_images(), TrainConfig(epochs=2, batch_size=10))
        assert all(s["total"] == s["elbo"] for s in result.step_losses)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, batch_size=8, eta=1.0, gamma=0.5, seed=3)
        a = train(toy_model(), toy_images(), cfg)
        b = train(toy_model(), toy_images(), cfg)
        assert a.step_losses == b.step_losses
        assert a.history == b.history
        for k in a.model.params:
            assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
            assert a.polyak_model.params[k].tobytes() == b.polyak_model.params[k].tobytes()

    def test_polyak_tracks_recurrence(self):
        # with a single parameter snapshot per step the average is the exact EMA of the iterates
        model = toy_model()
        cfg = TrainConfig(epochs=1, batch_size=10, polyak_alpha=0.9)
        result = train(model, toy_images(n=10), cfg)
        expected = 0.9 * model.params["dec.bout"] + 0.1 * result.model.params["dec.bout"]
        np.testing.assert_allclose(result.polyak_model.params["dec.bout"], expected, rtol=0, atol=1e-15)

    def test_divergence_names_component(self):
        model = toy_model()
        model.params["enc.Wout"][:] = 1e200
        with pytest.raises(TrainingDiverged) as info:
            train(model, toy_images(), TrainConfig(epochs=1, batch_size=10))
        assert info.value.step == 0
        assert "non-finite" in str(info.value)

    def test_pair_losses_need_pairs(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(eta=1.0, batch_size=1)

    def test_rejects_bad_rates(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(polyak_alpha=1.5)
