import numpy as np
import pytest
from scipy import integrate

from mpdvae import autodiff as ad
from mpdvae.distributions import standard_normal_log_density
from mpdvae.models import ModelConfig, VaeModel, made_mask

from helpers import model_grad_error, toy_model


def randomize(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        model.params[k] = rng.normal(scale=scale, size=v.shape)
    return model


class TestMadeMask:
    @pytest.mark.parametrize("hidden", [(5,), (16, 16), (3, 7, 2)])
    def test_connectivity_is_strictly_autoregressive(self, hidden):
        rng = np.random.default_rng(len(hidden))
        order = rng.permutation(6)
        mask = made_mask(6, hidden, order)
        conn = mask.connectivity()
        rank = np.empty(6, dtype=int)
        rank[order] = np.arange(6)
        for i in range(6):
            for j in range(6):
                if rank[j] >= rank[i]:
                    assert conn[i, j] == 0
        direct = mask.direct.T
        assert np.all(direct[rank[:, None] <= rank[None, :]] == 0)

    def test_every_earlier_input_reaches_each_output(self):
        conn = made_mask(5, (10,)).connectivity()
        assert np.all(conn[np.tril_indices(5, -1)] > 0)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError, match="permutation"):
            made_mask(3, (4,), [0, 0, 1])


class TestEncoder:
    def test_zero_network(self):
        model = toy_model()
        for k in model.params:
            if k.startswith("enc."):
                model.params[k][:] = 0.0
        q = model.encode(np.random.default_rng(0).random((5, 9)) < 0.5)
        np.testing.assert_array_equal(q.mean.data, 0.0)
        np.testing.assert_array_equal(q.log_var.data, 0.0)

    def test_distinct_inputs_give_distinct_posteriors(self):
        model = randomize(toy_model())
        q = model.encode(np.array([[1.0] * 9, [0.0] * 9]))
        assert not np.allclose(q.mean.data[0], q.mean.data[1])

    def test_log_var_clamped(self):
        model = toy_model()
        model.params["enc.bout"][4:] = 50.0
        assert np.all(model.encode(np.ones(9)).log_var.data == 7.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="pixels"):
            toy_model().encode(np.ones(8))

    def test_gradient(self):
        model = randomize(toy_model(), scale=0.3)
        x = (np.random.default_rng(1).random((3, 9)) < 0.5).astype(float)
        assert model_grad_error(model, lambda p: model.encode(x, p).mean.sum() + model.encode(x, p).log_var.mean()) <= 1e-4


class TestFactorizedDecoder:
    def test_zero_weights_give_bias(self):
        model = toy_model("factorized")
        for k in model.params:
            if k.startswith("dec.") and k != "dec.bout":
                model.params[k][:] = 0.0
        model.params["dec.bout"] = np.arange(9.0)
        np.testing.assert_array_equal(model.decode(np.ones((2, 4))).data, np.tile(np.arange(9.0), (2, 1)))

    def test_ignores_pixels(self):
        model = randomize(toy_model("factorized"))
        z = np.random.default_rng(0).normal(size=(2, 4))
        a = model.decode(z, np.zeros((2, 9))).data
        b = model.decode(z, np.ones((2, 9))).data
        np.testing.assert_array_equal(a, b)

    def test_gradient(self):
        model = randomize(toy_model("factorized"), scale=0.3)
        z = np.random.default_rng(2).normal(size=(3, 4))
        assert model_grad_error(model, lambda p: ad.tanh(model.decode(z, params=p)).sum()) <= 1e-4


class TestAutoregressiveDecoder:
    def test_perturbation_only_moves_later_logits(self):
        model = randomize(toy_model())
        rng = np.random.default_rng(3)
        z = rng.normal(size=4)
        x = (rng.random(9) < 0.5).astype(float)
        base = model.decode(z, x).data
        for j in range(9):
            x2 = x.copy()
            x2[j] = 1.0 - x2[j]
            diff = model.decode(z, x2).data - base
            assert np.all(diff[: j + 1] == 0.0)
            assert np.any(diff[j + 1:] != 0.0) or j == 8

    def test_hand_sized_network(self):
        cfg = ModelConfig(3, 2, encoder_hidden=(4,), decoder_hidden=(4,))
        model = randomize(VaeModel.create(cfg))
        p = model.params
        # input degrees 1,2,3; hidden degrees 1,2,1,2
        m_hidden = np.array([[1, 1, 1, 1], [0, 1, 0, 1], [0, 0, 0, 0]], dtype=float)
        m_out = np.array([[0, 1, 1], [0, 0, 1], [0, 1, 1], [0, 0, 1]], dtype=float)
        m_direct = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=float)
        z = np.array([0.3, -0.7])
        x = np.array([1.0, 0.0, 1.0])
        h = np.tanh(x @ (p["dec.W0"] * m_hidden) + p["dec.b0"] + z @ p["dec.V0"])
        expected = h @ (p["dec.Wout"] * m_out) + p["dec.bout"] + x @ (p["dec.Wdirect"] * m_direct)
        np.testing.assert_allclose(model.decode(z, x).data, expected, rtol=0, atol=1e-14)

    def test_zero_injection_ignores_z(self):
        model = randomize(toy_model())
        for k in model.params:
            if k.startswith("dec.V"):
                model.params[k][:] = 0.0
        x = np.ones(9)
        a = model.decode(np.zeros(4), x).data
        b = model.decode(np.full(4, 3.0), x).data
        np.testing.assert_array_equal(a, b)

    def test_fresh_model_ignores_z(self):
        model = toy_model()
        x = np.ones(9)
        np.testing.assert_array_equal(model.decode(np.zeros(4), x).data, model.decode(np.ones(4), x).data)

    def test_needs_pixels(self):
        with pytest.raises(ValueError, match="conditioning"):
            toy_model().decode(np.zeros(4))

    def test_gradient(self):
        model = randomize(toy_model(), scale=0.3)
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 4))
        x = (rng.random((3, 9)) < 0.5).astype(float)
        assert model_grad_error(model, lambda p: ad.tanh(model.decode(z, x, p)).sum()) <= 1e-4


class TestSampling:
    def test_saturated_logits(self):
        model = toy_model()
        for k in model.params:
            if k.startswith("dec."):
                model.params[k][:] = 0.0
        model.params["dec.bout"][:] = 20.0
        out = model.sample_autoregressive(np.zeros((3, 4)), np.random.default_rng(0))
        np.testing.assert_array_equal(out, 1.0)

    def test_reproducible(self):
        model = randomize(toy_model())
        z = np.random.default_rng(1).normal(size=(4, 4))
        a = model.sample_autoregressive(z, np.random.default_rng(7))
        b = model.sample_autoregressive(z, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_first_pixel_marginal(self):
        model = randomize(toy_model())
        z = np.tile(np.array([0.2, -0.1, 0.4, 0.0]), (10_000, 1))
        samples = model.sample_autoregressive(z, np.random.default_rng(2))
        p0 = 1 / (1 + np.exp(-model.decode(z[0], np.zeros(9)).data[0]))
        se = np.sqrt(p0 * (1 - p0) / len(z))
        assert abs(samples[:, 0].mean() - p0) < 4 * se


class TestPrior:
    def test_standard_at_origin(self):
        assert float(standard_normal_log_density(np.zeros(2))) == pytest.approx(-1.837877, abs=1e-6)

    def test_identity_flow(self):
        model = randomize(toy_model(prior_kind="flow"))
        for k in model.params:
            if k.startswith("flow") and ("Wout" in k or "bout" in k):
                model.params[k][:] = 0.0
        z = np.random.default_rng(5).normal(size=(50, 4))
        diff = model.prior_log_density(z).data - standard_normal_log_density(z).data
        assert np.max(np.abs(diff)) <= 1e-12

    def test_fresh_flow_is_near_identity(self):
        model = toy_model(prior_kind="flow")
        z = np.random.default_rng(6).normal(size=(20, 4))
        diff = model.prior_log_density(z).data - standard_normal_log_density(z).data
        assert np.max(np.abs(diff)) < 0.5

    def test_single_flow_density_integrates_to_one(self):
        cfg = ModelConfig(4, 1, encoder_hidden=(4,), decoder_hidden=(4,), prior_kind="flow",
                          n_flows=1, flow_hidden=(8,))
        model = randomize(VaeModel.create(cfg), seed=3)
        grid = np.linspace(-60, 60, 400_001)
        dens = np.exp(model.prior_log_density(grid[:, None]).data)
        assert integrate.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-5)

    def test_two_flow_density_integrates_to_one(self):
        cfg = ModelConfig(4, 2, encoder_hidden=(4,), decoder_hidden=(4,), prior_kind="flow",
                          n_flows=2, flow_hidden=(8,))
        model = randomize(VaeModel.create(cfg), seed=4, scale=0.3)
        g = np.linspace(-12, 12, 801)
        zz = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        dens = np.exp(model.prior_log_density(zz).data).reshape(len(g), len(g))
        total = integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_sample_prior_inverts_density_transform(self):
        model = randomize(toy_model(prior_kind="flow"), seed=5, scale=0.3)
        z = model.sample_prior(5, np.random.default_rng(0))
        # re-running the forward transform recovers the base noise
        e = z
        for f in range(2):
            shift, log_scale = model._flow_step(f, e, model.params)
            e = ((e - shift) * ad.exp(-log_scale)).data
        np.testing.assert_allclose(e, np.random.default_rng(0).standard_normal((5, 4)), atol=1e-10)

    def test_flow_gradient(self):
        model = randomize(toy_model(prior_kind="flow"), scale=0.3)
        z = np.random.default_rng(8).normal(size=(3, 4))
        assert model_grad_error(model, lambda p: model.prior_log_density(z, p).sum()) <= 1e-4


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = randomize(toy_model(prior_kind="flow"))
        model.save(tmp_path / "m.npz")
        back = VaeModel.load(tmp_path / "m.npz")
        assert back.config == model.config
        assert set(back.params) == set(model.params)
        for k, v in model.params.items():
            assert back.params[k].tobytes() == v.tobytes()

    def test_missing_parameter(self, tmp_path):
        model = toy_model()
        del model.params["dec.Wout"]
        model.save(tmp_path / "m.npz")
        with pytest.raises(ValueError, match="dec.Wout"):
            VaeModel.load(tmp_path / "m.npz")


class TestConfig:
    def test_unknown_decoder(self):
        with pytest.raises(ValueError, match="decoder_kind"):
            ModelConfig(9, decoder_kind="pixelcnn")

    def test_parameter_shapes(self):
        p = toy_model().params
        assert p["enc.W0"].shape == (9, 16)
        assert p["enc.Wout"].shape == (16, 8)
        assert p["dec.V0"].shape == (4, 16)
        assert p["dec.Wdirect"].shape == (9, 9)
