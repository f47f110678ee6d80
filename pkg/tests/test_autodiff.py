import numpy as np
import pytest

from rosettavae import autodiff as ad
from rosettavae import vae

from oracles import check_gradients, mlp_forward, scalar_adam


def loss_from_arrays(build):
    """Adapter: dict-of-arrays -> float, for finite-difference oracles."""

    def f(arrays):
        return build(ad.ParamSet(arrays)).value

    return f


class TestForwardMlp:
    def test_identity_layer_passes_through(self):
        spec = ad.MlpSpec(3, ((3, "identity"),), prefix="m.")
        params = ad.ParamSet({"m.W0": np.eye(3), "m.b0": np.zeros(3)})
        run = ad.forward_mlp(params, spec, np.array([1.0, -2.0, 0.5]))
        assert np.allclose(run.output, [1.0, -2.0, 0.5], atol=1e-15)

    def test_relu_hand_case(self):
        spec = ad.MlpSpec(2, ((1, "relu"),), prefix="m.")
        params = ad.ParamSet({"m.W0": np.array([[1.0, 1.0]]), "m.b0": np.zeros(1)})
        run = ad.forward_mlp(params, spec, np.array([-1.0, 2.0]))
        assert np.allclose(run.output, [1.0], atol=1e-15)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(13)
        spec = ad.MlpSpec(5, ((8, "tanh"), (3, "tanh")), prefix="m.")
        params = ad.ParamSet(ad.init_mlp_params(spec, rng))
        x = np.random.default_rng(14).standard_normal(5)
        run = ad.forward_mlp(params, spec, x)
        oracle = mlp_forward(
            [params["m.W0"], params["m.W1"]],
            [params["m.b0"], params["m.b1"]],
            ["tanh", "tanh"],
            x,
        )
        assert np.abs(run.output - oracle).max() < 1e-12

    def test_shape_mismatch_raises(self):
        spec = ad.MlpSpec(3, ((2, "relu"),), prefix="m.")
        params = ad.ParamSet({"m.W0": np.ones((2, 3)), "m.b0": np.zeros(2)})
        with pytest.raises(ValueError):
            ad.forward_mlp(params, spec, np.ones(4))


class TestBackward:
    def test_quadratic_hand_case(self):
        # loss = ||W x||^2 with W = I2, x = (1, 2): dW = 2 (W x) x^T.
        params = ad.ParamSet({"W": np.eye(2), "b": np.zeros(2)})
        x = np.array([[1.0, 2.0]])

        def build(p):
            leaves = ad.make_leaves(p)
            pred = ad.affine(ad.leaf(x), leaves["W"], leaves["b"])
            return ad.LossGraph(ad.sum_all(ad.sq_dist(pred, np.zeros((1, 2)))), leaves)

        graph = build(params)
        grads = ad.backward(graph, params)
        assert np.allclose(grads["W"], [[2.0, 4.0], [4.0, 8.0]], atol=1e-12)

    def test_unused_parameter_gets_zero_gradient(self):
        params = ad.ParamSet({"used": np.ones(2), "unused": np.ones(3)})
        leaves = ad.make_leaves(params)
        root = ad.sum_all(leaves["used"])
        grads = ad.backward(ad.LossGraph(root, leaves), params)
        assert np.array_equal(grads["unused"], np.zeros(3))
        assert np.allclose(grads["used"], np.ones(2))

    def test_non_scalar_root_rejected(self):
        params = ad.ParamSet({"w": np.ones(2)})
        leaves = ad.make_leaves(params)
        with pytest.raises(ValueError):
            ad.backward(ad.LossGraph(leaves["w"], leaves), params)

    def test_nan_detection_names_node(self):
        with pytest.raises(ad.NonFiniteGraphError) as err:
            ad.Tensor(np.array([np.nan]), kind="affine")
        assert "affine" in str(err.value)


class TestGradientChecks:
    """Finite-difference verification for every loss-term class."""

    def _model(self, seed=21):
        arch = vae.ArchSpec(input_dim=4, latent_dim=2, hidden=(6,))
        return vae.init_model(arch, seed=seed)

    def test_reconstruction_term(self):
        model = self._model()
        rng = np.random.default_rng(100)
        batch = rng.standard_normal((3, 4))
        noise = rng.standard_normal((3, 2))

        def build(p):
            m = vae.ModelState(model.arch, p, model.provenance)
            return vae.elbo_loss(m, batch, beta=0.0, noise=noise)

        graph = build(model.params)
        grads = ad.backward(graph, model.params)
        check_gradients(
            loss_from_arrays(build), model.params.as_dict(), grads, rng, n_coords=100
        )

    def test_kl_full_cholesky_term(self):
        model = self._model(seed=22)
        rng = np.random.default_rng(101)
        batch = rng.standard_normal((3, 4))

        def build(p):
            leaves = ad.make_leaves(p)
            mean, d_raw, l_flat = vae._posterior_tensors(
                model.arch, leaves, ad.leaf(batch)
            )
            return ad.LossGraph(ad.mean_all(ad.gaussian_kl(mean, d_raw, l_flat)), leaves)

        graph = build(model.params)
        grads = ad.backward(graph, model.params)
        check_gradients(
            loss_from_arrays(build), model.params.as_dict(), grads, rng, n_coords=100
        )

    def test_anchor_penalty_term(self):
        model = self._model(seed=23)
        rng = np.random.default_rng(102)
        anchors = vae.RosettaSet(
            inputs=rng.standard_normal((3, 4)), latents=rng.standard_normal((3, 2))
        )

        def build(p):
            leaves = ad.make_leaves(p)
            mean_r, _, _ = vae._posterior_tensors(
                model.arch, leaves, ad.leaf(anchors.inputs)
            )
            xhat_r = ad.mlp_chain(
                leaves, model.arch.decoder_spec(), ad.leaf(anchors.latents)
            )
            pen = ad.add(
                ad.sum_all(ad.sq_dist(xhat_r, anchors.inputs)),
                ad.sum_all(ad.sq_dist(mean_r, anchors.latents)),
            )
            return ad.LossGraph(pen, leaves)

        graph = build(model.params)
        grads = ad.backward(graph, model.params)
        check_gradients(
            loss_from_arrays(build), model.params.as_dict(), grads, rng, n_coords=100
        )

    def test_full_composite_loss(self):
        model = self._model(seed=24)
        rng = np.random.default_rng(103)
        batch = rng.standard_normal((3, 4))
        noise = rng.standard_normal((3, 2))
        anchors = vae.RosettaSet(
            inputs=rng.standard_normal((2, 4)), latents=rng.standard_normal((2, 2))
        )
        config = vae.TrainConfig(beta=1.7, rho=2.5, batch_size=3, rosetta_weighting=True)

        def build(p):
            m = vae.ModelState(model.arch, p, model.provenance)
            return vae.rosetta_loss(m, batch, anchors, config, noise)

        graph = build(model.params)
        grads = ad.backward(graph, model.params)
        check_gradients(
            loss_from_arrays(build), model.params.as_dict(), grads, rng, n_coords=100
        )


class TestAdam:
    def _params(self):
        return ad.ParamSet({"w": np.array([1.0, -2.0, 3.0])})

    def test_zero_gradient_keeps_parameters(self):
        params = self._params()
        state = ad.AdamState.init(params, learning_rate=1e-3)
        grads = ad.GradSet({"w": np.zeros(3)})
        new_params, new_state = ad.adam_step(params, grads, state)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.step == 1

    def test_first_step_closed_form(self):
        params = self._params()
        state = ad.AdamState.init(params, learning_rate=1e-3)
        g = np.array([0.5, -3.0, 1e-4])
        new_params, _ = ad.adam_step(params, grads=ad.GradSet({"w": g}), state=state)
        expected = params["w"] - 1e-3 * g / (np.sqrt(g * g) + 1e-8)
        assert np.abs(new_params["w"] - expected).max() < 1e-12

    def test_two_steps_match_scalar_oracle(self):
        params = ad.ParamSet({"w": np.array([0.3, -1.2])})
        state = ad.AdamState.init(params, learning_rate=1e-3)
        g = np.array([0.7, -0.2])
        p, s = ad.adam_step(params, ad.GradSet({"w": g}), state)
        p, s = ad.adam_step(p, ad.GradSet({"w": g}), s)
        for i in range(2):
            oracle = scalar_adam([g[i], g[i]], x0=params["w"][i])
            assert abs(p["w"][i] - oracle) < 1e-12

    def test_zero_learning_rate_is_identity(self):
        params = self._params()
        state = ad.AdamState.init(params, learning_rate=0.0)
        g = np.array([0.5, -3.0, 2.0])
        new_params, _ = ad.adam_step(params, ad.GradSet({"w": g}), state)
        assert np.array_equal(new_params["w"], params["w"])

    def test_shape_mismatch_raises(self):
        params = self._params()
        state = ad.AdamState.init(params)
        with pytest.raises(ValueError):
            ad.adam_step(params, ad.GradSet({"w": np.zeros(4)}), state)
        with pytest.raises(ValueError):
            ad.adam_step(params, ad.GradSet({"x": np.zeros(3)}), state)


class TestParamSet:
    def test_names_keep_insertion_order(self):
        params = ad.ParamSet({"b": np.zeros(1), "a": np.zeros(1)})
        assert params.names() == ("b", "a")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ad.ParamSet({"w": np.array([np.inf])})

    def test_copy_is_deep(self):
        params = ad.ParamSet({"w": np.zeros(2)})
        clone = params.copy()
        clone["w"][0] = 5.0
        assert params["w"][0] == 0.0
