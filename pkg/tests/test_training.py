"""Training: Adam oracle, loss semantics, negatives, determinism."""
import warnings

import numpy as np
import pytest

from ebsolve import autodiff as ad
from ebsolve import models as em
from ebsolve import training as tr
from ebsolve.schedule import make_cosine_schedule
from ebsolve.util import substream

# Frozen oracle: Adam on a scalar with constant gradient 0.5, lr 0.1
# (30-digit arbitrary-precision evaluation of the bias-corrected update).
ADAM_STEP1 = 0.90000000199999996
ADAM_STEP2 = 0.80000000399999992


class QuadraticModel(em.EnergyModel):
    """E = 0.5 * ||y - c||^2 per instance; independent of x and k."""

    def __init__(self, c, levels=10):
        spec = em.ModelSpec(arch="mlp", x_dim=1, y_dim=len(c), levels=levels,
                            width=1, depth=1)
        super().__init__(spec, {"c": ad.tensor(np.asarray(c, dtype=np.float64))})

    def energy_batch(self, X, Y, ks):
        B = Y.shape[0]
        d = ad.sub(Y, ad.expand(self.params["c"], 0, B))
        return ad.scale(ad.sum_axis(ad.mul(d, d), 1), 0.5)


def _tiny_mlp(levels=4, x_dim=3, y_dim=2, seed=0):
    spec = em.ModelSpec(arch="mlp", x_dim=x_dim, y_dim=y_dim, levels=levels,
                        width=6, depth=2)
    return em.build_model(spec, seed=seed)


class TestAdam:
    def test_single_parameter_tabulated_updates(self):
        model = QuadraticModel([0.0])
        model.params = {"p": ad.tensor(np.array([1.0]))}
        state = tr.AdamState.init(model)
        tr.adam_step(model, {"p": np.array([0.5])}, state, lr=0.1)
        np.testing.assert_allclose(model.params["p"].data, [ADAM_STEP1],
                                   rtol=1e-15)
        tr.adam_step(model, {"p": np.array([0.5])}, state, lr=0.1)
        np.testing.assert_allclose(model.params["p"].data, [ADAM_STEP2],
                                   rtol=1e-15)
        assert state.t == 2

    def test_moments_shape_follow_params(self):
        model = _tiny_mlp()
        state = tr.AdamState.init(model)
        assert set(state.m) == set(model.params)
        assert all(state.m[k].shape == model.params[k].shape for k in state.m)


class TestDenoisingLoss:
    def test_quadratic_model_closed_form(self):
        # For E = 0.5||y||^2 the gradient is y itself, so the loss is
        # mean ||corrupt(y*, k, eps) - eps||^2, computable in closed form.
        sched = make_cosine_schedule(10)
        rng = np.random.default_rng(0)
        model = QuadraticModel([0.0, 0.0, 0.0])
        Y = rng.standard_normal((4, 3))
        X = np.zeros((4, 1))
        ks = np.array([2, 5, 7, 10])
        eps = rng.standard_normal((4, 3))
        loss = tr.denoising_loss(model, X, Y, ks, eps, sched).item()
        noisy = tr.corrupt_batch(sched, Y, ks, eps)
        expected = np.mean(np.sum((noisy - eps) ** 2, axis=1))
        np.testing.assert_allclose(loss, expected, rtol=1e-12)

    def test_pure_noise_level_has_zero_loss_for_identity_model(self):
        # At k = K the corruption IS eps, so gradient_y == eps exactly.
        sched = make_cosine_schedule(6)
        model = QuadraticModel([0.0, 0.0], levels=6)
        Y = np.ones((3, 2))
        eps = np.random.default_rng(1).standard_normal((3, 2))
        loss = tr.denoising_loss(model, np.zeros((3, 1)), Y,
                                 np.array([6, 6, 6]), eps, sched).item()
        assert loss < 1e-24

    def test_corrupt_batch_matches_schedule(self):
        sched = make_cosine_schedule(8)
        rng = np.random.default_rng(2)
        Y = rng.standard_normal((5, 4))
        eps = rng.standard_normal((5, 4))
        ks = np.array([1, 3, 5, 7, 8])
        out = tr.corrupt_batch(sched, Y, ks, eps)
        for i, k in enumerate(ks):
            np.testing.assert_allclose(out[i], sched.corrupt(Y[i], int(k), eps[i]),
                                       rtol=1e-15)


class TestNegatives:
    def test_continuous_negative_quadratic_descent(self):
        # With E = 0.5||y - c||^2 each acceptance-free step contracts the
        # negative toward c by (1 - lambda_k).
        sched = make_cosine_schedule(10)
        c = np.array([1.0, -2.0])
        model = QuadraticModel(c)
        cfg = tr.TrainConfig(iterations=1, batch_size=1, lambda0=0.5,
                             negative_noise=0.3, negative_steps=2)
        Y = np.array([[0.5, 0.5]])
        ks = np.array([4])
        rng = substream(9, "neg")
        y_neg = tr.make_negative(model, np.zeros((1, 1)), Y, ks, sched, cfg, rng)
        zeta = substream(9, "neg").standard_normal((1, 2)) * 0.3
        lam = 0.5 * sched.sigma[4] ** 2
        expect = Y + zeta
        for _ in range(2):
            expect = expect - lam * (expect - c)
        np.testing.assert_allclose(y_neg, expect, rtol=1e-12)

    def test_onehot_negative_replaces_exact_fraction(self):
        cfg = tr.TrainConfig(negative=tr.NegativeSpec("onehot", group_size=4),
                             resample_frac=0.5)
        rng = np.random.default_rng(3)
        Y = np.zeros((2, 16))
        Y[:, [0, 4, 8, 12]] = 1.0  # 4 one-hot groups per instance
        sched = make_cosine_schedule(4)
        model = QuadraticModel(np.zeros(16), levels=4)
        y_neg = tr.make_negative(model, np.zeros((2, 1)), Y,
                                 np.array([1, 2]), sched, cfg, rng)
        for b in range(2):
            g0 = Y[b].reshape(4, 4)
            g1 = y_neg[b].reshape(4, 4)
            assert np.all(g1.sum(axis=1) == 1.0)      # still one-hot
            assert np.all((g1 == 0) | (g1 == 1))
            changed = np.sum(np.any(g0 != g1, axis=1))
            assert changed == 2                        # exactly round(0.5 * 4)

    def test_binary_negative_flips_exact_fraction(self):
        cfg = tr.TrainConfig(negative=tr.NegativeSpec("binary"),
                             resample_frac=0.25)
        rng = np.random.default_rng(4)
        Y = np.zeros((3, 16))
        sched = make_cosine_schedule(4)
        model = QuadraticModel(np.zeros(16), levels=4)
        y_neg = tr.make_negative(model, np.zeros((3, 1)), Y,
                                 np.array([1, 1, 1]), sched, cfg, rng)
        assert np.all(np.sum(y_neg != Y, axis=1) == 4)
        assert np.all((y_neg == 0) | (y_neg == 1))

    def test_negative_construction_is_detached(self):
        model = _tiny_mlp()
        sched = make_cosine_schedule(4)
        cfg = tr.TrainConfig()
        rng = np.random.default_rng(5)
        y_neg = tr.make_negative(model, np.zeros((2, 3)),
                                 np.zeros((2, 2)), np.array([1, 2]),
                                 sched, cfg, rng)
        assert isinstance(y_neg, np.ndarray)


class TestContrastive:
    def test_shared_corruption_cancels_noise_for_linear_energy(self):
        # With E = sum(y), E+ - E- = sqrt(ab[k]) * sum(y* - y-): the shared
        # eps drops out exactly. A fresh eps per term would leave residue.
        class LinearModel(em.EnergyModel):
            def __init__(self):
                spec = em.ModelSpec(arch="mlp", x_dim=1, y_dim=3, levels=5,
                                    width=1, depth=1)
                super().__init__(spec, {})

            def energy_batch(self, X, Y, ks):
                return ad.sum_axis(Y, 1)

        sched = make_cosine_schedule(5)
        rng = np.random.default_rng(6)
        Y = rng.standard_normal((4, 3))
        y_neg = rng.standard_normal((4, 3))
        ks = np.array([1, 2, 3, 4])
        eps = rng.standard_normal((4, 3))
        loss = tr.contrastive_loss(LinearModel(), np.zeros((4, 1)), Y, y_neg,
                                   ks, eps, sched).item()
        gap = np.sqrt(sched.alpha_bar[ks]) * np.sum(Y - y_neg, axis=1)
        np.testing.assert_allclose(loss, np.mean(np.logaddexp(0.0, gap)),
                                   rtol=1e-12)

    def test_softplus_frozen_values(self):
        # softplus(0) = ln 2 at equal energies; the asymptotes pin the tails.
        x = ad.softplus(ad.tensor([0.0, -10.0, 2.0])).data
        np.testing.assert_allclose(x[0], 0.6931471805599453, rtol=1e-15)
        np.testing.assert_allclose(x[1], 4.5398899216864647e-05, rtol=1e-14)
        np.testing.assert_allclose(x[2], 2.1269280110429725, rtol=1e-15)


class TestTrainStep:
    def test_zero_weight_reduces_to_denoising(self):
        model = _tiny_mlp(seed=1)
        sched = make_cosine_schedule(4)
        cfg = tr.TrainConfig(iterations=1, batch_size=4, contrastive_weight=0.0)
        rng = np.random.default_rng(7)
        X = rng.standard_normal((4, 3))
        Y = rng.standard_normal((4, 2))
        state = tr.AdamState.init(model)
        total, mse, con = tr.train_step(model, X, Y, sched, cfg, state,
                                        substream(1, "s"))
        assert con == 0.0
        np.testing.assert_allclose(total, mse, rtol=1e-15)

    def test_loss_decreases_on_toy_problem(self):
        model = _tiny_mlp(seed=2)
        sched = make_cosine_schedule(4)
        rng = np.random.default_rng(8)
        X = rng.standard_normal((32, 3))
        Y = np.tanh(X[:, :2])
        cfg = tr.TrainConfig(iterations=300, batch_size=16, lr=3e-3, seed=5)
        history, _ = tr.train(model, X, Y, sched, cfg)
        first = np.mean([h[1] for h in history[:20]])
        last = np.mean([h[1] for h in history[-20:]])
        assert last < first

    def test_history_length_equals_iterations(self):
        model = _tiny_mlp(seed=3)
        sched = make_cosine_schedule(4)
        rng = np.random.default_rng(9)
        X = rng.standard_normal((8, 3))
        Y = rng.standard_normal((8, 2))
        cfg = tr.TrainConfig(iterations=17, batch_size=4, seed=2)
        history, _ = tr.train(model, X, Y, sched, cfg)
        assert [h[0] for h in history] == list(range(17))

    def test_zero_iterations_leaves_model_at_init(self):
        model = _tiny_mlp(seed=3)
        before = {k: v.copy() for k, v in model.param_arrays().items()}
        sched = make_cosine_schedule(4)
        rng = np.random.default_rng(9)
        X = rng.standard_normal((8, 3))
        Y = rng.standard_normal((8, 2))
        cfg = tr.TrainConfig(iterations=0, batch_size=4, seed=2)
        history, _ = tr.train(model, X, Y, sched, cfg)
        assert history == []
        for k, v in model.param_arrays().items():
            assert np.array_equal(v, before[k])

    def test_divergence_aborts_with_iteration(self):
        model = _tiny_mlp(seed=4)
        # Saturate the parameters so energies overflow to non-finite loss.
        model.load_arrays({k: np.full(v.shape, 1e155)
                           for k, v in model.param_arrays().items()})
        sched = make_cosine_schedule(4)
        rng = np.random.default_rng(10)
        X = rng.standard_normal((4, 3))
        Y = rng.standard_normal((4, 2))
        cfg = tr.TrainConfig(iterations=5, batch_size=4, seed=3)
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(tr.TrainingDiverged) as ei:
                tr.train(model, X, Y, sched, cfg)
        assert ei.value.iteration == 0

    def test_training_is_deterministic(self):
        def run():
            model = _tiny_mlp(seed=5)
            sched = make_cosine_schedule(4)
            rng = np.random.default_rng(11)
            X = rng.standard_normal((16, 3))
            Y = rng.standard_normal((16, 2))
            cfg = tr.TrainConfig(iterations=25, batch_size=8, seed=7)
            tr.train(model, X, Y, sched, cfg)
            return model.param_arrays()

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_resume_matches_uninterrupted_run(self):
        sched = make_cosine_schedule(4)
        rng = np.random.default_rng(12)
        X = rng.standard_normal((16, 3))
        Y = rng.standard_normal((16, 2))
        cfg = tr.TrainConfig(iterations=20, batch_size=8, seed=9)

        straight = _tiny_mlp(seed=6)
        tr.train(straight, X, Y, sched, cfg)

        resumed = _tiny_mlp(seed=6)
        cfg10 = tr.TrainConfig(iterations=10, batch_size=8, seed=9)
        _, state = tr.train(resumed, X, Y, sched, cfg10)
        tr.train(resumed, X, Y, sched, cfg, state=state, start_iteration=10)

        for k in straight.params:
            np.testing.assert_array_equal(straight.param_arrays()[k],
                                          resumed.param_arrays()[k])
