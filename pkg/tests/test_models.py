"""Energy architectures: shapes, determinism, gradients, batching."""
import numpy as np
import pytest

from ebsolve import autodiff as ad
from ebsolve import models as em


def _spec(arch, **kw):
    if arch == "mlp":
        d = dict(arch="mlp", x_dim=6, y_dim=4, levels=5, width=8, depth=3)
    elif arch == "board":
        d = dict(arch="board", x_dim=16 * 5, y_dim=16 * 4, levels=5, width=8,
                 depth=2, extras={"order": 2})
    elif arch == "edge_relational":
        d = dict(arch="edge_relational", x_dim=25, y_dim=25, levels=5, width=8,
                 depth=2)
    else:
        d = dict(arch="plan_relational", x_dim=5 * 5 + 10, y_dim=4 * 5,
                 levels=5, width=8, depth=2, extras={"n_nodes": 5})
    d.update(kw)
    return em.ModelSpec(**d)


def _batch(arch, B, rng, n_override=None):
    spec = _spec(arch)
    if arch == "plan_relational" and n_override:
        n = n_override
        X = rng.uniform(0, 1, (B, n * n + 2 * n))
        Y = rng.standard_normal((B, 4 * n))
    elif arch == "edge_relational" and n_override:
        n = n_override
        X = rng.uniform(0, 1, (B, n * n))
        Y = rng.standard_normal((B, n * n))
    else:
        X = rng.uniform(0, 1, (B, spec.x_dim))
        Y = rng.standard_normal((B, spec.y_dim))
    ks = rng.integers(0, spec.levels + 1, size=B)
    return spec, X, Y, ks


class TestModelSpec:
    def test_rejects_unknown_arch(self):
        with pytest.raises(ValueError):
            em.ModelSpec(arch="conv", x_dim=4, y_dim=4, levels=3)

    def test_board_dimension_contract(self):
        with pytest.raises(ValueError):
            em.ModelSpec(arch="board", x_dim=10, y_dim=64, levels=3,
                         extras={"order": 2})
        with pytest.raises(ValueError):
            em.ModelSpec(arch="board", x_dim=80, y_dim=64, levels=3, extras={})

    def test_edge_requires_square(self):
        with pytest.raises(ValueError):
            em.ModelSpec(arch="edge_relational", x_dim=10, y_dim=10, levels=3)

    def test_roundtrip_dict(self):
        spec = _spec("board")
        assert em.ModelSpec.from_dict(spec.to_dict()) == spec

    def test_positive_integers(self):
        with pytest.raises(ValueError):
            em.ModelSpec(arch="mlp", x_dim=4, y_dim=4, levels=0)


class TestInit:
    def test_mlp_param_count_matches_formula(self):
        spec = _spec("mlp", x_dim=3, y_dim=2, width=4, depth=3, levels=5)
        model = em.build_model(spec, seed=0)
        # By hand: 5*4+4 first layer, 6*4 embedding, 2*(16+4) hidden, 4+1 head.
        assert em.mlp_param_count(3, 2, 4, 3, 5) == 93
        assert model.n_params() == 93

    def test_deterministic_init(self):
        spec = _spec("mlp")
        a = em.build_model(spec, seed=11).param_arrays()
        b = em.build_model(spec, seed=11).param_arrays()
        c = em.build_model(spec, seed=12).param_arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_uniform_fanin_bound(self):
        spec = _spec("mlp", width=16)
        model = em.build_model(spec, seed=3)
        w1 = model.params["w1"].data
        assert np.max(np.abs(w1)) <= 1.0 / 4.0  # fan_in 16

    def test_load_arrays_validates(self):
        model = em.build_model(_spec("mlp"), seed=0)
        arrays = model.param_arrays()
        bad = dict(arrays)
        bad.pop("w0")
        with pytest.raises(ValueError):
            model.load_arrays(bad)
        bad = dict(arrays)
        bad["w0"] = np.zeros((1, 1))
        with pytest.raises(ValueError):
            model.load_arrays(bad)


class TestForwardAll:
    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_batch_shape_and_finiteness(self, arch):
        rng = np.random.default_rng(0)
        spec, X, Y, ks = _batch(arch, 6, rng)
        model = em.build_model(spec, seed=1)
        e = model.energy_batch(X, ad.tensor(Y), ks)
        assert e.shape == (6,)
        assert np.all(np.isfinite(e.data))

    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_batch_matches_single(self, arch):
        rng = np.random.default_rng(1)
        spec, X, Y, ks = _batch(arch, 5, rng)
        model = em.build_model(spec, seed=2)
        batched = model.energy_batch(X, ad.tensor(Y), ks).data
        singles = [em.energy(model, X[i], Y[i], int(ks[i])).item()
                   for i in range(5)]
        np.testing.assert_allclose(batched, singles, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_level_conditioning_changes_energy(self, arch):
        rng = np.random.default_rng(2)
        spec, X, Y, ks = _batch(arch, 1, rng)
        model = em.build_model(spec, seed=3)
        e = [em.energy(model, X[0], Y[0], k).item() for k in range(spec.levels + 1)]
        assert len(set(np.round(e, 12))) > 1

    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_gradient_y_shape_and_nonzero(self, arch):
        rng = np.random.default_rng(3)
        spec, X, Y, ks = _batch(arch, 1, rng)
        model = em.build_model(spec, seed=4)
        g = em.gradient_y(model, X[0], Y[0], 2)
        assert g.shape == Y[0].shape
        assert np.any(g.data != 0.0)

    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_gradient_y_matches_finite_differences(self, arch):
        rng = np.random.default_rng(4)
        spec, X, Y, ks = _batch(arch, 1, rng)
        model = em.build_model(spec, seed=5)
        g = em.gradient_y(model, X[0], Y[0], 1).data
        h = 1e-6
        fd = np.zeros_like(Y[0])
        for j in range(Y[0].size):
            up, dn = Y[0].copy(), Y[0].copy()
            up[j] += h
            dn[j] -= h
            fd[j] = (em.energy(model, X[0], up, 1).item()
                     - em.energy(model, X[0], dn, 1).item()) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(g - fd) / denom) < 1e-4

    @pytest.mark.parametrize("arch", em.ARCHITECTURES)
    def test_second_order_param_grad_exists(self, arch):
        rng = np.random.default_rng(5)
        spec, X, Y, ks = _batch(arch, 2, rng)
        model = em.build_model(spec, seed=6)
        yt = ad.tensor(Y)
        e = model.energy_batch(X, yt, ks)
        (gy,) = ad.grad(ad.tsum(e), [yt])
        loss = ad.sq_l2(gy)
        names = list(model.params)
        grads = ad.grad(loss, [model.params[n] for n in names])
        assert all(np.all(np.isfinite(g.data)) for g in grads)
        assert any(np.any(g.data != 0.0) for g in grads)

    def test_mlp_rejects_bad_shapes(self):
        model = em.build_model(_spec("mlp"), seed=0)
        with pytest.raises(ValueError):
            model.energy_batch(np.zeros((2, 5)), ad.tensor(np.zeros((2, 4))),
                               np.zeros(2, dtype=int))
        with pytest.raises(ValueError):
            model.energy_batch(np.zeros((2, 6)), ad.tensor(np.zeros((2, 4))),
                               np.array([1, 99]))


class TestHeadConventions:
    def test_mlp_gradient_scales_with_output_head(self):
        # The final layer is linear, so doubling its parameters doubles
        # gradient_y bit-exactly.
        rng = np.random.default_rng(6)
        spec, X, Y, ks = _batch("mlp", 1, rng)
        model = em.build_model(spec, seed=7)
        g1 = em.gradient_y(model, X[0], Y[0], 1).data
        arrays = model.param_arrays()
        arrays = {k: (2.0 * v if k in ("w_out", "b_out") else v)
                  for k, v in arrays.items()}
        model.load_arrays(arrays)
        g2 = em.gradient_y(model, X[0], Y[0], 1).data
        np.testing.assert_array_equal(g2, 2.0 * g1)

    def test_board_energy_is_half_squared_norm(self):
        # Zeroing the head weights leaves only the bias outputs o = b_out,
        # so E must equal 0.5 * cells * ||b_out||^2 exactly.
        spec = _spec("board")
        model = em.build_model(spec, seed=8)
        arrays = model.param_arrays()
        arrays["w_out"] = np.zeros_like(arrays["w_out"])
        model.load_arrays(arrays)
        rng = np.random.default_rng(7)
        X = rng.uniform(0, 1, (1, spec.x_dim))
        Y = rng.standard_normal((1, spec.y_dim))
        e = em.energy(model, X[0], Y[0], 1).item()
        b = model.params["b_out"].data
        np.testing.assert_allclose(e, 0.5 * 16 * np.sum(b * b), rtol=1e-12)

    def test_board_pool_matrices_are_stochastic(self):
        for P in em._board_pool_matrices(2):
            np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=1e-15)

    @pytest.mark.parametrize("arch", ["edge_relational", "plan_relational"])
    def test_relational_models_are_size_agnostic(self, arch):
        rng = np.random.default_rng(8)
        spec, _, _, _ = _batch(arch, 1, rng)
        model = em.build_model(spec, seed=9)
        _, X, Y, ks = _batch(arch, 3, rng, n_override=7)
        e = model.energy_batch(X, ad.tensor(Y), ks)
        assert e.shape == (3,)
        assert np.all(np.isfinite(e.data))
