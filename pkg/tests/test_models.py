import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loglandscape.errors import DimensionError, InputError, UnsupportedError
from loglandscape.models import (Dataset, binary_teacher_generate, double_well, linreg_generate,
                                 linreg_model, mlp_model, nd_double_well, nd_quadratic_well)
from loglandscape.numerics import RngStream


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def reference_mlp_output(theta, widths, act, x):
    """Plain forward pass written independently of the package."""
    h, off = x, 0
    for layer, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        w = theta[off:off + fo * fi].reshape(fo, fi)
        b = theta[off + fo * fi:off + fo * fi + fo]
        off += fo * fi + fo
        h = h @ w.T + b
        if layer < len(widths) - 2:
            h = act(h)
    return h[:, 0]


class TestGenerators:
    def test_shape_and_replay(self):
        a = linreg_generate(1, 4, RngStream(3))
        b = linreg_generate(1, 4, RngStream(3))
        assert a.inputs.shape == (4, 1) and a.labels.shape == (4,)
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)

    def test_label_mean(self):
        ds = linreg_generate(1, 10**5, RngStream(4))
        assert abs(ds.labels.mean()) < 0.01

    def test_input_covariance(self):
        ds = linreg_generate(3, 10**4, RngStream(5))
        assert np.max(np.abs(np.cov(ds.inputs.T) - np.eye(3))) < 0.05

    def test_teacher_labels_are_signs(self):
        ds = binary_teacher_generate(5, 200, RngStream(1))
        assert set(np.unique(ds.labels)) <= {-1.0, 1.0}

    def test_bad_sizes(self):
        with pytest.raises(InputError):
            linreg_generate(0, 3, RngStream(1))

    def test_csv_roundtrip(self, tmp_path):
        ds = linreg_generate(2, 5, RngStream(6))
        ds.to_csv(tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x_0,x_1,y"
        back = Dataset.from_csv(tmp_path / "d.csv")
        assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)

    def test_nonfinite_rejected(self):
        with pytest.raises(InputError):
            Dataset(np.array([[np.inf]]), np.array([0.0]))


class TestLinearRegression:
    def test_single_sample(self):
        m = linreg_model(Dataset(np.array([[1.0]]), np.array([0.0])))
        assert m.per_sample_loss([1.0], 0) == pytest.approx(0.5)
        np.testing.assert_allclose(m.per_sample_grad([1.0], 0), [1.0])

    def test_two_samples(self):
        m = linreg_model(Dataset(np.array([[1.0], [1.0]]), np.array([0.0, 2.0])))
        assert m.full_loss([1.0]) == pytest.approx(0.5)
        np.testing.assert_allclose(m.full_grad([1.0]), [0.0], atol=1e-15)

    def test_hessian_hand(self):
        m = linreg_model(Dataset(np.array([[1.0], [3.0]]), np.array([0.0, 0.0])))
        np.testing.assert_allclose(m.hessian(), [[5.0]])

    def test_output_grad_is_input(self):
        ds = linreg_generate(3, 6, RngStream(2))
        m = linreg_model(ds)
        np.testing.assert_allclose(m.output_grad(np.zeros(3), 4), ds.inputs[4])

    def test_dimension_error(self):
        m = linreg_model(linreg_generate(3, 6, RngStream(2)))
        with pytest.raises(DimensionError):
            m.full_loss(np.zeros(2))

    def test_fd_hessian(self):
        m = linreg_model(linreg_generate(3, 50, RngStream(7)))
        theta = np.array([0.3, -0.2, 0.5])
        h = np.array([fd_grad(lambda t: m.full_grad(t)[i], theta, 1e-3) for i in range(3)])
        np.testing.assert_allclose(h, m.hessian(), atol=1e-8)

    def test_minimum_solves_normal_equations(self):
        ds = linreg_generate(3, 40, RngStream(8))
        m = linreg_model(ds)
        theta, loss = m.minimum()
        ref, *_ = np.linalg.lstsq(ds.inputs, ds.labels, rcond=None)
        np.testing.assert_allclose(theta, ref, atol=1e-10)
        assert loss == pytest.approx(m.full_loss(ref), rel=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), d=st.integers(1, 4), n=st.integers(1, 20))
    def test_mean_consistency_and_fd(self, seed, d, n):
        m = linreg_model(linreg_generate(d, n, RngStream(seed)))
        theta = np.random.default_rng(seed).standard_normal(d)
        losses = m.per_sample_losses(theta)
        assert np.all(losses >= 0)
        assert m.full_loss(theta) == pytest.approx(np.mean(losses), rel=1e-12)
        grads = m.per_sample_grads(theta)
        np.testing.assert_allclose(m.full_grad(theta), grads.mean(axis=0), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(m.full_grad(theta), fd_grad(m.full_loss, theta), rtol=1e-5, atol=1e-7)


class TestMlp:
    def test_identity_single_layer_matches_linreg(self):
        ds = linreg_generate(4, 12, RngStream(1))
        net, _ = mlp_model([4, 1], "identity", ds)
        lin = linreg_model(ds)
        theta = np.random.default_rng(0).standard_normal(4)
        full = np.concatenate([theta, [0.0]])
        np.testing.assert_allclose(net.per_sample_grads(full)[:, :4], lin.per_sample_grads(theta),
                                   rtol=1e-12, atol=1e-14)
        assert net.full_loss(full) == pytest.approx(lin.full_loss(theta), rel=1e-12)

    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_per_sample_grad_fd(self, act):
        ds = binary_teacher_generate(3, 8, RngStream(2))
        net, theta = mlp_model([3, 5, 4, 1], act, ds, RngStream(3))
        for mu in range(3):
            g = net.per_sample_grad(theta, mu)
            ref = fd_grad(lambda t: net.per_sample_loss(t, mu), theta)
            assert np.linalg.norm(g - ref) / np.linalg.norm(ref) <= 1e-5

    def test_forward_matches_reference(self):
        ds = binary_teacher_generate(3, 10, RngStream(2))
        net, theta = mlp_model([3, 6, 2, 1], "tanh", ds, RngStream(4))
        ref = reference_mlp_output(theta, [3, 6, 2, 1], np.tanh, ds.inputs)
        np.testing.assert_allclose(net.predict(theta), ref, rtol=1e-12)
        np.testing.assert_allclose(net.per_sample_losses(theta), 0.5 * (ref - ds.labels) ** 2, rtol=1e-12)

    def test_output_grad_fd(self):
        ds = binary_teacher_generate(3, 6, RngStream(5))
        net, theta = mlp_model([3, 4, 4, 1], "tanh", ds, RngStream(6))
        g = net.output_grad(theta, 2)
        ref = fd_grad(lambda t: reference_mlp_output(t, [3, 4, 4, 1], np.tanh, ds.inputs[2:3])[0], theta)
        assert np.linalg.norm(g - ref) / np.linalg.norm(ref) <= 1e-5

    def test_zero_network(self):
        ds = linreg_generate(2, 7, RngStream(1))
        net, _ = mlp_model([2, 3, 1], "relu", ds)
        theta = np.zeros(net.param_dim)
        np.testing.assert_allclose(net.per_sample_losses(theta), ds.labels ** 2 / 2)

    def test_full_grad_fd(self):
        ds = binary_teacher_generate(3, 20, RngStream(7))
        net, _ = mlp_model([3, 5, 1], "tanh", ds)
        for s in range(5):
            theta = np.random.default_rng(s).standard_normal(net.param_dim) * 0.5
            g = net.full_grad(theta)
            assert np.linalg.norm(g - fd_grad(net.full_loss, theta)) / np.linalg.norm(g) <= 1e-5

    def test_tangent_kernel_matches_jacobian(self):
        ds = binary_teacher_generate(3, 9, RngStream(8))
        net, theta = mlp_model([3, 5, 4, 1], "relu", ds, RngStream(9))
        r, k = net.tangent_kernel(theta)
        j = net.output_grads(theta)
        np.testing.assert_allclose(k, j @ j.T, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(r, net.predict(theta) - ds.labels)

    def test_glorot_variance(self):
        ds = binary_teacher_generate(50, 2, RngStream(1))
        net, theta = mlp_model([50, 150, 1], "relu", ds, RngStream(2))
        w1 = theta[:150 * 50]
        assert np.var(w1) == pytest.approx(2.0 / 200, rel=0.05)

    def test_width_validation(self):
        ds = binary_teacher_generate(3, 5, RngStream(1))
        with pytest.raises(DimensionError):
            mlp_model([4, 2, 1], "relu", ds)
        with pytest.raises(DimensionError):
            mlp_model([3, 2, 2], "relu", ds)


class TestPotentials:
    def test_double_well_values(self):
        p = double_well(1.0, 1.0, 0.1)
        assert p.loss(np.array([1.0])) == pytest.approx(0.1)
        assert p.loss(np.array([-1.0])) == pytest.approx(0.1)
        assert p.loss(np.array([0.0])) == pytest.approx(1.1)
        assert p.minimum().hessian[0, 0] == pytest.approx(8.0)
        assert p.saddle().hessian[0, 0] == pytest.approx(-4.0)
        assert p.saddle().loss == pytest.approx(1.1)

    def test_gradient_vanishes_at_catalog(self):
        for p in (double_well(2.0, 0.7, 0.3), nd_double_well(1, 1.0, 1.5, 0.2, [2.0, 3.0])):
            for cp in p.catalog:
                assert np.max(np.abs(p.grad(cp.location))) <= 1e-10

    def test_hessian_fd(self):
        p = nd_double_well(0, 1.3, 0.8, 0.1, [2.5])
        for x in ([0.3, -0.4], [1.1, 0.2]):
            x = np.array(x)
            h = np.array([fd_grad(lambda t: p.grad(t)[i], x, 1e-4) for i in range(2)])
            np.testing.assert_allclose(h, p.hessian(x), atol=1e-6)

    def test_saddle_hessian_2d(self):
        p = nd_double_well(0, 1.0, 1.0, 0.1, [1.0])
        np.testing.assert_allclose(p.saddle().hessian, np.diag([-4.0, 1.0]))

    def test_positivity_on_grid(self):
        p = nd_double_well(0, 1.0, 1.0, 0.05, [2.0])
        g = np.linspace(-3, 3, 121)
        pts = np.stack(np.meshgrid(g, g), axis=-1)
        assert np.min(p.loss(pts)) >= 0.05

    def test_quadratic_well(self):
        p = nd_quadratic_well([1.0, 4.0], 0.5)
        assert p.loss(np.array([1.0, 1.0])) == pytest.approx(0.5 + 0.5 + 2.0)
        with pytest.raises(UnsupportedError):
            p.saddle()

    def test_invalid(self):
        with pytest.raises(InputError):
            double_well(1.0, 1.0, 0.0)
        with pytest.raises(InputError):
            nd_double_well(0, 1.0, 1.0, 0.1, [-1.0])
