import math

import numpy as np
import pytest
from scipy import stats

from loglandscape.errors import PositivityError
from loglandscape.escape import fit_power_law, theory_phi
from loglandscape.models import LossModel, double_well, nd_quadratic_well
from loglandscape.numerics import RngStream
from loglandscape.sde import (SdeConfig, euler_maruyama, gld, log_landscape_langevin, potential_path,
                              sgd_sde, t_of_tau, tau_approx, tau_of_t, thin)
from loglandscape.sgd import Trajectory


class Quadratic(LossModel):
    """L = offset + sum(h theta^2) / 2, evaluated through the generic interface."""

    n_samples = 1

    def __init__(self, h, offset=0.0):
        self.h = np.asarray(h, dtype=float)
        self.offset = offset
        self.param_dim = len(self.h)

    def per_sample_losses(self, theta):
        t = self._check_theta(theta)
        return np.array([self.offset + 0.5 * np.sum(self.h * t * t)])

    def per_sample_grads(self, theta, idx=None):
        return (self.h * self._check_theta(theta))[None, :]


class Constant(LossModel):
    n_samples = 1

    def __init__(self, value, dim):
        self.value, self.param_dim = value, dim

    def per_sample_losses(self, theta):
        return np.array([self.value])

    def per_sample_grads(self, theta, idx=None):
        return np.zeros((1, self.param_dim))


class ExpQuadratic(LossModel):
    """L = exp(|theta|^2 / 2) so that log L is an isotropic quadratic."""

    n_samples = 1

    def __init__(self, dim):
        self.param_dim = dim

    def per_sample_losses(self, theta):
        t = self._check_theta(theta)
        return np.array([math.exp(0.5 * t @ t)])

    def per_sample_grads(self, theta, idx=None):
        t = self._check_theta(theta)
        return (math.exp(0.5 * t @ t) * t)[None, :]


class TestEulerMaruyama:
    def test_drift_only_step(self):
        tr = euler_maruyama(lambda th: -th, None, SdeConfig(0.1, 1, [1.0], RngStream(1)))
        assert tr.params[-1, 0] == pytest.approx(0.9)

    def test_ou_stationary_variance(self):
        # 2000 independent OU coordinates, t = 5 relaxation times
        n = 2000
        tr = euler_maruyama(lambda th: -th, lambda th: math.sqrt(2.0),
                            SdeConfig(0.01, 500, np.zeros(n), RngStream(2), record_every=500))
        x = tr.params[-1]
        var, se = x.var(), math.sqrt(2.0 / n)
        assert abs(var - 1.0) < 3 * se

    def test_first_order_convergence(self):
        errs = []
        for dt in (0.01, 0.005):
            steps = round(1.0 / dt)
            tr = euler_maruyama(lambda th: -th, None, SdeConfig(dt, steps, [1.0], RngStream(1)))
            errs.append(abs(tr.params[-1, 0] - math.exp(-1.0)))
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.02)

    def test_ito_martingale(self):
        # d theta = sigma theta dW: Ito keeps E theta = theta0, Stratonovich would give e^{1/2}
        means = []
        for b in range(20):
            tr = euler_maruyama(lambda th: np.zeros_like(th), lambda th: np.diag(th),
                                SdeConfig(0.01, 100, np.ones(500), RngStream(3, b), record_every=100))
            means.append(tr.params[-1])
        x = np.concatenate(means)
        assert abs(x.mean() - 1.0) < 3 * x.std(ddof=1) / math.sqrt(len(x))

    def test_compiled_route_matches_generic(self):
        p = double_well(1.0, 1.0, 0.1)
        cfg = dict(dt=1e-3, steps=3000, theta0=[0.9], record_every=1)
        fast = gld(p, 0.3, SdeConfig(rng=RngStream(4), **cfg))
        slow = euler_maruyama(lambda th: -p.grad(th), lambda th: math.sqrt(0.6),
                              SdeConfig(rng=RngStream(4), **cfg))
        np.testing.assert_allclose(fast.params, slow.params, rtol=1e-10, atol=1e-12)


class TestGld:
    def test_zero_diffusion_is_gradient_flow(self):
        m = Quadratic([2.0])
        tr = gld(m, 0.0, SdeConfig(0.01, 100, [1.0], RngStream(1)))
        assert tr.params[-1, 0] == pytest.approx((1 - 0.02) ** 100)

    def test_quadratic_variance(self):
        h, d = 2.0, 0.5
        tr = gld(nd_quadratic_well([h] * 1000, 1.0), d,
                 SdeConfig(0.005, 1000, np.zeros(1000), RngStream(2), record_every=1000))
        x = tr.params[-1]
        assert abs(x.var() - d / h) < 3 * (d / h) * math.sqrt(2.0 / 1000)


class TestSgdSde:
    def test_frozen_coefficients(self):
        hs = np.array([[2.0, 0.5], [0.5, 1.0]])
        eta, b, c, dt = 0.1, 4, 3.0, 0.01
        tr = sgd_sde(Constant(c, 2), eta, b, hs, SdeConfig(dt, 40000, [0.0, 0.0], RngStream(5)))
        inc = np.diff(tr.params, axis=0)
        want = 2 * eta * c * hs * dt / b
        np.testing.assert_allclose(np.cov(inc.T), want, rtol=0.04, atol=0.02 * want.max())

    def test_zero_hessian_is_deterministic(self):
        m = Quadratic([1.0], 1.0)
        tr = sgd_sde(m, 0.1, 1, np.zeros((1, 1)), SdeConfig(0.01, 10, [1.0], RngStream(6)))
        assert tr.params[-1, 0] == pytest.approx(0.99 ** 10)

    def test_stationary_power_law(self):
        eta, b, h = 0.5, 1, 1.0
        pot = nd_quadratic_well([h], 1.0)
        tr = sgd_sde(pot, eta, b, np.array([[h]]),
                     SdeConfig(0.005, 4 * 10**6, [0.0], RngStream(7), record_every=100))
        samples = thin(tr.params[:, 0], 0.2, 1)
        fit = fit_power_law(samples, pot)
        assert fit.phi_hat == pytest.approx(theory_phi(b, eta, h), rel=0.10)


class TestLogLandscape:
    def test_exp_quadratic_is_ou(self):
        eta, b, h = 0.1, 1.0, 4.0
        temp = eta * h / b
        tr = log_landscape_langevin(ExpQuadratic(1000), eta, b, h,
                                    SdeConfig(0.01, 600, np.zeros(1000), RngStream(8), record_every=600))
        x = tr.params[-1]
        assert tr.time_unit == "tau"
        assert abs(x.var() - temp) < 3 * temp * math.sqrt(2.0 / 1000)

    def test_noise_off_is_log_gradient_flow(self):
        m = Quadratic([1.0], 1.0)
        tr = log_landscape_langevin(m, 0.1, 1, 1.0, SdeConfig(0.01, 1, [1.0], RngStream(1)), noise=False)
        assert tr.params[-1, 0] == pytest.approx(1.0 - 0.01 * 1.0 / 1.5)

    def test_positivity_guard(self):
        with pytest.raises(PositivityError):
            log_landscape_langevin(Quadratic([1.0]), 0.1, 1, 1.0, SdeConfig(0.01, 5, [0.0], RngStream(1)))

    @pytest.mark.slow
    def test_double_well_occupancy_ratio(self):
        # T = 0.2: the density ratio saddle / minimum is (L_s / L_min)^(-1/T) = 11^-5
        p, temp = double_well(1.0, 1.0, 0.1), 0.2
        r = potential_path(p, drift_power=1.0, noise_power=0.0, factor=math.sqrt(2 * temp), dt=1e-3,
                           steps=6 * 10**8, theta0=[1.0], rng=RngStream(3), record_every=50)
        x = r["records"][:, 0]
        ws, wm = 0.1, 0.02
        saddle = np.sum(np.abs(x) < ws / 2) / ws
        minimum = np.sum(np.abs(np.abs(x) - 1.0) < wm / 2) / (2 * wm)
        ratio = (saddle / minimum) / 11.0 ** -5
        assert 1 / 1.5 <= ratio <= 1.5


class TestTimeChange:
    def _traj(self, losses, dt):
        k = np.arange(len(losses))
        return Trajectory(steps=k, times=k * dt, losses=np.asarray(losses, dtype=float))

    def test_constant_loss(self):
        tc = tau_of_t(self._traj(np.full(101, 2.0), 0.01))
        assert tc.tau[-1] == pytest.approx(2.0)
        assert tc.tau[0] == 0.0

    def test_left_riemann(self):
        t = np.arange(101) * 0.01
        tc = tau_of_t(self._traj(t, 0.01))
        assert tc.tau[-1] == pytest.approx(0.495, abs=1e-12)

    def test_monotone(self):
        losses = np.abs(np.random.default_rng(1).standard_normal(50))
        assert np.all(np.diff(tau_of_t(self._traj(losses, 0.1)).tau) >= 0)

    def test_inverse(self):
        losses = 1.0 + np.abs(np.random.default_rng(2).standard_normal(30))
        tc = t_of_tau(self._traj(losses, 0.1))
        np.testing.assert_allclose(tc.t[-1], np.sum(0.1 / losses[:-1]))

    def test_sparse_records_rejected(self):
        tr = Trajectory(steps=np.array([0, 10]), times=np.array([0.0, 0.1]), losses=np.array([1.0, 1.0]))
        with pytest.raises(Exception):
            tau_of_t(tr)

    def test_approximation(self):
        assert tau_approx(4.0, 0.25) == pytest.approx(1.0)

    def test_thin(self):
        assert thin(np.arange(100), 0.2, 10).tolist() == list(range(20, 100, 10))


def test_potential_path_matches_ks_of_gibbs_quadratic():
    # GLD in a harmonic well has a Gaussian law N(0, D/h)
    h, d = 3.0, 0.6
    r = potential_path(nd_quadratic_well([h], 1.0), drift_power=0.0, noise_power=0.0,
                       factor=math.sqrt(2 * d), dt=0.002, steps=2 * 10**6, theta0=[0.0],
                       rng=RngStream(9), record_every=2000)
    x = r["records"][:, 0]
    assert stats.kstest(x, "norm", args=(0, math.sqrt(d / h))).pvalue > 0.01
