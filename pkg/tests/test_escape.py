import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from loglandscape.errors import EscapeNotObservedError, FitError, InputError
from loglandscape.escape import (EscapeGeometry, FptResult, SdeEscapeConfig, UnstableMinimumWarning,
                                 classical_kramers_rate, empirical_escape_rate, first_passage_times,
                                 fit_power_law, kramers_rate_1d, langer_rate_multi, passage_slope,
                                 stability_max_dim, theory_phi)
from loglandscape.models import double_well, linreg_generate, linreg_model, nd_double_well
from loglandscape.numerics import RngStream
from loglandscape.sgd import SgdConfig


def student_samples(phi, n, seed):
    """Exact draws from P(theta) ~ (1 + theta^2)^-phi: a Student t with nu = 2 phi - 1, rescaled."""
    nu = 2 * phi - 1
    u = np.random.default_rng(seed).random(n)
    return stats.t.ppf(u, nu) / math.sqrt(nu)


def unit_geometry(c, n=1, det_ratio=1.0):
    return EscapeGeometry(loss_min=1.0, loss_saddle=c, h_star=1.0, h_e_saddle=-1.0, n=n, det_ratio=det_ratio)


class TestFormulas:
    def test_phi(self):
        assert theory_phi(1, 0.1, 1.0) == pytest.approx(11.0)
        assert theory_phi(1, 0.1, 1e12) == pytest.approx(1.0)

    @pytest.mark.parametrize("eta,b,want", [(0.01, 1, 101), (0.01, 4, 401), (0.01, 16, 1601),
                                            (0.1, 1, 11), (0.1, 4, 41), (0.1, 16, 161)])
    def test_phi_grid(self, eta, b, want):
        assert theory_phi(b, eta, 1.0) == pytest.approx(want)

    def test_kramers_substitution(self):
        assert kramers_rate_1d(unit_geometry(2.0), 1, 0.1) == pytest.approx(2 ** -10.5 / (2 * math.pi), rel=1e-12)
        assert kramers_rate_1d(unit_geometry(2.0), 1, 0.1) == pytest.approx(1.099e-4, rel=1e-3)

    def test_kramers_degenerate_barrier_limit(self):
        geom = EscapeGeometry(1.0, 1.0 + 1e-15, 4.0, -9.0)
        assert kramers_rate_1d(geom, 1, 0.1) == pytest.approx(6.0 / (2 * math.pi), rel=1e-12)

    def test_langer_substitution(self):
        assert langer_rate_multi(unit_geometry(2.0, n=2), 1, 0.1) == pytest.approx(2 ** -10 / (2 * math.pi), rel=1e-12)
        assert langer_rate_multi(unit_geometry(2.0, n=2), 1, 0.1) == pytest.approx(1.554e-4, rel=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(h=st.floats(0.1, 20), hs=st.floats(0.1, 20), c=st.floats(1.01, 50), b=st.floats(0.5, 50),
           eta=st.floats(0.001, 1))
    def test_langer_one_dim_is_kramers(self, h, hs, c, b, eta):
        geom = EscapeGeometry(1.0, c, h, -hs, n=1, det_ratio=h / hs)
        assert langer_rate_multi(geom, b, eta) == pytest.approx(kramers_rate_1d(geom, b, eta), rel=1e-12)

    def test_footnote_form(self):
        # matched spectra except the escape direction: det ratio = h_e* / |h_e^s|
        pot = nd_double_well(0, 1.0, 1.0, 0.5, [3.0, 3.0])
        geom = EscapeGeometry.from_potential(pot)
        b, eta = 4.0, 0.1
        h, hs = 8.0, 4.0
        simple = math.sqrt(h * hs) / (2 * math.pi) * geom.ratio ** -(b / (eta * h) + 1 - 3 / 2)
        assert langer_rate_multi(geom, b, eta) == pytest.approx(simple, rel=1e-12)

    def test_monotonicity(self):
        base = dict(c=3.0, b=4.0, eta=0.1)
        rates_n = [langer_rate_multi(unit_geometry(3.0, n=n), 4.0, 0.1) for n in range(1, 8)]
        rates_eta = [langer_rate_multi(unit_geometry(3.0, n=2), 4.0, e) for e in (0.05, 0.1, 0.2, 0.4)]
        rates_b = [langer_rate_multi(unit_geometry(3.0, n=2), b, 0.1) for b in (1, 2, 4, 8)]
        assert base and np.all(np.diff(rates_n) > 0)
        assert np.all(np.diff(rates_eta) > 0)
        assert np.all(np.diff(rates_b) < 0)

    def test_stability_bound(self):
        assert stability_max_dim(100, 0.1, 1.0) == pytest.approx(2002)
        assert stability_max_dim(1, 0.1, 1.0) == pytest.approx(22)
        assert np.all(np.diff([stability_max_dim(b, 0.1, 1.0) for b in (1, 2, 5, 10)]) > 0)

    def test_unstable_warning_still_computes(self):
        with pytest.warns(UnstableMinimumWarning):
            v = langer_rate_multi(unit_geometry(2.0, n=30), 1, 0.1)
        assert v > 0

    def test_stable_no_warning(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            langer_rate_multi(unit_geometry(2.0, n=3), 1, 0.1)

    def test_classical(self):
        assert classical_kramers_rate(8.0, -4.0, 1.0, 0.5) == pytest.approx(
            math.sqrt(32) / (2 * math.pi) * math.exp(-2.0))

    def test_geometry_invariants(self):
        with pytest.raises(InputError):
            EscapeGeometry(1.0, 0.5, 1.0, -1.0)
        with pytest.raises(InputError):
            EscapeGeometry(1.0, 2.0, 1.0, 1.0)
        with pytest.raises(InputError):
            EscapeGeometry(1.0, 2.0, 1.0, -1.0, n=0)

    def test_geometry_from_double_well(self):
        g = EscapeGeometry.from_potential(double_well(1.0, 1.0, 0.1))
        assert (g.loss_min, g.h_star, g.h_e_saddle) == pytest.approx((0.1, 8.0, -4.0))
        assert g.ratio == pytest.approx(11.0)
        assert g.det_ratio == pytest.approx(2.0)


class TestPowerLawFit:
    def test_planted_two(self):
        fit = fit_power_law(student_samples(2.0, 10**5, 1), lambda t: t * t + 1)
        assert fit.phi_hat == pytest.approx(2.0, abs=0.1)

    def test_planted_three(self):
        fit = fit_power_law(student_samples(3.0, 10**5, 2), lambda t: t * t + 1)
        assert fit.phi_hat == pytest.approx(3.0, abs=0.15)

    def test_interval_coverage(self):
        # a calibrated 95% interval reaches 95 of 100 only about 60% of the time
        hits = 0
        for i in range(100):
            fit = fit_power_law(student_samples(2.5, 20000, 100 + i), lambda t: t * t + 1)
            hits += fit.ci[0] <= 2.5 <= fit.ci[1]
        assert hits >= 95

    def test_interval_calibration(self):
        z = []
        for i in range(400):
            fit = fit_power_law(student_samples(2.5, 20000, 5000 + i), lambda t: t * t + 1)
            z.append((fit.phi_hat - 2.5) / fit.stderr)
        z = np.array(z)
        coverage = np.mean(np.abs(z) < 1.959964)
        assert abs(coverage - 0.95) <= 3 * math.sqrt(0.95 * 0.05 / 400)
        assert abs(z.mean()) < 0.25 and 0.85 < z.std() < 1.15

    def test_too_few_samples(self):
        with pytest.raises(InputError):
            fit_power_law(np.zeros(10), lambda t: t * t + 1)

    def test_no_usable_bins(self):
        with pytest.raises(FitError):
            fit_power_law(np.zeros(10**4), lambda t: t * t + 1)

    def test_json(self, tmp_path):
        fit = fit_power_law(student_samples(2.0, 10**4, 3), lambda t: t * t + 1)
        fit.to_json(tmp_path / "fit.json", {"seed": 3})
        doc = json.loads((tmp_path / "fit.json").read_text())
        assert set(doc) == {"phi_hat", "ci", "bins_used", "config"}
        assert doc["config"] == {"seed": 3}


class TestFirstPassage:
    def test_gradient_descent_never_escapes(self):
        m = linreg_model(linreg_generate(1, 20, RngStream(1)))
        star, _ = m.minimum()
        cfg = SgdConfig(0.1, 20, 2000, RngStream(2))
        with pytest.raises(EscapeNotObservedError) as info:
            first_passage_times(m, cfg, star, 1.5, 5)
        assert info.value.result.censored_count == 5

    def test_censoring_monotone_in_c(self):
        m = linreg_model(linreg_generate(1, 1000, RngStream(3)))
        star, _ = m.minimum()
        runs = []
        for c in (1.5, 2.0, 3.0):
            runs.append(first_passage_times(m, SgdConfig(0.1, 1, 20000, RngStream(4)), star, c, 40,
                                            require_passage=False))
        for lo, hi in zip(runs[:-1], runs[1:]):
            assert np.all(hi.times >= lo.times)

    def test_deterministic(self):
        m = linreg_model(linreg_generate(1, 100, RngStream(3)))
        star, _ = m.minimum()
        a = first_passage_times(m, SgdConfig(0.1, 1, 5000, RngStream(5)), star, 1.5, 10)
        b = first_passage_times(m, SgdConfig(0.1, 1, 5000, RngStream(5)), star, 1.5, 10)
        assert np.array_equal(a.times, b.times)

    def test_kernel_route_matches_generic_loop(self):
        # the compiled linreg runner against a plain loop over the same batches
        from loglandscape.sgd import sample_minibatches, sgd_step
        m = linreg_model(linreg_generate(2, 50, RngStream(6)))
        star, lmin = m.minimum()
        cfg = SgdConfig(0.1, 1, 3000, RngStream(7))
        res = first_passage_times(m, cfg, star, 1.5, 4, require_passage=False)
        for i in range(4):
            batches = sample_minibatches(50, 1, 3000, cfg.rng.substream(i))
            theta, k = star.copy(), 3000
            for j, b in enumerate(batches):
                theta = sgd_step(theta, m, b, 0.1)
                if m.full_loss(theta) >= 1.5 * lmin:
                    k = j + 1
                    break
            assert res.times[i] == pytest.approx(0.1 * k)

    def test_csv_and_summary(self, tmp_path):
        r = FptResult(2.0, np.array([1.0, 3.0, 5.0]), np.array([False, False, True]))
        r.to_csv(tmp_path / "f.csv")
        assert (tmp_path / "f.csv").read_text().splitlines() == [
            "run_id,c,t_p,censored", "0,2.0,1.0,0", "1,2.0,3.0,0", "2,2.0,5.0,1"]
        assert r.mean == pytest.approx(2.0) and r.censored_count == 1 and r.median == pytest.approx(2.0)

    def test_slope_needs_passages(self):
        r = FptResult(2.0, np.array([5.0]), np.array([True]))
        with pytest.raises(FitError):
            passage_slope([r, r])

    def test_gld_double_well_classical_kramers(self):
        pot, d = double_well(1.0, 1.0, 0.1), 0.2
        cfg = SdeEscapeConfig("gld", 1e-3, 10**8, RngStream(8), diffusion=d)
        res = first_passage_times(pot, cfg, [1.0], 0, 200, target="cross")
        want = classical_kramers_rate(8.0, -4.0, 1.0, d)
        assert 0.5 <= (1 / res.mean) / want <= 2.0

    def test_log_landscape_kramers_exponent_three(self):
        # B / (eta h*) = 2.5 gives the exponent 1/2 + 2.5 = 3 at c = 3
        eta, h = 0.1, 8.0
        b = 2.5 * eta * h
        pot = double_well(1.0, 1.0, 0.5)
        geom = EscapeGeometry.from_potential(pot)
        assert geom.ratio == pytest.approx(3.0)
        cfg = SdeEscapeConfig("log_landscape", 1e-3, 10**8, RngStream(9), eta=eta, batch_size=b, h_star=h)
        res = first_passage_times(pot, cfg, [1.0], 0, 500, target="cross")
        rate = empirical_escape_rate(res)
        assert rate.passages >= 500
        assert 0.5 <= rate.rate / kramers_rate_1d(geom, b, eta) <= 2.0


class TestEmpiricalRate:
    def test_constant_times(self):
        r = empirical_escape_rate(FptResult(2.0, np.full(40, 2.0), np.zeros(40, bool)))
        assert r.rate == pytest.approx(0.5) and r.stderr == pytest.approx(0.0)

    def test_exponential_samples(self):
        runs = 400
        t = -np.log(np.random.default_rng(1).random(runs)) / 3.0
        r = empirical_escape_rate(FptResult(2.0, t, np.zeros(runs, bool)))
        assert abs(r.rate - 3.0) <= 3.0 * 2 / math.sqrt(runs)
        assert r.stderr == pytest.approx(3.0 / math.sqrt(runs), rel=0.2)

    def test_needs_passages(self):
        with pytest.raises(InputError):
            empirical_escape_rate(FptResult(2.0, np.ones(10), np.zeros(10, bool)))
