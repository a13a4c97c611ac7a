"""Fitting: initialization, BFGS behavior, oracles, standard errors."""

import math
import numpy as np
import pytest

import nlmebic as nb
from nlmebic.errors import MaxIterationsError, NonFiniteObjectiveError
from nlmebic.estimation import FitOptions, standard_errors, wald_p_value

from conftest import PK_TIMES, oral_spec, oral_truth


def lmm_spec(a=0.5):
    return nb.ModelSpec(structural="testconst", transforms=("identity",),
                        covmap=nb.CovariateMap.empty(1),
                        pattern=nb.CovariancePattern(1, (True,)),
                        error=nb.ErrorModelSpec("additive", a=a))


def simulate_lmm(rng, N=30, n=6, mu=5.0, omega=0.8, sigma=0.5):
    subs = []
    t = np.arange(1.0, n + 1.0)
    for i in range(N):
        b = omega * rng.standard_normal()
        y = mu + b + sigma * rng.standard_normal(n)
        subs.append(nb.Subject(id=f"s{i:03d}", times=t, y=y,
                               regressors={}, covariates={}))
    return nb.Dataset(tuple(subs), ())


def lmm_closed_form_ml(ds):
    """Balanced one-way random-effects ML estimates, derived independently."""
    ys = np.vstack([s.y for s in ds.subjects])
    N, n = ys.shape
    mu = ys.mean()
    within = float(((ys - ys.mean(axis=1, keepdims=True)) ** 2).sum())
    sigma2 = within / (N * (n - 1))
    lam = n * float(((ys.mean(axis=1) - mu) ** 2).sum()) / N
    omega2 = (lam - sigma2) / n
    assert omega2 > 0, "test design must give an interior optimum"
    return mu, math.sqrt(omega2), math.sqrt(sigma2)


class TestFitLmmOracle:
    def test_matches_closed_form(self):
        rng = np.random.default_rng(123)
        ds = simulate_lmm(rng)
        spec = lmm_spec()
        fit = nb.fit_ml(ds, spec)
        mu, omega, sigma = lmm_closed_form_ml(ds)
        got = dict(zip(fit.natural_names, fit.natural_estimates))
        assert got["mu"] == pytest.approx(mu, abs=1e-5)
        assert got["omega_mu"] == pytest.approx(omega, abs=1e-5)
        assert got["a"] == pytest.approx(sigma, abs=1e-5)
        g = nb.marginal_gradient(ds, fit.theta_hat, spec)
        assert float(np.max(np.abs(g))) < 1e-5


class TestFit:
    def test_zero_variance_recovery(self):
        # no-random spec on data simulated with Omega = 0 and tiny noise
        spec = oral_spec(random=(), a=1e-4)
        theta = oral_truth(spec, a=1e-4)
        ds = nb.simulate_dataset(spec, theta,
                                 nb.SimDesign(N=10, times=PK_TIMES, dose=100.0, seed=2))
        fit = nb.fit_ml(ds, spec)
        est = dict(zip(fit.natural_names, fit.natural_estimates))
        assert est["ka"] == pytest.approx(1.0, abs=1e-3)
        assert est["k"] == pytest.approx(0.1, abs=1e-3)
        assert est["V"] == pytest.approx(20.0, abs=2e-2)

    def test_returned_loglik_is_fresh_evaluation(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        fit = nb.fit_ml(ds, spec)
        fresh = nb.marginal_loglik_laplace(ds, fit.theta_hat, spec)
        assert abs(fit.loglik - fresh) <= 1e-10 * (1.0 + abs(fresh))

    def test_objective_path_monotone(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        fit = nb.fit_ml(ds, spec)
        path = np.array(fit.objective_path)
        assert np.all(np.diff(path) <= 0.0)

    def test_nested_models_loglik_monotone(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        # add a pure-noise covariate; the larger model can only fit better
        rng = np.random.default_rng(55)
        vals = rng.uniform(-1, 1, ds.n_subjects)
        subs = [replace_covs(s, {"z": float(vals[i])})
                for i, s in enumerate(ds.subjects)]
        ds2 = nb.Dataset(tuple(subs), ("z",))
        small = oral_spec()
        large = oral_spec(covariates={"V": ["z"]})
        f_small = nb.fit_ml(ds2, small)
        f_large = nb.fit_ml(ds2, large)
        assert f_large.loglik >= f_small.loglik - 1e-6

    def test_subject_relabeling_invariance(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        fit1 = nb.fit_ml(ds, spec)
        renamed = [nb.Subject(id=f"zz{99 - i}", times=s.times, y=s.y,
                              regressors=s.regressors, covariates=s.covariates)
                   for i, s in enumerate(ds.subjects)]
        fit2 = nb.fit_ml(nb.Dataset(tuple(renamed), ds.covariate_names), spec)
        assert fit2.loglik == pytest.approx(fit1.loglik, abs=1e-6)

    def test_covariate_rescaling_invariance(self):
        rng = np.random.default_rng(77)
        vals = rng.uniform(40.0, 100.0, 12)
        spec = oral_spec(random=("V",), covariates={"V": ["w"]})
        theta = nb.initial_theta_from_doc(spec, {
            "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
            "coefficients": {"V": {"w": 0.01}},
            "omega_sd": {"V": 0.25}, "error": {"a": 0.3}})
        design = nb.SimDesign(N=12, times=PK_TIMES, dose=100.0, seed=6,
                              covariates=(("w", tuple(vals)),))
        ds = nb.simulate_dataset(spec, theta, design)
        fit1 = nb.fit_ml(ds, spec)
        scaled = [replace_covs(s, {"w": s.covariates["w"] * 10.0})
                  for s in ds.subjects]
        fit2 = nb.fit_ml(nb.Dataset(tuple(scaled), ("w",)), spec)
        assert fit2.loglik == pytest.approx(fit1.loglik, abs=1e-6)
        e1 = dict(zip(fit1.natural_names, fit1.natural_estimates))
        e2 = dict(zip(fit2.natural_names, fit2.natural_estimates))
        assert e2["beta_V:w"] == pytest.approx(e1["beta_V:w"] / 10.0, rel=1e-4)
        c1 = nb.criterion(fit1, "bic_joint").value
        c2 = nb.criterion(fit2, "bic_joint").value
        assert c2 == pytest.approx(c1, abs=1e-6)

    def test_nonfinite_objective_at_init(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        bad = nb.ThetaVector(beta=np.array([1000.0, -2.3, 3.0]),
                             omega_chol=theta.omega_chol,
                             error_params=theta.error_params)
        with pytest.raises(NonFiniteObjectiveError):
            nb.fit_ml(ds, spec, init=bad)

    def test_max_iterations_carries_result(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        opts = FitOptions(max_iter=0, retries=0)
        with pytest.raises(MaxIterationsError) as exc:
            nb.fit_ml(ds, spec, opts=opts)
        assert exc.value.result is not None
        assert exc.value.result.converged is False

    def test_multistart_keeps_best_objective(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        f1 = nb.fit_ml(ds, spec, opts=FitOptions(starts=1))
        f3 = nb.fit_ml(ds, spec, opts=FitOptions(starts=3, seed=17))
        assert f3.loglik >= f1.loglik - 1e-6

    def test_sampling_distribution_m1v(self):
        # omega_V estimates concentrate around the generating 0.3
        spec = oral_spec(random=("V",))
        theta = oral_truth(spec, omega_sd={"V": 0.3})
        hits = 0
        for rep in range(100):
            ds = nb.simulate_dataset(
                spec, theta, nb.SimDesign(N=20, times=PK_TIMES, dose=100.0,
                                          seed=4242), replicate=rep)
            fit = nb.fit_ml(ds, spec)
            om = dict(zip(fit.natural_names, fit.natural_estimates))["omega_V"]
            hits += abs(om - 0.3) <= 0.15
        assert hits >= 90


def replace_covs(s, new):
    covs = dict(s.covariates)
    covs.update(new)
    return nb.Subject(id=s.id, times=s.times, y=s.y, regressors=s.regressors,
                      covariates=covs)


class TestStandardErrors:
    def test_rse_reporting_convention(self):
        assert 100.0 * 1.539405 / 5.67 == pytest.approx(27.15, abs=1e-3)
        assert 100.0 * 1.539 / 5.67 == pytest.approx(27.15, abs=0.01)

    def test_wald_quantile(self):
        assert wald_p_value(1.959964) == pytest.approx(0.05, abs=1e-6)

    def test_duplicated_dataset_halves_information(self):
        rng = np.random.default_rng(321)
        ds = simulate_lmm(rng, N=40)
        spec = lmm_spec()
        fit1 = standard_errors(nb.fit_ml(ds, spec), ds, spec)
        doubled = list(ds.subjects)
        doubled += [nb.Subject(id=s.id + "_copy", times=s.times, y=s.y,
                               regressors=s.regressors, covariates=s.covariates)
                    for s in ds.subjects]
        ds2 = nb.Dataset(tuple(doubled), ())
        fit2 = standard_errors(nb.fit_ml(ds2, spec), ds2, spec)
        ratio = fit2.se / fit1.se
        np.testing.assert_allclose(ratio, 1.0 / math.sqrt(2.0), rtol=0.05)

    def test_wald_p_reported_for_coefficients_only(self):
        rng = np.random.default_rng(88)
        vals = tuple(rng.uniform(-1, 1, 15))
        spec = oral_spec(random=("V",), covariates={"V": ["w"]})
        theta = nb.initial_theta_from_doc(spec, {
            "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
            "coefficients": {"V": {"w": 0.4}},
            "omega_sd": {"V": 0.2}, "error": {"a": 0.3}})
        ds = nb.simulate_dataset(spec, theta,
                                 nb.SimDesign(N=15, times=PK_TIMES, dose=100.0,
                                              seed=9, covariates=(("w", vals),)))
        fit = standard_errors(nb.fit_ml(ds, spec), ds, spec)
        assert set(fit.wald_p) == {"beta_V:w"}
        assert 0.0 <= fit.wald_p["beta_V:w"] <= 1.0
        assert fit.se is not None and np.all(np.isfinite(fit.se))

    def test_singular_information_marks_unavailable(self):
        # two identical covariates on the same parameter are perfectly collinear
        rng = np.random.default_rng(13)
        vals = tuple(rng.uniform(-1, 1, 12))
        spec = oral_spec(random=("V",), covariates={"V": ["w1", "w2"]})
        theta = nb.initial_theta_from_doc(spec, {
            "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
            "omega_sd": {"V": 0.2}, "error": {"a": 0.3}})
        ds = nb.simulate_dataset(
            spec, theta, nb.SimDesign(N=12, times=PK_TIMES, dose=100.0, seed=3,
                                      covariates=(("w1", vals), ("w2", vals))))
        fit = nb.fit_ml(ds, spec)
        fit = standard_errors(fit, ds, spec)
        assert fit.se is None
        assert "unavailable" in fit.se_message


class TestDefaultInit:
    def test_oral_grid_lands_in_canonical_basin(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        init = nb.default_init(ds, spec)
        psika = math.exp(init.beta[0])
        psik = math.exp(init.beta[1])
        assert psika > psik

    def test_error_scale_positive(self, oral_m3_dataset):
        ds, theta, spec = oral_m3_dataset
        init = nb.default_init(ds, spec)
        assert np.all(init.error_params > 0)
