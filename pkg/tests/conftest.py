"""Shared fixtures: linear test models (closed-form oracles) and builders."""

from __future__ import annotations

import numpy as np
import pytest

import nlmebic as nb
from nlmebic.errors import InputError
from nlmebic.models import StructuralModel, register_model


def _poly3_eval(t, R, psi):
    return psi[0] + psi[1] * t + psi[2] * t * t


def _poly3_jac(t, R, psi):
    return np.column_stack([np.ones_like(t), t, t * t])


def _const_eval(t, R, psi):
    return np.full_like(t, psi[0])


def _const_jac(t, R, psi):
    return np.ones((t.size, 1))


for _model in (
    StructuralModel(name="testpoly3", params=("b0", "b1", "b2"), regressors=(),
                    eval_fn=_poly3_eval, jac_fn=_poly3_jac),
    StructuralModel(name="testconst", params=("mu",), regressors=(),
                    eval_fn=_const_eval, jac_fn=_const_jac),
):
    try:
        register_model(_model)
    except InputError:
        pass


def poly3_design_matrix(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return np.column_stack([np.ones_like(t), t, t * t])


def linear_spec(pattern: nb.CovariancePattern, a: float = 0.5) -> nb.ModelSpec:
    return nb.ModelSpec(
        structural="testpoly3",
        transforms=("identity", "identity", "identity"),
        covmap=nb.CovariateMap.empty(3),
        pattern=pattern,
        error=nb.ErrorModelSpec("additive", a=a),
    )


def linear_marginal_loglik(dataset, theta, spec) -> float:
    """Independent closed-form marginal for the linear-Gaussian test model.

    y_i ~ N(Z beta, Z_R Omega_R Z_R' + a^2 I); evaluated with scipy.
    """
    from scipy.stats import multivariate_normal

    beta = theta.beta
    a = float(theta.error_params[0])
    active = list(spec.pattern.active)
    om_r = theta.omega_r(spec)
    total = 0.0
    for s in dataset.subjects:
        Z = poly3_design_matrix(s.times)
        mean = Z @ beta
        cov = a * a * np.eye(s.n)
        if active:
            Zr = Z[:, active]
            cov = cov + Zr @ om_r @ Zr.T
        total += multivariate_normal.logpdf(s.y, mean=mean, cov=cov)
    return float(total)


def oral_spec(random=("ka", "k", "V"), correlations=(), a: float = 0.3,
              covariates=None) -> nb.ModelSpec:
    return nb.parse_model_doc({
        "structural": "onecpt_oral",
        "transforms": {"ka": "log", "k": "log", "V": "log"},
        "random": list(random),
        "correlations": [list(p) for p in correlations],
        "covariates": covariates or {},
        "error": {"kind": "additive", "a": a},
    })


def oral_truth(spec, omega_sd=None, corr=(), a: float = 0.3) -> nb.ThetaVector:
    doc = {
        "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
        "omega_sd": omega_sd or {},
        "corr": [list(c) for c in corr],
        "error": {"a": a},
    }
    return nb.initial_theta_from_doc(spec, doc)


PK_TIMES = (1.0, 2.0, 4.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0)


@pytest.fixture(scope="session")
def oral_m3_dataset():
    spec = oral_spec()
    theta = oral_truth(spec, omega_sd={"ka": 0.2, "k": 0.1, "V": 0.3})
    design = nb.SimDesign(N=20, times=PK_TIMES, dose=100.0, seed=20240517)
    return nb.simulate_dataset(spec, theta, design), theta, spec


def synthetic_fit(spec, loglik, n_subjects, n_total):
    """A FitResult shell for criterion arithmetic tests."""
    from nlmebic.estimation import FitResult

    return FitResult(spec=spec, theta_hat=None, loglik=loglik, converged=True,
                     iterations=0, dims=nb.theta_dims(spec),
                     n_subjects=n_subjects, n_total=n_total, standardization={})


def amikacin_final_spec() -> nb.ModelSpec:
    """Two-compartment spec shaped like the published final model:
    Q fixed with one covariate, Cl/V1/V2 random, combined error."""
    return nb.parse_model_doc({
        "structural": "twocpt_infusion",
        "transforms": {"Q": "log", "Cl": "log", "V1": "log", "V2": "log"},
        "random": ["Cl", "V1", "V2"],
        "covariates": {"Cl": ["ClCr", "age"], "V1": ["weight", "PF"],
                       "Q": ["sexe"], "V2": ["ClCr"]},
        "error": {"kind": "combined", "a": 0.28, "b": 0.10},
    })
