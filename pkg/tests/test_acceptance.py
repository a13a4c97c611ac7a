"""Acceptance suite: one test per criterion, each printing a PASS line.

Set NLMEBIC_ACCEPT_SCALE=ci to run the reduced Monte Carlo scale (25
replicates, relaxed thresholds); the default is the full published scale
(100 replicates).  Run with `pytest -s tests/test_acceptance.py` to see the
per-criterion lines.
"""

import math
import os

import numpy as np
import pytest

import nlmebic as nb
from nlmebic.models import ErrorModelSpec
from nlmebic.selection import StepwiseOptions

from conftest import (
    PK_TIMES,
    amikacin_final_spec,
    linear_marginal_loglik,
    linear_spec,
    oral_spec,
    oral_truth,
    synthetic_fit,
)

CI_SCALE = os.environ.get("NLMEBIC_ACCEPT_SCALE", "full").lower() == "ci"
REPLICATES = 25 if CI_SCALE else 100
MAJORITY = 0.4 if CI_SCALE else 0.5
JOINT = 0.6 if CI_SCALE else 0.8
JOBS = min(os.cpu_count() or 1, 4)


def _report(num, name, detail=""):
    suffix = f"   [{detail}]" if detail else ""
    print(f"\nACCEPTANCE {num} ({name}): PASS{suffix}")


def test_acceptance_1_penalty_arithmetic():
    """BIC_joint - BIC_N = 6.1559 +- 1e-3 with N=53, n_tot=247, dim(theta_F)=4."""
    spec = amikacin_final_spec()
    fit = synthetic_fit(spec, loglik=-713.4565, n_subjects=53, n_total=247)
    assert fit.dims.dim_theta_F == 4
    gap = nb.criterion(fit, "bic_joint").value - nb.criterion(fit, "bic_n").value
    assert gap == pytest.approx(6.1559, abs=1e-3)
    assert gap == pytest.approx(1492.624 - 1486.468, abs=1e-3)
    _report(1, "penalty arithmetic", f"gap={gap:.4f}")


def test_acceptance_2_laplace_exactness():
    """50 randomized linear-Gaussian mixed models: |Laplace - closed form| < 1e-6."""
    rng = np.random.default_rng(2025_02)
    worst = 0.0
    times = np.linspace(0.0, 4.0, 6)
    for rep in range(50):
        d_r = 1 + rep % 3
        with_corr = (rep // 3) % 2 == 1 and d_r >= 2
        active = tuple(sorted(rng.choice(3, size=d_r, replace=False).tolist()))
        diag = tuple(k in active for k in range(3))
        pairs = ()
        if with_corr:
            allp = [(a, b) for i, a in enumerate(active) for b in active[i + 1:]]
            take = 1 + int(rng.integers(len(allp)))
            pairs = tuple(allp[:take])
        pattern = nb.CovariancePattern(3, diag, pairs)
        a = float(rng.uniform(0.3, 0.8))
        spec = linear_spec(pattern, a=a)
        pos = {k: i for i, k in enumerate(active)}
        while True:
            sd = rng.uniform(0.4, 1.2, d_r)
            om = np.diag(sd**2)
            for k, l in pairs:
                rho = rng.uniform(-0.5, 0.5)
                om[pos[k], pos[l]] = om[pos[l], pos[k]] = rho * sd[pos[k]] * sd[pos[l]]
            try:
                np.linalg.cholesky(om)
                break
            except np.linalg.LinAlgError:
                continue
        beta = np.array([rng.uniform(-1, 2), rng.uniform(-0.5, 0.8),
                         rng.uniform(-0.2, 0.2)])
        theta = nb.theta_from_components(spec, beta, om, [a])
        Lom = np.linalg.cholesky(om)
        subs = []
        for i in range(30):
            eta3 = np.zeros(3)
            eta3[list(active)] = Lom @ rng.standard_normal(d_r)
            Z = np.column_stack([np.ones_like(times), times, times**2])
            y = Z @ (beta + eta3) + a * rng.standard_normal(times.size)
            subs.append(nb.Subject(id=f"s{i:02d}", times=times, y=y,
                                   regressors={}, covariates={}))
        ds = nb.Dataset(tuple(subs), ())
        got = nb.marginal_loglik_laplace(ds, theta, spec)
        want = linear_marginal_loglik(ds, theta, spec)
        worst = max(worst, abs(got - want))
        assert abs(got - want) < 1e-6
    _report(2, "Laplace exactness", f"worst |err|={worst:.2e} over 50 models")


def test_acceptance_3_quadrature_ladder(oral_m3_dataset):
    """AGQ(1) == Laplace bit-for-bit; |AGQ(9) - AGQ(15)| < 1e-4."""
    ds, theta, spec = oral_m3_dataset
    lap = nb.marginal_loglik_laplace(ds, theta, spec)
    a1 = nb.marginal_loglik_agq(ds, theta, spec, nodes=1)
    assert a1 == lap  # bit-for-bit
    a9 = nb.marginal_loglik_agq(ds, theta, spec, nodes=9)
    a15 = nb.marginal_loglik_agq(ds, theta, spec, nodes=15)
    assert abs(a9 - a15) < 1e-4
    _report(3, "quadrature ladder", f"|AGQ9-AGQ15|={abs(a9 - a15):.2e}")


def test_acceptance_4_estimator_oracle():
    """Linear mixed-model fit matches closed-form ML to 1e-5; gradient < 1e-5."""
    rng = np.random.default_rng(777)
    n, N, mu, omega, sigma = 6, 30, 5.0, 0.8, 0.5
    t = np.arange(1.0, n + 1.0)
    subs = []
    for i in range(N):
        b = omega * rng.standard_normal()
        subs.append(nb.Subject(id=f"s{i:03d}", times=t,
                               y=mu + b + sigma * rng.standard_normal(n),
                               regressors={}, covariates={}))
    ds = nb.Dataset(tuple(subs), ())
    spec = nb.ModelSpec(structural="testconst", transforms=("identity",),
                        covmap=nb.CovariateMap.empty(1),
                        pattern=nb.CovariancePattern(1, (True,)),
                        error=ErrorModelSpec("additive", a=0.5))
    fit = nb.fit_ml(ds, spec)
    ys = np.vstack([s.y for s in ds.subjects])
    mu_hat = ys.mean()
    within = float(((ys - ys.mean(axis=1, keepdims=True)) ** 2).sum())
    sigma2 = within / (N * (n - 1))
    lam = n * float(((ys.mean(axis=1) - mu_hat) ** 2).sum()) / N
    omega_hat = math.sqrt((lam - sigma2) / n)
    got = dict(zip(fit.natural_names, fit.natural_estimates))
    assert got["mu"] == pytest.approx(mu_hat, abs=1e-5)
    assert got["omega_mu"] == pytest.approx(omega_hat, abs=1e-5)
    assert got["a"] == pytest.approx(math.sqrt(sigma2), abs=1e-5)
    g = nb.marginal_gradient(ds, fit.theta_hat, spec)
    gnorm = float(np.max(np.abs(g)))
    assert gnorm < 1e-5
    _report(4, "estimator oracle", f"grad inf-norm={gnorm:.2e}")


DIAG_CANDIDATES = nb.enumerate_cov_structures(3, "diagonal")
CORR_CANDIDATES = nb.enumerate_cov_structures(3, "fixed", fixed_active=(0, 1, 2))
PNAMES = ("ka", "k", "V")


def _diag_summary(sds):
    spec = oral_spec(random=tuple(sds))
    from nlmebic.selection import _model_summary

    return _model_summary(spec, spec.pattern, spec.covmap)


def _run_diag_study(sds, seed):
    spec = oral_spec(random=tuple(sds))
    theta = oral_truth(spec, omega_sd=sds)
    cfg = nb.McConfig(replicates=REPLICATES, true_spec=spec, true_theta=theta,
                      candidates=DIAG_CANDIDATES, criterion="bic_v",
                      design=nb.SimDesign(N=20, times=PK_TIMES, dose=100.0,
                                          seed=seed))
    return nb.mc_selection_study(cfg, jobs=JOBS)


def test_acceptance_5_uncorrelated_study():
    """BIC_V recovers the diagonal generating structure at the published rates."""
    scenarios = [
        ("M0", {}, 5101),
        ("M1V", {"V": 0.3}, 5102),
        ("M2Vk", {"k": 0.1, "V": 0.3}, 5103),
        ("M3", {"ka": 0.2, "k": 0.1, "V": 0.3}, 5104),
    ]
    details = []
    for name, sds, seed in scenarios:
        res = _run_diag_study(sds, seed)
        freq = res.frequencies
        true_summary = _diag_summary(sds)
        if name == "M3":
            # the paper reports roughly half M_3 and otherwise M_{2,ka,V}
            other = _diag_summary({"ka": 0.2, "V": 0.3})
            joint = freq[true_summary] + freq[other]
            details.append(f"{name}: true={freq[true_summary]:.2f} "
                           f"+kaV={freq[other]:.2f}")
            assert joint > JOINT, f"{name}: joint frequency {joint:.2f}"
        else:
            details.append(f"{name}: true={freq[true_summary]:.2f}")
            assert freq[true_summary] > MAJORITY, \
                f"{name}: frequency {freq[true_summary]:.2f}"
        assert res.failed <= REPLICATES // 10
    _report(5, "uncorrelated-structure study", "; ".join(details))


def test_acceptance_6_correlated_study():
    """Frequency of the generating correlated structure grows with the correlation;
    the modal wrong choice is the no-correlation structure."""
    spec = oral_spec(correlations=(("ka", "V"),))
    from nlmebic.selection import _model_summary

    true_summary = _model_summary(spec, spec.pattern, spec.covmap)
    diag3 = nb.CovariancePattern(3, (True,) * 3)
    omega0_summary = _model_summary(spec, diag3, spec.covmap)
    freqs = []
    wrong_counts: dict[str, int] = {}
    for j, rho in enumerate((0.3, 0.5, 0.8)):
        theta = oral_truth(spec, omega_sd={"ka": 0.2, "k": 0.1, "V": 0.3},
                           corr=(("ka", "V", rho),))
        cfg = nb.McConfig(replicates=REPLICATES, true_spec=spec, true_theta=theta,
                          candidates=CORR_CANDIDATES, criterion="bic_v",
                          design=nb.SimDesign(N=20, times=PK_TIMES, dose=100.0,
                                              seed=6201 + j))
        res = nb.mc_selection_study(cfg, jobs=JOBS)
        freqs.append(res.frequencies[true_summary])
        for s, c in res.counts.items():
            if s != true_summary:
                wrong_counts[s] = wrong_counts.get(s, 0) + c
    assert freqs[1] >= freqs[0], f"freq(0.5)={freqs[1]:.2f} < freq(0.3)={freqs[0]:.2f}"
    assert freqs[2] >= freqs[1], f"freq(0.8)={freqs[2]:.2f} < freq(0.5)={freqs[1]:.2f}"
    modal_wrong = max(wrong_counts.items(), key=lambda kv: kv[1])[0]
    assert modal_wrong == omega0_summary, f"modal wrong choice {modal_wrong}"
    _report(6, "correlated-structure study",
            "freq(rho)=" + ", ".join(f"{f:.2f}" for f in freqs))


def test_acceptance_7_stepwise_properties(tmp_path):
    """Monotone accepted values, termination, 6-candidate covariate phases,
    byte-identical traces under rerun and any jobs count."""
    rng = np.random.default_rng(42)
    N = 40
    covs = {name: tuple(rng.uniform(-1, 1, N).round(3))
            for name in ("ClCr", "w", "PF")}
    spec_true = nb.parse_model_doc({
        "structural": "onecpt_infusion", "transforms": {"k": "log", "V": "log"},
        "random": ["k", "V"], "covariates": {"k": ["ClCr"], "V": ["w"]},
        "error": {"kind": "additive", "a": 0.5}})
    theta_true = nb.theta_from_components(
        spec_true, beta=[np.log(0.2), 0.5, np.log(20.0), 0.4],
        omega=np.diag([0.04, 0.09]), error_params=[0.5])
    ds = nb.simulate_dataset(
        spec_true, theta_true,
        nb.SimDesign(N=N, times=(0.5, 1, 2, 4, 8, 12, 24), dose=1000.0, seed=5,
                     extra_regressors=(("tD", 0.0), ("tinf", 0.5)),
                     covariates=tuple(covs.items())))
    traces = []
    for jobs in (1, 2):
        opts = StepwiseOptions(direction="forward", cov_mode="full",
                               error=ErrorModelSpec("additive"), jobs=jobs)
        trace = nb.stepwise_select(ds, "onecpt_infusion", ("log", "log"),
                                   ("ClCr", "w", "PF"), "bic_joint", opts)
        p = tmp_path / f"trace{jobs}.csv"
        trace.to_csv(p)
        traces.append((trace, p.read_bytes()))
    trace, raw = traces[0]
    assert raw == traces[1][1]  # byte-identical for any jobs
    assert len(trace.steps) <= 50
    vals = trace.accepted_values()
    assert all(b < a - 1e-6 for a, b in zip(vals[1:], vals[2:]))
    cov_steps = [s for s in trace.steps if s.phase == "covariate"]
    assert len(cov_steps[0].candidates) == 6  # 2 parameters x 3-covariate pool
    accepted = [s.accepted for s in trace.steps if s.accepted]
    assert len(accepted) == len(set(accepted))  # no model repeats
    opts = StepwiseOptions(direction="forward", cov_mode="full",
                           error=ErrorModelSpec("additive"), jobs=1)
    rerun = nb.stepwise_select(ds, "onecpt_infusion", ("log", "log"),
                               ("ClCr", "w", "PF"), "bic_joint", opts)
    p2 = tmp_path / "rerun.csv"
    rerun.to_csv(p2)
    assert p2.read_bytes() == raw
    _report(7, "stepwise properties",
            f"{len(trace.steps)} steps, {len(vals)} accepted moves")


def test_acceptance_8_criterion_identities():
    """1000 randomized tuples satisfy both hybrid-penalty identities to 1e-9."""
    rng = np.random.default_rng(88)
    specs = [oral_spec(), oral_spec(random=("V",)),
             oral_spec(random=("k", "V")), amikacin_final_spec(),
             oral_spec(correlations=(("ka", "V"),)),
             oral_spec(random=())]
    worst = 0.0
    for _ in range(1000):
        spec = specs[rng.integers(len(specs))]
        N = int(rng.integers(5, 1000))
        n_tot = N * int(rng.integers(2, 40))
        fit = synthetic_fit(spec, loglik=float(rng.normal(0.0, 800.0)),
                            n_subjects=N, n_total=n_tot)
        dims = fit.dims
        gap = math.log(n_tot) - math.log(N)
        j = nb.criterion(fit, "bic_joint").value
        e1 = abs(j - (nb.criterion(fit, "bic_n").value + dims.dim_theta_F * gap))
        e2 = abs(j - (nb.criterion(fit, "bic_ntot").value - dims.dim_theta_R * gap))
        worst = max(worst, e1, e2)
        assert e1 < 1e-9 and e2 < 1e-9
    _report(8, "criterion identities", f"worst |err|={worst:.2e}")
