"""Maximum-likelihood fitting: initialization, quasi-Newton outer loop, SEs.

Covariates are standardized (centered/scaled) internally before fitting for
optimizer conditioning; estimates are reported back on the original scale and
the constants are stored in the FitResult.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, ModelSpec, Subject, ThetaDims, theta_dims
from .errors import (
    InputError,
    MaxIterationsError,
    NonFiniteObjectiveError,
)
from .likelihood import LikelihoodEvaluator
from .params import ThetaVector, pack, theta_from_components, unpack
from .transforms import inverse_transform, natural_value

GRID_LOG = 10.0 ** np.linspace(-2.5, 2.5, 9)
GRID_IDENTITY = np.array([-100.0, -10.0, -1.0, -0.1, 0.0, 0.1, 1.0, 10.0, 100.0])
GRID_LOGIT = 1.0 / (1.0 + np.exp(-np.linspace(-2.0, 2.0, 9)))


@dataclass(frozen=True)
class FitOptions:
    """Knobs for fit_ml.

    nodes > 1 switches the objective to adaptive Gauss-Hermite quadrature.
    starts > 1 runs jittered multi-starts and keeps the best final objective;
    retries re-starts a failed attempt from a jittered point (multiplicative
    log-normal, sd 0.3).
    """

    nodes: int = 1
    starts: int = 1
    retries: int = 3
    max_iter: int = 500
    grad_tol: float = 1e-6
    fchange_tol: float = 1e-10
    seed: int = 0
    standardize: bool = True


@dataclass(frozen=True)
class FitResult:
    """A fitted model: estimates, diagnostics and reporting metadata."""

    spec: ModelSpec
    theta_hat: ThetaVector
    loglik: float
    converged: bool
    iterations: int
    dims: ThetaDims
    n_subjects: int
    n_total: int
    standardization: dict
    objective_path: tuple[float, ...] = ()
    se: np.ndarray | None = None
    rse_percent: np.ndarray | None = None
    wald_p: dict = field(default_factory=dict)
    se_message: str = ""

    @property
    def natural_names(self) -> tuple[str, ...]:
        return natural_names(self.spec)

    @property
    def natural_estimates(self) -> np.ndarray:
        return natural_from_packed(pack(self.theta_hat, self.spec), self.spec)


# ---------------------------------------------------------------------------
# Reporting layout: natural-scale parameter vector
# ---------------------------------------------------------------------------

def natural_names(spec: ModelSpec) -> tuple[str, ...]:
    names: list[str] = []
    p = spec.param_names
    for k, covs in enumerate(spec.covmap.entries):
        names.append(p[k])
        names.extend(f"beta_{p[k]}:{c}" for c in covs)
    for k in spec.pattern.active:
        names.append(f"omega_{p[k]}")
    for k, l in spec.pattern.pairs:
        names.append(f"corr_{p[k]}:{p[l]}")
    names.extend({"additive": ["a"], "proportional": ["b"],
                  "combined": ["a", "b"]}[spec.error.kind])
    return tuple(names)


def coefficient_names(spec: ModelSpec) -> tuple[str, ...]:
    """Covariate-coefficient entries of the natural vector (Wald-tested)."""
    p = spec.param_names
    return tuple(f"beta_{p[k]}:{c}"
                 for k, covs in enumerate(spec.covmap.entries) for c in covs)


def natural_from_packed(x: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Natural-scale report vector: typical values, coefficients, sds, correlations."""
    theta = unpack(x, spec)
    out: list[float] = []
    parts = theta.beta_by_param(spec)
    for k in range(spec.pattern.d):
        out.append(natural_value(float(parts[k][0]), spec.transforms[k]))
        out.extend(float(v) for v in parts[k][1:])
    om = theta.omega_full(spec)
    for k in spec.pattern.active:
        out.append(math.sqrt(om[k, k]))
    for k, l in spec.pattern.pairs:
        out.append(om[k, l] / math.sqrt(om[k, k] * om[l, l]))
    out.extend(float(v) for v in theta.error_params)
    return np.array(out)


# ---------------------------------------------------------------------------
# Default initial values
# ---------------------------------------------------------------------------

def init_hint(dataset: Dataset, structural: str, transforms) -> tuple[np.ndarray, float, float]:
    """Coarse pooled-curve fit: grid search over natural parameter magnitudes.

    Returns (psi0, residual sd at psi0, mean |prediction|); reusable across
    candidate patterns/covariate maps on the same dataset.
    """
    from .models import get_model

    model = get_model(structural)
    t = np.concatenate([s.times for s in dataset.subjects])
    y = np.concatenate([s.y for s in dataset.subjects])
    R = np.vstack([s.regressor_matrix(model.regressors) for s in dataset.subjects])
    grids = []
    for tr in transforms:
        grids.append({"log": GRID_LOG, "identity": GRID_IDENTITY,
                      "logit": GRID_LOGIT}[tr])
    best_sse, best_psi, best_f = np.inf, None, None
    with np.errstate(all="ignore"):
        for combo in itertools.product(*grids):
            psi = np.array(combo, dtype=float)
            f = np.asarray(model.eval_fn(t, R, psi), dtype=float)
            if f.shape != t.shape or not np.all(np.isfinite(f)):
                continue
            sse = float(np.sum((y - f) ** 2))
            if sse < best_sse:
                best_sse, best_psi, best_f = sse, psi, f
    if best_psi is None:
        raise NonFiniteObjectiveError(
            f"no grid point of {structural!r} produced finite predictions")
    if model.canonicalize is not None:
        best_psi = np.asarray(model.canonicalize(best_psi), dtype=float)
    resid_sd = float(np.sqrt(best_sse / y.size))
    mean_abs_f = float(np.mean(np.abs(best_f)))
    return best_psi, resid_sd, mean_abs_f


def default_init(dataset: Dataset, spec: ModelSpec,
                 hint: tuple[np.ndarray, float, float] | None = None) -> ThetaVector:
    """Spec-documented default start: pooled-grid intercepts, zero coefficients,
    Omega_R = 0.1 I on the pattern, residual-sd error scale."""
    if hint is None:
        hint = init_hint(dataset, spec.structural, spec.transforms)
    psi0, resid_sd, mean_abs_f = hint
    resid_sd = max(resid_sd, 1e-8)
    beta = []
    for k in range(spec.pattern.d):
        beta.append(inverse_transform(float(psi0[k]), spec.transforms[k]))
        beta.extend([0.0] * len(spec.covmap.entries[k]))
    d = spec.pattern.d
    omega = np.zeros((d, d))
    for k in spec.pattern.active:
        omega[k, k] = 0.1
    if spec.error.kind == "additive":
        err = [resid_sd]
    elif spec.error.kind == "proportional":
        err = [resid_sd / mean_abs_f if mean_abs_f > 0 else 0.1]
    else:
        err = [resid_sd, 0.1]
    return theta_from_components(spec, beta, omega, err)


# ---------------------------------------------------------------------------
# Covariate standardization
# ---------------------------------------------------------------------------

def _standardization(dataset: Dataset, spec: ModelSpec) -> dict:
    consts = {}
    for c in spec.covmap.used_covariates():
        vals = dataset.covariate_values(c)
        mu = float(np.mean(vals))
        sd = float(np.std(vals))
        consts[c] = (mu, sd if sd > 0.0 else 1.0)
    return consts


def _standardized_dataset(dataset: Dataset, consts: dict) -> Dataset:
    if not consts:
        return dataset
    subjects = []
    for s in dataset.subjects:
        covs = dict(s.covariates)
        for c, (mu, sd) in consts.items():
            covs[c] = (covs[c] - mu) / sd
        subjects.append(Subject(id=s.id, times=s.times, y=s.y,
                                regressors=s.regressors, covariates=covs))
    return Dataset(subjects=tuple(subjects), covariate_names=dataset.covariate_names)


def _beta_to_std(theta: ThetaVector, spec: ModelSpec, consts: dict) -> ThetaVector:
    beta = theta.beta.copy()
    i = 0
    for covs in spec.covmap.entries:
        icpt = i
        for j, c in enumerate(covs, start=1):
            mu, sd = consts[c]
            beta[icpt] += beta[i + j] * mu
            beta[i + j] *= sd
        i += 1 + len(covs)
    return ThetaVector(beta=beta, omega_chol=theta.omega_chol,
                       error_params=theta.error_params)


def _beta_from_std(theta: ThetaVector, spec: ModelSpec, consts: dict) -> ThetaVector:
    beta = theta.beta.copy()
    i = 0
    for covs in spec.covmap.entries:
        icpt = i
        for j, c in enumerate(covs, start=1):
            mu, sd = consts[c]
            beta[i + j] /= sd
            beta[icpt] -= beta[i + j] * mu
        i += 1 + len(covs)
    return ThetaVector(beta=beta, omega_chol=theta.omega_chol,
                       error_params=theta.error_params)


# ---------------------------------------------------------------------------
# Quasi-Newton (BFGS, Armijo backtracking)
# ---------------------------------------------------------------------------

def _minimize_bfgs(fun, grad, x0, grad_tol, fchange_tol, max_iter):
    """Minimize fun; stops on gradient inf-norm or relative objective change.

    Returns (x, f, g, iterations, converged, path) where path holds the
    accepted objective values (monotone non-increasing).
    """
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    if not math.isfinite(f):
        raise NonFiniteObjectiveError("objective is non-finite at the starting point")
    g = grad(x)
    n = x.size
    eye = np.eye(n)
    hinv = eye.copy()
    path = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if float(np.max(np.abs(g))) < grad_tol:
            converged = True
            it -= 1
            break
        p = -hinv @ g
        slope = float(g @ p)
        if slope >= 0.0:
            hinv = eye.copy()
            p = -g
            slope = -float(g @ g)
        tstep = 1.0
        accepted = False
        fn = np.inf
        for _ in range(60):
            xn = x + tstep * p
            fn = fun(xn)
            if math.isfinite(fn) and fn <= f + 1e-4 * tstep * slope:
                accepted = True
                break
            tstep *= 0.5
        if not accepted:
            # no representable descent left along a descent direction: the
            # relative-objective-change criterion is met at float resolution
            if math.isfinite(fn) and abs(fn - f) <= fchange_tol * (1.0 + abs(f)):
                converged = True
            break
        gn = grad(xn)
        s = xn - x
        yv = gn - g
        df = f - fn
        x, f, g = xn, fn, gn
        path.append(f)
        if float(np.max(np.abs(g))) < grad_tol:
            converged = True
            break
        if df <= fchange_tol * (1.0 + abs(f)):
            converged = True
            break
        sy = float(s @ yv)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            if it == 1:
                # curvature-scaled reset of the initial inverse Hessian
                hinv = (sy / float(yv @ yv)) * eye
            rho = 1.0 / sy
            v1 = eye - rho * np.outer(s, yv)
            hinv = v1 @ hinv @ v1.T + rho * np.outer(s, s)
    return x, f, g, it, converged, tuple(path)


class _Objective:
    """Negative marginal log-likelihood in packed space with warm-started modes."""

    def __init__(self, ev: LikelihoodEvaluator, spec: ModelSpec):
        self.ev = ev
        self.spec = spec
        self.warm = ev.new_warm()

    def fun(self, x):
        theta = unpack(x, self.spec)
        return -self.ev.loglik(theta, warm=self.warm, on_error="neginf")

    def grad(self, x):
        g = np.empty(x.size)
        base = self.warm
        f0 = None
        for k in range(x.size):
            h = 1e-5 * (1.0 + abs(x[k]))
            xp = x.copy()
            xp[k] += h
            fp = -self.ev.loglik(unpack(xp, self.spec), warm=base.copy(),
                                 on_error="neginf")
            xm = x.copy()
            xm[k] -= h
            fm = -self.ev.loglik(unpack(xm, self.spec), warm=base.copy(),
                                 on_error="neginf")
            if math.isfinite(fp) and math.isfinite(fm):
                g[k] = (fp - fm) / (2.0 * h)
                continue
            # a neighbor fell off the likelihood's domain: one-sided difference
            if f0 is None:
                f0 = -self.ev.loglik(unpack(x, self.spec), warm=base.copy(),
                                     on_error="neginf")
            if math.isfinite(fp) and math.isfinite(f0):
                g[k] = (fp - f0) / h
            elif math.isfinite(fm) and math.isfinite(f0):
                g[k] = (f0 - fm) / h
            else:
                g[k] = 0.0
        return g


def _jittered(x0, n_beta, rng):
    x = x0.copy()
    x[:n_beta] += rng.normal(0.0, 0.3, n_beta) * (1.0 + np.abs(x0[:n_beta]))
    x[n_beta:] += rng.normal(0.0, 0.3, x.size - n_beta)
    return x


def fit_ml(dataset: Dataset, spec: ModelSpec, init: ThetaVector | None = None,
           opts: FitOptions | None = None) -> FitResult:
    """Maximize the marginal log-likelihood by BFGS with backtracking.

    Stops when the gradient inf-norm drops below grad_tol or the relative
    objective change below fchange_tol.  Raises NonFiniteObjectiveError when
    the likelihood is non-finite at the start and MaxIterationsError when no
    attempt converges (the exception carries the best-effort result).
    """
    opts = opts or FitOptions()
    spec.validate_against(dataset)
    theta0 = (init or default_init(dataset, spec)).validate(spec)
    consts = _standardization(dataset, spec) if opts.standardize else {}
    ds_fit = _standardized_dataset(dataset, consts)
    ev = LikelihoodEvaluator(ds_fit, spec, nodes=opts.nodes)
    x0 = pack(_beta_to_std(theta0, spec, consts), spec)
    n_beta = spec.covmap.n_terms

    best = None        # (f, order, x, iters, path)
    best_failed = None
    order = 0
    first_error: Exception | None = None
    for s_idx in range(opts.starts):
        for r_idx in range(opts.retries + 1):
            if s_idx == 0 and r_idx == 0:
                xs = x0
            else:
                rng = np.random.default_rng([opts.seed, s_idx, r_idx, 9001])
                xs = _jittered(x0, n_beta, rng)
            objective = _Objective(ev, spec)
            try:
                x, f, g, iters, conv, path = _minimize_bfgs(
                    objective.fun, objective.grad, xs,
                    opts.grad_tol, opts.fchange_tol, opts.max_iter)
            except NonFiniteObjectiveError as e:
                if s_idx == 0 and r_idx == 0:
                    raise
                first_error = first_error or e
                continue
            order += 1
            entry = (f, order, x, iters, path)
            if conv:
                if best is None or f < best[0]:
                    best = entry
                break
            if best_failed is None or f < best_failed[0]:
                best_failed = entry
        # next start regardless; retries only loop on failure

    def _result(entry, converged):
        f, _, x, iters, path = entry
        theta_hat = _beta_from_std(unpack(x, spec), spec, consts)
        loglik = LikelihoodEvaluator(dataset, spec, nodes=opts.nodes).loglik(theta_hat)
        return FitResult(spec=spec, theta_hat=theta_hat, loglik=loglik,
                         converged=converged, iterations=iters,
                         dims=theta_dims(spec), n_subjects=dataset.n_subjects,
                         n_total=dataset.n_total, standardization=consts,
                         objective_path=path)

    if best is None:
        partial = _result(best_failed, False) if best_failed is not None else None
        raise MaxIterationsError(
            f"no optimization attempt converged within {opts.max_iter} iterations",
            result=partial)
    return _result(best, True)


# ---------------------------------------------------------------------------
# Observed-information standard errors
# ---------------------------------------------------------------------------

def standard_errors(fit: FitResult, dataset: Dataset, spec: ModelSpec) -> FitResult:
    """Augment a fit with delta-method SEs, RSE% and Wald p-values.

    The observed information is the finite-difference Hessian of the negative
    log-likelihood in packed space, mapped to the natural report scale through
    the packing Jacobian.  A singular information matrix marks SEs unavailable
    (the fit itself is still returned).
    """
    if not fit.converged:
        raise InputError("standard_errors requires a converged fit")
    x = pack(fit.theta_hat, spec)
    ev = LikelihoodEvaluator(dataset, spec, nodes=1)
    warm = ev.new_warm()
    ev.loglik(fit.theta_hat, warm=warm)

    def grad_at(xv):
        g = np.empty(xv.size)
        for k in range(xv.size):
            h = 1e-5 * (1.0 + abs(xv[k]))
            xp = xv.copy()
            xp[k] += h
            fp = ev.loglik(unpack(xp, spec), warm=warm.copy(), on_error="neginf")
            xm = xv.copy()
            xm[k] -= h
            fm = ev.loglik(unpack(xm, spec), warm=warm.copy(), on_error="neginf")
            g[k] = (fp - fm) / (2.0 * h)
        return g

    n = x.size
    hess = np.empty((n, n))
    for k in range(n):
        h = 1e-3 * (1.0 + abs(x[k]))
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        hess[:, k] = (grad_at(xp) - grad_at(xm)) / (2.0 * h)
    info = -0.5 * (hess + hess.T)
    lam = np.linalg.eigvalsh(info)
    if lam[0] <= 1e-6 * max(lam[-1], 0.0):
        # a flat or noise-level direction (collinearity, boundary variance)
        return replace(fit, se=None, rse_percent=None, wald_p={},
                       se_message="singular observed information; SEs unavailable")
    L = np.linalg.cholesky(info)
    linv = np.linalg.solve(L, np.eye(n))
    cov_x = linv.T @ linv

    nat0 = natural_from_packed(x, spec)
    jac = np.empty((nat0.size, n))
    for k in range(n):
        h = 1e-6 * (1.0 + abs(x[k]))
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        jac[:, k] = (natural_from_packed(xp, spec) - natural_from_packed(xm, spec)) / (2.0 * h)
    cov_nat = jac @ cov_x @ jac.T
    var = np.diag(cov_nat).copy()
    se = np.where(var >= 0.0, np.sqrt(np.maximum(var, 0.0)), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        rse = 100.0 * se / np.abs(nat0)
    names = natural_names(spec)
    coef = set(coefficient_names(spec))
    wald = {}
    for i, name in enumerate(names):
        if name in coef and np.isfinite(se[i]) and se[i] > 0.0:
            z = abs(nat0[i]) / se[i]
            wald[name] = wald_p_value(z)
    return replace(fit, se=se, rse_percent=rse, wald_p=wald, se_message="")


def wald_p_value(z: float) -> float:
    """Two-sided Gaussian p-value: 2 (1 - Phi(|z|))."""
    return float(math.erfc(abs(z) / math.sqrt(2.0)))
