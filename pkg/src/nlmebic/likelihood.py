"""Conditional and marginal log-likelihoods: EB modes, Laplace, adaptive GH.

Two execution paths compute identical quantities:

* a jitted kernel path (`kernels`) for built-in structural models when numba
  is enabled, and
* a generic vectorized numpy path used for user-registered models or when
  NLMEBIC_BACKEND=numpy.

Per-subject contributions are independent (pure map) and reduced in fixed
subject order, so results do not depend on worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .data import Dataset, ModelSpec, Subject
from .errors import (
    GridTooLargeError,
    InnerNonConvergenceError,
    InputError,
    NonFiniteLikelihoodError,
)
from .params import ThetaVector, pack, unpack
from .transforms import transform_codes

GRID_CAP = 100_000
LOG2PI = kernels.LOG2PI


@dataclass(frozen=True)
class EBResult:
    """Empirical-Bayes mode of one subject's random components."""

    psi_hat: np.ndarray       # natural-scale individual parameters at the mode
    eta_hat: np.ndarray       # random-effect coordinates (active components)
    neg_hessian: np.ndarray   # negative Hessian of the joint objective at the mode
    converged: bool
    inner_iterations: int


@lru_cache(maxsize=64)
def _gh_grid(nodes: int, d_r: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite grid: abscissas (Q, d_r) and log w_q + |x_q|^2.

    One node reproduces the Laplace approximation through the same code path.
    """
    if nodes < 1:
        raise InputError("quadrature needs nodes >= 1")
    if d_r > 0 and nodes ** d_r > GRID_CAP:
        raise GridTooLargeError(
            f"{nodes}^{d_r} quadrature points exceed the cap of {GRID_CAP}"
        )
    x, w = np.polynomial.hermite.hermgauss(nodes)
    logw = np.log(w)
    if d_r == 0:
        return np.zeros((1, 0)), np.zeros(1)
    grids = np.meshgrid(*([x] * d_r), indexing="ij")
    xgrid = np.column_stack([g.reshape(-1) for g in grids])
    lw = np.meshgrid(*([logw] * d_r), indexing="ij")
    logwsum = np.add.reduce([g.reshape(-1) for g in lw])
    logwsq = logwsum + np.sum(xgrid * xgrid, axis=1)
    return np.ascontiguousarray(xgrid), np.ascontiguousarray(logwsq)


# ---------------------------------------------------------------------------
# Generic (numpy) path; mirrors kernels.py
# ---------------------------------------------------------------------------

def _np_transform(phi, codes):
    psi = phi.copy()
    is_log = codes == 1
    is_logit = codes == 2
    psi[is_log] = np.exp(phi[is_log])
    psi[is_logit] = 1.0 / (1.0 + np.exp(-phi[is_logit]))
    return psi


def _np_tprime(phi, codes):
    out = np.ones_like(phi)
    is_log = codes == 1
    is_logit = codes == 2
    out[is_log] = np.exp(phi[is_log])
    p = 1.0 / (1.0 + np.exp(-phi[is_logit]))
    out[is_logit] = p * (1.0 - p)
    return out


class _GenericSubject:
    """Inner-problem state for one subject on the numpy path."""

    __slots__ = ("t", "y", "R", "mean_fn", "jac_fn", "tcodes", "ridx",
                 "kind", "a", "b")

    def __init__(self, t, y, R, mean_fn, jac_fn, tcodes, ridx, kind, a, b):
        self.t, self.y, self.R = t, y, R
        self.mean_fn = mean_fn
        self.jac_fn = jac_fn
        self.tcodes, self.ridx = tcodes, ridx
        self.kind, self.a, self.b = kind, a, b

    def _mean(self, psi):
        with np.errstate(all="ignore"):
            f = np.asarray(self.mean_fn(self.t, self.R, psi), dtype=float)
        if f.shape != self.t.shape or not np.all(np.isfinite(f)):
            return None
        return f

    def _jac_columns(self, psi):
        """Columns of d mean / d psi for the active components."""
        if self.jac_fn is not None:
            with np.errstate(all="ignore"):
                J = np.asarray(self.jac_fn(self.t, self.R, psi), dtype=float)
            if not np.all(np.isfinite(J)):
                return None
            return J[:, self.ridx]
        cols = np.empty((self.t.size, self.ridx.size))
        for m, kk in enumerate(self.ridx):
            h = kernels.JAC_REL_STEP * (1.0 + abs(psi[kk]))
            pp = psi.copy()
            pp[kk] += h
            fp = self._mean(pp)
            pp[kk] = psi[kk] - h
            fm = self._mean(pp)
            if fp is None or fm is None:
                return None
            cols[:, m] = (fp - fm) / (2.0 * h)
        return cols

    def _sd(self, f):
        if self.kind == 0:
            s = np.full_like(f, self.a)
        elif self.kind == 1:
            s = self.b * np.abs(f)
        else:
            s = self.a + self.b * f
        return np.maximum(s, kernels.SD_FLOOR)

    def _psi(self, phi0, eta):
        phi = phi0.copy()
        phi[self.ridx] += eta
        return phi, _np_transform(phi, self.tcodes)

    def cond_ll(self, f):
        s = self._sd(f)
        r = (self.y - f) / s
        return float(np.sum(-0.5 * LOG2PI - np.log(s) - 0.5 * r * r))

    def joint_obj(self, phi0, prec, omega_logdet, eta):
        _, psi = self._psi(phi0, eta)
        f = self._mean(psi)
        if f is None:
            return np.nan
        d_r = self.ridx.size
        quad = float(eta @ prec @ eta)
        return self.cond_ll(f) - 0.5 * quad - 0.5 * (d_r * LOG2PI + omega_logdet)

    def data_grad(self, phi0, eta):
        phi, psi = self._psi(phi0, eta)
        f = self._mean(psi)
        if f is None:
            return None
        J = self._jac_columns(psi)
        if J is None:
            return None
        s = self._sd(f)
        if self.kind == 0:
            sp = np.zeros_like(f)
        elif self.kind == 1:
            sp = np.where(s <= kernels.SD_FLOOR, 0.0, self.b * np.sign(f))
        else:
            sp = np.where(s <= kernels.SD_FLOOR, 0.0, self.b)
        r = self.y - f
        dldf = r / s**2 + sp * (r**2 / s**3 - 1.0 / s)
        tp = _np_tprime(phi, self.tcodes)
        return (dldf @ J) * tp[self.ridx]

    def neg_hess(self, phi0, prec, eta):
        d_r = self.ridx.size
        M = np.empty((d_r, d_r))
        for m in range(d_r):
            h = kernels.HESS_REL_STEP * (1.0 + abs(eta[m]))
            ep = eta.copy()
            ep[m] += h
            gp = self.data_grad(phi0, ep)
            ep[m] = eta[m] - h
            gm = self.data_grad(phi0, ep)
            if gp is None or gm is None:
                return None
            M[:, m] = (gp - gm) / (2.0 * h)
        return -0.5 * (M + M.T) + prec

    def newton(self, phi0, prec, omega_logdet, eta0, step0, max_inner, gtol):
        eta = eta0.copy()
        obj = self.joint_obj(phi0, prec, omega_logdet, eta)
        if not math.isfinite(obj):
            eta[:] = 0.0
            obj = self.joint_obj(phi0, prec, omega_logdet, eta)
            if not math.isfinite(obj):
                return eta, obj, np.inf, False, 0, kernels.ERR_NONFINITE
        gnorm = np.inf
        iters = 0
        for it in range(max_inner):
            iters = it
            gdat = self.data_grad(phi0, eta)
            if gdat is None:
                return eta, obj, gnorm, False, iters, kernels.ERR_NONFINITE
            g = gdat - prec @ eta
            gnorm = float(np.linalg.norm(g))
            if gnorm < gtol:
                return eta, obj, gnorm, True, iters, kernels.ERR_OK
            H = self.neg_hess(phi0, prec, eta)
            if H is None:
                return eta, obj, gnorm, False, iters, kernels.ERR_NONFINITE
            L, _ = _chol_ridged_np(H)
            if L is None:
                return eta, obj, gnorm, False, iters, kernels.ERR_FACTORIZATION
            p = _chol_solve_np(L, g)
            if float(np.linalg.norm(p)) <= 1e-10 * (1.0 + float(np.linalg.norm(eta))):
                # mode cannot move at float precision (huge-curvature case)
                return eta + p, obj, gnorm, True, iters + 1, kernels.ERR_OK
            slope = float(g @ p)
            if slope <= 0.0:
                p = g
                slope = gnorm * gnorm
            if slope <= 1e-13 * (1.0 + abs(obj)):
                # predicted gain below float resolution: take the raw Newton
                # refinement step that Armijo can no longer certify
                trial = eta + p
                val = self.joint_obj(phi0, prec, omega_logdet, trial)
                if math.isfinite(val):
                    eta, obj = trial, val
                    continue
            tstep = step0
            accepted = False
            for _ in range(60):
                trial = eta + tstep * p
                val = self.joint_obj(phi0, prec, omega_logdet, trial)
                if math.isfinite(val) and val >= obj + 1e-4 * tstep * slope:
                    eta, obj, accepted = trial, val, True
                    break
                tstep *= 0.5
            if not accepted:
                break
        gdat = self.data_grad(phi0, eta)
        if gdat is None:
            return eta, obj, gnorm, False, iters + 1, kernels.ERR_NONFINITE
        gnorm = float(np.linalg.norm(gdat - prec @ eta))
        if gnorm < gtol:
            return eta, obj, gnorm, True, iters + 1, kernels.ERR_OK
        return eta, obj, gnorm, False, iters + 1, kernels.ERR_INNER

    def subject_ll(self, phi0, prec, omega_logdet, xgrid, logwsq, eta0,
                   step0, max_inner, gtol):
        d_r = self.ridx.size
        if d_r == 0:
            psi = _np_transform(phi0, self.tcodes)
            f = self._mean(psi)
            if f is None:
                return np.nan, eta0, False, 0, kernels.ERR_NONFINITE
            value = self.cond_ll(f)
            if not math.isfinite(value):
                return np.nan, eta0, False, 0, kernels.ERR_NONFINITE
            return value, eta0, True, 0, kernels.ERR_OK
        eta, obj, gnorm, conv, iters, err = self.newton(
            phi0, prec, omega_logdet, eta0, step0, max_inner, gtol)
        if (err != kernels.ERR_OK or not conv) and np.any(eta0 != 0.0):
            # a stale warm start can strand the iteration; retry cold
            eta, obj, gnorm, conv, iters, err = self.newton(
                phi0, prec, omega_logdet, np.zeros(d_r), step0, max_inner, gtol)
        if err != kernels.ERR_OK or not conv:
            return (np.nan, np.zeros(d_r), conv, iters,
                    err if err != kernels.ERR_OK else kernels.ERR_INNER)
        H = self.neg_hess(phi0, prec, eta)
        if H is None:
            return np.nan, eta, conv, iters, kernels.ERR_NONFINITE
        L, _ = _chol_ridged_np(H)
        if L is None:
            return np.nan, eta, conv, iters, kernels.ERR_FACTORIZATION
        logdet = float(2.0 * np.sum(np.log(np.diag(L))))
        vals = np.empty(xgrid.shape[0])
        sqrt2 = math.sqrt(2.0)
        for q in range(xgrid.shape[0]):
            z = np.linalg.solve(L.T, xgrid[q]) if d_r else xgrid[q]
            v = self.joint_obj(phi0, prec, omega_logdet, eta + sqrt2 * z)
            vals[q] = v + logwsq[q] if math.isfinite(v) else -np.inf
        vmax = float(np.max(vals))
        if not math.isfinite(vmax):
            return np.nan, eta, conv, iters, kernels.ERR_NONFINITE
        ll = (0.5 * d_r * math.log(2.0) - 0.5 * logdet
              + vmax + math.log(float(np.sum(np.exp(vals - vmax)))))
        return ll, eta, conv, iters, kernels.ERR_OK


def _chol_ridged_np(H):
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    lam = kernels.RIDGE_START
    eye = np.eye(H.shape[0])
    for _ in range(14):
        try:
            return np.linalg.cholesky(H + lam * eye), lam
        except np.linalg.LinAlgError:
            lam *= 10.0
    return None, -1.0


def _chol_solve_np(L, rhs):
    z = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, z)


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

class LikelihoodEvaluator:
    """Precompiled (dataset, spec) likelihood with optional warm-started modes.

    backend: None selects the jitted kernel when available for this model,
    "numpy" forces the generic path, "numba" requires the kernel path.
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec, nodes: int = 1,
                 backend: str | None = None):
        spec.validate_against(dataset)
        model = spec.model
        self.dataset = dataset
        self.spec = spec
        self.nodes = int(nodes)
        d = model.arity
        self.d_r = spec.pattern.d_r
        if self.nodes > 1 and self.d_r > 4:
            raise InputError("adaptive quadrature supports at most 4 random components")
        self.tcodes = transform_codes(spec.transforms)
        self.ridx = np.array(spec.pattern.active, dtype=np.int64)
        self.xgrid, self.logwsq = _gh_grid(self.nodes, self.d_r)
        if backend not in (None, "numpy", "numba"):
            raise InputError(f"unknown backend {backend!r}")
        if backend == "numba" and not (kernels.NUMBA_ENABLED and model.kernel_id > 0):
            raise InputError("numba backend unavailable for this model")
        self.use_kernel = (backend != "numpy" and kernels.NUMBA_ENABLED
                           and model.kernel_id > 0)
        self.subject_ids = [s.id for s in dataset.subjects]
        ts, ys, Rs, offs = [], [], [], [0]
        for s in dataset.subjects:
            ts.append(s.times)
            ys.append(s.y)
            Rs.append(s.regressor_matrix(model.regressors))
            offs.append(offs[-1] + s.n)
        self.off = np.array(offs, dtype=np.int64)
        self.t_all = np.ascontiguousarray(np.concatenate(ts), dtype=np.float64)
        self.y_all = np.ascontiguousarray(np.concatenate(ys), dtype=np.float64)
        self.R_all = np.ascontiguousarray(np.vstack(Rs), dtype=np.float64)
        n_sub = dataset.n_subjects
        self._designs = []
        for covs in spec.covmap.entries:
            if covs:
                self._designs.append(np.column_stack(
                    [dataset.covariate_values(c) for c in covs]))
            else:
                self._designs.append(np.zeros((n_sub, 0)))
        self._d = d
        if not self.use_kernel:
            self._subjects = [
                _GenericSubject(
                    np.asarray(s.times, float), np.asarray(s.y, float),
                    s.regressor_matrix(model.regressors), model.eval_fn,
                    model.jac_fn, self.tcodes, self.ridx,
                    spec.error.kind_code, 0.0, 0.0)
                for s in dataset.subjects
            ]

    def new_warm(self) -> np.ndarray:
        return np.zeros((self.dataset.n_subjects, self.d_r))

    def phi0_matrix(self, theta: ThetaVector) -> np.ndarray:
        """(N, d) linear predictors C_i beta."""
        n_sub = self.dataset.n_subjects
        out = np.empty((n_sub, self._d))
        parts = theta.beta_by_param(self.spec)
        for k in range(self._d):
            coefs = parts[k]
            out[:, k] = coefs[0]
            if coefs.size > 1:
                out[:, k] += self._designs[k] @ coefs[1:]
        return out

    def _omega_terms(self, theta: ThetaVector):
        """(precision, log det) of Omega_R; None when degenerate or overflowed."""
        if self.d_r == 0:
            return np.zeros((0, 0)), 0.0
        om = theta.omega_r(self.spec)
        if not np.all(np.isfinite(om)):
            return None
        try:
            L = np.linalg.cholesky(om)
        except np.linalg.LinAlgError:
            return None
        logdet = float(2.0 * np.sum(np.log(np.diag(L))))
        if not math.isfinite(logdet):
            return None
        linv = np.linalg.solve(L, np.eye(self.d_r))
        prec = linv.T @ linv
        prec = 0.5 * (prec + prec.T)
        if not np.all(np.isfinite(prec)):
            return None
        return np.ascontiguousarray(prec), logdet

    def _error_ab(self, theta: ThetaVector):
        err = self.spec.error
        p = theta.error_params
        if err.kind == "additive":
            return float(p[0]), 0.0
        if err.kind == "proportional":
            return 0.0, float(p[0])
        return float(p[0]), float(p[1])

    def contributions(self, theta: ThetaVector, warm: np.ndarray | None = None,
                      step0: float = 1.0, max_inner: int = 100, gtol: float = 1e-8):
        """Per-subject log-likelihood contributions plus diagnostics.

        Returns (ll (N,), conv (N,), iters (N,), err (N,)); `warm` (if given)
        is updated in place with the new modes.
        """
        theta.validate(self.spec)
        if warm is None:
            warm = self.new_warm()
        n_sub = self.dataset.n_subjects
        out_ll = np.empty(n_sub)
        out_conv = np.empty(n_sub, dtype=np.int64)
        out_iters = np.empty(n_sub, dtype=np.int64)
        out_err = np.empty(n_sub, dtype=np.int64)
        terms = self._omega_terms(theta)
        if terms is None:
            out_ll.fill(np.nan)
            out_conv.fill(0)
            out_iters.fill(0)
            out_err.fill(kernels.ERR_NONFINITE)
            return out_ll, out_conv, out_iters, out_err
        prec, omega_logdet = terms
        phi0 = self.phi0_matrix(theta)
        a, b = self._error_ab(theta)
        kind = self.spec.error.kind_code
        if self.use_kernel:
            kernels._batch_ll(
                self.spec.model.kernel_id, self.off, self.t_all, self.y_all,
                self.R_all, phi0, self.tcodes, self.ridx, prec, omega_logdet,
                kind, a, b, self.xgrid, self.logwsq, warm, step0, max_inner,
                gtol, out_ll, out_conv, out_iters, out_err)
        else:
            for i, sp in enumerate(self._subjects):
                sp.kind, sp.a, sp.b = kind, a, b
                ll, eta, conv, iters, err = sp.subject_ll(
                    phi0[i], prec, omega_logdet, self.xgrid, self.logwsq,
                    warm[i].copy(), step0, max_inner, gtol)
                warm[i] = eta
                out_ll[i] = ll
                out_conv[i] = 1 if conv else 0
                out_iters[i] = iters
                out_err[i] = err
        return out_ll, out_conv, out_iters, out_err

    def loglik(self, theta: ThetaVector, warm: np.ndarray | None = None,
               on_error: str = "raise", step0: float = 1.0,
               max_inner: int = 100, gtol: float = 1e-8) -> float:
        """Total marginal log-likelihood, reduced in fixed subject order."""
        ll, conv, iters, err = self.contributions(theta, warm, step0, max_inner, gtol)
        bad = np.nonzero(err != kernels.ERR_OK)[0]
        if bad.size:
            if on_error == "neginf":
                return -np.inf
            i = int(bad[0])
            sid = self.subject_ids[i]
            if err[i] == kernels.ERR_INNER:
                raise InnerNonConvergenceError(sid, int(iters[i]))
            raise NonFiniteLikelihoodError(sid)
        total = 0.0
        for v in ll:
            total += float(v)
        return total


def conditional_loglik(subject: Subject, psi, spec: ModelSpec) -> float:
    """Sum of Gaussian log-densities of one subject's observations given psi.

    psi is on the natural scale.  Raises NonFiniteLikelihoodError (carrying
    the subject id and observation index) if any prediction is non-finite.
    """
    model = spec.model
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (model.arity,):
        raise InputError(f"psi must have length {model.arity}")
    R = subject.regressor_matrix(model.regressors)
    with np.errstate(all="ignore"):
        f = np.asarray(model.eval_fn(subject.times, R, psi), dtype=float)
    finite = np.isfinite(f)
    if f.shape != subject.times.shape or not np.all(finite):
        j = int(np.nonzero(~finite)[0][0]) if f.shape == subject.times.shape else 0
        raise NonFiniteLikelihoodError(subject.id, j)
    kind = spec.error.kind_code
    a, b = 0.0, 0.0
    p = spec.error.params()
    if spec.error.kind == "additive":
        a = float(p[0])
    elif spec.error.kind == "proportional":
        b = float(p[0])
    else:
        a, b = float(p[0]), float(p[1])
    if kind == 0:
        s = np.full_like(f, a)
    elif kind == 1:
        s = b * np.abs(f)
    else:
        s = a + b * f
    s = np.maximum(s, kernels.SD_FLOOR)
    r = (subject.y - f) / s
    value = float(np.sum(-0.5 * LOG2PI - np.log(s) - 0.5 * r * r))
    if not math.isfinite(value):
        raise NonFiniteLikelihoodError(subject.id)
    return value


def eb_mode(subject: Subject, theta: ThetaVector, spec: ModelSpec,
            damping: float = 1.0, max_inner: int = 100,
            gtol: float = 1e-8) -> EBResult:
    """Empirical-Bayes mode of the joint log-density over random components.

    A damped Newton iteration starts at eta = 0 (data Hessian by central
    differences of the analytic gradient, prior part analytic).  Raises
    InnerNonConvergenceError when the gradient norm stays above tolerance
    after max_inner iterations.
    """
    if spec.pattern.d_r == 0:
        raise InputError("eb_mode requires at least one random component")
    theta.validate(spec)
    ds = Dataset(subjects=(subject,),
                 covariate_names=tuple(subject.covariates))
    ev = LikelihoodEvaluator(ds, spec)
    phi0 = ev.phi0_matrix(theta)[0]
    terms = ev._omega_terms(theta)
    if terms is None:
        raise InputError("Omega_R is not positive definite")
    prec, omega_logdet = terms
    a, b = ev._error_ab(theta)
    kind = spec.error.kind_code
    eta = np.zeros(ev.d_r)
    if ev.use_kernel:
        model = spec.model
        t = np.ascontiguousarray(subject.times, dtype=np.float64)
        y = np.ascontiguousarray(subject.y, dtype=np.float64)
        R = np.ascontiguousarray(subject.regressor_matrix(model.regressors),
                                 dtype=np.float64)
        obj, H, conv, iters, err = kernels._eb_kernel(
            model.kernel_id, t, y, R, phi0, ev.tcodes, ev.ridx, prec,
            omega_logdet, kind, a, b, eta, damping, max_inner, gtol)
        conv = bool(conv)
    else:
        sp = ev._subjects[0]
        sp.kind, sp.a, sp.b = kind, a, b
        eta, obj, gnorm, conv, iters, err = sp.newton(
            phi0, prec, omega_logdet, eta, damping, max_inner, gtol)
        H = sp.neg_hess(phi0, prec, eta)
        if H is None:
            err = kernels.ERR_NONFINITE
    if err == kernels.ERR_NONFINITE:
        raise NonFiniteLikelihoodError(subject.id)
    if not conv:
        raise InnerNonConvergenceError(subject.id, int(iters))
    phi = phi0.copy()
    phi[ev.ridx] += eta
    psi_hat = _np_transform(phi, ev.tcodes)
    return EBResult(psi_hat=psi_hat, eta_hat=np.asarray(eta, float),
                    neg_hessian=np.asarray(H, float), converged=bool(conv),
                    inner_iterations=int(iters))


def marginal_loglik_laplace(dataset: Dataset, theta: ThetaVector,
                            spec: ModelSpec, backend: str | None = None) -> float:
    """Laplace-approximate marginal log-likelihood (exact when no random effects)."""
    return LikelihoodEvaluator(dataset, spec, nodes=1, backend=backend).loglik(theta)


def marginal_loglik_agq(dataset: Dataset, theta: ThetaVector, spec: ModelSpec,
                        nodes: int, backend: str | None = None) -> float:
    """Adaptive Gauss-Hermite marginal log-likelihood; nodes=1 is Laplace bit-for-bit."""
    return LikelihoodEvaluator(dataset, spec, nodes=nodes, backend=backend).loglik(theta)


def marginal_gradient(dataset: Dataset, theta: ThetaVector, spec: ModelSpec,
                      nodes: int = 1) -> np.ndarray:
    """Central finite-difference gradient of the marginal log-likelihood.

    Taken in the packed unconstrained space with step 1e-5 * (1 + |theta_k|);
    each perturbed evaluation restarts from the base-point modes so that flat
    directions differentiate to exactly zero.
    """
    ev = LikelihoodEvaluator(dataset, spec, nodes=nodes)
    x = pack(theta, spec)
    warm = ev.new_warm()
    ev.loglik(theta, warm=warm)
    g = np.empty(x.size)
    for k in range(x.size):
        h = 1e-5 * (1.0 + abs(x[k]))
        xp = x.copy()
        xp[k] += h
        wp = warm.copy()
        fp = ev.loglik(unpack(xp, spec), warm=wp)
        xm = x.copy()
        xm[k] -= h
        wm = warm.copy()
        fm = ev.loglik(unpack(xm, spec), warm=wm)
        g[k] = (fp - fm) / (2.0 * h)
    return g
