"""Jitted hot kernels: per-subject EB mode search, Laplace and AGQ contributions.

These loops dominate runtime in fits and Monte Carlo studies.  When numba is
available (and NLMEBIC_BACKEND != "numpy") every function here is compiled
with @njit(cache=True); built-in structural models are dispatched by integer
id inside the kernel.  User-registered models and the numpy backend use the
generic vectorized path in `likelihood` instead.

Arithmetic must mirror models.py exactly (same expm1 rewrites) so the two
backends agree to rounding.
"""

from __future__ import annotations

import math
import os

import numpy as np

_BACKEND_ENV = os.environ.get("NLMEBIC_BACKEND", "auto").strip().lower()

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and _BACKEND_ENV != "numpy"


def _jit(fn):
    if NUMBA_ENABLED:
        return njit(cache=True, fastmath=False)(fn)
    return fn


LOG2PI = math.log(2.0 * math.pi)
SD_FLOOR = 1e-10
ORAL_KA_TOL = 1e-8
JAC_REL_STEP = 1e-6      # FD fallback step for d mean / d psi (no analytic jac)
HESS_REL_STEP = 1e-5     # FD step for the data Hessian in eta space
RIDGE_START = 1e-8

ERR_OK = 0
ERR_NONFINITE = 1
ERR_INNER = 2
ERR_FACTORIZATION = 3


@_jit
def _tf(phi, code):
    if code == 1:
        return math.exp(phi)
    if code == 2:
        return 1.0 / (1.0 + math.exp(-phi))
    return phi


@_jit
def _tfp(phi, code):
    if code == 1:
        return math.exp(phi)
    if code == 2:
        p = 1.0 / (1.0 + math.exp(-phi))
        return p * (1.0 - p)
    return 1.0


@_jit
def _mean_fill(model_id, t, R, psi, out):
    n = t.shape[0]
    if model_id == 1:
        k = psi[0]
        V = psi[1]
        if not (k > 0.0 and V > 0.0):
            return False
        for j in range(n):
            dose = R[j, 0]
            tD = R[j, 1]
            tinf = R[j, 2]
            tau = t[j] - tD
            if tau < 0.0 or tinf <= 0.0:
                return False
            den = tinf * k * V
            if den <= 0.0:  # underflow of the product despite positive factors
                return False
            pref = dose / den
            if tau <= tinf:
                out[j] = pref * (-math.expm1(-k * tau))
            else:
                out[j] = pref * (-math.expm1(-k * tinf)) * math.exp(-k * (tau - tinf))
    elif model_id == 2:
        Q = psi[0]
        Cl = psi[1]
        V1 = psi[2]
        V2 = psi[3]
        if not (Q > 0.0 and Cl > 0.0 and V1 > 0.0 and V2 > 0.0):
            return False
        s = Q / V1 + Q / V2 + Cl / V1
        disc = s * s - 4.0 * (Q / V2) * (Cl / V1)
        if disc <= 1e-12 * s * s:
            return False
        root = math.sqrt(disc)
        beta = 0.5 * (s - root)
        if beta <= 0.0:
            return False
        den = V1 * V2 * beta
        if den <= 0.0:
            return False
        alpha = (Q * Cl) / den
        if alpha - beta <= 0.0:
            return False
        A = (1.0 / V1) * (alpha - Q / V2) / (alpha - beta)
        B = (1.0 / V1) * (beta - Q / V2) / (beta - alpha)
        for j in range(n):
            dose = R[j, 0]
            tD = R[j, 1]
            tinf = R[j, 2]
            tau = t[j] - tD
            if tau < 0.0 or tinf <= 0.0:
                return False
            pref = dose / tinf
            if tau <= tinf:
                out[j] = pref * ((A / alpha) * (-math.expm1(-alpha * tau))
                                 + (B / beta) * (-math.expm1(-beta * tau)))
            else:
                out[j] = pref * (
                    (A / alpha) * (-math.expm1(-alpha * tinf))
                    * math.exp(-alpha * (tau - tinf))
                    + (B / beta) * (-math.expm1(-beta * tinf))
                    * math.exp(-beta * (tau - tinf))
                )
    elif model_id == 3:
        ka = psi[0]
        k = psi[1]
        V = psi[2]
        if not (ka > 0.0 and k > 0.0 and V > 0.0):
            return False
        near = abs(ka - k) < ORAL_KA_TOL * max(ka, k)
        den = V if near else V * (ka - k)
        if den == 0.0:
            return False
        for j in range(n):
            dose = R[j, 0]
            if t[j] < 0.0:
                return False
            if near:
                out[j] = dose * k * t[j] * math.exp(-k * t[j]) / den
            else:
                out[j] = (dose * ka / den * math.exp(-k * t[j])
                          * (-math.expm1(-(ka - k) * t[j])))
    else:
        return False
    for j in range(n):
        if not math.isfinite(out[j]):
            return False
    return True


@_jit
def _mean_jac(model_id, t, R, psi, f, J):
    """Mean plus full (n, d) Jacobian d f / d psi.

    Analytic for the one-compartment models; central differences for the
    two-compartment model (mirrors the generic-path fallback).
    """
    n = t.shape[0]
    if not _mean_fill(model_id, t, R, psi, f):
        return False
    if model_id == 1:
        k = psi[0]
        V = psi[1]
        den = 0.0
        for j in range(n):
            dose = R[j, 0]
            tD = R[j, 1]
            tinf = R[j, 2]
            tau = t[j] - tD
            den = tinf * k * V
            if den <= 0.0:
                return False
            pref = dose / den
            if tau <= tinf:
                J[j, 0] = -f[j] / k + pref * tau * math.exp(-k * tau)
            else:
                J[j, 0] = -f[j] / k + pref * math.exp(-k * (tau - tinf)) * (
                    tinf * math.exp(-k * tinf)
                    - (tau - tinf) * (-math.expm1(-k * tinf)))
            J[j, 1] = -f[j] / V
    elif model_id == 3:
        ka = psi[0]
        k = psi[1]
        V = psi[2]
        near = abs(ka - k) < ORAL_KA_TOL * max(ka, k)
        den = V if near else V * (ka - k)
        den2 = 1.0 if near else (ka - k) * (ka - k)
        if den == 0.0 or den2 == 0.0 or V * V == 0.0:
            return False
        for j in range(n):
            dose = R[j, 0]
            ekt = math.exp(-k * t[j])
            if near:
                base = dose * t[j] * ekt / den
                J[j, 0] = base * (1.0 - 0.5 * k * t[j])
                J[j, 1] = -0.5 * dose * k * t[j] * t[j] * ekt / den
                J[j, 2] = -dose * k * t[j] * ekt / (V * V)
            else:
                A = dose * ka / den
                g = ekt * (-math.expm1(-(ka - k) * t[j]))
                dA_ka = -dose * k / (V * den2)
                dA_k = dose * ka / (V * den2)
                J[j, 0] = dA_ka * g + A * t[j] * math.exp(-ka * t[j])
                J[j, 1] = dA_k * g - A * t[j] * ekt
                J[j, 2] = -A * g / V
    else:
        d = psi.shape[0]
        fp = np.empty(n)
        fm = np.empty(n)
        for kk in range(d):
            base = psi[kk]
            h = JAC_REL_STEP * (1.0 + abs(base))
            psi[kk] = base + h
            okp = _mean_fill(model_id, t, R, psi, fp)
            psi[kk] = base - h
            okm = _mean_fill(model_id, t, R, psi, fm)
            psi[kk] = base
            if not (okp and okm):
                return False
            for j in range(n):
                J[j, kk] = (fp[j] - fm[j]) / (2.0 * h)
    d = psi.shape[0]
    for j in range(n):
        for kk in range(d):
            if not math.isfinite(J[j, kk]):
                return False
    return True


@_jit
def _err_sd(kind, a, b, c):
    if kind == 0:
        s = a
    elif kind == 1:
        s = b * abs(c)
    else:
        s = a + b * c
    if s < SD_FLOOR:
        s = SD_FLOOR
    return s


@_jit
def _err_sd_slope(kind, a, b, c, s):
    if s <= SD_FLOOR or kind == 0:
        return 0.0
    if kind == 1:
        if c > 0.0:
            return b
        if c < 0.0:
            return -b
        return 0.0
    return b


@_jit
def _cond_ll(y, f, kind, a, b):
    n = y.shape[0]
    ll = 0.0
    for j in range(n):
        s = _err_sd(kind, a, b, f[j])
        r = (y[j] - f[j]) / s
        ll += -0.5 * LOG2PI - math.log(s) - 0.5 * r * r
    return ll


@_jit
def _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
               kind, a, b, eta):
    d = phi0.shape[0]
    d_r = ridx.shape[0]
    n = t.shape[0]
    psi = np.empty(d)
    for k in range(d):
        psi[k] = phi0[k]
    for m in range(d_r):
        psi[ridx[m]] += eta[m]
    for k in range(d):
        psi[k] = _tf(psi[k], tcodes[k])
    f = np.empty(n)
    if not _mean_fill(model_id, t, R, psi, f):
        return np.nan
    ll = _cond_ll(y, f, kind, a, b)
    quad = 0.0
    for i in range(d_r):
        row = 0.0
        for j in range(d_r):
            row += prec[i, j] * eta[j]
        quad += eta[i] * row
    return ll - 0.5 * quad - 0.5 * (d_r * LOG2PI + omega_logdet)


@_jit
def _data_grad(model_id, t, y, R, phi0, tcodes, ridx, kind, a, b, eta, g):
    """Gradient of the conditional log-likelihood w.r.t. eta (data term only)."""
    d = phi0.shape[0]
    d_r = ridx.shape[0]
    n = t.shape[0]
    phi = np.empty(d)
    psi = np.empty(d)
    for k in range(d):
        phi[k] = phi0[k]
    for m in range(d_r):
        phi[ridx[m]] += eta[m]
    for k in range(d):
        psi[k] = _tf(phi[k], tcodes[k])
    f = np.empty(n)
    J = np.empty((n, d))
    if not _mean_jac(model_id, t, R, psi, f, J):
        return False
    dldf = np.empty(n)
    for j in range(n):
        s = _err_sd(kind, a, b, f[j])
        sp = _err_sd_slope(kind, a, b, f[j], s)
        r = y[j] - f[j]
        dldf[j] = r / (s * s) + sp * (r * r / (s * s * s) - 1.0 / s)
    for m in range(d_r):
        kk = ridx[m]
        acc = 0.0
        for j in range(n):
            acc += dldf[j] * J[j, kk]
        g[m] = acc * _tfp(phi[kk], tcodes[kk])
    return True


@_jit
def _neg_hess(model_id, t, y, R, phi0, tcodes, ridx, prec, kind, a, b, eta, H):
    """Negative Hessian of the joint objective: FD data part plus analytic prior."""
    d_r = ridx.shape[0]
    gp = np.empty(d_r)
    gm = np.empty(d_r)
    M = np.empty((d_r, d_r))
    for m in range(d_r):
        base = eta[m]
        h = HESS_REL_STEP * (1.0 + abs(base))
        eta[m] = base + h
        ok = _data_grad(model_id, t, y, R, phi0, tcodes, ridx, kind, a, b, eta, gp)
        if not ok:
            eta[m] = base
            return False
        eta[m] = base - h
        ok = _data_grad(model_id, t, y, R, phi0, tcodes, ridx, kind, a, b, eta, gm)
        if not ok:
            eta[m] = base
            return False
        eta[m] = base
        for i in range(d_r):
            M[i, m] = (gp[i] - gm[i]) / (2.0 * h)
    for i in range(d_r):
        for j in range(d_r):
            H[i, j] = -0.5 * (M[i, j] + M[j, i]) + prec[i, j]
    return True


@_jit
def _chol(H, L):
    """Lower Cholesky of H into L; returns False when H is not positive definite."""
    m = H.shape[0]
    for i in range(m):
        for j in range(i + 1):
            s = H[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0 or not math.isfinite(s):
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, m):
            L[i, j] = 0.0
    return True


@_jit
def _chol_solve(L, rhs, x):
    """Solve (L L') x = rhs."""
    m = L.shape[0]
    for i in range(m):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(m - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, m):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


@_jit
def _upper_solve(L, rhs, z):
    """Solve L' z = rhs (back substitution on the transposed factor)."""
    m = L.shape[0]
    for i in range(m - 1, -1, -1):
        s = rhs[i]
        for k in range(i + 1, m):
            s -= L[k, i] * z[k]
        z[i] = s / L[i, i]


@_jit
def _chol_ridged(H, L, work):
    """Cholesky with an escalating Levenberg ridge; returns the ridge used or -1."""
    m = H.shape[0]
    if _chol(H, L):
        return 0.0
    lam = RIDGE_START
    for _ in range(14):
        for i in range(m):
            for j in range(m):
                work[i, j] = H[i, j]
            work[i, i] += lam
        if _chol(work, L):
            return lam
        lam *= 10.0
    return -1.0


@_jit
def _eb_newton(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
               kind, a, b, eta, step0, max_inner, gtol):
    """Damped Newton ascent of the joint objective; eta is updated in place.

    Returns (objective, gradient_norm, converged, iterations, err_code).
    """
    d_r = ridx.shape[0]
    obj = _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
                     kind, a, b, eta)
    if not math.isfinite(obj):
        for m in range(d_r):
            eta[m] = 0.0
        obj = _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
                         kind, a, b, eta)
        if not math.isfinite(obj):
            return obj, np.inf, False, 0, ERR_NONFINITE
    g = np.empty(d_r)
    gdat = np.empty(d_r)
    p = np.empty(d_r)
    trial = np.empty(d_r)
    H = np.empty((d_r, d_r))
    L = np.empty((d_r, d_r))
    work = np.empty((d_r, d_r))
    gnorm = np.inf
    iters = 0
    for it in range(max_inner):
        iters = it
        if not _data_grad(model_id, t, y, R, phi0, tcodes, ridx, kind, a, b, eta, gdat):
            return obj, gnorm, False, iters, ERR_NONFINITE
        gnorm = 0.0
        for i in range(d_r):
            s = 0.0
            for j in range(d_r):
                s += prec[i, j] * eta[j]
            g[i] = gdat[i] - s
            gnorm += g[i] * g[i]
        gnorm = math.sqrt(gnorm)
        if gnorm < gtol:
            return obj, gnorm, True, iters, ERR_OK
        if not _neg_hess(model_id, t, y, R, phi0, tcodes, ridx, prec, kind, a, b, eta, H):
            return obj, gnorm, False, iters, ERR_NONFINITE
        lam = _chol_ridged(H, L, work)
        if lam < 0.0:
            return obj, gnorm, False, iters, ERR_FACTORIZATION
        _chol_solve(L, g, p)
        pnorm = 0.0
        enorm = 0.0
        for i in range(d_r):
            pnorm += p[i] * p[i]
            enorm += eta[i] * eta[i]
        if math.sqrt(pnorm) <= 1e-10 * (1.0 + math.sqrt(enorm)):
            # the mode cannot move at float precision (huge-curvature case
            # where an absolute gradient tolerance is unreachable)
            for i in range(d_r):
                eta[i] += p[i]
            return obj, gnorm, True, iters + 1, ERR_OK
        slope = 0.0
        for i in range(d_r):
            slope += g[i] * p[i]
        if slope <= 0.0:
            for i in range(d_r):
                p[i] = g[i]
            slope = gnorm * gnorm
        if slope <= 1e-13 * (1.0 + abs(obj)):
            # predicted gain is below float resolution: Armijo can no longer
            # certify progress, so take the raw Newton refinement step
            for i in range(d_r):
                trial[i] = eta[i] + p[i]
            val = _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec,
                             omega_logdet, kind, a, b, trial)
            if math.isfinite(val):
                for i in range(d_r):
                    eta[i] = trial[i]
                obj = val
                continue
        tstep = step0
        accepted = False
        for _ls in range(60):
            for i in range(d_r):
                trial[i] = eta[i] + tstep * p[i]
            val = _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec,
                             omega_logdet, kind, a, b, trial)
            if math.isfinite(val) and val >= obj + 1e-4 * tstep * slope:
                for i in range(d_r):
                    eta[i] = trial[i]
                obj = val
                accepted = True
                break
            tstep *= 0.5
        if not accepted:
            break
    if not _data_grad(model_id, t, y, R, phi0, tcodes, ridx, kind, a, b, eta, gdat):
        return obj, gnorm, False, iters + 1, ERR_NONFINITE
    gnorm = 0.0
    for i in range(d_r):
        s = 0.0
        for j in range(d_r):
            s += prec[i, j] * eta[j]
        gnorm += (gdat[i] - s) ** 2
    gnorm = math.sqrt(gnorm)
    if gnorm < gtol:
        return obj, gnorm, True, iters + 1, ERR_OK
    return obj, gnorm, False, iters + 1, ERR_INNER


@_jit
def _subject_ll(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
                kind, a, b, xgrid, logwsq, eta, step0, max_inner, gtol):
    """Laplace/AGQ marginal contribution of one subject.

    xgrid has one all-zero row for the Laplace approximation; more rows give
    adaptive Gauss-Hermite.  Returns (ll, converged, iterations, err_code).
    """
    d_r = ridx.shape[0]
    n = t.shape[0]
    if d_r == 0:
        d = phi0.shape[0]
        psi = np.empty(d)
        for k in range(d):
            psi[k] = _tf(phi0[k], tcodes[k])
        f = np.empty(n)
        if not _mean_fill(model_id, t, R, psi, f):
            return np.nan, False, 0, ERR_NONFINITE
        value = _cond_ll(y, f, kind, a, b)
        if not math.isfinite(value):
            return np.nan, False, 0, ERR_NONFINITE
        return value, True, 0, ERR_OK
    had_warm = False
    for m in range(d_r):
        if eta[m] != 0.0:
            had_warm = True
    obj, gnorm, conv, iters, err = _eb_newton(
        model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
        kind, a, b, eta, step0, max_inner, gtol)
    if (err != ERR_OK or not conv) and had_warm:
        # a stale warm start can strand the iteration; retry cold
        for m in range(d_r):
            eta[m] = 0.0
        obj, gnorm, conv, iters, err = _eb_newton(
            model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
            kind, a, b, eta, step0, max_inner, gtol)
    if err != ERR_OK or not conv:
        for m in range(d_r):
            eta[m] = 0.0
        return np.nan, conv, iters, ERR_INNER if err == ERR_OK else err
    H = np.empty((d_r, d_r))
    L = np.empty((d_r, d_r))
    work = np.empty((d_r, d_r))
    if not _neg_hess(model_id, t, y, R, phi0, tcodes, ridx, prec, kind, a, b, eta, H):
        return np.nan, conv, iters, ERR_NONFINITE
    lam = _chol_ridged(H, L, work)
    if lam < 0.0:
        return np.nan, conv, iters, ERR_FACTORIZATION
    logdet = 0.0
    for i in range(d_r):
        logdet += 2.0 * math.log(L[i, i])
    nq = xgrid.shape[0]
    vals = np.empty(nq)
    z = np.empty(d_r)
    etaq = np.empty(d_r)
    sqrt2 = math.sqrt(2.0)
    for q in range(nq):
        _upper_solve(L, xgrid[q], z)
        for i in range(d_r):
            etaq[i] = eta[i] + sqrt2 * z[i]
        v = _joint_obj(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
                       kind, a, b, etaq)
        if math.isfinite(v):
            vals[q] = v + logwsq[q]
        else:
            vals[q] = -np.inf
    vmax = -np.inf
    for q in range(nq):
        if vals[q] > vmax:
            vmax = vals[q]
    if not math.isfinite(vmax):
        return np.nan, conv, iters, ERR_NONFINITE
    acc = 0.0
    for q in range(nq):
        acc += math.exp(vals[q] - vmax)
    ll = 0.5 * d_r * math.log(2.0) - 0.5 * logdet + vmax + math.log(acc)
    return ll, conv, iters, ERR_OK


@_jit
def _eb_kernel(model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
               kind, a, b, eta, step0, max_inner, gtol):
    """Mode search plus negative Hessian at the mode, for eb_mode()."""
    d_r = ridx.shape[0]
    H = np.empty((d_r, d_r))
    obj, gnorm, conv, iters, err = _eb_newton(
        model_id, t, y, R, phi0, tcodes, ridx, prec, omega_logdet,
        kind, a, b, eta, step0, max_inner, gtol)
    if err == ERR_OK or err == ERR_INNER:
        if not _neg_hess(model_id, t, y, R, phi0, tcodes, ridx, prec, kind, a, b, eta, H):
            err = ERR_NONFINITE
    return obj, H, conv, iters, err


@_jit
def _batch_ll(model_id, off, t_all, y_all, R_all, PHI0, tcodes, ridx, prec,
              omega_logdet, kind, a, b, xgrid, logwsq, warm, step0, max_inner,
              gtol, out_ll, out_conv, out_iters, out_err):
    """Per-subject contributions over a flattened dataset; warm is updated in place."""
    N = PHI0.shape[0]
    d_r = ridx.shape[0]
    eta = np.empty(d_r)
    for i in range(N):
        lo = off[i]
        hi = off[i + 1]
        for m in range(d_r):
            eta[m] = warm[i, m]
        ll, conv, iters, err = _subject_ll(
            model_id, t_all[lo:hi], y_all[lo:hi], R_all[lo:hi], PHI0[i],
            tcodes, ridx, prec, omega_logdet, kind, a, b, xgrid, logwsq,
            eta, step0, max_inner, gtol)
        for m in range(d_r):
            warm[i, m] = eta[m]
        out_ll[i] = ll
        out_conv[i] = 1 if conv else 0
        out_iters[i] = iters
        out_err[i] = err
