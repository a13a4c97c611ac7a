"""Closed-form structural (mean) models and the residual-error model.

Each structural model maps per-observation regressors and a vector of
natural-scale individual parameters to a predicted response.  Models live in
a registry keyed by name so user-defined mean functions can be added without
touching the likelihood machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateEigenvaluesError, DomainError, InputError

ERROR_KINDS = ("additive", "proportional", "combined")
SD_FLOOR = 1e-10


@dataclass(frozen=True)
class ErrorModelSpec:
    """Residual-error structure: sd(y | prediction c) = a, b*|c| or a + b*c.

    `a` and `b` are on standard-deviation scale.  For `additive` only `a` is a
    free parameter, for `proportional` only `b`, for `combined` both.
    """

    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ERROR_KINDS:
            raise InputError(f"error kind must be one of {ERROR_KINDS}, got {self.kind!r}")
        if self.a < 0 or self.b < 0:
            raise InputError("error parameters a, b must be >= 0")
        if self.kind == "additive" and self.b != 0.0:
            raise InputError("additive error fixes b at 0")
        if self.kind == "proportional" and self.a != 0.0:
            raise InputError("proportional error fixes a at 0")

    @property
    def n_params(self) -> int:
        return 2 if self.kind == "combined" else 1

    @property
    def kind_code(self) -> int:
        return ERROR_KINDS.index(self.kind)

    def params(self) -> np.ndarray:
        """Free parameters in canonical order (a then b, as applicable)."""
        if self.kind == "additive":
            return np.array([self.a])
        if self.kind == "proportional":
            return np.array([self.b])
        return np.array([self.a, self.b])

    def with_params(self, values) -> "ErrorModelSpec":
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_params,):
            raise InputError(f"expected {self.n_params} error parameters, got {values.shape}")
        if self.kind == "additive":
            return ErrorModelSpec("additive", a=float(values[0]))
        if self.kind == "proportional":
            return ErrorModelSpec("proportional", b=float(values[0]))
        return ErrorModelSpec("combined", a=float(values[0]), b=float(values[1]))


def error_sd(err: ErrorModelSpec, c):
    """Residual standard deviation at prediction(s) ``c``, floored at 1e-10.

    The floor keeps log-densities finite when b*c hits zero under a
    proportional model.
    """
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise DomainError("error_sd requires finite predictions")
    if err.kind == "additive":
        s = np.full_like(c, err.a)
    elif err.kind == "proportional":
        s = err.b * np.abs(c)
    else:
        s = err.a + err.b * c
    out = np.maximum(s, SD_FLOOR)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StructuralModel:
    """A registered mean function.

    eval_fn(t, R, psi) -> predicted means, where t is the (n,) time vector,
    R is the (n, len(regressors)) regressor matrix in `regressors` column
    order and psi the natural-scale parameter vector.  eval_fn must return
    NaNs (not raise) outside its domain so optimizers can backtrack.

    jac_fn, when given, returns the (n, arity) matrix of d mean / d psi; the
    likelihood falls back to central differences otherwise.  canonicalize,
    when given, maps a parameter vector to a preferred representative among
    observationally equivalent ones (used to pin down grid-search inits).
    """

    name: str
    params: tuple[str, ...]
    regressors: tuple[str, ...]
    eval_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jac_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    canonicalize: Callable[[np.ndarray], np.ndarray] | None = None
    kernel_id: int = 0  # >0 selects a jitted kernel for this model

    @property
    def arity(self) -> int:
        return len(self.params)


_REGISTRY: dict[str, StructuralModel] = {}


def register_model(model: StructuralModel, overwrite: bool = False) -> StructuralModel:
    if model.name in _REGISTRY and not overwrite:
        raise InputError(f"structural model {model.name!r} already registered")
    _REGISTRY[model.name] = model
    return model


def get_model(name: str) -> StructuralModel:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InputError(
            f"unknown structural model {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_models() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


# ---------------------------------------------------------------------------
# Built-in models.  The *_eval functions are the registry entries (silent on
# bad domains); the public functions validate preconditions and raise.
# ---------------------------------------------------------------------------

ORAL_KA_TOL = 1e-8  # |ka - k| switch to the removable-singularity limit


def _onecpt_infusion_eval(t, R, psi):
    k, V = psi[0], psi[1]
    dose, tD, tinf = R[:, 0], R[:, 1], R[:, 2]
    if not (k > 0.0 and V > 0.0):
        return np.full(t.shape, np.nan)
    tau = t - tD
    pref = dose / (tinf * k * V)
    during = pref * (-np.expm1(-k * tau))
    after = pref * (-np.expm1(-k * tinf)) * np.exp(-k * (tau - tinf))
    out = np.where(tau <= tinf, during, after)
    return np.where((tau >= 0.0) & (tinf > 0.0), out, np.nan)


def _twocpt_rates(Q, Cl, V1, V2):
    s = Q / V1 + Q / V2 + Cl / V1
    disc = s * s - 4.0 * (Q / V2) * (Cl / V1)
    if disc <= 1e-12 * s * s:
        return math.nan, math.nan
    root = math.sqrt(disc)
    beta = 0.5 * (s - root)
    alpha = (Q * Cl) / (V1 * V2 * beta)
    return alpha, beta


def _twocpt_infusion_eval(t, R, psi):
    Q, Cl, V1, V2 = psi[0], psi[1], psi[2], psi[3]
    dose, tD, tinf = R[:, 0], R[:, 1], R[:, 2]
    if not (Q > 0.0 and Cl > 0.0 and V1 > 0.0 and V2 > 0.0):
        return np.full(t.shape, np.nan)
    alpha, beta = _twocpt_rates(Q, Cl, V1, V2)
    if not (math.isfinite(alpha) and beta > 0.0):
        return np.full(t.shape, np.nan)
    A = (1.0 / V1) * (alpha - Q / V2) / (alpha - beta)
    B = (1.0 / V1) * (beta - Q / V2) / (beta - alpha)
    tau = t - tD
    pref = dose / tinf
    during = pref * (
        (A / alpha) * (-np.expm1(-alpha * tau)) + (B / beta) * (-np.expm1(-beta * tau))
    )
    after = pref * (
        (A / alpha) * (-np.expm1(-alpha * tinf)) * np.exp(-alpha * (tau - tinf))
        + (B / beta) * (-np.expm1(-beta * tinf)) * np.exp(-beta * (tau - tinf))
    )
    out = np.where(tau <= tinf, during, after)
    return np.where((tau >= 0.0) & (tinf > 0.0), out, np.nan)


def _onecpt_oral_eval(t, R, psi):
    ka, k, V = psi[0], psi[1], psi[2]
    dose = R[:, 0]
    if not (ka > 0.0 and k > 0.0 and V > 0.0):
        return np.full(t.shape, np.nan)
    if abs(ka - k) < ORAL_KA_TOL * max(ka, k):
        out = dose * k * t * np.exp(-k * t) / V
    else:
        out = dose * ka / (V * (ka - k)) * np.exp(-k * t) * (-np.expm1(-(ka - k) * t))
    return np.where(t >= 0.0, out, np.nan)


def _onecpt_infusion_jac(t, R, psi):
    k, V = psi[0], psi[1]
    dose, tD, tinf = R[:, 0], R[:, 1], R[:, 2]
    tau = t - tD
    pref = dose / (tinf * k * V)
    f = _onecpt_infusion_eval(t, R, psi)
    during = tau <= tinf
    dfdk = np.where(
        during,
        -f / k + pref * tau * np.exp(-k * tau),
        -f / k + pref * np.exp(-k * (tau - tinf))
        * (tinf * np.exp(-k * tinf) - (tau - tinf) * (-np.expm1(-k * tinf))),
    )
    return np.column_stack([dfdk, -f / V])


def _onecpt_oral_jac(t, R, psi):
    ka, k, V = psi[0], psi[1], psi[2]
    dose = R[:, 0]
    ekt = np.exp(-k * t)
    if abs(ka - k) < ORAL_KA_TOL * max(ka, k):
        base = dose * t * ekt / V
        dfdka = base * (1.0 - 0.5 * k * t)
        dfdk = -0.5 * dose * k * t * t * ekt / V
        dfdv = -dose * k * t * ekt / (V * V)
    else:
        A = dose * ka / (V * (ka - k))
        g = ekt * (-np.expm1(-(ka - k) * t))
        dA_ka = -dose * k / (V * (ka - k) ** 2)
        dA_k = dose * ka / (V * (ka - k) ** 2)
        dfdka = dA_ka * g + A * t * np.exp(-ka * t)
        dfdk = dA_k * g - A * t * ekt
        dfdv = -A * g / V
    return np.column_stack([dfdka, dfdk, dfdv])


register_model(StructuralModel(
    name="onecpt_infusion",
    params=("k", "V"),
    regressors=("dose", "tD", "tinf"),
    eval_fn=_onecpt_infusion_eval,
    jac_fn=_onecpt_infusion_jac,
    kernel_id=1,
))
register_model(StructuralModel(
    name="twocpt_infusion",
    params=("Q", "Cl", "V1", "V2"),
    regressors=("dose", "tD", "tinf"),
    eval_fn=_twocpt_infusion_eval,
    kernel_id=2,
))
def _onecpt_oral_canonicalize(psi):
    # flip-flop identifiability: (ka, k, V) and (k, ka, V k/ka) trace the same
    # curve; prefer the conventional representation with ka > k
    ka, k, V = psi[0], psi[1], psi[2]
    if ka >= k:
        return psi
    return np.array([k, ka, V * k / ka])


register_model(StructuralModel(
    name="onecpt_oral",
    params=("ka", "k", "V"),
    regressors=("dose",),
    eval_fn=_onecpt_oral_eval,
    jac_fn=_onecpt_oral_jac,
    canonicalize=_onecpt_oral_canonicalize,
    kernel_id=3,
))


def onecpt_infusion(D: float, t, tD: float, Tinf: float, k: float, V: float):
    """Concentration of a one-compartment model under a single constant infusion.

    Parameters
    ----------
    D : dose amount
    t : observation time(s), must satisfy t >= tD
    tD : infusion start time
    Tinf : infusion duration, > 0
    k : elimination rate constant, > 0
    V : volume of distribution, > 0
    """
    if Tinf <= 0 or k <= 0 or V <= 0:
        raise DomainError("onecpt_infusion requires Tinf > 0, k > 0, V > 0")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < tD):
        raise DomainError("onecpt_infusion requires t >= tD")
    R = np.column_stack([np.full_like(t_arr, D), np.full_like(t_arr, tD),
                         np.full_like(t_arr, Tinf)])
    out = _onecpt_infusion_eval(t_arr, R, np.array([k, V]))
    return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out


def twocpt_infusion(D: float, t, tD: float, Tinf: float,
                    Q: float, Cl: float, V1: float, V2: float):
    """Concentration of a two-compartment model under a single constant infusion.

    Intermediates follow the biexponential decomposition: beta is the smaller
    root of x^2 - (Q/V1 + Q/V2 + Cl/V1) x + (Q/V2)(Cl/V1), alpha the larger.

    Raises DegenerateEigenvaluesError when the two disposition rates are
    numerically indistinct.
    """
    if min(Q, Cl, V1, V2) <= 0 or Tinf <= 0:
        raise DomainError("twocpt_infusion requires positive parameters and Tinf > 0")
    alpha, beta = _twocpt_rates(Q, Cl, V1, V2)
    if not (math.isfinite(alpha) and beta > 0.0):
        raise DegenerateEigenvaluesError(
            f"disposition phases indistinct for Q={Q}, Cl={Cl}, V1={V1}, V2={V2}"
        )
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < tD):
        raise DomainError("twocpt_infusion requires t >= tD")
    R = np.column_stack([np.full_like(t_arr, D), np.full_like(t_arr, tD),
                         np.full_like(t_arr, Tinf)])
    out = _twocpt_infusion_eval(t_arr, R, np.array([Q, Cl, V1, V2]))
    return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out


def onecpt_oral(d: float, t, ka: float, k: float, V: float):
    """Concentration of a one-compartment model after a single oral dose.

    When |ka - k| < 1e-8 * max(ka, k) the removable singularity is replaced
    by its analytic limit d*k*t*exp(-k*t)/V.
    """
    if ka <= 0 or k <= 0 or V <= 0:
        raise DomainError("onecpt_oral requires ka > 0, k > 0, V > 0")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise DomainError("onecpt_oral requires t >= 0")
    R = np.full((t_arr.size, 1), d, dtype=float)
    out = _onecpt_oral_eval(t_arr, R, np.array([ka, k, V]))
    return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out
