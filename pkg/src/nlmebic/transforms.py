"""Per-parameter transforms linking the Gaussian scale to the natural scale.

A parameter with transform `log` is log-normal: psi = exp(phi) where
phi = C_i beta + eta.  `logit` maps through the inverse logit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError

TRANSFORM_CODES = {"identity": 0, "log": 1, "logit": 2}


def transform_codes(transforms) -> np.ndarray:
    return np.array([TRANSFORM_CODES[t] for t in transforms], dtype=np.int64)


def natural_value(phi: float, kind: str) -> float:
    """Gaussian-scale phi -> natural-scale psi."""
    if kind == "identity":
        return phi
    if kind == "log":
        return math.exp(phi)
    if kind == "logit":
        return 1.0 / (1.0 + math.exp(-phi))
    raise InputError(f"unknown transform {kind!r}")


def inverse_transform(psi: float, kind: str) -> float:
    """Natural-scale psi -> Gaussian-scale phi."""
    if kind == "identity":
        return psi
    if kind == "log":
        if psi <= 0:
            raise InputError(f"log-transformed parameter must be positive, got {psi}")
        return math.log(psi)
    if kind == "logit":
        if not 0.0 < psi < 1.0:
            raise InputError(f"logit-transformed parameter must be in (0,1), got {psi}")
        return math.log(psi / (1.0 - psi))
    raise InputError(f"unknown transform {kind!r}")


def apply_transforms(phi: np.ndarray, codes: np.ndarray) -> np.ndarray:
    psi = np.empty_like(phi)
    for k in range(phi.shape[0]):
        c = codes[k]
        if c == 1:
            psi[k] = math.exp(phi[k])
        elif c == 2:
            psi[k] = 1.0 / (1.0 + math.exp(-phi[k]))
        else:
            psi[k] = phi[k]
    return psi


def transform_prime(phi: float, code: int) -> float:
    """d psi / d phi for one component."""
    if code == 1:
        return math.exp(phi)
    if code == 2:
        p = 1.0 / (1.0 + math.exp(-phi))
        return p * (1.0 - p)
    return 1.0
