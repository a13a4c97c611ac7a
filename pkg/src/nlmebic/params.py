"""Population-parameter vector: layout, patterned Cholesky, packing.

Omega_R is parametrized by the free entries of a sparse Cholesky factor.  A
patterned covariance admits a fill-free factor exactly when its correlation
graph is chordal; a perfect-elimination ordering of the active parameters is
found by brute force (d_R <= 4).  Under that ordering the map

    {L lower-triangular, pattern sparsity, positive diagonal}  <->
    {patterned symmetric positive-definite Omega_R}

is a smooth bijection, so log-diagonal Cholesky entries give an unconstrained
optimizer space that never leaves the model family.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import CovariancePattern, ModelSpec, theta_dims
from .errors import InputError, NonPositiveVarianceError, PatternNotParametrizableError


@lru_cache(maxsize=None)
def elimination_order(pattern: CovariancePattern) -> tuple[int, ...]:
    """Permutation of the active indices under which the Cholesky factor has no fill.

    Raises PatternNotParametrizableError when the correlation graph is not
    chordal (first occurs for 4-cycles at d_R = 4).
    """
    active = pattern.active
    m = len(active)
    pos = {k: i for i, k in enumerate(active)}
    adj = np.zeros((m, m), dtype=bool)
    for k, l in pattern.pairs:
        adj[pos[k], pos[l]] = adj[pos[l], pos[k]] = True
    if m <= 1 or not pattern.pairs:
        return active
    for perm in itertools.permutations(range(m)):
        a = adj[np.ix_(perm, perm)]
        ok = True
        for j in range(m):
            below = [i for i in range(j + 1, m) if a[i, j]]
            for x in range(len(below)):
                for yy in range(x + 1, len(below)):
                    if not a[below[x], below[yy]]:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            return tuple(active[i] for i in perm)
    raise PatternNotParametrizableError(
        f"covariance pattern {pattern.summary()} has no fill-free Cholesky ordering"
    )


@lru_cache(maxsize=None)
def chol_layout(pattern: CovariancePattern) -> tuple[tuple[int, ...], tuple[tuple[int, int], ...]]:
    """(elimination order, free lower-triangular positions in the permuted frame).

    Positions are listed diagonal first (permuted order), then off-diagonal
    entries sorted row-major; this is the canonical omega_chol layout.
    """
    order = elimination_order(pattern)
    pos = {k: i for i, k in enumerate(order)}
    offdiag = sorted((max(pos[k], pos[l]), min(pos[k], pos[l])) for k, l in pattern.pairs)
    positions = tuple((i, i) for i in range(len(order))) + tuple(offdiag)
    return order, positions


@dataclass(frozen=True)
class ThetaVector:
    """Population parameter theta = (beta, Cholesky entries of Omega_R, error params).

    beta is ordered parameter-by-parameter: intercept then covariate
    coefficients in CovariateMap order.  omega_chol holds the free sparse
    Cholesky entries (diagonal entries positive); the implied Omega_R is
    symmetric positive definite whenever all diagonal entries are > 0.
    """

    beta: np.ndarray
    omega_chol: np.ndarray
    error_params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "omega_chol", np.asarray(self.omega_chol, dtype=float))
        object.__setattr__(self, "error_params", np.asarray(self.error_params, dtype=float))

    def validate(self, spec: ModelSpec) -> "ThetaVector":
        dims = theta_dims(spec)
        if self.beta.shape != (spec.covmap.n_terms,):
            raise InputError(f"beta has length {self.beta.size}, expected {spec.covmap.n_terms}")
        if self.omega_chol.shape != (dims.dim_vec_omega,):
            raise InputError(f"omega_chol has length {self.omega_chol.size}, "
                             f"expected {dims.dim_vec_omega}")
        if self.error_params.shape != (dims.dim_error,):
            raise InputError(f"error_params has length {self.error_params.size}, "
                             f"expected {dims.dim_error}")
        return self

    def chol_factor(self, spec: ModelSpec) -> np.ndarray:
        """Dense (d_R, d_R) lower factor in the elimination-ordered frame."""
        order, positions = chol_layout(spec.pattern)
        L = np.zeros((len(order), len(order)))
        for val, (i, j) in zip(self.omega_chol, positions):
            L[i, j] = val
        return L

    def omega_r(self, spec: ModelSpec) -> np.ndarray:
        """Omega_R as a dense matrix over the active indices in ascending order."""
        order, _ = chol_layout(spec.pattern)
        L = self.chol_factor(spec)
        with np.errstate(over="ignore", invalid="ignore"):
            om_perm = L @ L.T
        active = spec.pattern.active
        pos = {k: i for i, k in enumerate(order)}
        idx = [pos[k] for k in active]
        return om_perm[np.ix_(idx, idx)]

    def omega_full(self, spec: ModelSpec) -> np.ndarray:
        """Full (d, d) covariance matrix including structural zeros."""
        d = spec.pattern.d
        om = np.zeros((d, d))
        active = spec.pattern.active
        om_r = self.omega_r(spec)
        for a, ka in enumerate(active):
            for b_, kb in enumerate(active):
                om[ka, kb] = om_r[a, b_]
        return om

    def beta_by_param(self, spec: ModelSpec) -> list[np.ndarray]:
        """beta split per structural parameter: [intercept, coefficients...]."""
        out, i = [], 0
        for covs in spec.covmap.entries:
            w = 1 + len(covs)
            out.append(self.beta[i:i + w])
            i += w
        return out


def theta_from_components(spec: ModelSpec, beta, omega: np.ndarray | None,
                          error_params) -> ThetaVector:
    """Assemble a ThetaVector from beta, a full or active-dim Omega, and error params.

    Omega may be the full (d, d) matrix or the (d_R, d_R) active block; its
    zero pattern must match the spec's pattern and the block must be positive
    definite.
    """
    pattern = spec.pattern
    active = pattern.active
    m = len(active)
    if omega is None:
        omega = np.zeros((m, m))
    omega = np.asarray(omega, dtype=float)
    if omega.shape == (pattern.d, pattern.d):
        om_r = omega[np.ix_(active, active)]
    elif omega.shape == (m, m):
        om_r = omega.copy()
    else:
        raise InputError(f"omega must be ({pattern.d},{pattern.d}) or ({m},{m})")
    pos_in_active = {k: i for i, k in enumerate(active)}
    allowed = np.eye(m, dtype=bool)
    for k, l in pattern.pairs:
        a, b_ = pos_in_active[k], pos_in_active[l]
        allowed[a, b_] = allowed[b_, a] = True
    if np.any(om_r[~allowed] != 0.0):
        raise InputError("omega has non-zero entries outside the covariance pattern")
    order, positions = chol_layout(pattern)
    perm = [pos_in_active[k] for k in order]
    om_perm = om_r[np.ix_(perm, perm)]
    if m > 0:
        try:
            L = np.linalg.cholesky(om_perm)
        except np.linalg.LinAlgError:
            raise InputError("omega restricted to the pattern is not positive definite") from None
    else:
        L = np.zeros((0, 0))
    entries = np.array([L[i, j] for i, j in positions])
    return ThetaVector(beta=np.asarray(beta, dtype=float), omega_chol=entries,
                       error_params=np.asarray(error_params, dtype=float)).validate(spec)


def initial_theta_from_doc(spec: ModelSpec, doc: dict) -> ThetaVector:
    """Build a ThetaVector from a theta/init JSON block.

    Keys: psi (name -> natural-scale typical value), coefficients (name ->
    {covariate -> value}), omega_sd (name -> sd of the random effect), corr
    (list of [name, name, correlation]), error ({a, b}).
    """
    from .transforms import inverse_transform  # local import; avoids cycle

    pnames = spec.param_names
    psi = doc.get("psi", {})
    unknown = set(psi) - set(pnames)
    if unknown:
        raise InputError(f"theta document: psi names unknown parameters {sorted(unknown)}")
    beta = []
    coef_field = doc.get("coefficients", {})
    for k, p in enumerate(pnames):
        if p not in psi:
            raise InputError(f"theta document: missing psi value for parameter {p!r}")
        beta.append(inverse_transform(float(psi[p]), spec.transforms[k]))
        for c in spec.covmap.entries[k]:
            beta.append(float(coef_field.get(p, {}).get(c, 0.0)))
    sds = doc.get("omega_sd", {})
    unknown = set(sds) - set(pnames)
    if unknown:
        raise InputError(f"theta document: omega_sd names unknown parameters {sorted(unknown)}")
    d = spec.pattern.d
    omega = np.zeros((d, d))
    for k in spec.pattern.active:
        name = pnames[k]
        if name not in sds:
            raise InputError(f"theta document: missing omega_sd for random parameter {name!r}")
        omega[k, k] = float(sds[name]) ** 2
    for item in doc.get("corr", []):
        if len(item) != 3:
            raise InputError(f"theta document: corr entries are [name, name, rho], got {item}")
        n1, n2, rho = item
        if n1 not in pnames or n2 not in pnames:
            raise InputError(f"theta document: corr names unknown parameter in {item}")
        k, l = pnames.index(n1), pnames.index(n2)
        k, l = min(k, l), max(k, l)
        if (k, l) not in spec.pattern.pairs:
            raise InputError(f"theta document: corr pair {n1},{n2} not in the covariance pattern")
        omega[k, l] = omega[l, k] = float(rho) * np.sqrt(omega[k, k] * omega[l, l])
    err_field = doc.get("error", {})
    err = spec.error
    if err.kind == "additive":
        error_params = [float(err_field.get("a", err.a))]
    elif err.kind == "proportional":
        error_params = [float(err_field.get("b", err.b))]
    else:
        error_params = [float(err_field.get("a", err.a)), float(err_field.get("b", err.b))]
    return theta_from_components(spec, beta, omega, error_params)


def packed_length(spec: ModelSpec) -> int:
    dims = theta_dims(spec)
    return dims.dim_theta_R + dims.dim_theta_F


def pack(theta: ThetaVector, spec: ModelSpec) -> np.ndarray:
    """Map theta to the unconstrained optimizer space.

    beta passes through unchanged; diagonal Cholesky entries and error
    parameters map through log.  unpack(pack(theta)) == theta.
    """
    theta.validate(spec)
    m = spec.pattern.d_r
    diag = theta.omega_chol[:m]
    if np.any(diag <= 0.0):
        raise NonPositiveVarianceError("pack requires strictly positive Cholesky diagonal")
    if np.any(theta.error_params <= 0.0):
        raise NonPositiveVarianceError("pack requires strictly positive error parameters")
    return np.concatenate([
        theta.beta,
        np.log(diag),
        theta.omega_chol[m:],
        np.log(theta.error_params),
    ])


def unpack(x: np.ndarray, spec: ModelSpec) -> ThetaVector:
    """Inverse of pack."""
    x = np.asarray(x, dtype=float)
    if x.shape != (packed_length(spec),):
        raise InputError(f"packed vector has length {x.size}, expected {packed_length(spec)}")
    nb = spec.covmap.n_terms
    m = spec.pattern.d_r
    npairs = len(spec.pattern.pairs)
    ne = spec.error.n_params
    beta = x[:nb]
    diag = np.exp(x[nb:nb + m])
    off = x[nb + m:nb + m + npairs]
    err = np.exp(x[nb + m + npairs:nb + m + npairs + ne])
    return ThetaVector(beta=beta, omega_chol=np.concatenate([diag, off]),
                       error_params=err)
