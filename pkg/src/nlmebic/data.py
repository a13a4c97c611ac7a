"""Domain types: datasets, covariance patterns, covariate maps, model specs.

Every type is immutable after construction and safe to share across workers.
Subjects are kept sorted by id and observations by time so that likelihood
reductions have a fixed summation order regardless of input ordering.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InputError, OffdiagWithoutDiagError
from .models import ErrorModelSpec, StructuralModel, get_model

TRANSFORMS = ("identity", "log", "logit")
RESERVED_COLUMNS = ("id", "time", "y")


@dataclass(frozen=True)
class Subject:
    """One subject's observations plus its (time-constant) covariates."""

    id: str
    times: np.ndarray
    y: np.ndarray
    regressors: dict[str, np.ndarray]
    covariates: dict[str, float]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if times.size == 0:
            raise InputError(f"subject {self.id!r} has no observations")
        if times.shape != y.shape:
            raise InputError(f"subject {self.id!r}: times and y lengths differ")
        if not np.all(np.isfinite(times)):
            raise InputError(f"subject {self.id!r}: non-finite observation time")
        order = np.argsort(times, kind="stable")
        regs = {k: np.asarray(v, dtype=float)[order] for k, v in self.regressors.items()}
        for name, v in regs.items():
            if v.shape != times.shape:
                raise InputError(f"subject {self.id!r}: regressor {name!r} length mismatch")
        object.__setattr__(self, "times", times[order])
        object.__setattr__(self, "y", y[order])
        object.__setattr__(self, "regressors", regs)
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def n(self) -> int:
        return int(self.times.size)

    def regressor_matrix(self, names: tuple[str, ...]) -> np.ndarray:
        """(n, len(names)) matrix of regressor columns in the given order."""
        cols = []
        for name in names:
            if name not in self.regressors:
                raise InputError(
                    f"subject {self.id!r} is missing regressor column {name!r}"
                )
            cols.append(self.regressors[name])
        if not cols:
            return np.zeros((self.n, 0))
        return np.column_stack(cols)


@dataclass(frozen=True)
class Dataset:
    """A population dataset: subjects sorted by id, with a shared covariate header."""

    subjects: tuple[Subject, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        subjects = tuple(sorted(self.subjects, key=lambda s: s.id))
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate subject ids: {dup}")
        for s in subjects:
            for name in self.covariate_names:
                if name not in s.covariates:
                    raise InputError(f"subject {s.id!r} is missing covariate {name!r}")
                v = s.covariates[name]
                if v is None or not math.isfinite(v):
                    raise InputError(
                        f"subject {s.id!r}: covariate {name!r} is missing or non-finite"
                    )
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.subjects)

    def covariate_values(self, name: str) -> np.ndarray:
        if name not in self.covariate_names:
            raise InputError(f"unknown covariate {name!r}")
        return np.array([s.covariates[name] for s in self.subjects])


@dataclass(frozen=True)
class CovariancePattern:
    """Zero structure of Omega: which parameters are random, which pairs correlate.

    `pairs` holds (k, l) with k < l; a pair is legal only when both diagonal
    entries are active.
    """

    d: int
    diag: tuple[bool, ...]
    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.d < 1:
            raise InputError("pattern dimension d must be >= 1")
        diag = tuple(bool(x) for x in self.diag)
        if len(diag) != self.d:
            raise InputError(f"diag mask length {len(diag)} != d = {self.d}")
        norm = []
        for k, l in self.pairs:
            k, l = int(k), int(l)
            if k == l or not (0 <= k < self.d and 0 <= l < self.d):
                raise InputError(f"invalid correlation pair ({k},{l}) for d={self.d}")
            norm.append((min(k, l), max(k, l)))
        if len(set(norm)) != len(norm):
            raise InputError("duplicate correlation pair")
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "pairs", tuple(sorted(norm)))

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.d) if self.diag[k])

    @property
    def d_r(self) -> int:
        return sum(self.diag)

    def summary(self, names: tuple[str, ...] | None = None) -> str:
        label = (lambda k: names[k]) if names else str
        diag_part = ",".join(label(k) for k in self.active) or "-"
        if not self.pairs:
            return "{%s}" % diag_part
        pair_part = ",".join(f"{label(k)}*{label(l)}" for k, l in self.pairs)
        return "{%s;%s}" % (diag_part, pair_part)


def validate_pattern(pattern: CovariancePattern) -> CovariancePattern:
    """Check structural legality; returns the pattern as certification.

    Raises OffdiagWithoutDiagError when a correlation is requested between a
    pair where some diagonal entry is fixed to zero.
    """
    for k, l in pattern.pairs:
        if not (pattern.diag[k] and pattern.diag[l]):
            raise OffdiagWithoutDiagError(k, l)
    return pattern


def count_vec_omega(pattern: CovariancePattern) -> int:
    """Number of free covariance parameters (each symmetric pair counted once)."""
    validate_pattern(pattern)
    return pattern.d_r + len(pattern.pairs)


@dataclass(frozen=True)
class CovariateMap:
    """Per-parameter covariate lists entering the linear predictor C_i beta.

    The intercept is always present and not listed.  Lists are stored sorted
    so maps differing only by insertion order compare equal.
    """

    entries: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        norm = []
        for covs in self.entries:
            covs = tuple(sorted(covs))
            if len(set(covs)) != len(covs):
                raise InputError(f"covariate listed twice for one parameter: {covs}")
            norm.append(covs)
        object.__setattr__(self, "entries", tuple(norm))

    @classmethod
    def empty(cls, d: int) -> "CovariateMap":
        return cls(tuple(() for _ in range(d)))

    @classmethod
    def full(cls, d: int, pool) -> "CovariateMap":
        return cls(tuple(tuple(sorted(pool)) for _ in range(d)))

    @property
    def d(self) -> int:
        return len(self.entries)

    @property
    def n_terms(self) -> int:
        """Total number of beta coefficients (intercepts included)."""
        return self.d + sum(len(e) for e in self.entries)

    def used_covariates(self) -> tuple[str, ...]:
        return tuple(sorted({c for e in self.entries for c in e}))

    def summary(self, names: tuple[str, ...]) -> str:
        parts = []
        for k, covs in enumerate(self.entries):
            inner = ",".join(covs) if covs else "~"
            parts.append(f"{names[k]}({inner})")
        return ",".join(parts)


@dataclass(frozen=True)
class ModelSpec:
    """Structural model + transforms + covariates + covariance pattern + error."""

    structural: str
    transforms: tuple[str, ...]
    covmap: CovariateMap
    pattern: CovariancePattern
    error: ErrorModelSpec

    def __post_init__(self):
        model = get_model(self.structural)
        d = model.arity
        if len(self.transforms) != d:
            raise InputError(
                f"{self.structural!r} has {d} parameters but {len(self.transforms)} transforms"
            )
        for tr in self.transforms:
            if tr not in TRANSFORMS:
                raise InputError(f"unknown transform {tr!r}; expected one of {TRANSFORMS}")
        if self.covmap.d != d or self.pattern.d != d:
            raise InputError(
                f"covariate map ({self.covmap.d}) and pattern ({self.pattern.d}) "
                f"must match model arity {d}"
            )
        validate_pattern(self.pattern)

    @cached_property
    def model(self) -> StructuralModel:
        return get_model(self.structural)

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.model.params

    def summary(self) -> str:
        return (f"Omega={self.pattern.summary(self.param_names)} "
                f"C={{{self.covmap.summary(self.param_names)}}}")

    def validate_against(self, dataset: Dataset) -> None:
        """Check that the dataset provides every covariate and regressor used."""
        for k, covs in enumerate(self.covmap.entries):
            for c in covs:
                if c not in dataset.covariate_names:
                    raise InputError(
                        f"covariate {c!r} (parameter {self.param_names[k]!r}) "
                        f"not present in dataset columns"
                    )
        for s in dataset.subjects:
            s.regressor_matrix(self.model.regressors)


@dataclass(frozen=True)
class ThetaDims:
    """Free-parameter counts split into log N- and log n_tot-penalized groups.

    Residual-error parameters are counted in theta_F: they are informed by all
    n_tot observations, and this reproduces the published penalty arithmetic
    for the hybrid criteria.
    """

    dim_beta_R: int
    dim_beta_F: int
    dim_vec_omega: int
    dim_error: int

    @property
    def dim_theta_R(self) -> int:
        return self.dim_beta_R + self.dim_vec_omega

    @property
    def dim_theta_F(self) -> int:
        return self.dim_beta_F + self.dim_error

    @property
    def dim_theta(self) -> int:
        return self.dim_theta_R + self.dim_theta_F


def theta_dims(spec: ModelSpec) -> ThetaDims:
    """Parameter-dimension accounting for a model spec."""
    beta_r = beta_f = 0
    for k in range(spec.pattern.d):
        terms = 1 + len(spec.covmap.entries[k])
        if spec.pattern.diag[k]:
            beta_r += terms
        else:
            beta_f += terms
    return ThetaDims(
        dim_beta_R=beta_r,
        dim_beta_F=beta_f,
        dim_vec_omega=count_vec_omega(spec.pattern),
        dim_error=spec.error.n_params,
    )


# ---------------------------------------------------------------------------
# Dataset CSV (long format): id, time, y, <regressors...>, <covariates...>
# ---------------------------------------------------------------------------

def load_dataset_csv(path, regressor_names: tuple[str, ...]) -> Dataset:
    """Read a long-format dataset CSV.

    Columns `id, time, y` are required; `regressor_names` are consumed as
    per-observation regressors; every remaining column is a subject covariate
    and must be constant within subject.  Missing values are a hard error.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in RESERVED_COLUMNS:
            if col not in header:
                raise InputError(f"dataset {path.name}: missing required column {col!r}")
        for col in regressor_names:
            if col not in header:
                raise InputError(f"dataset {path.name}: missing regressor column {col!r}")
        cov_names = tuple(c for c in header
                          if c not in RESERVED_COLUMNS and c not in regressor_names)
        rows_by_id: dict[str, list[dict]] = {}
        order: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            sid = row["id"]
            if sid is None or sid == "":
                raise InputError(f"dataset {path.name}:{lineno}: empty id")
            rows_by_id.setdefault(sid, []).append(row)
            if sid not in order:
                order.append(sid)

    def fval(row, col, sid):
        raw = row.get(col)
        if raw is None or raw.strip() == "":
            raise InputError(f"dataset {path.name}: missing value in column {col!r} "
                             f"for subject {sid!r}")
        try:
            return float(raw)
        except ValueError:
            raise InputError(f"dataset {path.name}: non-numeric value {raw!r} "
                             f"in column {col!r}") from None

    subjects = []
    for sid in order:
        rows = rows_by_id[sid]
        times = np.array([fval(r, "time", sid) for r in rows])
        y = np.array([fval(r, "y", sid) for r in rows])
        regs = {c: np.array([fval(r, c, sid) for r in rows]) for c in regressor_names}
        covs = {}
        for c in cov_names:
            vals = {fval(r, c, sid) for r in rows}
            if len(vals) != 1:
                raise InputError(f"dataset {path.name}: covariate {c!r} varies within "
                                 f"subject {sid!r} (time-varying covariates unsupported)")
            covs[c] = vals.pop()
        subjects.append(Subject(id=sid, times=times, y=y, regressors=regs,
                                covariates=covs))
    if not subjects:
        raise InputError(f"dataset {path.name}: no data rows")
    return Dataset(subjects=tuple(subjects), covariate_names=cov_names)


def write_dataset_csv(dataset: Dataset, path, regressor_names: tuple[str, ...]) -> None:
    """Write a dataset in the standard long CSV layout."""
    path = Path(path)
    header = list(RESERVED_COLUMNS) + list(regressor_names) + list(dataset.covariate_names)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset.subjects:
            R = s.regressor_matrix(regressor_names)
            for j in range(s.n):
                row = [s.id, repr(float(s.times[j])), repr(float(s.y[j]))]
                row += [repr(float(R[j, m])) for m in range(len(regressor_names))]
                row += [repr(float(s.covariates[c])) for c in dataset.covariate_names]
                writer.writerow(row)


# ---------------------------------------------------------------------------
# Model-spec documents (JSON)
# ---------------------------------------------------------------------------

def _names_to_indices(names, param_names, what) -> list[int]:
    out = []
    for n in names:
        if n not in param_names:
            raise InputError(f"{what}: unknown parameter {n!r}; model has {param_names}")
        out.append(param_names.index(n))
    return out


def parse_model_doc(doc: dict) -> ModelSpec:
    """Build a ModelSpec from its declarative JSON document (already parsed).

    Expected keys: structural, transforms (name -> transform), random (list of
    parameter names), correlations (list of [name, name]), covariates
    (name -> list of covariate names), error ({kind, a, b}).  An optional
    `init` block is consumed by `initial_theta_from_doc`.
    """
    if "structural" not in doc:
        raise InputError("model document: missing field 'structural'")
    model = get_model(doc["structural"])
    pnames = model.params
    tr_field = doc.get("transforms", {})
    if isinstance(tr_field, dict):
        unknown = set(tr_field) - set(pnames)
        if unknown:
            raise InputError(f"model document: transforms name unknown parameters {sorted(unknown)}")
        transforms = tuple(tr_field.get(p, "log") for p in pnames)
    else:
        transforms = tuple(tr_field)
    random_names = doc.get("random", list(pnames))
    ridx = _names_to_indices(random_names, pnames, "model document: 'random'")
    diag = tuple(k in ridx for k in range(model.arity))
    pairs = []
    for item in doc.get("correlations", []):
        if len(item) != 2:
            raise InputError(f"model document: correlation entry must be a pair, got {item}")
        k, l = _names_to_indices(item, pnames, "model document: 'correlations'")
        pairs.append((k, l))
    cov_field = doc.get("covariates", {})
    unknown = set(cov_field) - set(pnames)
    if unknown:
        raise InputError(f"model document: covariates name unknown parameters {sorted(unknown)}")
    covmap = CovariateMap(tuple(tuple(cov_field.get(p, ())) for p in pnames))
    err_field = dict(doc.get("error", {"kind": "additive"}))
    kind = err_field.get("kind")
    if kind not in ("additive", "proportional", "combined"):
        raise InputError(f"model document: error.kind must be additive|proportional|combined, got {kind!r}")
    error = ErrorModelSpec(kind=kind, a=float(err_field.get("a", 0.0)),
                           b=float(err_field.get("b", 0.0)))
    return ModelSpec(structural=doc["structural"], transforms=transforms,
                     covmap=covmap, pattern=CovariancePattern(model.arity, diag, tuple(pairs)),
                     error=error)


def load_model_doc(path) -> tuple[ModelSpec, dict]:
    """Parse a model-spec JSON file; returns (spec, raw document)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"model document {path.name}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise InputError(f"model document {path.name}: top level must be an object")
    return parse_model_doc(doc), doc
