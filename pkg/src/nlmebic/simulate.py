"""Dataset simulation and Monte Carlo selection-frequency studies.

All randomness flows from a single master seed.  Each (replicate, subject)
pair gets its own counter-derived substream, so adding replicates or subjects
never perturbs the draws of earlier ones and replicate execution order cannot
matter.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CovariancePattern, Dataset, ModelSpec, Subject
from .errors import InputError, NlmeError
from .estimation import FitOptions, default_init, fit_ml, init_hint
from .params import ThetaVector
from .selection import CRITERIA, _model_summary, criterion
from .transforms import transform_codes
from .likelihood import _np_transform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimDesign:
    """Sampling design: subjects, time grid, dose, master seed.

    extra_regressors supplies constant per-subject regressor columns beyond
    the dose (e.g. tD/tinf for infusion models); covariates supplies explicit
    per-subject covariate values as (name, (v_1..v_N)) pairs.
    """

    N: int
    times: tuple[float, ...]
    dose: float = 100.0
    seed: int = 0
    extra_regressors: tuple[tuple[str, float], ...] = ()
    covariates: tuple[tuple[str, tuple[float, ...]], ...] = ()

    def __post_init__(self):
        if self.N < 1:
            raise InputError("design needs N >= 1 subjects")
        times = tuple(float(t) for t in self.times)
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise InputError("design times must be strictly increasing")
        object.__setattr__(self, "times", times)
        covs = tuple((str(n), tuple(float(v) for v in vals))
                     for n, vals in self.covariates)
        for name, vals in covs:
            if len(vals) != self.N:
                raise InputError(f"covariate {name!r}: expected {self.N} values, "
                                 f"got {len(vals)}")
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "extra_regressors",
                           tuple((str(n), float(v)) for n, v in self.extra_regressors))


def simulate_dataset(spec: ModelSpec, theta_true: ThetaVector, design: SimDesign,
                     replicate: int = 0) -> Dataset:
    """Draw one dataset from the hierarchical model.

    Per subject: eta ~ N(0, Omega_R), psi through the transforms, structural
    means at design.times, Gaussian residuals per the error model.  Fully
    determined by (design.seed, replicate, subject index).
    """
    theta_true.validate(spec)
    model = spec.model
    extra = dict(design.extra_regressors)
    n = len(design.times)
    t = np.array(design.times)
    cols = []
    for name in model.regressors:
        if name == "dose":
            cols.append(np.full(n, design.dose))
        elif name in extra:
            cols.append(np.full(n, extra[name]))
        else:
            raise InputError(f"structural model needs regressor {name!r}; "
                             f"add it to design.extra_regressors")
    R = np.column_stack(cols) if cols else np.zeros((n, 0))
    cov_values = dict(design.covariates)
    tcodes = transform_codes(spec.transforms)
    active = np.array(spec.pattern.active, dtype=np.int64)
    d_r = spec.pattern.d_r
    om_chol = (np.linalg.cholesky(theta_true.omega_r(spec))
               if d_r else np.zeros((0, 0)))
    parts = theta_true.beta_by_param(spec)
    err = spec.error.with_params(theta_true.error_params)
    width = max(4, len(str(design.N)))
    subjects = []
    for i in range(design.N):
        rng = np.random.default_rng(
            np.random.SeedSequence(design.seed, spawn_key=(replicate, i)))
        covs = {name: cov_values[name][i] for name in cov_values}
        phi = np.empty(spec.pattern.d)
        for k in range(spec.pattern.d):
            coefs = parts[k]
            phi[k] = coefs[0]
            for j, cname in enumerate(spec.covmap.entries[k], start=1):
                phi[k] += coefs[j] * covs[cname]
        if d_r:
            eta = om_chol @ rng.standard_normal(d_r)
            phi[active] += eta
        psi = _np_transform(phi, tcodes)
        with np.errstate(all="ignore"):
            f = np.asarray(model.eval_fn(t, R, psi), dtype=float)
        if f.shape != t.shape or not np.all(np.isfinite(f)):
            raise InputError(f"simulated subject {i}: structural model returned "
                             f"non-finite predictions at psi={psi}")
        eps = rng.standard_normal(n)
        # raw (unfloored) sd: a zero-error design must give exactly noiseless y
        if err.kind == "additive":
            sd = err.a
        elif err.kind == "proportional":
            sd = err.b * np.abs(f)
        else:
            sd = err.a + err.b * f
        y = f + sd * eps
        regs = {name: R[:, m].copy() for m, name in enumerate(model.regressors)}
        subjects.append(Subject(id=f"S{i + 1:0{width}d}", times=t.copy(), y=y,
                                regressors=regs, covariates=covs))
    return Dataset(subjects=tuple(subjects),
                   covariate_names=tuple(cov_values))


@dataclass(frozen=True)
class McConfig:
    """A selection-frequency study: truth, candidate structures, criterion."""

    replicates: int
    true_spec: ModelSpec
    true_theta: ThetaVector
    candidates: tuple[CovariancePattern, ...]
    criterion: str
    design: SimDesign
    fit: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.replicates < 1:
            raise InputError("study needs replicates >= 1")
        if not self.candidates:
            raise InputError("study needs a non-empty candidate list")
        if self.criterion not in CRITERIA:
            raise InputError(f"unknown criterion {self.criterion!r}")


@dataclass
class McResult:
    """Selection counts per candidate plus per-replicate detail rows."""

    config: McConfig
    candidate_summaries: tuple[str, ...]
    counts: dict[str, int]
    failed: int
    details: list[tuple[int, str, float | None, bool]]

    @property
    def frequencies(self) -> dict[str, float]:
        r = self.config.replicates
        return {s: c / r for s, c in self.counts.items()}

    @property
    def failed_fraction(self) -> float:
        return self.failed / self.config.replicates

    def write_csv(self, freq_path, detail_path) -> None:
        with open(freq_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["candidate", "selected_count", "frequency"])
            for s in self.candidate_summaries:
                writer.writerow([s, self.counts[s], repr(self.counts[s]
                                                         / self.config.replicates)])
            writer.writerow(["failed", self.failed,
                             repr(self.failed / self.config.replicates)])
        with open(detail_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "candidate", "criterion_value", "selected"])
            for rep, cand, value, sel in self.details:
                writer.writerow([rep, cand,
                                 "" if value is None else repr(value),
                                 "yes" if sel else ""])


def _candidate_summaries(config: McConfig) -> tuple[str, ...]:
    return tuple(_model_summary(config.true_spec, p, config.true_spec.covmap)
                 for p in config.candidates)


def _mc_replicate(args) -> tuple[int, list[float | None]]:
    config, rep = args
    dataset = simulate_dataset(config.true_spec, config.true_theta,
                               config.design, replicate=rep)
    hint = init_hint(dataset, config.true_spec.structural, config.true_spec.transforms)
    values: list[float | None] = []
    for pat in config.candidates:
        spec = replace(config.true_spec, pattern=pat)
        try:
            init = default_init(dataset, spec, hint=hint)
            fit = fit_ml(dataset, spec, init=init, opts=config.fit)
            values.append(criterion(fit, config.criterion).value)
        except (NlmeError, np.linalg.LinAlgError) as e:
            log.warning("replicate %d candidate %s failed: %s", rep,
                        pat.summary(config.true_spec.param_names), e)
            values.append(None)
    return rep, values


def mc_selection_study(config: McConfig, jobs: int = 1) -> McResult:
    """Simulate/fit/select over replicates; count criterion-argmin candidates.

    Replicates whose every candidate fit fails are counted in `failed`, never
    silently dropped.  The count reduction is order-independent.
    """
    summaries = _candidate_summaries(config)
    n_params = [p.d_r + len(p.pairs) for p in config.candidates]
    argv = [(config, rep) for rep in range(config.replicates)]
    if jobs > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_mc_replicate, argv))
    else:
        results = [_mc_replicate(a) for a in argv]
    counts = {s: 0 for s in summaries}
    failed = 0
    details: list[tuple[int, str, float | None, bool]] = []
    for rep, values in sorted(results):
        ranked = [(v, n_params[i], summaries[i], i)
                  for i, v in enumerate(values) if v is not None]
        sel_idx = min(ranked)[3] if ranked else None
        if sel_idx is None:
            failed += 1
        else:
            counts[summaries[sel_idx]] += 1
        for i, v in enumerate(values):
            details.append((rep, summaries[i], v, i == sel_idx))
    return McResult(config=config, candidate_summaries=summaries, counts=counts,
                    failed=failed, details=details)
