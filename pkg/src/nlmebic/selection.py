"""Information criteria, model-space enumeration and the stepwise search.

The joint criterion penalizes parameters tied to random components by log N
and purely fixed components (including residual-error parameters) by
log n_tot.  The stepwise engine alternates covariance-structure phases with
single-covariate-move phases, accepting only strict improvements, and records
every fitted candidate in a trace.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CovariancePattern, CovariateMap, Dataset, ModelSpec
from .errors import InputError, NlmeError, TooManyStructuresError
from .estimation import FitOptions, FitResult, default_init, fit_ml, init_hint
from .models import ErrorModelSpec

log = logging.getLogger(__name__)

CRITERIA = ("bic_h", "bic_v", "bic_joint", "aic", "bic_n", "bic_ntot")
STRUCTURE_CAP = 4


@dataclass(frozen=True)
class CriterionValue:
    """One criterion evaluation: value = -2 loglik + penalty exactly."""

    kind: str
    value: float
    penalty: float
    dims_used: "ThetaDims"


def criterion(fit: FitResult, kind: str) -> CriterionValue:
    """Evaluate one of the six criteria on a fit (natural logarithms)."""
    if kind not in CRITERIA:
        raise InputError(f"unknown criterion {kind!r}; expected one of {CRITERIA}")
    dims = fit.dims
    ln_n = math.log(fit.n_subjects)
    ln_tot = math.log(fit.n_total)
    if kind == "bic_h":
        pen = dims.dim_beta_R * ln_n + (dims.dim_beta_F + dims.dim_error) * ln_tot
    elif kind == "bic_v":
        pen = dims.dim_vec_omega * ln_n
    elif kind == "bic_joint":
        pen = dims.dim_theta_R * ln_n + dims.dim_theta_F * ln_tot
    elif kind == "aic":
        pen = 2.0 * dims.dim_theta
    elif kind == "bic_n":
        pen = dims.dim_theta * ln_n
    else:
        pen = dims.dim_theta * ln_tot
    return CriterionValue(kind=kind, value=-2.0 * fit.loglik + pen,
                          penalty=pen, dims_used=dims)


def enumerate_cov_structures(d: int, mode: str,
                             fixed_active: tuple[int, ...] | None = None,
                             cap: int = STRUCTURE_CAP) -> tuple[CovariancePattern, ...]:
    """All covariance patterns of one of three families, deterministically ordered.

    mode "diagonal": the 2^d diagonal masks; "full": every legal (diag,
    pairs) combination; "fixed": the correlation masks over the given active
    set.  Order: number of free entries, then lexicographic.
    """
    mode = {"diagonal-only": "diagonal", "fixed-diagonal": "fixed"}.get(mode, mode)
    if mode not in ("diagonal", "full", "fixed"):
        raise InputError(f"unknown enumeration mode {mode!r}")
    if d > cap:
        raise TooManyStructuresError(f"d = {d} exceeds the structure cap {cap}")
    out: list[CovariancePattern] = []
    if mode == "fixed":
        if fixed_active is None:
            raise InputError("fixed-diagonal enumeration needs the active set")
        active = tuple(sorted(fixed_active))
        diag = tuple(k in active for k in range(d))
        all_pairs = list(itertools.combinations(active, 2))
        for r in range(len(all_pairs) + 1):
            for pairs in itertools.combinations(all_pairs, r):
                out.append(CovariancePattern(d, diag, pairs))
    else:
        for bits in itertools.product([False, True], repeat=d):
            diag = tuple(bits)
            out.append(CovariancePattern(d, diag))
            if mode == "full":
                active = [k for k in range(d) if diag[k]]
                all_pairs = list(itertools.combinations(active, 2))
                for r in range(1, len(all_pairs) + 1):
                    for pairs in itertools.combinations(all_pairs, r):
                        out.append(CovariancePattern(d, diag, pairs))
    key = lambda p: (p.d_r + len(p.pairs), p.diag, p.pairs)
    return tuple(sorted(out, key=key))


def covariate_moves(current: CovariateMap, pool, direction: str) -> tuple[CovariateMap, ...]:
    """Maps differing from `current` by exactly one covariate inclusion/exclusion.

    Ordered by parameter index then covariate name.
    """
    if direction not in ("add", "remove"):
        raise InputError(f"direction must be add|remove, got {direction!r}")
    moves = []
    for k in range(current.d):
        have = set(current.entries[k])
        if direction == "add":
            options = [c for c in sorted(pool) if c not in have]
        else:
            options = sorted(have)
        for c in options:
            entries = list(current.entries)
            if direction == "add":
                entries[k] = tuple(sorted(have | {c}))
            else:
                entries[k] = tuple(sorted(have - {c}))
            moves.append(CovariateMap(tuple(entries)))
    return tuple(moves)


# ---------------------------------------------------------------------------
# Stepwise engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepwiseOptions:
    direction: str = "forward"              # forward adds, backward removes
    start: CovariateMap | None = None       # overrides the direction default
    cov_mode: str = "diagonal"
    patterns: tuple[CovariancePattern, ...] | None = None  # overrides cov_mode
    error: ErrorModelSpec = ErrorModelSpec("additive")
    tol: float = 1e-6
    max_steps: int = 50
    fit: FitOptions = field(default_factory=FitOptions)
    jobs: int = 1
    cap: int = STRUCTURE_CAP


@dataclass(frozen=True)
class CandidateRecord:
    pattern: CovariancePattern
    covmap: CovariateMap
    summary: str
    value: float | None
    note: str = ""


@dataclass(frozen=True)
class Step:
    index: int
    phase: str                  # "covariance" | "covariate"
    candidates: tuple[CandidateRecord, ...]
    accepted: str | None        # summary of the newly accepted model, if any


@dataclass
class SelectionTrace:
    criterion: str
    steps: list[Step] = field(default_factory=list)
    final_spec: ModelSpec | None = None
    final_fit: FitResult | None = None

    def accepted_values(self) -> list[float]:
        vals = []
        for step in self.steps:
            if step.accepted is None:
                continue
            for c in step.candidates:
                if c.summary == step.accepted:
                    vals.append(c.value)
                    break
        return vals

    def to_csv(self, path) -> None:
        """Trace export mirroring the stepwise tables: one row per candidate."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "phase", "pattern", "covariates",
                             "criterion", "value", "accepted", "note"])
            for step in self.steps:
                for c in step.candidates:
                    writer.writerow([
                        step.index, step.phase,
                        c.pattern.summary(self._names()),
                        c.covmap.summary(self._names()),
                        self.criterion,
                        "" if c.value is None else repr(c.value),
                        "yes" if step.accepted == c.summary else "",
                        c.note,
                    ])

    def _names(self):
        return self.final_spec.param_names if self.final_spec else None


def _model_summary(spec_like: ModelSpec, pattern: CovariancePattern,
                   covmap: CovariateMap) -> str:
    names = spec_like.param_names
    return f"Omega={pattern.summary(names)} C={{{covmap.summary(names)}}}"


def _fit_candidate(dataset: Dataset, base_spec: ModelSpec,
                   pattern: CovariancePattern, covmap: CovariateMap,
                   kind: str, fit_opts: FitOptions, hint) -> tuple:
    """Fit one candidate; returns (value, fit, note) with value None on failure."""
    spec = replace(base_spec, pattern=pattern, covmap=covmap)
    try:
        init = default_init(dataset, spec, hint=hint)
        fit = fit_ml(dataset, spec, init=init, opts=fit_opts)
        value = criterion(fit, kind).value
        return value, fit, ""
    except (NlmeError, np.linalg.LinAlgError) as e:
        return None, None, f"{type(e).__name__}: {e}"


def _fit_candidate_star(args):
    return _fit_candidate(*args)


class _CandidateCache:
    """Deterministic fit cache over (pattern, covmap), optionally parallel."""

    def __init__(self, dataset, base_spec, kind, fit_opts, hint, jobs):
        self.dataset = dataset
        self.base_spec = base_spec
        self.kind = kind
        self.fit_opts = fit_opts
        self.hint = hint
        self.jobs = jobs
        self.cache: dict = {}

    def evaluate(self, models: list[tuple[CovariancePattern, CovariateMap]]):
        missing = [m for m in dict.fromkeys(models) if m not in self.cache]
        argv = [(self.dataset, self.base_spec, p, c, self.kind, self.fit_opts,
                 self.hint) for p, c in missing]
        if self.jobs > 1 and len(argv) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(_fit_candidate_star, argv))
        else:
            results = [_fit_candidate_star(a) for a in argv]
        for key, res in zip(missing, results):
            self.cache[key] = res
            if res[0] is None:
                log.warning("candidate %s skipped: %s",
                            _model_summary(self.base_spec, *key), res[2])
        return [self.cache[m] for m in models]


def stepwise_select(dataset: Dataset, structural: str, transforms, pool,
                    kind: str = "bic_joint",
                    opts: StepwiseOptions | None = None) -> SelectionTrace:
    """Alternating covariance-structure / covariate stepwise search.

    Phase a fits every covariance structure with the covariate map fixed;
    phase b fits every single-covariate move with the structure fixed.  A move
    is accepted only when it strictly improves the incumbent criterion by more
    than `tol`; the search stops when two consecutive phases make no move (or
    at max_steps).  Failed candidate fits are recorded and skipped, never
    aborting the search.
    """
    opts = opts or StepwiseOptions()
    if kind not in CRITERIA:
        raise InputError(f"unknown criterion {kind!r}")
    if opts.direction not in ("forward", "backward"):
        raise InputError(f"direction must be forward|backward, got {opts.direction!r}")
    transforms = tuple(transforms)
    pool = tuple(sorted(pool))
    from .models import get_model

    d = get_model(structural).arity
    if opts.patterns is not None:
        patterns = tuple(opts.patterns)
        if not patterns:
            raise InputError("explicit pattern list must be non-empty")
    else:
        patterns = enumerate_cov_structures(d, opts.cov_mode, cap=opts.cap)
    if opts.start is not None:
        covmap = opts.start
    elif opts.direction == "forward":
        covmap = CovariateMap.empty(d)
    else:
        covmap = CovariateMap.full(d, pool)
    base_spec = ModelSpec(structural=structural, transforms=transforms,
                          covmap=covmap, pattern=patterns[0], error=opts.error)
    base_spec.validate_against(dataset)
    for c in pool:
        if c not in dataset.covariate_names:
            raise InputError(f"pool covariate {c!r} not present in dataset columns")
    hint = init_hint(dataset, structural, transforms)
    cache = _CandidateCache(dataset, base_spec, kind, opts.fit, hint, opts.jobs)
    move_dir = "add" if opts.direction == "forward" else "remove"

    trace = SelectionTrace(criterion=kind)
    inc_pattern, inc_covmap = patterns[0], covmap
    inc_value: float | None = None
    streak = 0
    phase = "covariance"
    step_idx = 0
    while step_idx < opts.max_steps and streak < 2:
        if phase == "covariance":
            models = [(p, inc_covmap) for p in patterns]
        else:
            moves = covariate_moves(inc_covmap, pool, move_dir)
            models = [(inc_pattern, m) for m in moves]
        next_phase = "covariate" if phase == "covariance" else "covariance"
        if not models:
            # nothing to try in this phase (e.g. exhausted covariate pool)
            streak += 1
            phase = next_phase
            continue
        step_idx += 1
        results = cache.evaluate(models)
        records = []
        best = None  # (value, n_params, summary, pattern, covmap)
        for (pat, cm), (value, fit, note) in zip(models, results):
            summary = _model_summary(base_spec, pat, cm)
            records.append(CandidateRecord(pattern=pat, covmap=cm,
                                           summary=summary, value=value, note=note))
            if value is None:
                continue
            n_params = fit.dims.dim_theta
            entry = (value, n_params, summary, pat, cm)
            if best is None or entry[:3] < best[:3]:
                best = entry
            if (pat, cm) == (inc_pattern, inc_covmap):
                inc_value = value
        accepted = None
        inc_eff = inc_value if inc_value is not None else np.inf
        if best is not None and (best[3], best[4]) != (inc_pattern, inc_covmap) \
                and best[0] < inc_eff - opts.tol:
            inc_pattern, inc_covmap = best[3], best[4]
            inc_value = best[0]
            accepted = best[2]
            streak = 0
        else:
            streak += 1
        trace.steps.append(Step(index=step_idx, phase=phase,
                                candidates=tuple(records), accepted=accepted))
        phase = next_phase
    final_spec = replace(base_spec, pattern=inc_pattern, covmap=inc_covmap)
    value, fit, note = cache.evaluate([(inc_pattern, inc_covmap)])[0]
    trace.final_spec = final_spec
    trace.final_fit = fit
    return trace


def refine_correlations(final_spec: ModelSpec, dataset: Dataset,
                        kind: str = "bic_joint",
                        opts: StepwiseOptions | None = None,
                        trace: SelectionTrace | None = None) -> ModelSpec:
    """Try correlation masks over a diagonal incumbent's active set.

    Returns the incumbent spec unless some mask strictly improves the
    criterion by more than tol.  With a single random effect there is nothing
    to try and the incumbent is returned unchanged.
    """
    opts = opts or StepwiseOptions()
    if final_spec.pattern.pairs:
        raise InputError("refine_correlations expects a diagonal incumbent pattern")
    active = final_spec.pattern.active
    if len(active) < 2:
        return final_spec
    masks = enumerate_cov_structures(final_spec.pattern.d, "fixed",
                                     fixed_active=active, cap=opts.cap)
    hint = init_hint(dataset, final_spec.structural, final_spec.transforms)
    cache = _CandidateCache(dataset, final_spec, kind, opts.fit, hint, opts.jobs)
    models = [(p, final_spec.covmap) for p in masks]
    results = cache.evaluate(models)
    records = []
    best = None
    inc_value = None
    for (pat, cm), (value, fit, note) in zip(models, results):
        summary = _model_summary(final_spec, pat, cm)
        records.append(CandidateRecord(pattern=pat, covmap=cm, summary=summary,
                                       value=value, note=note))
        if value is None:
            continue
        entry = (value, fit.dims.dim_theta, summary, pat)
        if best is None or entry[:3] < best[:3]:
            best = entry
        if pat == final_spec.pattern:
            inc_value = value
    accepted = None
    chosen = final_spec.pattern
    inc_eff = inc_value if inc_value is not None else np.inf
    if best is not None and best[3] != final_spec.pattern and best[0] < inc_eff - opts.tol:
        chosen = best[3]
        accepted = best[2]
    if trace is not None:
        trace.steps.append(Step(index=len(trace.steps) + 1, phase="covariance",
                                candidates=tuple(records), accepted=accepted))
        if accepted is not None:
            trace.final_spec = replace(final_spec, pattern=chosen)
            trace.final_fit = cache.cache[(chosen, final_spec.covmap)][1]
    return replace(final_spec, pattern=chosen)
