"""Command-line front end: fit, select, simulate, mc.

Every command is a pure function of its input files, flags and --seed;
primary outputs are byte-identical across reruns (the manifest's wall time is
the only varying field).  Exit codes: 0 success, 1 input error, 2 fit
non-convergence (results still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CovariateMap,
    load_dataset_csv,
    load_model_doc,
    parse_model_doc,
    write_dataset_csv,
)
from .errors import InputError, MaxIterationsError, NlmeError
from .estimation import (
    FitOptions,
    FitResult,
    natural_names,
    standard_errors,
    fit_ml,
)
from .models import ErrorModelSpec, get_model
from .params import initial_theta_from_doc
from .selection import (
    CRITERIA,
    CriterionValue,
    StepwiseOptions,
    criterion,
    enumerate_cov_structures,
    refine_correlations,
    stepwise_select,
)
from .simulate import McConfig, SimDesign, mc_selection_study, simulate_dataset

log = logging.getLogger(__name__)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, inputs: list[Path], flags: dict,
                    seed: int, outputs: list[str], t0: float) -> None:
    record = {
        "tool": "nlmebic",
        "version": __version__,
        "command": command,
        "flags": flags,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "master_seed": seed,
        "outputs": outputs,
    }
    canon = json.dumps(record, sort_keys=True)
    record["config_hash"] = hashlib.sha256(canon.encode()).hexdigest()
    record["wall_time_s"] = round(time.perf_counter() - t0, 3)
    (out_dir / "manifest.json").write_text(json.dumps(record, indent=2,
                                                      sort_keys=True) + "\n")


def _criteria_block(fit: FitResult) -> dict[str, CriterionValue]:
    return {kind: criterion(fit, kind) for kind in CRITERIA}


def _fit_json(fit: FitResult) -> dict:
    names = natural_names(fit.spec)
    est = fit.natural_estimates
    se = fit.se
    rse = fit.rse_percent
    table = {}
    for i, name in enumerate(names):
        entry = {"estimate": float(est[i])}
        if se is not None and np.isfinite(se[i]):
            entry["se"] = float(se[i])
            entry["rse_percent"] = float(rse[i]) if np.isfinite(rse[i]) else None
        if name in fit.wald_p:
            entry["p_value"] = fit.wald_p[name]
        table[name] = entry
    dims = fit.dims
    return {
        "structural": fit.spec.structural,
        "error_kind": fit.spec.error.kind,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "n_subjects": fit.n_subjects,
        "n_total": fit.n_total,
        "dims": {
            "beta_R": dims.dim_beta_R, "beta_F": dims.dim_beta_F,
            "vec_omega": dims.dim_vec_omega, "error": dims.dim_error,
            "theta_R": dims.dim_theta_R, "theta_F": dims.dim_theta_F,
            "theta": dims.dim_theta,
        },
        "criteria": {k: {"value": c.value, "penalty": c.penalty}
                     for k, c in _criteria_block(fit).items()},
        "standardization": {c: {"mean": m, "sd": s}
                            for c, (m, s) in sorted(fit.standardization.items())},
        "se_message": fit.se_message,
    }


def _fit_text(fit: FitResult) -> str:
    names = natural_names(fit.spec)
    est = fit.natural_estimates
    lines = []
    lines.append("nlmebic fit report")
    lines.append("=" * 40)
    lines.append(f"structural: {fit.spec.structural}")
    lines.append(f"model: {fit.spec.summary()}")
    lines.append(f"error: {fit.spec.error.kind}")
    lines.append(f"dataset: N={fit.n_subjects} subjects, n_total={fit.n_total}")
    lines.append(f"loglik: {fit.loglik:.6f}")
    lines.append(f"converged: {'yes' if fit.converged else 'no'}   "
                 f"iterations: {fit.iterations}")
    d = fit.dims
    lines.append(f"dims: theta_R={d.dim_theta_R} theta_F={d.dim_theta_F} "
                 f"(beta_R={d.dim_beta_R} beta_F={d.dim_beta_F} "
                 f"vec_omega={d.dim_vec_omega} error={d.dim_error})")
    lines.append("")
    lines.append(f"{'parameter':<20}{'estimate':>14}{'se':>12}{'rse%':>10}{'p':>12}")
    for i, name in enumerate(names):
        se_s = rse_s = p_s = ""
        if fit.se is not None and np.isfinite(fit.se[i]):
            se_s = f"{fit.se[i]:.4g}"
            if np.isfinite(fit.rse_percent[i]):
                rse_s = f"{fit.rse_percent[i]:.2f}"
        if name in fit.wald_p:
            p_s = f"{fit.wald_p[name]:.3g}"
        lines.append(f"{name:<20}{est[i]:>14.6g}{se_s:>12}{rse_s:>10}{p_s:>12}")
    lines.append("")
    lines.append("criteria")
    for kind, c in _criteria_block(fit).items():
        lines.append(f"  {kind:<10} {c.value:.6f}   (penalty {c.penalty:.6f})")
    if fit.standardization:
        lines.append("")
        lines.append("covariate standardization (internal)")
        for c, (m, s) in sorted(fit.standardization.items()):
            lines.append(f"  {c}: mean={m:.6g} sd={s:.6g}")
    if fit.se_message:
        lines.append("")
        lines.append(f"note: {fit.se_message}")
    return "\n".join(lines) + "\n"


def _write_fit(fit: FitResult, out_dir: Path, stem: str = "fit") -> list[str]:
    (out_dir / f"{stem}.txt").write_text(_fit_text(fit))
    (out_dir / f"{stem}.json").write_text(
        json.dumps(_fit_json(fit), indent=2, sort_keys=True) + "\n")
    return [f"{stem}.txt", f"{stem}.json"]


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise InputError(f"{what} file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{what} {path.name}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{what} {path.name}: top level must be an object")
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    spec, doc = load_model_doc(Path(args.spec))
    dataset = load_dataset_csv(Path(args.data), get_model(spec.structural).regressors)
    spec.validate_against(dataset)
    init = initial_theta_from_doc(spec, doc["init"]) if "init" in doc else None
    opts = FitOptions(nodes=args.nodes, seed=args.seed, max_iter=args.max_iter)
    out = _out_dir(args)
    flags = {"nodes": args.nodes, "criterion": args.criterion, "jobs": args.jobs,
             "max_iter": args.max_iter}
    exit_code = 0
    try:
        fit = fit_ml(dataset, spec, init=init, opts=opts)
        fit = standard_errors(fit, dataset, spec)
    except MaxIterationsError as e:
        if e.result is None:
            raise
        fit = e.result
        exit_code = 2
    outputs = _write_fit(fit, out)
    _write_manifest(out, "fit", [Path(args.data), Path(args.spec)], flags,
                    args.seed, outputs, t0)
    print((out / "fit.txt").read_text(), end="")
    return exit_code


def _search_options(doc: dict, args) -> tuple[str, tuple, tuple, str, StepwiseOptions]:
    for key in ("structural", "pool"):
        if key not in doc:
            raise InputError(f"search config: missing field {key!r}")
    structural = doc["structural"]
    model = get_model(structural)
    tr_field = doc.get("transforms", {})
    if isinstance(tr_field, dict):
        transforms = tuple(tr_field.get(p, "log") for p in model.params)
    else:
        transforms = tuple(tr_field)
    pool = tuple(doc["pool"])
    err_field = dict(doc.get("error", {"kind": "additive"}))
    error = ErrorModelSpec(kind=err_field.get("kind", "additive"),
                           a=float(err_field.get("a", 0.0)),
                           b=float(err_field.get("b", 0.0)))
    start = None
    if "start" in doc:
        start = CovariateMap(tuple(tuple(doc["start"].get(p, ())) for p in model.params))
    kind = args.criterion or doc.get("criterion", "bic_joint")
    opts = StepwiseOptions(
        direction=args.direction or doc.get("direction", "forward"),
        start=start,
        cov_mode=doc.get("cov_mode", "diagonal"),
        error=error,
        tol=float(doc.get("tol", 1e-6)),
        max_steps=int(doc.get("max_steps", 50)),
        fit=FitOptions(nodes=args.nodes, seed=args.seed),
        jobs=args.jobs,
    )
    return structural, transforms, pool, kind, opts


def cmd_select(args) -> int:
    t0 = time.perf_counter()
    doc = _load_json(Path(args.config), "search config")
    structural, transforms, pool, kind, opts = _search_options(doc, args)
    dataset = load_dataset_csv(Path(args.data), get_model(structural).regressors)
    trace = stepwise_select(dataset, structural, transforms, pool, kind, opts)
    if args.refine_corr and trace.final_spec is not None \
            and not trace.final_spec.pattern.pairs:
        refine_correlations(trace.final_spec, dataset, kind, opts, trace=trace)
    out = _out_dir(args)
    outputs = ["trace.csv"]
    trace.to_csv(out / "trace.csv")
    if trace.final_fit is not None:
        fit = standard_errors(trace.final_fit, dataset, trace.final_spec)
        outputs += _write_fit(fit, out, stem="final_fit")
    flags = {"criterion": kind, "direction": opts.direction, "jobs": args.jobs,
             "nodes": args.nodes, "refine_corr": bool(args.refine_corr)}
    _write_manifest(out, "select", [Path(args.data), Path(args.config)], flags,
                    args.seed, outputs, t0)
    print(f"selected: {trace.final_spec.summary()}")
    if trace.final_fit is not None:
        print(f"{kind}: {criterion(trace.final_fit, kind).value:.6f}")
    return 0


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    spec, _ = load_model_doc(Path(args.spec))
    theta_doc = _load_json(Path(args.theta), "theta")
    theta = initial_theta_from_doc(spec, theta_doc)
    times = tuple(float(x) for x in args.times.split(","))
    extra = ()
    if args.regressor:
        extra = tuple((kv.split("=", 1)[0], float(kv.split("=", 1)[1]))
                      for kv in args.regressor)
    design = SimDesign(N=args.N, times=times, dose=args.dose, seed=args.seed,
                       extra_regressors=extra)
    dataset = simulate_dataset(spec, theta, design)
    out = _out_dir(args)
    write_dataset_csv(dataset, out / "data.csv", get_model(spec.structural).regressors)
    flags = {"N": args.N, "times": list(times), "dose": args.dose,
             "regressor": list(args.regressor or [])}
    _write_manifest(out, "simulate", [Path(args.spec), Path(args.theta)], flags,
                    args.seed, ["data.csv"], t0)
    print(f"wrote {dataset.n_total} rows for {dataset.n_subjects} subjects "
          f"to {out / 'data.csv'}")
    return 0


def _study_config(doc: dict, args) -> McConfig:
    for key in ("replicates", "design", "model", "theta"):
        if key not in doc:
            raise InputError(f"study config: missing field {key!r}")
    spec = parse_model_doc(doc["model"])
    theta = initial_theta_from_doc(spec, doc["theta"])
    dz = doc["design"]
    seed = args.seed if args.seed is not None else int(dz.get("seed", 0))
    design = SimDesign(
        N=int(dz["N"]),
        times=tuple(dz["times"]),
        dose=float(dz.get("dose", 100.0)),
        seed=seed,
        extra_regressors=tuple((k, float(v))
                               for k, v in dz.get("extra_regressors", {}).items()),
        covariates=tuple((k, tuple(v)) for k, v in dz.get("covariates", {}).items()),
    )
    cand_field = doc.get("candidates", {"mode": "diagonal"})
    d = spec.pattern.d
    if "patterns" in cand_field:
        pats = []
        for p in cand_field["patterns"]:
            sub = parse_model_doc({**doc["model"], "random": p.get("random", []),
                                   "correlations": p.get("correlations", [])})
            pats.append(sub.pattern)
        candidates = tuple(pats)
    else:
        mode = cand_field.get("mode", "diagonal")
        fixed = None
        if mode in ("fixed", "fixed-diagonal"):
            names = cand_field.get("active")
            if not names:
                raise InputError("study config: fixed-diagonal candidates need 'active'")
            pnames = spec.param_names
            fixed = tuple(pnames.index(n) for n in names)
        candidates = enumerate_cov_structures(d, mode, fixed_active=fixed)
    replicates = args.replicates or int(doc["replicates"])
    kind = args.criterion or doc.get("criterion", "bic_joint")
    return McConfig(replicates=replicates, true_spec=spec, true_theta=theta,
                    candidates=candidates, criterion=kind, design=design,
                    fit=FitOptions(nodes=args.nodes, seed=seed))


def cmd_mc(args) -> int:
    t0 = time.perf_counter()
    doc = _load_json(Path(args.config), "study config")
    config = _study_config(doc, args)
    result = mc_selection_study(config, jobs=args.jobs)
    out = _out_dir(args)
    result.write_csv(out / "frequencies.csv", out / "details.csv")
    flags = {"replicates": config.replicates, "criterion": config.criterion,
             "jobs": args.jobs, "nodes": args.nodes}
    _write_manifest(out, "mc", [Path(args.config)], flags, config.design.seed,
                    ["frequencies.csv", "details.csv"], t0)
    for s in result.candidate_summaries:
        print(f"{s}: {result.counts[s]}/{config.replicates}")
    if result.failed:
        print(f"failed: {result.failed}/{config.replicates}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlmebic",
        description="Nonlinear mixed-effects fitting and BIC-based joint "
                    "covariate / random-effects selection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default,
                       help="master seed; all randomness derives from it")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes (outputs are independent of this)")
        p.add_argument("--nodes", type=int, default=1,
                       help="quadrature nodes per dimension (1 = Laplace)")
        p.add_argument("--criterion", choices=CRITERIA, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("fit", help="fit one model by maximum likelihood")
    p.add_argument("data", help="dataset CSV (long format)")
    p.add_argument("spec", help="model-spec JSON document")
    p.add_argument("--max-iter", type=int, default=500,
                   help="outer quasi-Newton iteration cap")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="stepwise joint covariate/structure selection")
    p.add_argument("data", help="dataset CSV (long format)")
    p.add_argument("config", help="search-config JSON document")
    p.add_argument("--direction", choices=("forward", "backward"), default=None)
    p.add_argument("--refine-corr", action="store_true",
                   help="after a diagonal search, try adding correlations")
    common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="simulate a dataset from a spec + theta")
    p.add_argument("spec", help="model-spec JSON document")
    p.add_argument("theta", help="theta JSON document (psi/omega_sd/corr/error)")
    p.add_argument("--N", type=int, required=True, help="number of subjects")
    p.add_argument("--times", required=True, help="comma-separated sampling times")
    p.add_argument("--dose", type=float, default=100.0)
    p.add_argument("--regressor", action="append", metavar="NAME=VALUE",
                   help="extra constant regressor column (e.g. tinf=0.5)")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc", help="Monte Carlo selection-frequency study")
    p.add_argument("config", help="study-config JSON document")
    p.add_argument("--replicates", type=int, default=None)
    common(p, seed_default=None)
    p.set_defaults(func=cmd_mc)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NlmeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
