"""Command-line entry point: ``gpexperts {generate,train,score,whatif,evaluate}``.

Progress goes to standard error, a JSON summary to standard output. Exit
code 0 means success, 2 a validation or input error and 1 any other failure.
Output files are written atomically.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cohort import (
    CohortError,
    atomic_write_text,
    load_cohort_dir,
    load_patient_file,
)
from .evaluation import curve_text, run_cv_experiment
from .mixture import DEFAULT_B_BAR, DEFAULT_EPS, DEFAULT_M_MAX, DEFAULT_MAX_ITER
from .mtgp import CovarianceError
from .pipeline import TrainConfig, train_bundle
from .scoring import ModelBundle, check_compatible, score_stream, whatif, write_trace
from .synth import PRESETS, generate_cohort, load_config, write_generated
from .transfer import DEFAULT_WINDOW_WIDTH, DEFAULT_WINDOWS

logger = logging.getLogger("gpexperts")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


class UsageError(Exception):
    pass


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_assignments(items, what: str) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} must look like name=value, got {item!r}")
        name, value = item.split("=", 1)
        out[name.strip()] = value.strip()
    return out


def _schedule(text):
    if text is None or text == "observation":
        return None
    try:
        step = float(text)
    except ValueError:
        raise UsageError("--schedule must be 'observation' or an interval in hours") from None
    if not step > 0:
        raise UsageError("--schedule interval must be positive")
    return step


def _load_patients(path: Path):
    if path.is_dir():
        return load_cohort_dir(path)
    if path.is_file():
        return load_patient_file(path)
    raise UsageError(f"input not found: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = load_config(path)
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"invalid generator config {path}: {exc}") from None
    else:
        kwargs = {k: _parse_value(v) for k, v in _parse_assignments(args.preset_arg, "--preset-arg").items()}
        try:
            cfg = PRESETS[args.preset](**kwargs)
        except TypeError as exc:
            raise UsageError(f"bad preset argument: {exc}") from None
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    logger.info("generating %d patients (seed %d)", args.n, args.seed)
    cohort, latent = generate_cohort(cfg, args.n, seed=args.seed)
    files = write_generated(cohort, latent, args.out)
    _emit(
        {
            "command": "generate",
            "n_patients": cohort.N,
            "n_deteriorating": int(cohort.labels.sum()),
            "seed": args.seed,
            "files": [Path(f).name for f in files],
        }
    )
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.prior is not None and not 0.0 < args.prior < 1.0:
        raise UsageError("--prior must lie in (0, 1)")
    return TrainConfig(
        eps=args.eps,
        b_bar=args.b_bar,
        m_max=args.m_max,
        force_m=args.force_m,
        n_windows=args.windows,
        window_width_hours=args.window_width,
        prior=args.prior,
        seed=args.seed,
        max_iter=args.max_iter,
        criterion=args.criterion,
    )


def _train_flags(args) -> dict:
    return {
        "eps": args.eps,
        "b_bar": args.b_bar,
        "m_max": args.m_max,
        "force_m": args.force_m,
        "windows": args.windows,
        "window_width": args.window_width,
        "prior": args.prior,
        "seed": args.seed,
        "max_iter": args.max_iter,
        "criterion": args.criterion,
    }


def cmd_train(args) -> int:
    cohort = load_cohort_dir(args.cohort)
    cfg = _train_config(args)
    trace = io.StringIO() if args.trace else None
    logger.info("training on %d patients (%d deteriorating)", cohort.N, int(cohort.labels.sum()))
    bundle, summary = train_bundle(cohort, cfg, trace=trace)
    bundle.metadata["train_flags"] = _train_flags(args)
    bundle.save(args.out)
    if trace is not None:
        atomic_write_text(args.trace, "M,iteration,q,loglik,delta\n" + trace.getvalue())
    info = summary.to_dict()
    info.pop("em")
    info.update(command="train", bundle=Path(args.out).name, flags=_train_flags(args))
    _emit(info)
    return EXIT_OK


def cmd_score(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    cohort = _load_patients(Path(args.input))
    check_compatible(cohort.patients[0], bundle, cohort.stream_names)
    schedule = _schedule(args.schedule)
    traces = []
    for i, p in enumerate(cohort.patients):
        traces.append(score_stream(p, bundle, schedule, args.lookback))
        if (i + 1) % 50 == 0:
            logger.info("scored %d/%d patients", i + 1, cohort.N)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tr in traces:
        write_trace(tr, out / f"{tr.patient_id}.csv", plot_data=args.plot_data)
    _emit(
        {
            "command": "score",
            "n_patients": len(traces),
            "rows": {tr.patient_id: len(tr) for tr in traces},
            "final_aggregate": {tr.patient_id: float(tr.aggregate[-1]) for tr in traces},
        }
    )
    return EXIT_OK


def cmd_whatif(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    cohort = _load_patients(Path(args.input))
    check_compatible(cohort.patients[0], bundle, cohort.stream_names)
    if args.patient_id is not None:
        matches = [p for p in cohort.patients if p.id == args.patient_id]
        if not matches:
            raise UsageError(f"patient {args.patient_id!r} not found")
        patient = matches[0]
    elif cohort.N == 1:
        patient = cohort.patients[0]
    else:
        raise UsageError("input holds several patients; choose one with --patient-id")
    overrides = _parse_assignments(args.set, "--set")
    if not overrides:
        raise UsageError("give at least one --set name=value")
    result = whatif(patient, bundle, overrides, _schedule(args.schedule), args.lookback)
    atomic_write_text(args.out, result.to_csv())
    _emit(
        {
            "command": "whatif",
            "patient_id": patient.id,
            "overrides": overrides,
            "beta_original": [float(b) for b in result.original.beta_hat],
            "beta_whatif": [float(b) for b in result.counterfactual.beta_hat],
            "max_abs_difference": result.max_difference,
        }
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cohort = load_cohort_dir(args.cohort)
    cfg = _train_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError("--seeds must be a comma-separated list of integers") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    out = Path(args.out)
    files = {}
    reports = []
    for s in seeds:
        logger.info("cross-validation seed %d (k=%d)", s, args.k)
        rep = run_cv_experiment(
            cohort,
            cfg,
            k=args.k,
            seed=s,
            force_m=args.force_m_ablation,
            baseline=args.baseline,
            l1_penalty=args.l1,
            endpoint=args.endpoint,
            lookback=args.lookback,
            progress=lambda msg: logger.info("  %s", msg),
        )
        reports.append(rep)
        files[f"folds_seed{s}.csv"] = rep.fold_table()
        for m in rep.models:
            files[f"curve_{m}_seed{s}.csv"] = curve_text(rep.curve(m))
    models = reports[0].models
    pooled = {m: [r.pooled_auc(m) for r in reports] for m in models}
    report = {
        "command": "evaluate",
        "k": args.k,
        "seeds": seeds,
        "flags": dict(_train_flags(args), baseline=args.baseline, l1=args.l1, endpoint=args.endpoint),
        "per_seed": [r.to_dict() for r in reports],
        "pooled_auc": pooled,
        "mean_pooled_auc": {m: float(np.mean(v)) for m, v in pooled.items()},
    }
    files["report.json"] = json.dumps(report, indent=1, sort_keys=True) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        atomic_write_text(out / name, text)
    _emit({"command": "evaluate", "pooled_auc": pooled, "mean_pooled_auc": report["mean_pooled_auc"], "files": sorted(files)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, force_m_dest="force_m"):
    p.add_argument("--eps", type=float, default=DEFAULT_EPS, help="EM stopping threshold on mean |delta beta|")
    p.add_argument("--b-bar", type=float, default=DEFAULT_B_BAR, help="Bayes-factor threshold for adding experts")
    p.add_argument("--m-max", type=int, default=DEFAULT_M_MAX, help="largest number of experts tried")
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER, help="EM iteration cap")
    p.add_argument("--criterion", choices=("q", "loglik"), default="q", help="score compared by the Bayes factor")
    p.add_argument("--windows", type=int, default=DEFAULT_WINDOWS, help="deteriorating-model windows W")
    p.add_argument("--window-width", type=float, default=DEFAULT_WINDOW_WIDTH, help="window width in hours")
    p.add_argument("--prior", type=float, default=None, help="class prior (default: training deteriorating fraction)")
    p.add_argument("--seed", type=int, default=0)
    if force_m_dest == "force_m":
        p.add_argument("--force-m", type=int, default=None, help="skip discovery and fit exactly this many experts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpexperts", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a synthetic cohort")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--config", help="generator config JSON")
    src.add_argument("--preset", choices=sorted(PRESETS), default="paper-like")
    g.add_argument("--preset-arg", action="append", metavar="NAME=VALUE", help="keyword argument for the preset")
    g.add_argument("--n", type=int, required=True, help="number of patients")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model bundle")
    t.add_argument("cohort", help="cohort directory")
    t.add_argument("--out", required=True, help="bundle path")
    t.add_argument("--trace", help="write the EM trace (CSV) here")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="risk traces for a cohort or a single-patient file")
    s.add_argument("bundle")
    s.add_argument("input", help="cohort directory or single-patient JSON file")
    s.add_argument("--out", required=True, help="output directory (one CSV per patient)")
    s.add_argument("--schedule", default=None, help="'observation' (default) or an interval in hours")
    s.add_argument("--lookback", type=float, default=None, help="history cap in hours")
    s.add_argument("--plot-data", action="store_true", help="also write <patient>.plot.json")
    s.set_defaults(func=cmd_score)

    w = sub.add_parser("whatif", help="counterfactual admission features")
    w.add_argument("bundle")
    w.add_argument("input", help="single-patient JSON file or cohort directory")
    w.add_argument("--patient-id", default=None)
    w.add_argument("--set", action="append", metavar="NAME=VALUE", help="admission override (repeatable)")
    w.add_argument("--out", required=True, help="paired trace CSV")
    w.add_argument("--schedule", default=None)
    w.add_argument("--lookback", type=float, default=None)
    w.set_defaults(func=cmd_whatif)

    e = sub.add_parser("evaluate", help="stratified cross-validation")
    e.add_argument("cohort")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--seeds", default="0", help="comma-separated experiment seeds")
    e.add_argument("--force-m", dest="force_m_ablation", type=int, default=None, help="add a forced-M ablation column")
    e.add_argument("--baseline", choices=("logistic",), default=None)
    e.add_argument("--l1", type=float, default=0.0, help="L1 penalty of the logistic baseline")
    e.add_argument("--endpoint", choices=("final", "max"), default="final")
    e.add_argument("--lookback", type=float, default=None)
    _add_train_flags(e, force_m_dest=None)
    e.set_defaults(func=cmd_evaluate, force_m=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, CohortError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (CovarianceError, FloatingPointError, RuntimeError) as exc:
        # CovarianceError is a LinAlgError, hence a ValueError: catch it first
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
