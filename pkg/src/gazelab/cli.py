"""Command-line front end: ``gazelab {encode,fit,simulate,compare}``.

Every command writes a ``manifest.json`` into ``--output-dir`` and every
result file points back to it. Exit status: 0 on success, 2 for usage
errors (including a model/input mismatch), 3 for invalid input data, 4 when
a fitter fails, 5 for I/O errors.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cox import fit_cox
from .design import build_frame
from .errors import (ConvergenceError, DivergenceError, GazelabError, SeparationError,
                     SingularityError, StratumError)
from .gee import WorkingCorrelation, gee_fit
from .glm import fit_irls, fit_lag
from .glmm import fit_glmm_laplace
from .ingest import DEFAULT_BIN_SECONDS, apply_exclusions, load_long_format
from .report import (METHODS, VARIANCE_MODELS, coefficient_table, se_table, tables_to_json,
                     tables_to_text, variance_table)
from .rle import (episodes_to_survival, is_episode_file, read_episode_file, rle_encode,
                  trial_covariates, write_episode_file)
from .sim import PRESETS, SimConfig, simulate, summarize_runs, write_simulation

logger = logging.getLogger("gazelab")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_FIT, EXIT_IO = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
MODELS = ("glm", "lag", "glmm", "gee", "cox")
CORR_KINDS = {"ind": "independence", "ar1": "ar1", "ma": "toeplitz_band"}
_FIT_ERRORS = (SingularityError, SeparationError, DivergenceError, ConvergenceError,
               StratumError, ArithmeticError)


class UsageError(Exception):
    """Arguments are well-formed but inconsistent with each other or the input."""


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, args, out_dir: Path, argv):
        self.out_dir = out_dir
        self.doc = {
            "command": command,
            "argv": list(argv),
            "options": {k: v for k, v in vars(args).items() if k != "func"},
            "tool_version": __version__,
            "inputs": [],
            "model": None,
            "correlation": None,
            "seed": getattr(args, "seed", None),
            "started": _now(),
            "finished": None,
            "outputs": [],
            "status": "running",
        }

    def add_input(self, path):
        path = Path(path)
        self.doc["inputs"].append({"path": str(path), "sha256": _sha256(path)})

    def add_output(self, path):
        self.doc["outputs"].append(str(Path(path).name))

    def write(self, status):
        self.doc["status"] = status
        self.doc["finished"] = _now()
        path = self.out_dir / MANIFEST
        path.write_text(json.dumps(self.doc, indent=2, default=str) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# commands

def cmd_encode(args, manifest: Manifest):
    out_dir = manifest.out_dir
    manifest.add_input(args.input)
    df = load_long_format(args.input)
    series, summary = apply_exclusions(df, bin_seconds=args.bin_seconds, return_summary=True,
                                       drop_constant=args.apply_exclusions)
    if summary.repeated_trials:
        warnings.warn(f"{summary.repeated_trials} repeated trial(s) dropped; "
                      "only the first trial of each subject-item pair is encoded")
    constant = [s.key for s in series if np.all(s.samples == s.samples[0])]
    if constant:
        warnings.warn(f"{len(constant)} constant series encoded as a single run "
                      f"(first: {constant[0]}); the exclusion rules would drop them")
    episodes = [rle_encode(s) for s in series]
    covariates = {s.key: trial_covariates(s) for s in series}
    out_path = Path(args.output) if args.output else out_dir / "episodes.csv"
    if not out_path.is_absolute() and args.output:
        out_path = out_dir / out_path
    write_episode_file(out_path, episodes, args.bin_seconds, covariates,
                       comments=[f"manifest={MANIFEST}"])
    manifest.add_output(out_path)
    n_in = int(sum(len(s) for s in series))
    n_out = int(sum(len(e) for e in episodes))
    ratio = n_out / n_in if n_in else float("nan")
    result = {"manifest": MANIFEST, "records_in": n_in, "records_out": n_out,
              "ratio": float(f"{ratio:.6g}"), "series": len(series),
              "excluded_constant": summary.constant_series,
              "excluded_repeated": summary.repeated_trials}
    summary_path = out_dir / "encode_summary.json"
    summary_path.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    manifest.add_output(summary_path)
    if args.format == "structured":
        print(json.dumps(result, indent=2))
    else:
        print(f"records in: {n_in}\nrecords out: {n_out}\nratio: {ratio:.6g}")
    return EXIT_OK


def _load_series(path, bin_seconds):
    return apply_exclusions(load_long_format(path), bin_seconds=bin_seconds)


def _correlation_spec(args):
    kind = CORR_KINDS[args.corr]
    if kind == "independence":
        if args.estimate_phi:
            raise UsageError("--estimate-phi needs --corr ar1")
        return WorkingCorrelation(kind, ridge=args.ridge)
    if kind == "toeplitz_band":
        if args.estimate_phi:
            raise UsageError("phi is not estimated for --corr ma; pass a fixed --phi")
        if args.phi is None:
            raise UsageError("--corr ma needs a fixed --phi")
        return WorkingCorrelation(kind, args.phi, bandwidth=args.band, ridge=args.ridge)
    estimate = args.estimate_phi or args.phi is None
    return WorkingCorrelation(kind, 0.0 if args.phi is None else args.phi, ridge=args.ridge,
                              estimate_phi=estimate)


def _survival_from_episode_file(path):
    trials, _, covariates = read_episode_file(path)
    if not covariates:
        raise UsageError(f"{path} has no contrast/privileged columns; re-encode it with "
                         "`gazelab encode`")
    return episodes_to_survival(trials, covariates)


def cmd_fit(args, manifest: Manifest):
    episode_input = is_episode_file(args.input)
    if args.model == "cox" and not episode_input:
        raise UsageError("--model cox expects an episode file; run `gazelab encode` first")
    if args.model != "cox" and episode_input:
        raise UsageError(f"--model {args.model} expects long-format data, "
                         "got an episode file")
    if args.model != "gee" and (args.corr != "ind" or args.estimate_phi or args.phi is not None):
        raise UsageError("--corr/--phi/--estimate-phi apply only to --model gee")
    manifest.add_input(args.input)
    manifest.doc["model"] = args.model
    label = args.model.upper()
    phi_estimates = {}

    if args.model == "cox":
        fit = fit_cox(_survival_from_episode_file(args.input).records, ties=args.ties)
        fits = {"COX": fit}
    else:
        series = _load_series(args.input, args.bin_seconds)
        lag = args.model == "lag" or (args.model == "glmm" and args.lag)
        frame = build_frame(series, lag=lag)
        if args.model == "glm":
            fit = fit_irls(frame)
        elif args.model == "lag":
            fit = fit_lag(frame)
        elif args.model == "glmm":
            fit = fit_glmm_laplace(frame)
            label = "LAG" if lag else "GLM"
        else:
            spec = _correlation_spec(args)
            manifest.doc["correlation"] = {
                "kind": spec.kind, "phi": None if spec.estimate_phi else spec.phi,
                "phi_mode": "estimated" if spec.estimate_phi else "fixed",
                "ridge": spec.ridge,
                "bandwidth": spec.bandwidth if spec.kind == "toeplitz_band" else None}
            fit = gee_fit(frame, spec)
            label = {"independence": "GEE", "ar1": "AR1",
                     "toeplitz_band": f"MA{spec.bandwidth}"}[spec.kind]
        fits = {label: fit}

    tables = {"coefficients": coefficient_table(fits), "standard_errors": se_table(fits)}
    if args.model in ("glmm", "gee"):
        tables["variance"] = variance_table(fits, rows=(label,), phi_estimates=phi_estimates)
    _write_tables(tables, manifest, args.format)
    return EXIT_OK


def _paper_like_series(seed):
    cfg = PRESETS["paper-like"]
    if seed is not None:
        cfg = SimConfig.from_dict({"preset": "paper-like", "seed": seed})
    return apply_exclusions(simulate(cfg).series, bin_seconds=cfg.bin_seconds)


def run_compare(series, phi=0.95, ar1_ridge=1e-5, band=25, ma_ridge=1e-2, ties="efron"):
    """Fit all five models to one set of series.

    GLM and LAG carry crossed subject and item random intercepts. AR1 uses
    the fixed working ``phi`` with a ridge; a second AR1 fit with phi
    estimated supplies the parenthetical phi. MA uses a band of ``band``
    lags with fixed ``phi``. COX is fit to the RLE episodes with the last
    run of each trial dropped.

    Returns
    -------
    fits : dict keyed by column label; failed models are absent
    phi_estimates : dict keyed by row label
    failures : dict mapping a label to the error message
    """
    base = build_frame(series)
    lagged = build_frame(series, lag=True)
    ma_label = f"MA{band}"

    def cox():
        survival = episodes_to_survival([rle_encode(s) for s in series],
                                        {s.key: trial_covariates(s) for s in series})
        return fit_cox(survival.records, ties=ties)

    jobs = {
        "GLM": lambda: fit_glmm_laplace(base),
        "LAG": lambda: fit_glmm_laplace(lagged),
        "AR1": lambda: gee_fit(base, WorkingCorrelation("ar1", phi, ridge=ar1_ridge)),
        "AR1 (phi estimated)": lambda: gee_fit(base, WorkingCorrelation("ar1", phi,
                                                                        estimate_phi=True)),
        ma_label: lambda: gee_fit(base, WorkingCorrelation("toeplitz_band", phi,
                                                           bandwidth=band, ridge=ma_ridge)),
        "COX": cox,
    }
    fits, failures = {}, {}
    for label, job in jobs.items():
        try:
            fits[label] = job()
        except _FIT_ERRORS as exc:
            failures[label] = f"{type(exc).__name__}: {exc}"
            logger.warning("%s fit failed: %s", label, failures[label])
    free = fits.pop("AR1 (phi estimated)", None)
    phi_estimates = {"AR1": None if free is None else free.correlation, ma_label: None}
    return fits, phi_estimates, failures


def cmd_compare(args, manifest: Manifest):
    if args.input and args.preset:
        raise UsageError("give either an input file or --preset, not both")
    if args.input:
        if is_episode_file(args.input):
            raise UsageError("compare expects long-format data, got an episode file")
        manifest.add_input(args.input)
        series = _load_series(args.input, args.bin_seconds)
    else:
        preset = args.preset or "paper-like"
        if preset != "paper-like":
            raise UsageError(f"compare supports --preset paper-like, not {preset!r}")
        manifest.doc["preset"] = preset
        series = _paper_like_series(args.seed)
    band = args.band
    fits, phi_estimates, failures = run_compare(series, phi=args.phi, ar1_ridge=args.ridge,
                                                band=band, ma_ridge=args.ma_ridge,
                                                ties=args.ties)
    ma_label = f"MA{band}"
    columns = tuple(ma_label if m == "MA25" else m for m in METHODS)
    rows = tuple(ma_label if m == "MA25" else m for m in VARIANCE_MODELS)
    manifest.doc["model"] = "compare"
    manifest.doc["correlation"] = {
        "AR1": {"kind": "ar1", "phi": args.phi, "phi_mode": "fixed", "ridge": args.ridge,
                "reference_fit": "phi estimated"},
        ma_label: {"kind": "toeplitz_band", "phi": args.phi, "phi_mode": "fixed",
                   "ridge": args.ma_ridge, "bandwidth": band}}
    tables = {"coefficients": coefficient_table(fits, columns),
              "standard_errors": se_table(fits, columns),
              "variance": variance_table(fits, rows, phi_estimates)}
    manifest.doc["failures"] = failures
    _write_tables(tables, manifest, args.format)
    for label, msg in failures.items():
        print(f"gazelab: {label} fit failed: {msg}", file=sys.stderr)
    return EXIT_FIT if failures else EXIT_OK


def cmd_simulate(args, manifest: Manifest):
    if (args.config is None) == (args.preset is None):
        raise UsageError("give exactly one of a config file or --preset")
    if args.config:
        manifest.add_input(args.config)
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    else:
        raw = {"preset": args.preset}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SimConfig.from_dict(raw)
    manifest.doc["seed"] = cfg.seed
    manifest.doc["model"] = cfg.mechanism
    result = simulate(cfg)
    paths = write_simulation(result, manifest.out_dir, args.stem, manifest=MANIFEST)
    for p in paths:
        manifest.add_output(p)
    stats = summarize_runs(result.series)
    retained = apply_exclusions(result.series, bin_seconds=cfg.bin_seconds)
    kept = summarize_runs(retained) if retained else None
    info = {"manifest": MANIFEST, "series": len(result.series), "seed": cfg.seed,
            "median_run_length": stats.median, "runs": stats.count,
            "retained_series": len(retained),
            "retained_median_run_length": kept.median if kept else None,
            "data": paths[0].name, "truth": paths[1].name}
    if args.format == "structured":
        print(json.dumps(info, indent=2))
    else:
        kept_median = f"{kept.median:g}" if kept else "--"
        print(f"series: {len(result.series)}\nseed: {cfg.seed}\n"
              f"median run length: {stats.median:g} (after exclusions: {kept_median})\n"
              f"data: {paths[0]}\ntruth: {paths[1]}")
    return EXIT_OK


def _write_tables(tables, manifest: Manifest, fmt):
    out_dir = manifest.out_dir
    json_path = out_dir / "tables.json"
    text_path = out_dir / "tables.txt"
    json_text = tables_to_json(tables, MANIFEST)
    text = tables_to_text(tables, MANIFEST)
    json_path.write_text(json_text, encoding="utf-8")
    text_path.write_text(text, encoding="utf-8")
    manifest.add_output(json_path)
    manifest.add_output(text_path)
    print(json_text if fmt == "structured" else text, end="")


# ---------------------------------------------------------------------------
# argument parsing

def _common(p):
    p.add_argument("--output-dir", default=".", help="directory for results and the manifest")
    p.add_argument("--format", choices=("table", "structured"), default="table",
                   help="rendering printed to stdout (both are written to disk)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default: $GAZELAB_THREADS, else all cores)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bin-seconds", type=float, default=DEFAULT_BIN_SECONDS)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="gazelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gazelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="run-length encode long-format data")
    p.add_argument("input")
    p.add_argument("-o", "--output", default=None, help="episode file (default episodes.csv)")
    p.add_argument("--apply-exclusions", action="store_true",
                   help="also drop constant series before encoding")
    _common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fit", help="fit one model")
    p.add_argument("input")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--corr", choices=tuple(CORR_KINDS), default="ind")
    p.add_argument("--phi", type=float, default=None)
    p.add_argument("--estimate-phi", action="store_true")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--band", type=int, default=25)
    p.add_argument("--lag", action="store_true", help="glmm: add the lag-1 response")
    p.add_argument("--ties", choices=("efron", "breslow"), default="efron")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a synthetic corpus with ground truth")
    p.add_argument("config", nargs="?", default=None, help="JSON configuration")
    p.add_argument("--preset", choices=tuple(PRESETS), default=None)
    p.add_argument("--stem", default="simulated")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="fit all five models and merge the tables")
    p.add_argument("input", nargs="?", default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--phi", type=float, default=0.95)
    p.add_argument("--ridge", type=float, default=1e-5, help="AR1 ridge")
    p.add_argument("--ma-ridge", type=float, default=1e-2)
    p.add_argument("--band", type=int, default=25)
    p.add_argument("--ties", choices=("efron", "breslow"), default="efron")
    _common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("GAZELAB_THREADS"):
        n = int(os.environ["GAZELAB_THREADS"])
    return threadpool_limits(limits=n) if n else nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"gazelab: cannot create {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    manifest = Manifest(args.command, args, out_dir, argv)
    status, code = "ok", EXIT_OK
    try:
        with _thread_limit(args), warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            code = args.func(args, manifest)
        if code != EXIT_OK:
            status = "fit error (partial results)"
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gazelab: error: {exc}", file=sys.stderr)
        status, code = "usage error", EXIT_USAGE
    except _FIT_ERRORS as exc:
        print(f"gazelab: fit failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        status, code = f"fit error: {type(exc).__name__}", EXIT_FIT
    except (GazelabError, ValueError) as exc:
        print(f"gazelab: invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        status, code = f"input error: {type(exc).__name__}", EXIT_INPUT
    except OSError as exc:
        print(f"gazelab: I/O error: {exc}", file=sys.stderr)
        status, code = "io error", EXIT_IO
    try:
        manifest.write(status)
    except OSError as exc:
        print(f"gazelab: cannot write manifest: {exc}", file=sys.stderr)
        return code or EXIT_IO
    return code


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"gazelab: warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
