"""Command-line entry point: ``metaimager {sweep,detune,codebook,select,plot}``.

Settings come from an optional ``key = value`` file (``--config``) and are
overridden by flags.  List values are comma separated.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dataio
from .harness import (RESULTS_FILE, ExperimentPlan, build_codebook, detuning_matrix, load_manifest,
                      run_plan, select_from_codebook)
from .plots import emit_plots

# config key -> (ExperimentPlan field, parser)
_FLOATS = lambda s: [float(x) for x in s.split(",") if x.strip()]
_INTS = lambda s: [int(x) for x in s.split(",") if x.strip()]
_STRS = lambda s: [x.strip() for x in s.split(",") if x.strip()]
_BOOL = lambda s: str(s).strip().lower() in ("1", "true", "yes", "on")

PLAN_KEYS = {
    "mnist_dir": ("mnist_dir", Path),
    "mnist_images": ("mnist_images", Path),
    "mnist_labels": ("mnist_labels", Path),
    "mnist_test_images": ("mnist_test_images", Path),
    "mnist_test_labels": ("mnist_test_labels", Path),
    "out": ("output_dir", Path),
    "seed": ("base_seed", int),
    "scale": ("scale", float),
    "realizations": ("realizations", int),
    "modes": ("modes", _STRS),
    "m_values": ("m_values", _INTS),
    "noise_kind": ("noise_kind", str),
    "train_levels": ("train_levels", _FLOATS),
    "test_levels": ("test_levels", _FLOATS),
    "jobs": ("jobs", int),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "learning_rate": ("learning_rate", float),
    "physical_learning_rate": ("physical_learning_rate", float),
    "tau0": ("tau0", float),
    "growth": ("growth", float),
    "patience": ("patience", int),
    "calibration_draws": ("calibration_draws", int),
    "baseline_draws": ("baseline_draws", int),
    "binarize_digits": ("binarize_digits", _BOOL),
    "conjugate_overlap": ("conjugate_overlap", _BOOL),
    "record_timing": ("record_timing", _BOOL),
}


def read_config(path) -> dict:
    """Parse a section-less ``key = value`` file; keys accept dashes or underscores."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = Path(path).read_text()
    parser.read_string("[metaimager]\n" + text)
    out = {}
    for key, value in parser["metaimager"].items():
        norm = key.replace("-", "_")
        if norm not in PLAN_KEYS:
            raise ValueError(f"{path}: unknown setting '{key}'")
        out[norm] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaimager", description="Noise-adaptive meta-imager experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--out")
        sp.add_argument("-v", "--verbose", action="store_true")

    def plan_flags(sp):
        common(sp)
        sp.add_argument("--mnist-dir")
        sp.add_argument("--mnist-images")
        sp.add_argument("--mnist-labels")
        sp.add_argument("--mnist-test-images")
        sp.add_argument("--mnist-test-labels")
        sp.add_argument("--seed")
        sp.add_argument("--scale")
        sp.add_argument("--realizations")
        sp.add_argument("--modes", help="comma list of learned,random")
        sp.add_argument("--m-values", help="comma list, e.g. 1,2,3")
        sp.add_argument("--noise-kind", help="signal_independent, signal_dependent or none")
        sp.add_argument("--train-levels", help="comma list of rho or beta values")
        sp.add_argument("--test-levels", help="comma list; defaults to the train levels")
        sp.add_argument("--jobs")
        sp.add_argument("--epochs")
        sp.add_argument("--no-timing", dest="record_timing", action="store_const", const="false",
                        help="write wall_time as 0 so reruns are byte-identical")

    plan_flags(sub.add_parser("sweep", help="train and evaluate every plan point"))
    plan_flags(sub.add_parser("detune", help="train x test noise-level accuracy matrix"))
    plan_flags(sub.add_parser("codebook", help="train one checkpoint per noise level"))

    sel = sub.add_parser("select", help="choose a codebook entry from repeated measurements")
    sel.add_argument("--manifest", required=True, type=Path)
    sel.add_argument("--repeats", required=True, type=Path,
                     help="text file with one measurement per line as 're im'")
    sel.add_argument("--noise-kind", required=True)
    sel.add_argument("--calibration", type=float)

    plot = sub.add_parser("plot", help="emit SVG panels and companion CSVs")
    plot.add_argument("--results", required=True, type=Path)
    plot.add_argument("--out", required=True, type=Path)
    return p


def plan_from_args(args) -> ExperimentPlan:
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for key in PLAN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    kwargs = {}
    for key, raw in settings.items():
        name, conv = PLAN_KEYS[key]
        kwargs[name] = conv(raw) if isinstance(raw, str) else raw
    return ExperimentPlan(**kwargs)


def read_repeats(path) -> np.ndarray:
    arr = np.loadtxt(path, ndmin=2)
    if arr.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns (real, imaginary)")
    return arr[:, 0] + 1j * arr[:, 1]


def _print_rows(rows):
    for r in rows:
        print(f"{r.mode:8s} M={r.M:<3d} {r.noise_kind} train={r.train_level:g} test={r.test_level:g} "
              f"seed={r.seed} acc={r.accuracy:.4f} overlap={r.overlap:.4f} "
              f"I/I0={r.intensity_ratio:.4f} on={r.on_ratio:.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "sweep":
            plan = plan_from_args(args)
            _print_rows(run_plan(plan))
            print(f"results: {plan.output_dir / RESULTS_FILE}")
        elif args.command == "detune":
            plan = plan_from_args(args)
            for (mode, m), mat in detuning_matrix(plan).items():
                print(f"{mode} M={m} (rows: trained level, columns: tested level)")
                print("train\\test " + " ".join(f"{te:>9g}" for te in mat.test_levels))
                for tr, mean, std in zip(mat.train_levels, mat.mean, mat.std):
                    print(f"{tr:>10g} " + " ".join(f"{a:.3f}±{s:.3f}" for a, s in zip(mean, std)))
        elif args.command == "codebook":
            plan = plan_from_args(args)
            book = build_codebook(plan)
            for e in book.entries:
                print(f"{e.kind} {e.level:g} {e.path} val_acc={e.validation_accuracy:.4f} {e.status}")
        elif args.command == "select":
            book = load_manifest(args.manifest)
            entry = select_from_codebook(book, read_repeats(args.repeats), args.noise_kind, args.calibration)
            print(f"{entry.kind} {entry.level:g} {book.resolve(entry)}")
        elif args.command == "plot":
            for path in emit_plots(dataio.load_results(args.results), args.out):
                print(path)
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"metaimager: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
