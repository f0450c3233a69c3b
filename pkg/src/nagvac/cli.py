"""Command-line front end: ``nagvac {train,predict,evaluate,simulate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .datagen import (
    Dataset,
    gen_binary_sim,
    gen_continuous_sim,
    gen_panel_sim,
    load_table,
    split,
    split_panel,
    write_table,
)
from .deepglm import FAMILIES, NetworkSpec
from .deepglmm import RANDOM_EFFECTS
from .errors import ConfigurationError, DataError, NagvacError
from .evalpredict import accuracy, build_report, pps
from .model import FittedModel, fit_deepglm, fit_deepglmm
from .natural_gradient import CGConfig
from .traceio import TraceWriter
from .trainer import TrainConfig

log = logging.getLogger("nagvac")

DESIGNS = ("binary", "continuous", "panel")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(2)


def _int_list(text: str) -> list:
    text = text.strip()
    if text in ("", "none", "0"):
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None


def _name_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_data_args(p, *, simulate_only=False):
    if not simulate_only:
        p.add_argument("--data", help="comma-separated input file with a header row")
        p.add_argument("--response", default="y", help="response column (default: y)")
        p.add_argument("--subject", default=None, help="subject id column (panel data)")
        p.add_argument("--categorical", type=_name_list, default=[], help="columns to one-hot expand")
    p.add_argument("--design", choices=DESIGNS, help="built-in simulation design")
    p.add_argument("--n", type=int, default=1000, help="rows for binary/continuous designs")
    p.add_argument("--subjects", type=int, default=1000, help="subjects for the panel design")
    p.add_argument("--T", type=int, default=20, help="observations per subject for the panel design")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nagvac", description="Natural-gradient factor-covariance VB for DeepGLM/DeepGLMM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model and write model, trace and summary files")
    _add_data_args(t)
    t.add_argument("--family", choices=FAMILIES, default=None, help="response family (default from design, else binomial)")
    t.add_argument("--layers", type=_int_list, default=[10], help="hidden layer widths, e.g. 20,20 (empty for a GLM)")
    t.add_argument("--linear-cols", type=_name_list, default=[], help="covariates entering the predictor linearly")
    t.add_argument("--random-effects", choices=RANDOM_EFFECTS, default="output", help="random-effect structure for panel data")
    t.add_argument("--is-samples", type=int, default=20, help="importance samples per subject and iteration")
    t.add_argument("--factors", type=int, default=1)
    t.add_argument("--samples", type=int, default=1, dest="S", help="Monte Carlo draws per gradient")
    t.add_argument("--eps0", type=float, default=0.01)
    t.add_argument("--tau", type=float, default=1000.0)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--window", type=int, default=50)
    t.add_argument("--patience", type=int, default=500)
    t.add_argument("--max-iter", type=int, default=5000)
    t.add_argument("--max-grad-norm", type=float, default=100.0, help="clip the natural gradient norm (0 disables)")
    t.add_argument("--batch-size", type=int, default=None, help="minibatch rows (subjects for panel data)")
    t.add_argument("--cg-tol", type=float, default=1e-4)
    t.add_argument("--cg-max-iter", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", type=float, default=None,
                   help="train fraction for row data, or training observations per subject for panel data")
    t.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("predict", help="write per-row predictions and intervals")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=1000, help="posterior draws for the intervals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV file")

    e = sub.add_parser("evaluate", help="write PPS and MSE/MCR for a labelled file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output JSON file")

    s = sub.add_parser("simulate", help="write a dataset from a built-in design")
    _add_data_args(s, simulate_only=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output CSV file")
    return parser


# ---------------------------------------------------------------- helpers


def simulate(args) -> Dataset:
    if args.design == "binary":
        return gen_binary_sim(args.n, args.seed)
    if args.design == "continuous":
        return gen_continuous_sim(args.n, args.seed)
    return gen_panel_sim(args.subjects, args.T, args.seed)


def _load_training_data(args) -> Dataset:
    if (args.data is None) == (args.design is None):
        raise ConfigurationError("give exactly one of --data or --design")
    if args.design is not None:
        return simulate(args)
    return load_table(args.data, args.response, args.subject, args.categorical, args.family)


def _split(ds: Dataset, frac, seed):
    if frac is None:
        return ds, None
    if ds.subject is not None:
        if frac < 1 or frac != int(frac):
            raise ConfigurationError("--split for panel data is the number of training rows per subject")
        return split_panel(ds, int(frac))
    if not 0.0 < frac < 1.0:
        raise ConfigurationError("--split must lie in (0, 1)")
    return split(ds, frac, seed)


def _network_spec(args, ds: Dataset, family: str) -> NetworkSpec:
    lin = []
    for name in args.linear_cols:
        if name not in ds.columns:
            raise ConfigurationError(f"--linear-cols: unknown column {name!r}")
        lin.append(ds.columns.index(name))
    p = len(ds.columns)
    return NetworkSpec((p - len(lin), *args.layers, 1), family, "relu", tuple(lin) or None, p)


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, default=float)
        fh.write("\n")


def _scores(model, fg, ds: Dataset) -> dict:
    subj = ds.subject if model.is_mixed else None
    kind = "mcr" if model.family == "binomial" else "mse"
    return {
        "n": ds.n,
        "pps": pps(model, fg.mu, ds.X, ds.y, subj),
        kind: accuracy(model, fg.mu, ds.X, ds.y, subj),
    }


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    ds = _load_training_data(args)
    family = args.family or ds.family or "binomial"
    train_ds, test_ds = _split(ds, args.split, args.seed)
    spec = _network_spec(args, ds, family)
    cfg = TrainConfig(
        eps0=args.eps0, tau=args.tau, momentum=args.momentum, S=args.S, window=args.window,
        patience=args.patience, max_iter=args.max_iter, factors=args.factors,
        cg=CGConfig(args.cg_tol, args.cg_max_iter), seed=args.seed,
        batch_size=args.batch_size, max_grad_norm=args.max_grad_norm or None,
    )
    os.makedirs(args.out, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items()}
    resolved.update(family=family, layer_sizes=list(spec.layer_sizes), panel=ds.subject is not None)
    _write_json(os.path.join(args.out, "config.json"), resolved)

    n_groups = spec.layer_sizes[0] if spec.n_hidden else 0
    with TraceWriter(os.path.join(args.out, "trace.csv"), n_groups) as sink:
        common = dict(sink=sink, columns=ds.columns, response=ds.response)
        if ds.subject is not None:
            model = fit_deepglmm(
                train_ds.X, train_ds.y, train_ds.subject, spec, cfg,
                random_effects=args.random_effects, N=args.is_samples,
                batch_subjects=args.batch_size, subject_column=ds.subject_column or "subject", **common,
            )
        else:
            model = fit_deepglm(train_ds.X, train_ds.y, spec, cfg, **common)
    model.summary["categorical"] = {k: v for k, v in ds.expansions.items()}
    model.save(os.path.join(args.out, "model.json"))

    summary = dict(model.summary)
    summary["train"] = _scores(model, model.fg, train_ds)
    if test_ds is not None and test_ds.n:
        summary["test"] = _scores(model, model.fg, test_ds)
    if model.shrink.gamma.size:
        summary["gamma"] = dict(zip(spec_columns(model), model.shrink.gamma.tolist()))
    _write_json(os.path.join(args.out, "summary.json"), summary)
    log.info("trained %d iterations; best smoothed LB %.6g", summary["iterations"], summary["best_lb_smoothed"])
    return 0


def spec_columns(model: FittedModel) -> list:
    idx = model.spec.network_indices
    return [model.columns[i] for i in idx] if model.columns else [f"x{i + 1}" for i in idx]


def _load_for(model: FittedModel, path, *, require_response: bool) -> Dataset:
    cats = model.summary.get("categorical", {}) or {}
    ds = load_table(
        path, model.response, model.subject_column if model.is_mixed else None,
        list(cats), model.family, levels=cats, require_response=require_response,
    )
    if ds.columns != model.columns:
        raise DataError(f"data columns {ds.columns} do not match the model's {model.columns}")
    return ds


def cmd_predict(args) -> int:
    model = FittedModel.load(args.model)
    ds = _load_for(model, args.data, require_response=False)
    subj = ds.subject if model.is_mixed else None
    rep = build_report(model, model.fg, ds.X, None, subj, args.draws, np.random.default_rng(args.seed))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["row", "prediction", "mean", "lower", "upper"]
        if rep.probability is not None:
            head.append("probability")
        w.writerow(head)
        for i, pred, mean, lo, hi, prob in rep.rows():
            vals = [pred, mean, lo, hi] + ([prob] if rep.probability is not None else [])
            w.writerow([i] + [repr(float(v)) for v in vals])
    return 0


def cmd_evaluate(args) -> int:
    model = FittedModel.load(args.model)
    ds = _load_for(model, args.data, require_response=True)
    _write_json(args.out, _scores(model, model.fg, ds))
    return 0


def cmd_simulate(args) -> int:
    if args.design is None:
        raise ConfigurationError("simulate needs --design")
    write_table(simulate(args), args.out)
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "simulate": cmd_simulate}


def run(argv=None) -> int:
    """Entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NagvacError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        sys.stderr.write(f"nagvac: error: {msg}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
