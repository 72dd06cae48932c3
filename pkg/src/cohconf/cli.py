"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_io import (DatasetFile, SynthConfig, emit_report, generate_synthetic, load_dataset, save_dataset)
from .errors import CohConfError, DataError, InsufficientVariance, InvalidConfig, NumericError
from .evaluation import METHODS, CVConfig, calibration_correlation, cross_validate, soft_hard_agreement
from .graph_features import FEATURE_KEYS, compute_structural_features
from .hard_cf import (CalibratedThreshold, Sentinel, build_tau_grid, hard_calibrate, hard_predict, risk_scores)
from .soft import PRESETS, SoftConfig, preset, soft_retention_probs, soft_threshold
from .training import TrainConfig, scorer_from_dict, scorer_to_dict, train_scorer

log = logging.getLogger("cohconf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
# filled in after parsing; set_defaults would mutate the actions shared with every subcommand
GLOBAL_DEFAULTS = {"seed": None, "out": ".", "quiet": False, "jobs": None}
HELP_WIDTH = 100


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors and a fixed help width."""

    def __init__(self, *args, **kw):
        kw.setdefault("formatter_class", _Formatter)
        super().__init__(*args, **kw)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.HelpFormatter):
    """Appends ``(default: ...)`` or ``(required)`` to every option."""

    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)

    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text or action.default is argparse.SUPPRESS or not action.option_strings:
            return text
        if action.required:
            return f"{text} (required)"
        return f"{text} (default: {'none' if action.default is None else action.default})"


# ------------------------------------------------------------------ helpers


def _default_seed() -> int:
    raw = os.environ.get("COHCONF_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"COHCONF_SEED must be an integer, got {raw!r}") from None


def _out_path(out: str, default_name: str) -> Path:
    """``--out`` naming a file (has a suffix) is used as is; otherwise it is a directory."""
    p = Path(out)
    if p.suffix:
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    p.mkdir(parents=True, exist_ok=True)
    return p / default_name


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path: str, features: str | None = None) -> DatasetFile:
    ds = load_dataset(path)
    if features:
        ds = ds.select_features([f.strip() for f in features.split(",") if f.strip()])
    return ds


def _load_model(path: str):
    doc = _read_json(path)
    return scorer_from_dict(doc), doc


def _for_model(ds: DatasetFile, scorer) -> DatasetFile:
    """Align a dataset's columns with the model schema."""
    if scorer.feature_names and tuple(scorer.feature_names) != tuple(ds.schema.names):
        return ds.select_features(scorer.feature_names)
    return ds


def _soft_config(temps: str | None, hp: str | None) -> SoftConfig:
    if hp:
        doc = _read_json(hp)
        soft = doc.get("soft", doc)
        return preset(soft) if isinstance(soft, str) else SoftConfig.from_dict(soft)
    return preset(temps or "sharp")


def _train_config(args) -> TrainConfig:
    doc = _read_json(args.hp) if args.hp else {}
    doc.setdefault("seed", args.seed)
    if args.preset:
        doc["soft"] = args.preset
    cfg = TrainConfig.from_dict(doc)
    overrides = {k: v for k, v in (("alpha", getattr(args, "alpha", None)),
                                   ("epochs", getattr(args, "epochs", None))) if v is not None}
    if "epochs" in overrides:
        overrides["patience"] = min(cfg.patience, max(overrides["epochs"], 1))
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def _parse_threshold(text: str) -> float | Sentinel:
    t = text.strip().lower()
    if t in ("-inf", "neg_inf", "-infinity"):
        return Sentinel.NEG_INF
    if t in ("inf", "+inf", "pos_inf", "+infinity", "infinity"):
        return Sentinel.POS_INF
    try:
        return float(t)
    except ValueError:
        raise InvalidConfig(f"threshold must be a number or +-inf, got {text!r}") from None


def parse_alphas(text: str) -> tuple[float, ...]:
    """``0.05,0.1`` or an inclusive ``lo..hi`` range in steps of 0.01."""
    try:
        if ".." in text:
            lo, hi = (float(x) for x in text.split(".."))
            n = int(round((hi - lo) / 0.01))
            vals = [round(lo + 0.01 * i, 10) for i in range(n + 1)]
        else:
            vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"cannot parse alphas {text!r}") from None
    if not vals or any(not 0 < a < 1 for a in vals):
        raise InvalidConfig(f"alphas must lie in (0, 1), got {text!r}")
    return tuple(vals)


def _threshold_doc(th) -> object:
    return str(th) if isinstance(th, Sentinel) else th


# -------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    doc.setdefault("seed", args.seed)
    if args.n_problems is not None:
        doc["n_problems"] = args.n_problems
    cfg = SynthConfig.from_dict(doc)
    ds = generate_synthetic(cfg)
    path = _out_path(args.out, "data.json")
    save_dataset(ds, path)
    log.info("wrote %d problems to %s", len(ds), path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _load(args.data, args.features)
    n = len(ds)
    n_val = max(1, int(np.floor(n * args.val_fraction)))
    if n - n_val < 2:
        raise DataError(f"{n} problems are too few to hold out a validation share")
    perm = np.random.default_rng(cfg.seed).permutation(n)
    train = [ds.problems[i] for i in perm[n_val:]]
    val = [ds.problems[i] for i in perm[:n_val]]
    res = train_scorer(train, val, cfg, ds.schema.names)
    doc = scorer_to_dict(res.scorer, cfg)
    doc["log"] = [{"epoch": r.epoch, "train_loss": None if np.isnan(r.train_loss) else r.train_loss,
                   "val_loss": r.val_loss} for r in res.log]
    doc["best_epoch"] = res.best_epoch
    path = _out_path(args.out, "model.json")
    _write_json(doc, path)
    log.info("best epoch %d of %d; wrote %s", res.best_epoch, len(res.log) - 1, path)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    scorer, _ = _load_model(args.model)
    ds = _for_model(_load(args.data), scorer)
    if args.mode == "hard":
        risks = [risk_scores(scorer, p) for p in ds.problems]
        th = hard_calibrate(ds.problems, risks, args.margin, True, args.orientation).at(args.alpha).tau_hat
    else:
        cfg = _soft_config(args.temps, args.hp)
        th = soft_threshold(ds.problems, scorer.weights, scorer.bias, scorer.risk_offset_C, args.alpha, cfg,
                            args.orientation, scorer.link)
    doc = {"tau_hat": _threshold_doc(th), "alpha": args.alpha, "n_cal": len(ds), "mode": args.mode,
           "orientation": args.orientation}
    _write_json(doc, _out_path(args.out, "calibration.json"))
    if not args.quiet:
        print(f"tau_hat = {_threshold_doc(th)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    scorer, _ = _load_model(args.model)
    ds = _for_model(_load(args.data), scorer)
    tau_hat = _parse_threshold(args.tau_hat)
    out = []
    if args.mode == "hard":
        for p in ds.problems:
            r = risk_scores(scorer, p)
            tau_star, kept = hard_predict(p, r, build_tau_grid(r, args.margin), tau_hat, True)
            out.append({"id": p.id, "tau_star": _threshold_doc(tau_star), "retained": sorted(kept)})
    else:
        cfg = _soft_config(args.temps, args.hp)
        probs = soft_retention_probs(ds.problems, scorer.weights, scorer.bias, scorer.risk_offset_C,
                                     tau_hat, cfg, scorer.link)
        for p, q in zip(ds.problems, probs):
            out.append({"id": p.id, "probabilities": [float(x) for x in q],
                        "retained": [int(v) for v in np.flatnonzero(q >= 0.5)]})
    _write_json({"tau_hat": _threshold_doc(tau_hat), "mode": args.mode, "problems": out},
                _out_path(args.out, "predictions.json"))
    if not args.quiet:
        for row in out:
            print(f"{row['id']}: {row['retained']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load(args.data, args.features)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    cfg = CVConfig(methods=methods, alphas=parse_alphas(args.alphas), folds=args.folds, seed=args.seed,
                   margin_m=args.margin, cf_beta_mix=args.beta_mix, c_freq=args.c_freq,
                   train=_train_config(args), features=tuple(ds.schema.names))
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    rows = cross_validate(ds.problems, cfg, jobs)
    csv_path = _out_path(args.out, "eval.csv")
    emit_report(rows, csv_path, "csv")
    emit_report(rows, csv_path.with_name("summary.txt"), "summary")
    if not args.quiet:
        print(Path(csv_path.with_name("summary.txt")).read_text(), end="")
    return EXIT_OK


def cmd_validate_surrogate(args) -> int:
    scorer, _ = _load_model(args.model)
    ds = _for_model(_load(args.data), scorer)
    cfg = _soft_config(args.temps, args.hp)
    alphas = parse_alphas(args.alphas)
    table = soft_hard_agreement(ds.problems, scorer, cfg, alphas, orientation=args.orientation)
    try:
        corr = calibration_correlation(ds.problems, scorer, cfg, alphas, args.orientation)
    except InsufficientVariance as e:
        log.warning("skipping the score correlation: %s", e)
        corr = None
    out = _out_path(args.out, "agreement.csv")
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "both_incl", "soft_only", "hard_only", "both_excl", "agree_pct"])
        for a in table:
            w.writerow([f"{a.alpha:.2f}", a.both_incl, a.soft_only, a.hard_only, a.both_excl,
                        f"{a.agree_pct:.2f}"])
    if corr is not None:
        with out.with_name("correlation.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau_soft", "tau_hard"])
            for s, h in zip(corr.soft, corr.hard):
                w.writerow([f"{s:.6f}", f"{h:.6f}"])
    if not args.quiet:
        for a in table:
            print(f"alpha={a.alpha:.2f} agreement={a.agree_pct:.2f}% soft_only={a.soft_only} "
                  f"hard_only={a.hard_only}")
        if corr is not None:
            print(f"scores: r={corr.pearson_r:.4f} MAE={corr.mae:.4f} ({100 * corr.relative_mae:.2f}% of range)")
    return EXIT_OK


def cmd_features(args) -> int:
    ds = _load(args.data)
    path = _out_path(args.out, "features.csv")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["problem", "claim"] + list(FEATURE_KEYS.values()))
        for p in ds.problems:
            for v, feats in compute_structural_features(p).items():
                named = feats.as_named()
                w.writerow([p.id, v] + [f"{named[k]:.6f}" for k in FEATURE_KEYS.values()])
    log.info("wrote structural features for %d problems to %s", len(ds), path)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    # SUPPRESS keeps a subcommand from resetting a value given before it
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="random seed (default: $COHCONF_SEED, then 0)")
    g.add_argument("--out", default=argparse.SUPPRESS,
                   help="output directory, or a file path when it has a suffix (default: .)")
    g.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="suppress progress and summaries (default: off)")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                   help="worker processes (default: all cores for eval, otherwise 1)")

    parser = _Parser(prog="cohconf", parents=[common],
                     description="Coherent conformal factuality filtering and differentiable scorer training.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    def train_flags(p):
        p.add_argument("--hp", default=None, help="hyperparameter JSON (TrainConfig keys plus 'soft')")
        p.add_argument("--preset", default=None, choices=sorted(PRESETS),
                       help="soft temperature preset (default: from --hp, else train)")
        p.add_argument("--epochs", type=int, default=None, help="epoch budget (default: from --hp, else 100)")

    p = add("synth", cmd_synth, "generate a synthetic claim-graph dataset")
    p.add_argument("--config", default=None, help="JSON file of generator settings (default: built-in settings)")
    p.add_argument("--n-problems", type=int, default=None, help="number of problems (default: from --config, else 500)")

    p = add("train", cmd_train, "train a linear claim scorer through the relaxed pipeline")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--alpha", type=float, default=None, help="target miscoverage (default: from --hp, else 0.05)")
    p.add_argument("--features", default=None, help="comma-separated feature subset (default: all)")
    p.add_argument("--val-fraction", type=float, default=0.15, help="share held out for early stopping")
    train_flags(p)

    for name, fn, help_ in (("calibrate", cmd_calibrate, "compute the calibrated threshold"),
                            ("predict", cmd_predict, "filter claims at a given threshold")):
        p = add(name, fn, help_)
        p.add_argument("--data", required=True, help="dataset JSON")
        p.add_argument("--model", required=True, help="scorer JSON written by 'train'")
        if name == "calibrate":
            p.add_argument("--alpha", type=float, required=True, help="target miscoverage")
            p.add_argument("--orientation", default="lower", choices=["lower", "upper"],
                           help="order-statistic convention")
        else:
            p.add_argument("--tau-hat", required=True, help="threshold (number, -inf or +inf)")
        p.add_argument("--mode", default="hard", choices=["hard", "soft"], help="discrete or relaxed route")
        p.add_argument("--temps", default="sharp", choices=sorted(PRESETS), help="soft temperature preset")
        p.add_argument("--hp", default=None, help="JSON with a 'soft' block (overrides --temps)")
        p.add_argument("--margin", type=float, default=20.0, help="grid margin m for the hard route")

    p = add("eval", cmd_eval, "Monte-Carlo cross-validation of coverage and retention")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--alphas", default="0.05,0.1", help="comma list or lo..hi range in steps of 0.01")
    p.add_argument("--methods", default="dcf,cf,independent", help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--folds", type=int, default=20, help="number of random 70/15/15 resplits")
    p.add_argument("--features", default=None, help="comma-separated feature subset (default: all)")
    p.add_argument("--margin", type=float, default=20.0, help="grid margin m for hard calibration")
    p.add_argument("--beta-mix", type=float, default=0.0, help="descendant mixing of the frequency baseline")
    p.add_argument("--c-freq", type=float, default=None, help="frequency offset (default: dataset maximum)")
    train_flags(p)

    p = add("validate-surrogate", cmd_validate_surrogate, "compare relaxed and discrete calibration/prediction")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--model", required=True, help="scorer JSON")
    p.add_argument("--temps", default="sharp", choices=sorted(PRESETS), help="soft temperature preset")
    p.add_argument("--hp", default=None, help="JSON with a 'soft' block (overrides --temps)")
    p.add_argument("--alphas", default="0.03..0.10", help="comma list or lo..hi range in steps of 0.01")
    p.add_argument("--orientation", default="lower", choices=["lower", "upper"], help="order-statistic convention")

    p = add("features", cmd_features, "compute structural graph features")
    p.add_argument("--data", required=True, help="dataset JSON")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.seed is None:
            args.seed = _default_seed()
        # overflow surfaces as NonFiniteValue below; numpy's own warnings would only add noise
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except InvalidConfig as e:
        print(f"cohconf: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"cohconf: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"cohconf: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CohConfError as e:
        print(f"cohconf: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
