"""Command-line surface for the sleep depth pipeline.

Subcommands: synth, train, annotate, features, cluster, analyze, plot.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Outputs are written atomically and never overwrite existing files without
--force; given fixed seeds and inputs, reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import annotate as annotate_mod
from . import biomarkers, clustering, plots, stats, synth, training
from .edf import EdfParseError, load_night
from .model import ModelConfig, SleepDepthModel

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _check_out(path, force: bool) -> None:
    if Path(path).exists() and not force:
        raise DataError(f"refusing to overwrite {path} (use --force)")


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


# ------------------------------------------------------------------ parsing

def build_parser() -> Parser:
    parser = Parser(prog="sleepdepth",
                    description="Continuous sleep depth annotation pipeline")
    parser.add_argument("--config", help="TOML file with per-subcommand defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-subjects", type=int, default=20)
    p.add_argument("--disturbed-fraction", type=float, default=0.5)
    p.add_argument("--n-epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-signals", action="store_true",
                   help="emit only the subject table (for statistics work)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model on EDF nights")
    p.add_argument("--data-dir", required=True,
                   help="directory of .edf files with .json sidecars")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", help="loss trace CSV output path")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=training.MODES, default="joint")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--model", choices=("desk", "full"), default="desk")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("annotate", help="annotate one night with SDI values")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="EDF file")
    p.add_argument("--annotations", help="stage/arousal sidecar (JSON or CSV)")
    p.add_argument("--out", required=True, help="per-epoch CSV output")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("features", help="biomarker table from annotated nights")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="annotated night CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-entropy", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("cluster", help="fit subtypes on a feature table")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="assignment CSV output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--diagonal", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("analyze", help="statistical report over annotated nights")
    p.add_argument("--nights", nargs="+", required=True,
                   help="annotated night CSV files")
    p.add_argument("--cohort", help="subject table CSV")
    p.add_argument("--assignments", help="subtype assignment CSV")
    p.add_argument("--features", help="biomarker feature table CSV")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--binned-csv", help="binned-correlation CSV output")
    p.add_argument("--n-bins", type=int, default=10)
    p.add_argument("--offset", type=int, choices=(0, 1), default=0)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("plot", help="render a night to SVG")
    p.add_argument("--sdi", required=True, help="annotated night CSV")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--title", default="")
    p.add_argument("--force", action="store_true")
    return parser


def apply_config(parser: Parser, args: argparse.Namespace) -> None:
    """Fill defaults from the TOML config; explicit flags win."""
    if not args.config:
        return
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    doc = tomllib.loads(path.read_text())
    section = doc.get(args.command, {})
    sub_actions = {}
    for action in parser._subparsers._group_actions[0].choices[args.command]._actions:
        for opt in action.option_strings:
            sub_actions[opt.lstrip("-").replace("-", "_")] = action
    for key, value in section.items():
        attr = key.replace("-", "_")
        if attr not in sub_actions:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = sub_actions[attr]
        if getattr(args, action.dest) == action.default:
            setattr(args, action.dest, value)


# ------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    cohort = synth.gen_cohort(args.n_subjects, args.disturbed_fraction,
                              seed=args.seed, n_epochs=args.n_epochs,
                              signals=not args.no_signals)
    synth.write_cohort(cohort, out)
    print(f"wrote cohort of {args.n_subjects} subjects to {out}", file=sys.stderr)
    return EXIT_OK


def _load_nights(data_dir) -> tuple[list, list[str]]:
    data_dir = Path(data_dir)
    edfs = sorted(data_dir.glob("*.edf"))
    if not edfs:
        raise DataError(f"no .edf files in {data_dir}")
    grids, ids = [], []
    for edf_path in edfs:
        sidecar = edf_path.with_suffix(".json")
        grids.append(load_night(edf_path, sidecar if sidecar.exists() else None))
        ids.append(edf_path.stem)
    return grids, ids


def cmd_train(args) -> int:
    _check_out(args.out, args.force)
    if args.trace:
        _check_out(args.trace, args.force)
    grids, _ = _load_nights(args.data_dir)
    if any(g.stages is None for g in grids):
        raise DataError("training needs stage labels for every night")
    spec = training.SplitSpec(train_fraction=args.train_fraction,
                              test_fraction=1.0 - args.train_fraction,
                              seed=args.seed)
    if len(grids) >= 2:
        train_idx, _ = training.split_recordings(len(grids), spec)
    else:
        train_idx = [0]
    pool = training.pool_from_grids(grids, train_idx)
    config = ModelConfig.desk() if args.model == "desk" else ModelConfig.full()
    model = SleepDepthModel(config, seed=args.seed)
    cfg = training.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                               max_steps=args.steps, seed=args.seed,
                               mode=args.mode, alpha=args.alpha)
    result = training.train(pool, model, cfg)
    training.save_checkpoint_file(result.model, args.out)
    if args.trace:
        training.write_loss_trace(result.trace, args.trace)
    last = result.trace[-1][3] if result.trace else float("nan")
    print(f"trained {args.steps} steps; final loss {last:.4f}; "
          f"checkpoint {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_annotate(args) -> int:
    _check_out(args.out, args.force)
    model = training.load_checkpoint_file(args.model)
    grid = load_night(args.input, args.annotations)
    night = annotate_mod.annotate_night(grid, model)
    annotate_mod.write_night_csv(night, args.out)
    print(f"annotated {night.n_epochs} epochs -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _read_night_csvs(paths) -> tuple[list[str], list]:
    ids, nights = [], []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise DataError(f"night CSV not found: {p}")
        nights.append(annotate_mod.night_from_csv(p.read_text()))
        ids.append(p.stem)
    return ids, nights


def cmd_features(args) -> int:
    _check_out(args.out, args.force)
    ids, nights = _read_night_csvs(args.inputs)
    rows = []
    for rec_id, night in zip(ids, nights):
        vec = biomarkers.biomarker_vector(night, sample_entropy=args.sample_entropy)
        rows.append((rec_id, vec, biomarkers.night_metrics(night)))
    biomarkers.write_feature_table(rows, args.out)
    print(f"wrote {len(rows)} feature rows -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_cluster(args) -> int:
    _check_out(args.out, args.force)
    path = Path(args.features)
    if not path.exists():
        raise DataError(f"feature table not found: {path}")
    ids, values = biomarkers.parse_feature_table(path.read_text())
    X = values[:, :8]
    model = clustering.fit_gmm(X, seed=args.seed, diagonal=args.diagonal)
    assignment = clustering.assign_subtypes(model, X)
    clustering.write_assignment_csv(ids, assignment, args.out)
    n_dist = int((assignment.labels == "disturbed").sum())
    print(f"clustered {len(ids)} nights ({n_dist} disturbed) -> {args.out}",
          file=sys.stderr)
    return EXIT_OK


def _covariate_matrix(subjects) -> np.ndarray:
    cols = [
        [s.age for s in subjects],
        [s.sex for s in subjects],
        [s.bmi for s in subjects],
    ]
    for level in range(1, synth.RACE_LEVELS):  # one-hot, first level dropped
        cols.append([1.0 if s.race == level else 0.0 for s in subjects])
    return np.column_stack(cols)


def _binned_csv(binned) -> str:
    lines = ["bin,count,decrease_mean,arousal_mean,ci_low,ci_high"]
    for b in range(binned.n_bins):
        lines.append(",".join([
            str(b), str(int(binned.bin_counts[b])),
            repr(float(binned.decrease_means[b])),
            repr(float(binned.arousal_means[b])),
            repr(float(binned.ci_low[b])), repr(float(binned.ci_high[b])),
        ]))
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    _check_out(args.out, args.force)
    if args.binned_csv:
        _check_out(args.binned_csv, args.force)
    ids, nights = _read_night_csvs(args.nights)

    subjects = None
    if args.cohort:
        path = Path(args.cohort)
        if not path.exists():
            raise DataError(f"cohort table not found: {path}")
        subjects = synth.parse_subjects_csv(path.read_text())

    labels_by_id = None
    if args.assignments:
        path = Path(args.assignments)
        if not path.exists():
            raise DataError(f"assignment CSV not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != "recording_id,posterior_disturbed,label":
            raise DataError("not a subtype assignment CSV")
        labels_by_id = {r.split(",")[0]: r.split(",")[2] for r in lines[1:]}

    feature_ids = feature_values = None
    if args.features:
        path = Path(args.features)
        if not path.exists():
            raise DataError(f"feature table not found: {path}")
        feature_ids, feature_values = biomarkers.parse_feature_table(path.read_text())

    report = {
        "flags": {
            "n_bins": args.n_bins, "offset": args.offset,
            "bootstrap": args.bootstrap, "seed": args.seed,
            "nights": list(args.nights),
            "cohort": args.cohort, "assignments": args.assignments,
            "features": args.features,
        },
    }

    try:
        report.update(_compute_report(nights, ids, subjects, labels_by_id,
                                      feature_ids, feature_values, args))
    except (np.linalg.LinAlgError, FloatingPointError, ZeroDivisionError) as exc:
        raise NumericError(str(exc)) from exc

    binned_text = report.get("arousal_correlation", {}).pop("binned_csv", None)
    if args.binned_csv and binned_text is None:
        raise DataError("no binned correlation available for --binned-csv")
    _atomic_write(args.out, _json_dump(report))
    if args.binned_csv:
        _atomic_write(args.binned_csv, binned_text)
    print(f"analysis report -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _compute_report(nights, ids, subjects, labels_by_id, feature_ids,
                    feature_values, args) -> dict:
    report = {}

    # stage concordance per night (needs labels)
    staged = [(i, n) for i, n in zip(ids, nights) if n.stages is not None]
    if staged:
        rho = {}
        for rec_id, night in staged:
            try:
                rho[rec_id] = stats.spearman_concordance(night.sdi, night.stages)
            except ValueError:
                rho[rec_id] = None
        observed = [v for v in rho.values() if v is not None]
        report["stage_concordance"] = {
            "per_night": rho,
            "mean": float(np.mean(observed)) if observed else None,
        }

        scores = np.concatenate([n.rem_prob for _, n in staged])
        labels = np.concatenate([(np.asarray(n.stages) == 4).astype(int)
                                 for _, n in staged])
        if 0 < labels.sum() < len(labels):
            ci = stats.auroc_bootstrap_ci(scores, labels, b=args.bootstrap,
                                          seed=args.seed)
            report["rem_auroc"] = {"estimate": stats.auroc(scores, labels),
                                   "ci95": list(ci), "n_epochs": int(len(labels))}

    # depth decrease vs arousal proportion
    with_arousal = [n for n in nights if n.arousal_prop is not None]
    if with_arousal:
        d_all, a_all = [], []
        for night in with_arousal:
            d, a = stats.pair_decrease_arousal(night.sdi, night.arousal_prop,
                                               offset=args.offset)
            d_all.append(d)
            a_all.append(a)
        try:
            binned = stats.decile_arousal_analysis(np.concatenate(d_all),
                                                   np.concatenate(a_all),
                                                   n_bins=args.n_bins)
        except ValueError:
            binned = None
        if binned is not None:
            report["arousal_correlation"] = {
                "n_bins": binned.n_bins,
                "slope": binned.slope,
                "intercept": binned.intercept,
                "pearson_r": binned.pearson_r,
                "binned": [
                    {"bin": b, "count": int(binned.bin_counts[b]),
                     "decrease_mean": float(binned.decrease_means[b]),
                     "arousal_mean": float(binned.arousal_means[b]),
                     "ci_low": float(binned.ci_low[b]),
                     "ci_high": float(binned.ci_high[b])}
                    for b in range(binned.n_bins)
                ],
                "binned_csv": _binned_csv(binned),
            }

    if subjects is None:
        return report

    by_id = {s.subject_id: s for s in subjects}

    def group_of(subject) -> str:
        if labels_by_id is not None and subject.subject_id in labels_by_id:
            return labels_by_id[subject.subject_id]
        return "disturbed" if subject.disturbed else "normal"

    groups = np.array([group_of(s) for s in subjects])
    g = (groups == "disturbed").astype(float)
    outcome = np.array([float(s.outcome) for s in subjects])
    covariates = _covariate_matrix(subjects)

    # biomarker comparisons by group
    if feature_values is not None and len(set(groups)) == 2:
        rows_by_id = {rid: feature_values[k] for k, rid in enumerate(feature_ids)}
        comp = {}
        for j, name in enumerate(biomarkers.FEATURE_COLUMNS):
            a = [rows_by_id[s.subject_id][j] for s in subjects
                 if group_of(s) == "normal" and s.subject_id in rows_by_id]
            b = [rows_by_id[s.subject_id][j] for s in subjects
                 if group_of(s) == "disturbed" and s.subject_id in rows_by_id]
            a = [v for v in a if np.isfinite(v)]
            b = [v for v in b if np.isfinite(v)]
            if len(a) < 2 or len(b) < 2:
                continue
            try:
                t, p = stats.welch_t(a, b)
                d = stats.cohens_d(a, b)
            except ValueError:
                continue  # degenerate (zero-variance) feature
            comp[name] = {"normal_mean": float(np.mean(a)),
                          "disturbed_mean": float(np.mean(b)),
                          "t": t, "p": p, "cohens_d": d}
        report["group_comparisons"] = comp

    if len(set(groups)) == 2:
        table = [[int(((g == 1) & (outcome == 1)).sum()),
                  int(((g == 1) & (outcome == 0)).sum())],
                 [int(((g == 0) & (outcome == 1)).sum()),
                  int(((g == 0) & (outcome == 0)).sum())]]
        chi2, chi2_p = stats.chi_square_2x2(table)
        res = stats.logistic_or(outcome, g, covariates=covariates,
                                bootstrap=args.bootstrap, seed=args.seed)
        report["outcome"] = {
            "table": table, "chi_square": chi2, "chi_square_p": chi2_p,
            "odds_ratio": res.odds_ratio,
            "odds_ratio_ci95": list(res.ci) if res.ci else None,
            "separated": res.separated,
        }

        times = np.array([s.time_days for s in subjects])
        events = np.array([s.event for s in subjects])
        survival = {}
        try:
            stat, p = stats.logrank(times[g == 1], events[g == 1],
                                    times[g == 0], events[g == 0])
            survival["logrank"] = {"chi_square": stat, "p": p}
        except ValueError as exc:
            survival["logrank"] = {"error": str(exc)}
        try:
            X = np.column_stack([g, covariates])
            cox = stats.cox_ph(times, events, X)
            survival["cox"] = {
                "group_hr": float(cox.hr[0]),
                "group_hr_ci95": list(cox.ci[0]),
                "n_events": int(events.sum()),
            }
        except ValueError as exc:
            survival["cox"] = {"error": str(exc)}
        report["survival"] = survival

    return report


def cmd_plot(args) -> int:
    _check_out(args.out, args.force)
    path = Path(args.sdi)
    if not path.exists():
        raise DataError(f"night CSV not found: {path}")
    night = annotate_mod.night_from_csv(path.read_text())
    plots.write_svg(plots.night_svg(night, title=args.title), args.out)
    print(f"plot -> {args.out}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "annotate": cmd_annotate,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "analyze": cmd_analyze,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_config(parser, args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EdfParseError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, np.linalg.LinAlgError,
            ZeroDivisionError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
