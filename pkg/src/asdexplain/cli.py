"""``asdexplain`` command line: synth, train, attribute, roar, report, check-grad.

Run directory layout::

    <run_dir>/config.ini            merged configuration of the train step
    <run_dir>/data_summary.csv      subjects before and after the FD filter
    <run_dir>/results.csv           per-fold metrics plus mean and std rows
    <run_dir>/fold_<i>/             model.ssae, selection.txt, standardizer.csv,
                                    trace.csv, training.svg, predictions.csv
    <run_dir>/attribution/          <method>.ranking, <method>_scores.csv,
                                    random.ranking, config.ini
    <run_dir>/roar/                 roar.csv, roar_summary.csv, roar.svg, config.ini
    <run_dir>/report/<method>/      roi_report.csv, roi_nodes.csv, roi_importance.svg
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import config as cfgmod
from . import evaluation, ingest, nn, plotting, roar, roi_report
from .config import ConfigError, RunConfig
from .svm_rfe import SelectedFeatures, apply_selection, standardize

logger = logging.getLogger("asdexplain")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

_SECTIONS = {
    "synth": ("synth",),
    "train": ("data", "pipeline", "svm", "pretrain", "finetune"),
    "attribute": ("attribution",),
    "roar": ("roar", "pipeline", "pretrain", "finetune"),
    "report": ("report",),
    "check-grad": ("check",),
}
_RUN_KEYS = {
    "synth": ("seed",),
    "check-grad": ("seed",),
}


def _add_options(parser, command):
    run_keys = _RUN_KEYS.get(command, ("seed", "jobs", "run_dir"))
    for opt in cfgmod.OPTIONS:
        if opt.section == "run" and opt.key not in run_keys:
            continue
        if opt.section != "run" and opt.section not in _SECTIONS[command]:
            continue
        parser.add_argument(opt.cli_flag, dest=opt.dest, default=None, metavar="VALUE",
                            help=f"{opt.help} (default: {cfgmod._format(opt.default)})")
    if command == "train":
        parser.add_argument("--no-fd-filter", dest="no_fd_filter", action="store_true",
                            help="keep every subject regardless of motion (default: off)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="asdexplain", allow_abbrev=False,
        description="Connectome classifier with SVM-RFE, a stacked sparse autoencoder "
                    "and attribution benchmarking.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="log verbosity (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate a planted synthetic cohort",
        "train": "cross-validated training; writes checkpoints and metrics",
        "attribute": "attribution rankings from one fold's model",
        "roar": "remove-and-retrain benchmark over the saved rankings",
        "report": "ROI importance and Brodmann areas for one ranking",
        "check-grad": "finite-difference check of the network gradients",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text, allow_abbrev=False)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="INI config file; flags override it (default: none; later "
                            "steps read <run_dir>/config.ini)")
        _add_options(p, name)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    by_dest = {o.dest: o for o in cfgmod.OPTIONS}
    for dest, text in vars(args).items():
        if dest in by_dest and text is not None:
            opt = by_dest[dest]
            overrides[(opt.section, opt.key)] = cfgmod.parse_value(opt, text)
    if getattr(args, "no_fd_filter", False):
        overrides[("data", "fd_threshold")] = None
    config_file = args.config
    if config_file is None and args.command in ("attribute", "roar", "report"):
        run_dir = overrides.get(("run", "run_dir"), cfgmod.defaults()[("run", "run_dir")])
        echoed = Path(run_dir) / "config.ini"
        if not echoed.is_file():
            raise ingest.DataError(f"{echoed} not found; run `train` first")
        config_file = echoed
    return RunConfig(cfgmod.merge(config_file, overrides))


# ---------------------------------------------------------------- shared helpers

def load_run_data(rc: RunConfig):
    """Dataset after the FD filter, plus the number of removed subjects."""
    manifest = rc.get("data", "manifest")
    if not manifest:
        raise ConfigError("no manifest given (--manifest or [data] manifest)")
    dataset = ingest.load_dataset(manifest)
    threshold = rc.get("data", "fd_threshold")
    removed = 0
    if threshold is not None:
        dataset, removed = ingest.filter_by_fd(dataset, threshold)
        logger.info("FD filter %.3g mm removed %d subject(s)", threshold, removed)
    if len(dataset) == 0:
        raise ingest.DataError("no subjects left after the FD filter")
    return dataset, removed


def _splits(rc, dataset):
    pipe = rc.pipeline()
    return evaluation.stratified_kfold(dataset.labels, pipe.k, pipe.val_fraction,
                                       evaluation.derive_seed(pipe.seed, "split"))


def _fold_dir(rc, fold):
    return rc.run_dir / f"fold_{fold}"


def write_standardizer(path, stats):
    mean, scale = stats
    with open(path, "w", newline="") as fh:
        fh.write("feature_index,mean,scale\n")
        for i, (m, s) in enumerate(zip(mean, scale)):
            fh.write(f"{i},{float(m)!r},{float(s)!r}\n")


def read_standardizer(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy(), data[:, 2].copy()


def load_fold(rc: RunConfig, fold):
    d = _fold_dir(rc, fold)
    for name in ("model.ssae", "selection.txt", "standardizer.csv"):
        if not (d / name).is_file():
            raise ingest.DataError(f"{d / name} missing; run `train` first")
    model, _ = nn.load_checkpoint(d / "model.ssae")
    return model, SelectedFeatures.read(d / "selection.txt"), read_standardizer(d / "standardizer.csv")


# ---------------------------------------------------------------- commands

def cmd_synth(rc: RunConfig):
    scfg = rc.synth()
    data, truth = ingest.generate_synthetic(scfg)
    out = Path(rc.get("synth", "out"))
    manifest = ingest.write_synthetic(out, data, truth)
    cfgmod.write_ini(rc.values, out / "config.ini")
    logger.info("wrote %s (%d subjects, %d planted edges)", manifest, scfg.n_subjects,
                len(truth.edge_indices))
    return manifest


def cmd_train(rc: RunConfig):
    pipe = rc.pipeline()
    dataset, removed = load_run_data(rc)
    run_dir = rc.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_ini(rc.values, run_dir / "config.ini")
    with open(run_dir / "data_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subjects_loaded", "removed_by_fd", "subjects_used", "asd", "tc"])
        n_asd = int(np.sum(dataset.labels == 1))
        w.writerow([len(dataset) + removed, removed, len(dataset), n_asd, len(dataset) - n_asd])

    result = evaluation.run_cv(dataset, pipe, rc.jobs)
    for tf in result.folds:
        d = _fold_dir(rc, tf.fold)
        d.mkdir(exist_ok=True)
        nn.save_checkpoint(tf.model, d / "model.ssae",
                           {"fold": tf.fold, "seed": pipe.seed,
                            "dims": ",".join(map(str, tf.model.dims))})
        tf.selection.write(d / "selection.txt")
        write_standardizer(d / "standardizer.csv", tf.stats)
        tf.trace.write(d / "trace.csv")
        plotting.training_curves(tf.trace, d / "training.svg")
        Xt = standardize(apply_selection(dataset.X[tf.split.test], tf.selection), tf.stats)
        probs = nn.forward(tf.model, Xt).output
        with open(d / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "label", "predicted", "prob_asd"])
            for i, p in zip(tf.split.test, probs):
                w.writerow([dataset.subject_ids[i], ingest.LABELS[dataset.labels[i]],
                            ingest.LABELS[int(np.argmax(p))], f"{p[1]:.10g}"])
    result.write(run_dir / "results.csv")
    mean, std = result.summary()["accuracy"]
    logger.info("mean accuracy %.4f (sd %.4f) over %d folds", mean, std, len(result.folds))
    return result


def _attribute_task(args):
    method, model, Z, acfg, background, seed = args
    a = attr.compute_attribution(method, model, Z, acfg, background)
    return attr.rank_features(a, seed)


def cmd_attribute(rc: RunConfig):
    acfg = rc.attribution()
    fold = rc.get("attribution", "fold")
    dataset, _ = load_run_data(rc)
    splits = _splits(rc, dataset)
    if not 0 <= fold < len(splits):
        raise ConfigError(f"fold {fold} out of range")
    split = splits[fold]
    model, sel, stats = load_fold(rc, fold)
    Z = standardize(apply_selection(dataset.X, sel), stats)
    # explained rows and SHAP background both come from the fold's training split
    rng = np.random.default_rng(evaluation.derive_seed(rc.seed, "attribution_rows", fold))
    rows = np.sort(rng.permutation(split.train)[:acfg.max_samples])
    background = Z[np.sort(rng.permutation(split.train)[:acfg.background_size])]

    out = rc.run_dir / "attribution"
    out.mkdir(parents=True, exist_ok=True)
    methods = list(rc.get("attribution", "methods"))
    tasks = [(m, model, Z[rows], acfg, background, rc.seed) for m in methods]
    for ranking in evaluation.map_tasks(_attribute_task, tasks, rc.jobs):
        ranking.write(out / f"{ranking.method}.ranking")
        attr.write_attribution_scores(out / f"{ranking.method}_scores.csv", ranking, sel.kept)
        logger.info("%s: top feature %d (edge %d)", ranking.method, ranking.order[0],
                    sel.kept[ranking.order[0]])
    rand = attr.random_ranking(sel.kept.size, evaluation.derive_seed(rc.seed, "random_ranking"))
    rand.write(out / "random.ranking")
    cfgmod.write_ini(rc.values, out / "config.ini")
    return out


def cmd_roar(rc: RunConfig):
    rcfg = rc.roar()
    dataset, _ = load_run_data(rc)
    fold = rc.get("attribution", "fold")
    _, sel, _ = load_fold(rc, fold)
    Xr = apply_selection(dataset.X, sel)
    rankings = {}
    for method in rc.get("roar", "methods"):
        path = rc.run_dir / "attribution" / f"{method}.ranking"
        if not path.is_file():
            raise ingest.DataError(f"{path} missing; run `attribute` with that method")
        rankings[method] = attr.FeatureRanking.read(path)
    planted = rc.get("roar", "planted")
    if planted:
        truth = ingest.PlantedTruth.read(planted)
        rankings["oracle"] = roar.oracle_ranking(truth.edge_indices, sel.kept)
    curves = roar.roar_run(Xr, dataset.labels, rankings, rcfg, rc.jobs)
    out = rc.run_dir / "roar"
    roar.emit_roar_table(curves, out)
    cfgmod.write_ini(rc.values, out / "config.ini")
    return curves


def cmd_report(rc: RunConfig):
    method = rc.get("report", "method")
    src = rc.run_dir / "attribution"
    ranking_path, scores_path = src / f"{method}.ranking", src / f"{method}_scores.csv"
    if not ranking_path.is_file() or not scores_path.is_file():
        raise ingest.DataError(f"no saved ranking for {method!r} in {src}")
    ranking = attr.FeatureRanking.read(ranking_path)
    _, original, scores = attr.read_attribution_scores(scores_path)
    try:
        imp = roi_report.roi_importance(ranking.order, scores,
                                        rc.get("report", "top_fraction"), original)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = rc.run_dir / "report" / method
    paths = roi_report.emit_roi_report(imp, out)
    top = imp.order()[:5]
    logger.info("top ROIs: %s", ", ".join(imp.names[r] for r in top))
    return paths


def cmd_check_grad(rc: RunConfig):
    dims = list(rc.get("check", "dims"))
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError("need at least two positive widths")
    acts = ["relu"] * (len(dims) - 2) + ["softmax"]
    model = nn.init_mlp(dims, acts, rc.seed)
    rng = np.random.default_rng(rc.seed)
    X = rng.standard_normal((8, dims[0]))
    y = rng.integers(0, dims[-1], size=8)
    err = nn.finite_diff_check(model, (X, y), lambda m, b: nn.classifier_loss(m, *b),
                               h=rc.get("check", "h"), n_coords=rc.get("check", "coords"),
                               seed=rc.seed)
    tol = rc.get("check", "tolerance")
    print(f"max relative error {err:.3e} (tolerance {tol:g})")
    if not err < tol:
        raise FloatingPointError(f"gradient check failed: {err:.3e} >= {tol:g}")
    return err


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "roar": cmd_roar,
    "report": cmd_report,
    "check-grad": cmd_check_grad,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        rc = resolve_config(args)
        COMMANDS[args.command](rc)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ingest.DataError, nn.CheckpointError, OSError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        # anything else raised while validating inputs is a problem with the data
        logger.error("data error: %s", exc)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
