"""Command-line entry point: ``neuropathx <subcommand> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

import argparse
import json
import logging
import os
import sys

from . import genio, interpret, synthgen
from . import model as M
from . import pathway_features as pf
from . import tensor as T
from . import trainer as TR
from .config import SCHEMA, RunConfig, parse_value
from .errors import ConfigError, NPXError, NumericError

log = logging.getLogger("neuropathx")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _set_pair(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = (s.strip() for s in text.split("=", 1))
    try:
        return key, parse_value(key, value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(parser):
    parser.add_argument("--config", metavar="FILE", help="flat key = value config file")
    parser.add_argument(
        "--set", dest="overrides", metavar="KEY=VALUE", type=_set_pair, action="append",
        default=[], help="override any config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="random seed (overrides NPX_SEED and the config file)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _path_flags(parser, keys):
    for key in keys:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="PATH")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="neuropathx",
        description="Pathway-guided imaging genetics: features, training, interpretation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("build-features", help="genotypes + GWAS + genes + GMT -> pathway matrix")
    _common(p)
    _path_flags(p, ("genotypes", "gwas", "genes", "gmt", "exclude", "out"))
    p.add_argument("--window-kb", type=float, dest="window_kb", help="SNP-to-gene window (default 50)")

    p = sub.add_parser("train", help="cross-validated training with metrics and attention dumps")
    _common(p)
    _path_flags(p, ("genotypes", "gwas", "genes", "gmt", "exclude", "pathway_matrix", "imaging", "labels", "out"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--jobs", type=int, help="folds trained in parallel (default 1)")

    p = sub.add_parser("interpret", help="group-mean attention -> top pathway/ROI associations")
    _common(p)
    _path_flags(p, ("attn_dir", "labels", "truth", "out"))
    p.add_argument("--k-path", type=int, dest="k_path", help="top pathways per group (default 7)")
    p.add_argument("--k-roi", type=int, dest="k_roi", help="top ROIs per group (default 4)")
    p.add_argument("--svg", action="store_const", const=True, help="also write associations.svg")

    p = sub.add_parser("synth", help="write a synthetic cohort with planted signal")
    _common(p)
    p.add_argument("--spec", metavar="FILE", help="config file holding the synthetic spec keys")
    _path_flags(p, ("out",))
    p.add_argument("--effect-strength", type=float, dest="effect_strength")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a micro-batch")
    _common(p)
    p.add_argument("--inject-fault", action="store_true", help="negative control: break the ReLU backward rule")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    return parser


def _resolve(args, config_path=None):
    overrides = dict(args.overrides)
    for key in SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.resolve(config_path or args.config, overrides)


# -- subcommands ----------------------------------------------------------------


def _feature_inputs(rc):
    exclusions = genio.parse_exclusions(rc.get_path("exclude")) if rc["exclude"] else set()
    genotypes = genio.parse_genotypes(rc.get_path("genotypes"))
    gwas = genio.parse_gwas(rc.get_path("gwas"))
    genes = genio.parse_gene_annotations(rc.get_path("genes"))
    pathways = genio.parse_gmt(rc.get_path("gmt"), exclusions)
    if not pathways:
        raise UsageError("no pathways retained")
    return genotypes, gwas, genes, pathways


def _feature_builder(rc, genotypes, gwas, genes, pathways):
    builder = pf.FeatureBuilder(genotypes, gwas, genes, pathways, rc["window_kb"])
    if not builder.pathway_ids:
        raise UsageError("no pathways retained")
    return builder


def cmd_build_features(args):
    rc = _resolve(args)
    out = rc.get_path("out")
    builder = _feature_builder(rc, *_feature_inputs(rc))
    matrix = builder.build()
    os.makedirs(out, exist_ok=True)
    pf.write_pathway_matrix(matrix, os.path.join(out, "pathway_matrix.tsv"))
    builder.report.write(os.path.join(out, "drop_report.json"))
    rc.write(out)
    print(f"{len(matrix.subject_ids)} subjects x {len(matrix.pathway_ids)} pathways -> {out}")
    return EXIT_OK


def _load_dataset(rc):
    imaging = genio.parse_imaging(rc.get_path("imaging"))
    labels = genio.parse_labels(rc.get_path("labels"))
    if rc["pathway_matrix"]:
        matrix = pf.read_pathway_matrix(rc.get_path("pathway_matrix"))
        keep = set(matrix.subject_ids) & set(imaging.subject_ids) & set(labels.subject_ids)
        ids = sorted(keep)
        if not ids:
            raise UsageError("no subject appears in pathway matrix, imaging and labels")
        pos = {s: i for i, s in enumerate(matrix.subject_ids)}
        features = pf.PrecomputedFeatures(matrix.subset([pos[s] for s in ids]))
        img = imaging.subset([imaging.subject_ids.index(s) for s in ids])
        lab = labels.subset([labels.subject_ids.index(s) for s in ids])
        return TR.CVDataset(ids, lab.labels, img.features, img.roi_labels, features)
    genotypes, gwas, genes, pathways = _feature_inputs(rc)
    cohort = genio.align_cohort(genotypes, imaging, labels)
    for source, dropped in cohort.dropped.items():
        if dropped:
            log.warning("%d subject(s) only in %s dropped", len(dropped), source)
    builder = _feature_builder(rc, cohort.genotypes, gwas, genes, pathways)
    return TR.CVDataset(
        cohort.subject_ids, cohort.labels.labels, cohort.imaging.features,
        cohort.imaging.roi_labels, builder,
    )


def cmd_train(args):
    rc = _resolve(args)
    out = rc.get_path("out")
    dataset = _load_dataset(rc)
    result = TR.run_cv(dataset, rc.model_config(), rc.train_config(), out, jobs=rc["jobs"])
    rc.write(out)
    agg = result.aggregate
    for name in TR.METRICS:
        mean = agg[name]["mean"]
        print(f"{name:12s} {'nan' if mean is None else format(mean, '.4f')}")
    return EXIT_OK


def cmd_interpret(args):
    rc = _resolve(args)
    out = rc.get_path("out")
    labels = genio.parse_labels(rc.get_path("labels"))
    ga = interpret.mean_attention(rc.get_path("attn_dir"), labels)
    assoc = interpret.top_associations(ga, rc["k_path"], rc["k_roi"])
    interpret.export_associations(assoc, out, svg=rc["svg"])
    rc.write(out)
    print("intersection: " + (", ".join(assoc.intersection) or "(empty)"))
    if rc["truth"]:
        score = synthgen.recovery_score(assoc, synthgen.GroundTruth.load(rc.get_path("truth")))
        with open(os.path.join(out, "recovery.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"pathways": score.pathways, "rois": score.rois}, fh, indent=2)
            fh.write("\n")
        print(f"recovery: pathways {score.pathways:.4f} rois {score.rois:.4f}")
    return EXIT_OK


def cmd_synth(args):
    rc = _resolve(args, args.spec or args.config)
    out = rc.get_path("out")
    cohort = synthgen.generate(rc.synth_spec())
    synthgen.write_cohort(cohort, out)
    rc.write(out)
    print(f"synthetic cohort ({cohort.spec.n_subjects} subjects) -> {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    rc = _resolve(args)
    cfg = rc.model_config(n_pathways=rc["n_pathways"], n_rois=rc["n_rois"], d=rc["d"])
    if args.inject_fault:
        with T.inject_fault("relu"):
            report = M.grad_check_micro_batch(cfg, rc["seed"], h=args.h, tol=args.tol)
    else:
        report = M.grad_check_micro_batch(cfg, rc["seed"], h=args.h, tol=args.tol)
    for name, err in report.max_rel_err.items():
        print(f"{name:20s} {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max rel. err. {report.worst:.3e} (tol {report.tol:g}) {verdict}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "build-features": cmd_build_features,
    "train": cmd_train,
    "interpret": cmd_interpret,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, NPXError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
