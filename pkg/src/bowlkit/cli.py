"""Command-line pipeline: codebook -> labels -> targets -> evaluation.

Stages communicate through files so each one is independently testable and
a codebook built once can be reused across datasets. All commands are
deterministic given identical inputs and seed; outputs are byte-identical
across runs. Errors print to stderr with the machine-parsable prefix
``bowlkit: error:`` and a nonzero exit code. Verbosity comes from the
BOWLKIT_LOG environment variable (debug/info/warning/error).

Option precedence: explicit command-line flag, then a ``--config`` JSON file
(keys are flag names with underscores), then the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import codebook, embedding_store, evalkit, probe, supervision
from .errors import BowlkitError, ConfigError, ParseError
from .geometry import AnchorConfig, generate_anchors
from .labeler import (
    GammaPolicy,
    IGNORED,
    NEGATIVE,
    POSITIVE,
    AnchorLabel,
    label_anchors,
)

log = logging.getLogger("bowlkit.cli")

_FLOAT_FMT = "{:.9g}"


def _configure_logging():
    level_name = os.environ.get("BOWLKIT_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise ConfigError(f"no such file: {path} ({what})")


def _parse_gamma(text) -> GammaPolicy:
    if text == "auto":
        return GammaPolicy(mode="otsu")
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"--gamma must be 'auto' or a number, got {text!r}")
    return GammaPolicy(mode="fixed", value=value)


def _parse_int_list(text, flag):
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}")


def _parse_float_list(text, flag):
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}")


def _anchor_config(args) -> AnchorConfig:
    return AnchorConfig(
        strides=_parse_int_list(args.anchor_strides, "--anchor-strides"),
        scales=_parse_int_list(args.anchor_scales, "--anchor-scales"),
        aspect_ratios=_parse_float_list(args.anchor_ratios, "--anchor-ratios"),
    )


def _add_anchor_flags(parser):
    parser.add_argument("--anchor-strides", default="4,8,16,32,64")
    parser.add_argument("--anchor-scales", default="32,64,128,256,512")
    parser.add_argument("--anchor-ratios", default="0.5,1.0,2.0")


def _validate_lambda(value):
    if not -1.0 < value < 1.0:
        raise ConfigError(f"--lambda must be in the open range (-1, 1), got {value}")
    return value


def _write_json(payload, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# make-synthetic


def cmd_make_synthetic(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    config = probe.SyntheticConfig(
        n_train_images=args.train_images,
        n_eval_images=args.eval_images,
        noise=args.noise,
    )
    dataset = probe.make_synthetic_dataset(args.seed, config)

    embedding_store.write_embeddings(
        dataset.train_grids(), os.path.join(args.out, "embeddings_train.bwle")
    )
    embedding_store.write_embeddings(
        dataset.eval_grids(), os.path.join(args.out, "embeddings_eval.bwle")
    )
    _write_json(
        probe.dataset_to_coco(dataset, dataset.train_ids),
        os.path.join(args.out, "annotations_train.json"),
    )
    _write_json(
        probe.dataset_to_coco(dataset, dataset.eval_ids),
        os.path.join(args.out, "annotations_eval.json"),
    )
    _write_json(
        probe.make_mock_detections(dataset, dataset.eval_ids, args.seed),
        os.path.join(args.out, "detections_eval.json"),
    )
    anchor_cfg = probe.synthetic_anchor_config(config)
    _write_json(
        {
            "seed": args.seed,
            "noise": args.noise,
            "train_images": args.train_images,
            "eval_images": args.eval_images,
            "anchor_strides": list(anchor_cfg.strides),
            "anchor_scales": list(anchor_cfg.scales),
            "anchor_ratios": list(anchor_cfg.aspect_ratios),
        },
        os.path.join(args.out, "fixture.json"),
    )
    print(f"synthetic fixture written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# build-codebook


def cmd_build_codebook(args) -> int:
    _require_file(args.embeddings, "embeddings")
    lam = _validate_lambda(args.lam)
    if args.top_n < 1:
        raise ConfigError(f"--top-n must be >= 1, got {args.top_n}")
    os.makedirs(args.out, exist_ok=True)

    grids = embedding_store.read_embeddings(args.embeddings, normalize_vectors=True)
    exemplars = codebook.build_exemplars(embedding_store.iter_patches(grids), lam)
    subset = codebook.top_n(exemplars, args.top_n) if len(exemplars) else exemplars

    full_path = os.path.join(args.out, "exemplars_full.bwlx")
    top_path = os.path.join(args.out, "exemplars_top.bwlx")
    codebook.save_exemplars(exemplars, full_path)
    codebook.save_exemplars(subset, top_path)

    total_patches = int(exemplars.counts().sum()) if len(exemplars) else 0
    covered = int(subset.counts().sum()) if len(subset) else 0
    coverage = covered / total_patches if total_patches else 0.0
    stats = (
        f"exemplars_total\t{len(exemplars)}\n"
        f"exemplars_kept\t{len(subset)}\n"
        f"patches_total\t{total_patches}\n"
        f"top_n_coverage\t{_FLOAT_FMT.format(coverage)}\n"
    )
    with open(os.path.join(args.out, "codebook_stats.txt"), "w") as fh:
        fh.write(stats)
    print(stats, end="")
    return 0


# ---------------------------------------------------------------------------
# label-anchors


def _label_lines(image_id, labels, anchors, sims):
    lines = []
    for label, anchor in zip(labels, anchors):
        matched = "" if label.matched_gt is None else str(label.matched_gt)
        similarity = (
            "" if label.similarity is None else _FLOAT_FMT.format(label.similarity)
        )
        lines.append(
            f"{image_id},{label.anchor_index},{anchor.level},{label.role},"
            f"{matched},{similarity}"
        )
    diag = []
    for label, anchor, sim in zip(labels, anchors, sims):
        if np.isnan(sim):
            continue
        diag.append(
            f"{image_id},{label.anchor_index},{anchor.level},"
            f"{_FLOAT_FMT.format(sim)},{label.role}"
        )
    return lines, diag


def cmd_label_anchors(args) -> int:
    _require_file(args.embeddings, "embeddings")
    _require_file(args.annotations, "annotations")
    _require_file(args.exemplars, "exemplars")
    os.makedirs(args.out, exist_ok=True)

    exemplars = codebook.load_exemplars(args.exemplars)
    if len(exemplars) == 0:
        raise ConfigError(f"exemplar file {args.exemplars} is empty")
    policy = _parse_gamma(args.gamma)
    if not 0.0 < args.iou_pos < 1.0:
        raise ConfigError(f"--iou-pos must be in (0, 1), got {args.iou_pos}")
    levels = (
        None if args.levels == "all" else _parse_int_list(args.levels, "--levels")
    )
    anchor_cfg = _anchor_config(args)

    grids = embedding_store.read_embeddings(args.embeddings, normalize_vectors=True)
    images, flat_gts = evalkit.load_coco_ground_truth(args.annotations)
    gts_by_image = {}
    for image_id, gt in flat_gts:
        gts_by_image.setdefault(image_id, []).append(gt)

    def process(grid):
        if grid.image_id not in images:
            raise ConfigError(
                f"annotations are missing image {grid.image_id} (width/height needed)"
            )
        width, height = images[grid.image_id]
        anchors = generate_anchors(width, height, anchor_cfg)
        labels, sims, gamma = label_anchors(
            anchors,
            grid,
            exemplars,
            policy,
            gts_by_image.get(grid.image_id, []),
            iou_pos=args.iou_pos,
            levels=levels,
            return_similarities=True,
        )
        return grid.image_id, labels, anchors, sims

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            outputs = list(pool.map(process, grids))
    else:
        outputs = [process(grid) for grid in grids]

    counts = {POSITIVE: 0, NEGATIVE: 0, IGNORED: 0}
    label_lines = []
    diag_lines = []
    for image_id, labels, anchors, sims in outputs:
        for label in labels:
            counts[label.role] += 1
        lines, diag = _label_lines(image_id, labels, anchors, sims)
        label_lines.extend(lines)
        diag_lines.extend(diag)

    with open(os.path.join(args.out, "labels.csv"), "w", newline="\n") as fh:
        fh.write("\n".join(label_lines) + ("\n" if label_lines else ""))
    with open(os.path.join(args.out, "similarities.csv"), "w", newline="\n") as fh:
        fh.write("\n".join(diag_lines) + ("\n" if diag_lines else ""))

    print(
        f"positives\t{counts[POSITIVE]}\n"
        f"negatives\t{counts[NEGATIVE]}\n"
        f"ignored\t{counts[IGNORED]}"
    )
    return 0


def read_labels(path) -> dict[int, list[AnchorLabel]]:
    """Parse a labels.csv back into per-image label lists."""
    by_image: dict[int, list[AnchorLabel]] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ParseError(f"expected 6 fields, got {len(parts)}", lineno)
            role = parts[3]
            if role not in (POSITIVE, NEGATIVE, IGNORED):
                raise ParseError(f"unknown role {role!r}", lineno)
            try:
                image_id = int(parts[0])
                anchor_index = int(parts[1])
                matched = int(parts[4]) if parts[4] else None
                similarity = float(parts[5]) if parts[5] else None
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            by_image.setdefault(image_id, []).append(
                AnchorLabel(
                    anchor_index=anchor_index,
                    role=role,
                    matched_gt=matched,
                    similarity=similarity,
                )
            )
    return by_image


# ---------------------------------------------------------------------------
# assign-targets


def cmd_assign_targets(args) -> int:
    _require_file(args.annotations, "annotations")
    _require_file(args.labels, "labels")
    anchor_cfg = _anchor_config(args)

    images, flat_gts = evalkit.load_coco_ground_truth(args.annotations)
    gts_by_image = {}
    for image_id, gt in flat_gts:
        gts_by_image.setdefault(image_id, []).append(gt)

    labels_by_image = read_labels(args.labels)
    records = []
    for image_id in sorted(labels_by_image):
        if image_id not in images:
            raise ConfigError(f"annotations are missing image {image_id}")
        width, height = images[image_id]
        anchors = generate_anchors(width, height, anchor_cfg)
        records.extend(
            supervision.assign_targets(
                labels_by_image[image_id],
                anchors,
                gts_by_image.get(image_id, []),
                image_id=image_id,
                per_role_cap=args.per_role_cap,
            )
        )

    supervision.write_targets(records, args.out)
    reread = supervision.read_targets(args.out)
    if len(reread) != len(records):
        raise ConfigError("target file failed round-trip validation")
    print(f"targets\t{len(records)}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    _require_file(args.annotations, "annotations")
    _require_file(args.detections, "detections")
    if args.budget < 1:
        raise ConfigError(f"--budget must be >= 1, got {args.budget}")
    os.makedirs(args.out, exist_ok=True)

    _, gts = evalkit.load_coco_ground_truth(args.annotations)
    dets = evalkit.load_coco_detections(args.detections)
    report = evalkit.evaluate_all(dets, gts, args.budget)
    evalkit.write_report(
        report,
        os.path.join(args.out, "ar_report.txt"),
        os.path.join(args.out, "ar_report.json"),
    )
    print(evalkit.report_text(report), end="")
    return 0


# ---------------------------------------------------------------------------
# precision-check


def cmd_precision_check(args) -> int:
    _require_file(args.embeddings, "embeddings")
    _require_file(args.annotations, "annotations")
    _require_file(args.exemplars, "exemplars")

    full = codebook.load_exemplars(args.exemplars)
    if len(full) == 0:
        raise ConfigError(f"exemplar file {args.exemplars} is empty")
    policy = _parse_gamma(args.gamma)
    levels = (
        None if args.levels == "all" else _parse_int_list(args.levels, "--levels")
    )
    anchor_cfg = _anchor_config(args)
    sweep = _parse_int_list(args.sweep, "--sweep")
    if not sweep or any(n < 1 for n in sweep):
        raise ConfigError(f"--sweep needs positive sizes, got {args.sweep!r}")

    grids = embedding_store.read_embeddings(args.embeddings, normalize_vectors=True)
    images, flat_gts = evalkit.load_coco_ground_truth(args.annotations)
    gts_by_image = {}
    for image_id, gt in flat_gts:
        gts_by_image.setdefault(image_id, []).append(gt)

    rows = []
    for n in sweep:
        subset = codebook.top_n(full, n)
        negatives = []
        for grid in grids:
            if grid.image_id not in images:
                raise ConfigError(f"annotations are missing image {grid.image_id}")
            width, height = images[grid.image_id]
            anchors = generate_anchors(width, height, anchor_cfg)
            labels = label_anchors(
                anchors,
                grid,
                subset,
                policy,
                gts_by_image.get(grid.image_id, []),
                iou_pos=args.iou_pos,
                levels=levels,
            )
            for label in labels:
                if label.role == NEGATIVE:
                    negatives.append((grid.image_id, anchors[label.anchor_index].box))
        precision = evalkit.negative_precision(
            negatives, flat_gts, iou_threshold=args.iou_guard
        )
        shown = "n/a" if precision is None else _FLOAT_FMT.format(precision)
        rows.append(f"{n}\t{len(negatives)}\t{shown}")

    table = "n_exemplars\tnegatives\tprecision\n" + "\n".join(rows) + "\n"
    with open(args.out, "w", newline="\n") as fh:
        fh.write(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# probe-ab


def cmd_probe_ab(args) -> int:
    if args.condition not in ("both",) + probe.CONDITIONS:
        raise ConfigError(f"unknown condition {args.condition!r}")
    lam = _validate_lambda(args.lam)
    os.makedirs(args.out, exist_ok=True)

    config = probe.SyntheticConfig(noise=args.noise)
    dataset = probe.make_synthetic_dataset(args.seed, config)
    normalized = [g.normalized() for g in dataset.train_grids()]
    full = codebook.build_exemplars(embedding_store.iter_patches(normalized), lam)
    exemplars = codebook.top_n(full, args.top_n)

    result = probe.ab_experiment(
        dataset,
        exemplars,
        probe.ProbeConfig(
            learning_rate=args.learning_rate, epochs=args.epochs, seed=args.seed
        ),
        budget=args.budget,
    )

    def fmt(value):
        return "n/a" if value is None else _FLOAT_FMT.format(value)

    lines = ["condition\tar_novel\tar_all\tseed"]
    if args.condition in ("both", probe.WITH_NEGATIVES):
        lines.append(
            f"with_negatives\t{fmt(result.ar_novel_with)}\t"
            f"{fmt(result.ar_all_with)}\t{args.seed}"
        )
    if args.condition in ("both", probe.POSITIVES_ONLY):
        lines.append(
            f"positives_only\t{fmt(result.ar_novel_without)}\t"
            f"{fmt(result.ar_all_without)}\t{args.seed}"
        )
    lines.append(
        f"records\tpositives={result.n_positive_records}\t"
        f"negatives={result.n_negative_records}\t"
    )
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "probe_report.txt"), "w", newline="\n") as fh:
        fh.write(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bowlkit",
        description="Background codebooks, negative anchors, and AR evaluation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    class _Sub:
        """add_parser that also wires the shared --config flag."""

        @staticmethod
        def add_parser(*a, **kw):
            p = subparsers.add_parser(*a, **kw)
            p.add_argument("--config", default=None,
                           help="JSON file of option defaults")
            return p

    sub = _Sub()

    p = sub.add_parser("make-synthetic", help="emit the bundled synthetic fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--train-images", type=int, default=12)
    p.add_argument("--eval-images", type=int, default=8)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("build-codebook", help="greedy exemplar selection")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--top-n", type=int, default=1000)
    p.set_defaults(func=cmd_build_codebook)

    p = sub.add_parser("label-anchors", help="positives by IoU, negatives by codebook")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--exemplars", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", default="auto")
    p.add_argument("--iou-pos", type=float, default=0.3)
    p.add_argument("--levels", default="all")
    p.add_argument("--threads", type=int, default=1)
    _add_anchor_flags(p)
    p.set_defaults(func=cmd_label_anchors)

    p = sub.add_parser("assign-targets", help="labels to supervision records")
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-role-cap", type=int, default=None)
    _add_anchor_flags(p)
    p.set_defaults(func=cmd_assign_targets)

    p = sub.add_parser("evaluate", help="AR report from detections")
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("precision-check", help="negative precision vs codebook size")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--exemplars", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", default="10,100,1000")
    p.add_argument("--gamma", default="auto")
    p.add_argument("--iou-pos", type=float, default=0.3)
    p.add_argument("--iou-guard", type=float, default=0.1)
    p.add_argument("--levels", default="all")
    _add_anchor_flags(p)
    p.set_defaults(func=cmd_precision_check)

    p = sub.add_parser("probe-ab", help="A/B probe on the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--top-n", type=int, default=2)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--learning-rate", type=float, default=5.0)
    p.add_argument("--condition", default="both")
    p.set_defaults(func=cmd_probe_ab)

    return parser


def _apply_config_file(parser, args, argv):
    """Fill in values from --config for flags the user did not pass."""
    if not getattr(args, "config", None):
        return args
    _require_file(args.config, "config file")
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})")
    if not isinstance(overrides, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    explicit = {
        token.split("=", 1)[0].lstrip("-").replace("-", "_")
        for token in argv
        if token.startswith("--")
    }
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr == "lambda":  # --lambda parses to args.lam
            attr = "lam"
        if not hasattr(args, attr) or attr in ("func", "command", "config"):
            raise ConfigError(f"{args.config}: unknown option {key!r}")
        if attr not in explicit and not (attr == "lam" and "lambda" in explicit):
            setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(parser, args, argv)
        return args.func(args)
    except BowlkitError as exc:
        print(f"bowlkit: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"bowlkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
