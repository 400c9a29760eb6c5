import argparse
import importlib.metadata
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from crfrefine.config import THREADS_ENV_VAR, RunConfig, load_config, threads_from_env
from crfrefine.crf import mean_field_infer, unary_from_probabilities
from crfrefine.errors import CrfRefineError, ManifestError
from crfrefine.experiment import (
    FoldAssignment, Fixture, apply_window, assign_folds, score_cases, sweep, synth_fixtures
)
from crfrefine.io_formats import (
    CaseEntry, CaseManifest, SliceEntry, load_image, load_mask, load_prob, read_manifest,
    save_mask, write_manifest, write_pgm_image, write_ppm, write_tensor
)
from crfrefine.metrics import (
    Comparison, FoldReport, ReferenceComparison, compare_reports, compare_to_reference, confusion,
    count_below, fold_report, iou
)
from crfrefine.tensors import DenseTensor, LabelMask, SliceImage, argmax_labels, rescale_to_byte_range
from crfrefine.utils import (
    IMAGE_SUFFIX, MASK_SUFFIX, PROB_SUFFIX, find_mask, mask_output_path, prob_output_paths, slice_stem,
    try_each
)
from crfrefine.validators import ensure_dir_path

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

# overlay colours
TP_RGB = (0, 255, 0)
FP_RGB = (255, 0, 0)
FN_RGB = (0, 255, 255)

# flag name -> CrfParams field
_CRF_FLAGS = {
    "w1": "w1", "w2": "w2", "sigma_alpha": "sigma_alpha", "sigma_beta": "sigma_beta",
    "sigma_gamma": "sigma_gamma", "iterations": "iterations",
}
_FILTER_MODES = {"lattice": "lattice", "brute": "brute_force"}

console = Console()


class UsageError(CrfRefineError):
    pass


def build_config(args) -> RunConfig:
    """Defaults < config file < CRF_REFINE_THREADS < flags."""
    cfg = load_config(args.config)
    merged = cfg.model_dump()
    for flag, name in _CRF_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged["crf"][name] = value
    env_threads = threads_from_env()
    if env_threads is not None:
        merged["threads"] = env_threads
    for flag in ("floor", "seed", "threads", "positive_label"):
        value = getattr(args, flag, None)
        if value is not None:
            merged[flag] = value
    if getattr(args, "filter", None) is not None:
        merged["filter_mode"] = _FILTER_MODES[args.filter]
    if getattr(args, "out", None) is not None:
        merged["out_dir"] = args.out
    return RunConfig(**merged)


# --- manifest helpers -----------------------------------------------------------

def _slices(manifest: CaseManifest) -> List[Tuple[str, int, SliceEntry]]:
    return [
        (case.case_id, index, entry)
        for case in manifest.cases
        for index, entry in enumerate(case.slices)
    ]


def _describe(job) -> str:
    case_id, index, _ = job
    return f"case {case_id} slice {index}"


def _read_image(path, cfg: RunConfig, hu: bool) -> SliceImage:
    image = load_image(path)
    return apply_window(image.intensity, cfg.window) if hu else image


def _fixtures_from_manifest(manifest: CaseManifest, cfg: RunConfig, hu: bool) -> List[Fixture]:
    fixtures = []
    for case_id, index, entry in _slices(manifest):
        if entry.truth_path is None:
            raise UsageError(f"case {case_id} slice {index} has no truth_path")
        prob = load_prob(manifest.resolve(entry.prob_path))
        fixtures.append(Fixture(
            image=_read_image(manifest.resolve(entry.image_path), cfg, hu),
            prob=prob,
            truth=load_mask(manifest.resolve(entry.truth_path), prob.labels),
            case_id=case_id,
            slice_index=index,
        ))
    return fixtures


def _manifest_assignment(manifest: CaseManifest) -> FoldAssignment:
    if manifest.folds:
        k = manifest.fold_count or max(manifest.folds.values()) + 1
        return FoldAssignment(k=max(k, 2), mapping=dict(manifest.folds))
    logging.info("Manifest has no folds; reporting every case as fold 0")
    return FoldAssignment(k=2, mapping={case_id: 0 for case_id in manifest.case_ids()})


# --- sub-commands ---------------------------------------------------------------

def cmd_refine(args, cfg: RunConfig) -> int:
    # missing or broken slice files fail that slice only
    manifest = read_manifest(args.manifest, check_files=False)
    out_dir = ensure_dir_path(cfg.out_dir)
    logging.info("Refining %d slices with %s", len(_slices(manifest)), cfg.crf)

    def refine_one(job):
        case_id, index, entry = job
        prob = load_prob(manifest.resolve(entry.prob_path))
        image = _read_image(manifest.resolve(entry.image_path), cfg, args.hu)
        unary = unary_from_probabilities(prob, cfg.floor)
        q = mean_field_infer(unary, image, cfg.crf, cfg.filter_mode,
                             early_stop_tol=cfg.early_stop_tol)
        mask = argmax_labels(q)

        target = mask_output_path(Path(out_dir) / "masks", case_id, index, mask.n_labels)
        target.parent.mkdir(parents=True, exist_ok=True)
        save_mask(mask, target)
        if args.dump_prob:
            prob_path, preview_path = prob_output_paths(Path(out_dir) / "prob", case_id, index)
            prob_path.parent.mkdir(parents=True, exist_ok=True)
            write_tensor(DenseTensor.from_array(q.prob), prob_path)
            preview = rescale_to_byte_range(q.prob[:, :, min(cfg.positive_label, q.labels - 1)])
            write_pgm_image(preview, preview_path)
        return target

    written, failures = try_each(refine_one, _slices(manifest), cfg.threads, _describe)
    logging.info("Wrote %d masks to %s", len(written), out_dir)
    return _finish(failures)


def _finish(failures: Sequence[str]) -> int:
    if failures:
        print(f"{len(failures)} slice(s) failed:", file=sys.stderr)
        for message in failures:
            print(f"  {message}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _score_predictions(manifest: CaseManifest, pred_dir: str, positive_label: int):
    items, missing = [], []
    for case_id, index, entry in _slices(manifest):
        if entry.truth_path is None:
            missing.append(f"{case_id}/{index} (no truth)")
            continue
        try:
            path = find_mask(pred_dir, case_id, index)
        except FileNotFoundError:
            missing.append(f"{case_id}/{index}")
            continue
        prob_labels = 2 if path.suffix == ".pgm" else 256
        pred = load_mask(path, prob_labels)
        truth = load_mask(manifest.resolve(entry.truth_path), pred.n_labels)
        items.append((case_id, pred, truth))
    if missing:
        raise FileNotFoundError(f"missing predictions under {pred_dir}: {', '.join(missing)}")
    return score_cases(items, positive_label)


def report_to_dict(report: FoldReport, positive_label: int,
                   comparison: Optional[Comparison] = None,
                   reference: Optional[ReferenceComparison] = None) -> Dict:
    def stats(s):
        return {"n": s.n, "mean": s.mean, "std": s.std}

    document = {
        "positive_label": positive_label,
        "cases": [
            {
                "case_id": score.case_id,
                "fold": report.assignment[score.case_id],
                "dsc": score.dsc,
                "iou": iou(score.counts),
                "tp": score.counts.tp, "tn": score.counts.tn,
                "fp": score.counts.fp, "fn": score.counts.fn,
            }
            for score in report.cases
        ],
        "folds": [dict(fold=fold, **stats(s)) for fold, s in report.folds.items()],
        "overall": stats(report.overall),
    }
    if comparison is not None:
        document["comparison"] = {
            "baseline_folds": [dict(fold=f, **stats(s)) for f, s in comparison.baseline.folds.items()],
            "baseline_overall": stats(comparison.baseline.overall),
            "t": comparison.test.t if comparison.test else None,
            "p": comparison.test.p if comparison.test else None,
            "n": comparison.test.n if comparison.test else len(comparison.refined.cases),
            "test_error": comparison.test_error,
        }
    if reference is not None:
        document["reference"] = dict(
            **stats(reference.reference),
            t=reference.test.t if reference.test else None,
            p=reference.test.p if reference.test else None,
            df=reference.test.df if reference.test else None,
            test_error=reference.test_error,
        )
    return document


def render_report(document: Dict, threshold: float = 0.97) -> None:
    comparison = document.get("comparison")
    table = Table(title="Dice per fold")
    table.add_column("Fold", justify="right")
    table.add_column("Cases", justify="right")
    if comparison:
        table.add_column("Baseline DSC", justify="right")
    table.add_column("DSC", justify="right")

    baseline = {row["fold"]: row for row in comparison["baseline_folds"]} if comparison else {}
    for row in document["folds"]:
        cells = [str(row["fold"] + 1), str(row["n"])]
        if comparison:
            base = baseline[row["fold"]]
            cells.append(f"{base['mean']:.4f} ± {base['std']:.4f}")
        cells.append(f"{row['mean']:.4f} ± {row['std']:.4f}")
        table.add_row(*cells)
    overall = document["overall"]
    cells = ["ALL", str(overall["n"])]
    if comparison:
        base = comparison["baseline_overall"]
        cells.append(f"{base['mean']:.4f} ± {base['std']:.4f}")
    cells.append(f"{overall['mean']:.4f} ± {overall['std']:.4f}")
    table.add_row(*cells)
    console.print(table)

    below = sum(1 for case in document["cases"] if case["dsc"] < threshold)
    console.print(f"Cases with DSC < {threshold:.2f}: {below} of {len(document['cases'])}")
    if comparison:
        if comparison["test_error"]:
            console.print(f"Paired t-test undefined: {comparison['test_error']}")
        else:
            console.print(
                f"Paired t-test (n={comparison['n']}): t = {comparison['t']:.4f}, p = {comparison['p']:.3g}"
            )
    reference = document.get("reference")
    if reference:
        label = f"{reference['mean']:.4f} ± {reference['std']:.4f} (n={reference['n']})"
        if reference["test_error"]:
            console.print(f"Welch t-test against {label} undefined: {reference['test_error']}")
        else:
            console.print(
                f"Welch t-test against {label}: t = {reference['t']:.4f}, "
                f"df = {reference['df']:.1f}, p = {reference['p']:.3g}"
            )


def _reference_args(args) -> Optional[Tuple[float, float, int]]:
    if not args.reference:
        return None
    mean, std, count = args.reference
    if not np.all(np.isfinite(args.reference)) or count != int(count) or count < 1 or std < 0:
        raise UsageError(
            f"--reference needs MEAN, STD >= 0 and a positive integer N, got {args.reference}"
        )
    return mean, std, int(count)


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    reference_args = _reference_args(args)
    out_dir = ensure_dir_path(cfg.out_dir)
    assignment = _manifest_assignment(manifest)
    try:
        scores = _score_predictions(manifest, args.pred, cfg.positive_label)
        comparison = None
        if args.compare:
            baseline = _score_predictions(manifest, args.compare, cfg.positive_label)
            comparison = compare_reports(baseline, scores, assignment)
            if comparison.test_error:
                logging.warning("Paired t-test undefined: %s", comparison.test_error)
            logging.info(
                "Cases below %.2f: %d baseline, %d refined", args.threshold,
                count_below(baseline, args.threshold), count_below(scores, args.threshold),
            )
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return EXIT_PARTIAL

    report = fold_report(scores, assignment)
    reference = None
    if reference_args:
        reference = compare_to_reference(report.overall, *reference_args)
        if reference.test_error:
            logging.warning("Welch t-test undefined: %s", reference.test_error)
    document = report_to_dict(report, cfg.positive_label, comparison, reference)
    target = Path(args.json or Path(out_dir) / "eval.json")
    target.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    logging.info("Wrote evaluation report to %s", target)
    render_report(document, args.threshold)
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:  # pylint: disable=unused-argument
    with open(args.eval_json, "r", encoding="utf-8") as file:
        render_report(json.load(file), args.threshold)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    out_dir = ensure_dir_path(cfg.out_dir)
    fixtures = _fixtures_from_manifest(manifest, cfg, args.hu)
    results = sweep(cfg.sweep, fixtures, cfg.positive_label, cfg.floor,
                    cfg.filter_mode, cfg.threads)

    rows = [dict(rank=i + 1, mean_dsc=r.mean_dsc, **r.params.model_dump())
            for i, r in enumerate(results)]
    target = Path(out_dir) / "sweep.json"
    target.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")

    table = Table(title=f"CRF parameter sweep over {len(fixtures)} slices")
    for column in ("Rank", "w1", "w2", "σα", "σβ", "σγ", "Iterations", "Mean DSC"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(
            str(row["rank"]), f"{row['w1']:g}", f"{row['w2']:g}", f"{row['sigma_alpha']:g}",
            f"{row['sigma_beta']:g}", f"{row['sigma_gamma']:g}", str(row["iterations"]),
            f"{row['mean_dsc']:.5f}",
        )
    console.print(table)
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out_dir = Path(ensure_dir_path(cfg.out_dir))
    height, width = args.size
    fixtures = synth_fixtures(cfg.seed, args.count, height, width, args.noise,
                              cfg.fixtures, args.slices_per_case)

    cases: Dict[str, List[SliceEntry]] = {}
    for fixture in fixtures:
        stem = slice_stem(fixture.case_id, fixture.slice_index)
        paths = {
            "image_path": f"images/{stem}{IMAGE_SUFFIX}",
            "prob_path": f"prob/{stem}{PROB_SUFFIX}",
            "truth_path": f"truth/{stem}{MASK_SUFFIX}",
        }
        for relative in paths.values():
            (out_dir / relative).parent.mkdir(parents=True, exist_ok=True)
        write_tensor(DenseTensor.from_array(fixture.image.intensity), out_dir / paths["image_path"])
        write_tensor(DenseTensor.from_array(fixture.prob.prob), out_dir / paths["prob_path"])
        save_mask(fixture.truth, out_dir / paths["truth_path"])
        cases.setdefault(fixture.case_id, []).append(SliceEntry(**paths))

    manifest = CaseManifest(cases=[CaseEntry(case_id=c, slices=s) for c, s in cases.items()])
    write_manifest(manifest, out_dir / "manifest.json")
    logging.info("Wrote %d fixtures in %d cases to %s", len(fixtures), len(cases), out_dir)
    return EXIT_OK


def cmd_folds(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.manifest, check_files=False)
    assignment = assign_folds(sorted(manifest.case_ids()), args.k, cfg.seed)
    updated = manifest.model_copy(update={
        "fold_count": assignment.k,
        "folds": {case_id: assignment.mapping[case_id] for case_id in sorted(assignment.mapping)},
    })
    source = Path(args.manifest)
    target = Path(args.output) if args.output else source.with_name(source.stem + ".folds.json")
    write_manifest(updated, target)
    for fold, members in enumerate(assignment.folds()):
        logging.info("Fold %d: %d cases", fold + 1, len(members))
    logging.info("Wrote fold assignment to %s", target)
    return EXIT_OK


def overlay_rgb(intensity: np.ndarray, pred: LabelMask, truth: LabelMask,
                positive_label: int = 1) -> np.ndarray:
    gray = np.clip(np.floor(np.asarray(intensity, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    p = pred.label == positive_label
    t = truth.label == positive_label
    rgb[p & t] = TP_RGB
    rgb[p & ~t] = FP_RGB
    rgb[~p & t] = FN_RGB
    return rgb


def cmd_overlay(args, cfg: RunConfig) -> int:
    image = _read_image(args.image, cfg, args.hu)
    pred = load_mask(args.pred)
    truth = load_mask(args.truth)
    if image.shape != pred.shape:
        raise UsageError(f"image {image.shape} and masks {pred.shape} differ in shape")
    counts = confusion(pred, truth, cfg.positive_label)
    write_ppm(overlay_rgb(image.intensity, pred, truth, cfg.positive_label), args.output)
    logging.info("Wrote overlay to %s (tp=%d fp=%d fn=%d)", args.output, counts.tp, counts.fp, counts.fn)
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

def _size(text: str) -> Tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration file.")
    common.add_argument("--out", help="Output directory (overrides out_dir).")
    common.add_argument("--w1", type=float, help="Appearance kernel weight.")
    common.add_argument("--w2", type=float, help="Smoothness kernel weight.")
    common.add_argument("--sigma-alpha", dest="sigma_alpha", type=float,
                        help="Appearance kernel spatial bandwidth (pixels).")
    common.add_argument("--sigma-beta", dest="sigma_beta", type=float,
                        help="Appearance kernel intensity bandwidth (0-255 scale).")
    common.add_argument("--sigma-gamma", dest="sigma_gamma", type=float,
                        help="Smoothness kernel bandwidth (pixels).")
    common.add_argument("--iterations", type=int, help="Mean-field iterations.")
    common.add_argument("--floor", type=float, help="Probability floor before the log.")
    common.add_argument("--seed", type=int, help="Seed for folds and fixtures.")
    common.add_argument("--threads", type=int,
                        help=f"Worker threads (default: ${THREADS_ENV_VAR} or 1).")
    common.add_argument("--filter", choices=sorted(_FILTER_MODES), help="Message passing filter.")
    common.add_argument("--positive-label", dest="positive_label", type=int,
                        help="Label scored as positive.")
    common.add_argument("--hu", action="store_true",
                        help="Images hold raw HU; apply the configured window first.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    return common


def _setup_arg_parser():
    """Set up and return the argument parser."""
    parser = argparse.ArgumentParser(
        description="Dense CRF refinement and evaluation of lung segmentation probability maps."
    )
    parser.add_argument('--version', action='store_true', help="Show version of crfrefine")
    common = _common_parser()
    commands = parser.add_subparsers(dest="command")

    refine = commands.add_parser("refine", parents=[common], help="Refine every slice of a manifest.")
    refine.add_argument("--manifest", required=True)
    refine.add_argument("--dump-prob", dest="dump_prob", action="store_true",
                        help="Also write the final Q as DTEN and a 0-255 PGM preview.")
    refine.set_defaults(handler=cmd_refine)

    evaluate = commands.add_parser("eval", parents=[common], help="Score predictions against truths.")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--pred", required=True, help="Prediction directory (as written by refine).")
    evaluate.add_argument("--compare", help="Baseline prediction directory for a paired comparison.")
    evaluate.add_argument("--json", help="Report path (default: <out>/eval.json).")
    evaluate.add_argument("--threshold", type=float, default=0.97,
                          help="Report how many cases score below this DSC.")
    evaluate.add_argument("--reference", nargs=3, type=float, metavar=("MEAN", "STD", "N"),
                          help="Welch t-test of the overall DSC against a published mean, sample std "
                               "and case count, on the same 0-1 scale.")
    evaluate.set_defaults(handler=cmd_eval)

    report = commands.add_parser("report", parents=[common], help="Render a saved eval report.")
    report.add_argument("eval_json")
    report.add_argument("--threshold", type=float, default=0.97)
    report.set_defaults(handler=cmd_report)

    sweep_cmd = commands.add_parser("sweep", parents=[common], help="Rank the configured sweep grid.")
    sweep_cmd.add_argument("--manifest", required=True)
    sweep_cmd.set_defaults(handler=cmd_sweep)

    synth = commands.add_parser("synth", parents=[common], help="Write a synthetic fixture corpus.")
    synth.add_argument("--count", type=int, default=50)
    synth.add_argument("--size", type=_size, default=(64, 64), help="N or HxW.")
    synth.add_argument("--noise", type=float, default=0.05, help="Flip-noise level.")
    synth.add_argument("--slices-per-case", dest="slices_per_case", type=int, default=1)
    synth.set_defaults(handler=cmd_synth)

    folds = commands.add_parser("folds", parents=[common], help="Assign cases to evaluation folds.")
    folds.add_argument("--manifest", required=True)
    folds.add_argument("--k", type=int, default=5)
    folds.add_argument("--output", help="Output manifest (default: <manifest>.folds.json).")
    folds.set_defaults(handler=cmd_folds)

    overlay = commands.add_parser("overlay", parents=[common], help="Colour-coded prediction overlay.")
    overlay.add_argument("--image", required=True)
    overlay.add_argument("--pred", required=True)
    overlay.add_argument("--truth", required=True)
    overlay.add_argument("--output", required=True, help="Binary PPM (P6) path.")
    overlay.set_defaults(handler=cmd_overlay)

    return parser


def _check_version():
    """Check and print the version of crfrefine."""
    try:
        print(importlib.metadata.version("crfrefine"))
    except importlib.metadata.PackageNotFoundError:
        print("crfrefine package not found.")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _setup_arg_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )

    if args.version:
        _check_version()
        return EXIT_OK
    if args.command is None:
        logging.warning("No command provided. Use --help for more information.")
        return EXIT_USAGE

    try:
        cfg = build_config(args)
    except (ValidationError, ValueError, OSError, yaml.YAMLError) as e:
        logging.error("Invalid configuration: %s", e)
        return EXIT_USAGE

    try:
        return args.handler(args, cfg)
    except (ManifestError, UsageError) as e:
        logging.error("%s", e)
        return EXIT_USAGE
    except (CrfRefineError, OSError) as e:
        logging.error("An error occurred: %s", e)
        return EXIT_PARTIAL


if __name__ == '__main__':
    sys.exit(main())
