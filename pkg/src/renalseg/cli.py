"""Command-line entry point.

Subcommands: phantom, preprocess, run, evaluate, loss-check, components.
Exit codes: 0 success, 1 usage/config error, 2 partial case failure,
3 verification failure. Flags override config values; KIPA_* environment
variables override flag defaults.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import losses
from .components import connected_components
from .config import load_pipeline_config
from .errors import ConfigError, EngineError
from .fileio import atomic_write_json, atomic_write_text, case_id_from_path, load_volume, save_volume
from .metrics import DatasetReport, case_metrics
from .phantom import generate_phantom
from .pipeline import run_case
from .preprocess import compute_foreground_stats, resample

log = logging.getLogger("renalseg")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_VERIFY = 3


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if level.lower() == "debug":
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        handlers=[handler], force=True)


def _env_default(name: str, fallback):
    value = os.environ.get(f"KIPA_{name.upper()}")
    if value is None:
        return fallback
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renalseg",
                                     description="Multi-stage renal structure segmentation engine")
    parser.add_argument("--log-level", default=_env_default("log_level", "info"),
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="generate synthetic cases with ground truth")
    p_phantom.add_argument("--seed", type=int, default=int(_env_default("seed", 0)))
    p_phantom.add_argument("--size", default="96,96,96", help="voxels per axis, e.g. 96,96,96")
    p_phantom.add_argument("--count", type=int, default=1)
    p_phantom.add_argument("--out", required=True)
    p_phantom.add_argument("--cyst", action="store_true", help="include a fluid cyst distractor")
    p_phantom.add_argument("--bright-blob", action="store_true",
                           help="include a high-attenuation distractor blob")

    p_pre = sub.add_parser("preprocess", help="fit foreground stats over labeled cases")
    p_pre.add_argument("--cases", required=True, help="glob of *_image.nii[.gz] files")
    p_pre.add_argument("--out", required=True, help="stats JSON path")
    p_pre.add_argument("--target-spacing", default=None, help="e.g. 1.0,1.0,1.0")
    p_pre.add_argument("--write-resampled", default=None, help="directory for resampled copies")

    p_run = sub.add_parser("run", help="run the segmentation pipeline over cases")
    p_run.add_argument("--config", default=_env_default("config", None), required=False)
    p_run.add_argument("--cases", required=True, help="glob of *_image.nii[.gz] files")
    p_run.add_argument("--workers", type=int, default=int(_env_default("workers", 1)))
    p_run.add_argument("--out", default=_env_default("out", None),
                       help="override the config output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_eval = sub.add_parser("evaluate", help="evaluate predictions against truth labels")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", default=_env_default("out", None),
                        help="report stem; writes <stem>.csv and <stem>.json")

    p_loss = sub.add_parser("loss-check", help="finite-difference verification of loss kernels")
    p_loss.add_argument("--sizes", default="2x64,5x512,5x4096")
    p_loss.add_argument("--trials", type=int, default=10)
    p_loss.add_argument("--thresholds", default="0,0.1,0.3,0.5")
    p_loss.add_argument("--seed", type=int, default=int(_env_default("seed", 0)))
    p_loss.add_argument("--out", default=_env_default("out", None), help="JSON report path")
    p_loss.add_argument("--corrupt-gradient", action="store_true",
                        help=argparse.SUPPRESS)  # harness self-test hook

    p_comp = sub.add_parser("components", help="connected-component report for a mask")
    p_comp.add_argument("--mask", required=True)
    p_comp.add_argument("--image", default=None, help="optional HU volume for per-component stats")
    p_comp.add_argument("--connectivity", type=int, default=26, choices=[6, 26])
    p_comp.add_argument("--class-code", type=int, default=None,
                        help="select one label code; default: all nonzero")
    p_comp.add_argument("--out", default=_env_default("out", None))
    return parser


def _parse_triple(text: str, cast=float):
    parts = [cast(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_phantom(args) -> int:
    try:
        size = _parse_triple(args.size, int)
    except ValueError as exc:
        log.error("bad --size: %s", exc)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.count):
            image, labels = generate_phantom(args.seed + i, size,
                                             include_cyst=args.cyst,
                                             include_bright_blob=args.bright_blob)
            case = f"phantom_{args.seed + i:04d}"
            save_volume(image, out / f"{case}_image.nii.gz")
            save_volume(labels, out / f"{case}_truth.nii.gz")
            log.info("wrote %s (%dx%dx%d)", case, *size)
    except (EngineError, ValueError, OSError) as exc:
        log.error("phantom generation failed: %s", exc)
        return EXIT_USAGE
    return EXIT_OK


def _paired_cases(images_glob: str) -> list[tuple[str, Path, Path | None]]:
    cases = []
    for image_path in sorted(glob.glob(images_glob)):
        image_path = Path(image_path)
        case = case_id_from_path(image_path)
        truth = None
        for suffix in ("_truth.nii.gz", "_truth.nii"):
            candidate = image_path.parent / f"{case}{suffix}"
            if candidate.exists():
                truth = candidate
                break
        cases.append((case, image_path, truth))
    return cases


def cmd_preprocess(args) -> int:
    cases = _paired_cases(args.cases)
    labeled = [(c, img, tr) for c, img, tr in cases if tr is not None]
    if not labeled:
        log.error("no labeled cases matched %s", args.cases)
        return EXIT_USAGE
    pairs = []
    for case, image_path, truth_path in labeled:
        image = load_volume(image_path)
        truth = load_volume(truth_path, as_labels=True)
        pairs.append((image, truth))
        if args.write_resampled and args.target_spacing:
            spacing = _parse_triple(args.target_spacing)
            out_dir = Path(args.write_resampled)
            save_volume(resample(image, spacing), out_dir / f"{case}_image.nii.gz")
            save_volume(resample(truth, spacing), out_dir / f"{case}_truth.nii.gz")
    try:
        stats = compute_foreground_stats(pairs)
    except EngineError as exc:
        log.error("stats failed: %s", exc)
        return EXIT_USAGE
    atomic_write_json(args.out, stats.to_json())
    log.info("stats over %d voxels: mean %.3f std %.3f", stats.voxel_count, stats.mean, stats.std)
    return EXIT_OK


def cmd_run(args) -> int:
    if not args.config:
        log.error("--config is required (or set KIPA_CONFIG)")
        return EXIT_USAGE
    try:
        config = load_pipeline_config(args.config)
    except (ConfigError, OSError) as exc:
        log.error("bad config: %s", exc)
        return EXIT_USAGE
    if args.out:
        config.output_dir = Path(args.out)
    if args.seed is not None:
        config.seed = args.seed
    if config.output_dir is None:
        log.error("no output directory (config output_dir or --out)")
        return EXIT_USAGE
    cases = _paired_cases(args.cases)
    if not cases:
        log.error("no cases matched %s", args.cases)
        return EXIT_USAGE

    failures: list[dict] = []

    def one(entry):
        case, image_path, truth_path = entry
        image = load_volume(image_path)
        truth = load_volume(truth_path, as_labels=True) if truth_path else None
        return run_case(image, config, case_id=case, truth=truth)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        futures = {pool.submit(one, entry): entry[0] for entry in cases}
        for future, case in futures.items():
            try:
                future.result()
                log.info("case %s done", case)
            except Exception as exc:
                log.error("case %s failed: %s", case, exc)
                failures.append({"case_id": case, "error": str(exc)})

    if failures:
        atomic_write_json(Path(config.output_dir) / "failures.json", failures)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_evaluate(args) -> int:
    def index(directory, suffix_hint):
        out = {}
        for path in sorted(Path(directory).glob("*.nii*")):
            name = path.name
            if suffix_hint == "pred" and ("_truth" in name or "_image" in name):
                continue
            if suffix_hint == "truth" and ("_pred" in name or "_image" in name):
                continue
            out[case_id_from_path(path)] = path
        return out

    preds = index(args.pred, "pred")
    truths = index(args.truth, "truth")
    shared = sorted(set(preds) & set(truths))
    if not shared:
        log.error("no case ids shared between %s and %s", args.pred, args.truth)
        return EXIT_USAGE

    report = DatasetReport()
    for case in shared:
        try:
            pred = load_volume(preds[case], as_labels=True)
            truth = load_volume(truths[case], as_labels=True)
            report.cases.append(case_metrics(pred, truth, case))
        except (EngineError, ValueError) as exc:
            log.warning("case %s skipped: %s", case, exc)
            report.errors.append({"case_id": case, "error": str(exc)})

    stem = args.out or "evaluation"
    atomic_write_text(f"{stem}.csv", report.to_csv())
    atomic_write_json(f"{stem}.json", report.to_json())
    log.info("evaluated %d case(s), %d error(s)", len(report.cases), len(report.errors))
    return EXIT_OK


def cmd_loss_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    try:
        sizes = []
        for token in args.sizes.split(","):
            c, n = token.lower().split("x")
            sizes.append((int(c), int(n)))
        thresholds = [float(t) for t in args.thresholds.split(",")]
    except ValueError as exc:
        log.error("bad sizes/thresholds: %s", exc)
        return EXIT_USAGE

    report = {"losses": {}, "trials": args.trials, "sizes": args.sizes,
              "thresholds": thresholds}
    worst = {"hra_ce": 0.0, "hra_dice": 0.0, "soft_dice": 0.0}
    worst_ce_t0_gap = 0.0
    hard_fractions = []
    for _ in range(args.trials):
        c, n = sizes[int(rng.integers(len(sizes)))]
        pred = rng.uniform(0.01, 0.99, size=(c, n))
        target = np.zeros((c, n))
        target[rng.integers(0, c, size=n), np.arange(n)] = 1.0
        for t in thresholds:
            cfg = losses.LossConfig(threshold=t)
            stable = losses.stable_gate_mask(pred, target, t, h=1e-4)

            def corrupted(fn):
                if not args.corrupt_gradient:
                    return fn

                def wrapper(p):
                    res = fn(p)
                    return losses.LossResult(value=res.value, gradient=res.gradient * 1.5,
                                             hard_fraction=res.hard_fraction)
                return wrapper

            checks = {
                "hra_ce": corrupted(lambda p: losses.hra_ce(p, target, cfg)),
                "hra_dice": corrupted(lambda p: losses.hra_dice(p, target, cfg)),
                "soft_dice": corrupted(lambda p: losses.soft_dice(p, target, cfg.epsilon)),
            }
            for name, fn in checks.items():
                err = losses.finite_difference_max_rel_error(
                    fn, pred, target, rng=rng,
                    stable=stable if name != "soft_dice" else None)
                worst[name] = max(worst[name], err)
            hard_fractions.append(losses.hra_ce(pred, target, cfg).hard_fraction)
        gap = abs(losses.hra_ce(pred, target, losses.LossConfig(threshold=0.0)).value
                  - losses.plain_cross_entropy(pred, target))
        worst_ce_t0_gap = max(worst_ce_t0_gap, gap)

    for name, err in worst.items():
        report["losses"][name] = {"max_rel_grad_err": err}
    report["losses"]["hra_ce"]["t0_vs_plain_ce_gap"] = worst_ce_t0_gap
    report["hard_fraction_mean"] = float(np.mean(hard_fractions))
    report["loss"] = "ok" if max(worst.values()) < 1e-4 and worst_ce_t0_gap < 1e-9 else "fail"

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    if report["loss"] != "ok":
        log.error("gradient verification failed: %s", {k: v["max_rel_grad_err"]
                                                       for k, v in report["losses"].items()})
        return EXIT_VERIFY
    return EXIT_OK


def cmd_components(args) -> int:
    try:
        mask_volume = load_volume(args.mask, as_labels=True)
    except EngineError as exc:
        log.error("cannot read mask: %s", exc)
        return EXIT_USAGE
    labels = mask_volume.labels
    mask = (labels == args.class_code) if args.class_code is not None else labels > 0
    intensity = None
    if args.image:
        intensity = load_volume(args.image).voxels
    comp_set = connected_components(mask, connectivity=args.connectivity, intensity=intensity)
    text = json.dumps(comp_set.to_json(), indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    handlers = {"phantom": cmd_phantom, "preprocess": cmd_preprocess, "run": cmd_run,
                "evaluate": cmd_evaluate, "loss-check": cmd_loss_check,
                "components": cmd_components}
    return handlers[args.command](args)


def entrypoint() -> None:  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
