"""Multi-stage segmentation orchestration over pluggable predictors.

The case flow: resample + normalize, two coarse 5-class passes, kidney from
coarse I, tumor voted + ROI-refined by the fine stage, vessels fused from
both coarse passes, rule-based filtering, label fusion, and resampling back
to the input grid.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StageError
from .fileio import atomic_write_json, save_volume
from .losses import LossConfig
from .postprocess import (PostprocessConfig, cyst_filter, ensemble_vein, filter_artery_hu,
                          filter_kidney, filter_vessel, fuse_artery, fuse_labels, size_filter,
                          vote_tumor)
from .predictors import (ExternalProcessPredictor, FileBackedPredictor, InjectedComponent,
                         OffsetPredictor, Predictor, StubPredictor)
from .preprocess import (ForegroundStats, resample, resample_to_grid, self_adapting_crop,
                         stats_from_hu_threshold, zscore_normalize)
from .raw import write_raw
from .volume import (ARTERY, KIDNEY, LabelVolume, ProbVolume, ScalarVolume, TUMOR, VEIN)

log = logging.getLogger(__name__)

COARSE_I = "coarse_i"
COARSE_II = "coarse_ii"
FINE_TUMOR = "fine_tumor"
STAGE_IDS = (COARSE_I, COARSE_II, FINE_TUMOR)


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    patch_size: tuple[int, int, int]
    num_classes: int
    overlap_fraction: float = 0.5
    blend: str = "gaussian"
    loss: LossConfig | None = None  # provenance only; unused at inference

    def __post_init__(self):
        if self.stage_id not in STAGE_IDS:
            raise ValueError(f"stage_id must be one of {STAGE_IDS}, got {self.stage_id!r}")
        if any(p < 8 for p in self.patch_size):
            raise ValueError(f"patch_size components must be >= 8, got {self.patch_size}")
        if self.num_classes not in (2, 5):
            raise ValueError(f"num_classes must be 2 or 5, got {self.num_classes}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must lie in [0, 1), got {self.overlap_fraction}")
        if self.blend not in ("uniform", "gaussian"):
            raise ValueError(f"blend must be 'uniform' or 'gaussian', got {self.blend!r}")


@dataclass
class PredictorHandle:
    kind: str                      # "stub-oracle" | "file-backed" | "external-process"
    endpoint: str = ""             # mode string, directory, or command line / socket address
    capacity: int = 1
    instance: Predictor | None = None  # resolved in-process predictor (tests, stubs)

    def __post_init__(self):
        if self.kind not in ("stub-oracle", "file-backed", "external-process"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")


@dataclass(frozen=True)
class PreprocessSettings:
    stats: ForegroundStats | None = None   # None -> per-case HU-threshold fallback
    crop_expansion: float = 1.25
    foreground_hu_threshold: float = 0.0


@dataclass
class PipelineConfig:
    target_spacing: tuple[float, float, float]
    stages: dict[str, tuple[StageConfig, PredictorHandle]]
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    output_dir: Path | None = None
    seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target spacing must be > 0, got {self.target_spacing}")
        missing = [s for s in STAGE_IDS if s not in self.stages]
        if missing:
            raise ValueError(f"stages not configured: {missing}")


@dataclass
class CaseResult:
    case_id: str
    final: LabelVolume                      # on the original input grid
    intermediates: dict[str, object]
    audit: dict


def make_stub_predictor(mode: str, truth: LabelVolume, *,
                        inject: Sequence[InjectedComponent] = (),
                        seed: int = 0) -> PredictorHandle:
    """Truth-backed oracle handle: mode "ideal" or "noisy:<sigma>".

    ``truth`` must live on the stage's inference grid.
    """
    if mode == "ideal":
        sigma = 0.0
    elif mode.startswith("noisy:"):
        sigma = float(mode.split(":", 1)[1])
    else:
        raise ValueError(f"unknown stub mode {mode!r}")
    stub = StubPredictor(truth, noise_sigma=sigma, inject=inject, seed=seed)
    return PredictorHandle(kind="stub-oracle", endpoint=mode, instance=stub)


def resolve_predictor(handle: PredictorHandle, *, truth: LabelVolume | None = None,
                      seed: int = 0) -> Predictor:
    """Turn a handle into a callable predictor; stubs need per-case truth."""
    if handle.instance is not None:
        instance = handle.instance
        if isinstance(instance, StubPredictor) and truth is not None \
                and not instance.truth.header.equals(truth.header):
            # stub oracles must answer on the stage's inference grid
            return instance.with_truth(truth)
        return instance
    if handle.kind == "stub-oracle":
        if truth is None:
            raise StageError("predictor", "stub-oracle predictor needs a truth volume")
        return make_stub_predictor(handle.endpoint or "ideal", truth, seed=seed).instance
    if handle.kind == "file-backed":
        return FileBackedPredictor(handle.endpoint)
    if handle.kind == "external-process":
        predictor = ExternalProcessPredictor(handle.endpoint, capacity=handle.capacity)
        handle.instance = predictor  # reuse one process across cases
        return predictor
    raise StageError("predictor", f"unresolvable predictor kind {handle.kind!r}")


def _tile_positions(size: int, patch: int, step: int) -> list[int]:
    if size <= patch:
        return [0]
    positions = list(range(0, size - patch + 1, step))
    if positions[-1] != size - patch:
        positions.append(size - patch)
    return positions


def _blend_weights(patch_size: tuple[int, int, int], blend: str) -> np.ndarray:
    if blend == "uniform":
        return np.ones(patch_size, dtype=np.float64)
    weight = np.ones(patch_size, dtype=np.float64)
    for ax, p in enumerate(patch_size):
        center = (p - 1) / 2.0
        sigma = p / 8.0
        profile = np.exp(-0.5 * ((np.arange(p) - center) / sigma) ** 2)
        shape = [1, 1, 1]
        shape[ax] = p
        weight = weight * profile.reshape(shape)
    return weight


def sliding_window_predict(image: ScalarVolume, predictor: Predictor, stage: StageConfig,
                           *, extra_channels: Sequence[np.ndarray] = (),
                           case_id: str = "case") -> ProbVolume:
    """Tiled inference with uniform or gaussian blending.

    Axes shorter than the patch are padded (reflect, or edge when the pad
    exceeds the axis) and the padding is cropped from the result. Tile steps
    are patch * (1 - overlap); the last tile is clamped to the volume edge.
    """
    patch = tuple(int(p) for p in stage.patch_size)
    data = [np.asarray(image.voxels, dtype=np.float32)]
    data.extend(np.asarray(ch, dtype=np.float32) for ch in extra_channels)
    shape = data[0].shape
    for ch in data[1:]:
        if ch.shape != shape:
            raise ValueError(f"extra channel shape {ch.shape} != image shape {shape}")

    pad = [max(0, p - n) for n, p in zip(shape, patch)]
    if any(pad):
        widths = [(0, pw) for pw in pad]
        mode_per_axis_ok = all(pw < n for pw, n in zip(pad, shape))
        data = [np.pad(d, widths, mode="reflect" if mode_per_axis_ok else "edge")
                for d in data]
    padded_shape = data[0].shape
    volume = np.stack(data, axis=0)

    steps = [max(1, int(round(p * (1.0 - stage.overlap_fraction)))) for p in patch]
    positions = [_tile_positions(padded_shape[ax], patch[ax], steps[ax]) for ax in range(3)]
    weights = _blend_weights(patch, stage.blend)

    acc = np.zeros((stage.num_classes,) + padded_shape, dtype=np.float64)
    norm = np.zeros(padded_shape, dtype=np.float64)
    index = 0
    for ox in positions[0]:
        for oy in positions[1]:
            for oz in positions[2]:
                sl = (slice(ox, ox + patch[0]), slice(oy, oy + patch[1]),
                      slice(oz, oz + patch[2]))
                try:
                    probs = predictor.predict(stage.stage_id, volume[(slice(None),) + sl],
                                              (ox, oy, oz), stage.num_classes, case_id)
                except Exception as exc:
                    raise StageError(stage.stage_id, str(exc), patch_index=index) from exc
                probs = np.asarray(probs, dtype=np.float64)
                if probs.shape != (stage.num_classes,) + patch:
                    raise StageError(stage.stage_id,
                                     f"predictor returned shape {probs.shape}, "
                                     f"expected {(stage.num_classes,) + patch}",
                                     patch_index=index)
                acc[(slice(None),) + sl] += probs * weights
                norm[sl] += weights
                index += 1

    blended = acc / norm
    crop = (slice(None),) + tuple(slice(0, n) for n in shape)
    blended = blended[crop]
    sums = blended.sum(axis=0)
    deviation = float(np.abs(sums - 1.0).max()) if sums.size else 0.0
    if deviation > 1e-3:
        log.warning("stage %s: renormalizing blended probabilities (max |sum-1| = %.3g)",
                    stage.stage_id, deviation)
    blended = blended / np.maximum(sums, 1e-8)
    return ProbVolume(header=image.header, channels=np.clip(blended, 0.0, 1.0).astype(np.float32))


def _paste(mask_full: np.ndarray, roi, mask_roi: np.ndarray) -> None:
    mask_full[roi.slices()] |= mask_roi


def run_case(image: ScalarVolume, config: PipelineConfig, *, case_id: str = "case",
             truth: LabelVolume | None = None) -> CaseResult:
    """Execute the full stage graph for one case.

    ``truth`` is only consulted to resolve stub-oracle predictors (and is
    resampled to the inference grid for them); real predictors ignore it.
    """
    timings: dict[str, float] = {}
    audit_removals: list[dict] = []
    pp = config.postprocess

    def timed(name):
        class _Timer:
            def __enter__(self_inner):
                self_inner.start = time.perf_counter()

            def __exit__(self_inner, *exc):
                timings[name] = round(time.perf_counter() - self_inner.start, 6)
        return _Timer()

    original_header = image.header
    with timed("preprocess"):
        image_rs = resample(image, config.target_spacing, mode="linear")
        stats = config.preprocess.stats
        if stats is None:
            stats = stats_from_hu_threshold(image_rs, config.preprocess.foreground_hu_threshold)
        image_norm = zscore_normalize(image_rs, stats)

    truth_rs = None
    if truth is not None:
        truth_rs = (truth if truth.header.equals(image_rs.header)
                    else resample_to_grid(truth, image_rs.header, mode="nearest"))

    def resolved(stage_id: str) -> tuple[StageConfig, Predictor]:
        stage, handle = config.stages[stage_id]
        return stage, resolve_predictor(handle, truth=truth_rs, seed=config.seed)

    with timed(COARSE_I):
        stage_i, predictor_i = resolved(COARSE_I)
        coarse_i = sliding_window_predict(image_norm, predictor_i, stage_i, case_id=case_id)
    with timed(COARSE_II):
        stage_ii, predictor_ii = resolved(COARSE_II)
        coarse_ii = sliding_window_predict(image_norm, predictor_ii, stage_ii, case_id=case_id)

    with timed("fine_kidney"):
        labels_i = coarse_i.argmax_labels()
        kidney_pre = labels_i == KIDNEY
        kidney_mask = filter_kidney(kidney_pre, connectivity=pp.connectivity,
                                    audit=audit_removals)

    with timed(FINE_TUMOR):
        voted = vote_tumor(coarse_i.channel(TUMOR), coarse_ii.channel(TUMOR))
        rois = self_adapting_crop(voted.astype(np.uint8), image_norm,
                                  expansion=config.preprocess.crop_expansion)
        stage_fine, predictor_fine = resolved(FINE_TUMOR)
        tumor_pre = np.zeros(image_norm.shape, dtype=bool)
        for box, roi_image, roi_mask in rois:
            roi_predictor = OffsetPredictor(predictor_fine, box.lower)
            roi_probs = sliding_window_predict(
                roi_image, roi_predictor, stage_fine,
                extra_channels=[roi_mask.labels.astype(np.float32)], case_id=case_id)
            _paste(tumor_pre, box, roi_probs.argmax_labels() == 1)
        dist_spacing = image_rs.header.spacing if pp.distance_unit == "mm" else None
        tumor_mask = cyst_filter(tumor_pre, image_rs, pp.cyst_hu_threshold,
                                 connectivity=pp.connectivity, audit=audit_removals)
        tumor_mask = size_filter(tumor_mask, pp.tumor_min_size,
                                 connectivity=pp.connectivity, audit=audit_removals,
                                 rule_name="tumor_min_size")

    with timed("vessels"):
        vein_pre = ensemble_vein(coarse_i.channel(VEIN), coarse_ii.channel(VEIN),
                                 pp.ensemble_weights)
        vein_mask = filter_vessel(vein_pre, pp.vein_max_dist, connectivity=pp.connectivity,
                                  spacing=dist_spacing, audit=audit_removals,
                                  rule_name="vein_centroid_distance")
        artery_i = labels_i == ARTERY
        artery_ii = coarse_ii.argmax_labels() == ARTERY
        artery_pre = fuse_artery(artery_i, artery_ii, pp)
        artery_mask = filter_vessel(artery_pre, pp.artery_max_dist,
                                    connectivity=pp.connectivity, spacing=dist_spacing,
                                    audit=audit_removals, rule_name="artery_centroid_distance")
        artery_mask = filter_artery_hu(artery_mask, image_rs, pp.artery_hu_max,
                                       aggregate=pp.hu_aggregate,
                                       connectivity=pp.connectivity, audit=audit_removals)

    with timed("fuse_and_export"):
        final_rs = fuse_labels(kidney_mask, tumor_mask, vein_mask, artery_mask,
                               precedence=pp.fusion_precedence, header=image_rs.header)
        final = (final_rs if final_rs.header.equals(original_header)
                 else resample_to_grid(final_rs, original_header, mode="nearest"))

    intermediates = {
        "coarse_i_probs": coarse_i,
        "coarse_ii_probs": coarse_ii,
        "kidney_pre": kidney_pre,
        "kidney_mask": kidney_mask,
        "voted_tumor": voted,
        "tumor_pre": tumor_pre,
        "tumor_mask": tumor_mask,
        "vein_pre": vein_pre,
        "vein_mask": vein_mask,
        "artery_pre": artery_pre,
        "artery_mask": artery_mask,
        "final_resampled": final_rs,
        "rois": [box for box, _, _ in rois],
    }
    audit = {"case_id": case_id, "removals": audit_removals, "timings": timings,
             "stages": list(STAGE_IDS)}
    result = CaseResult(case_id=case_id, final=final, intermediates=intermediates, audit=audit)
    if config.output_dir is not None:
        persist_case(result, config)
    return result


def persist_case(result: CaseResult, config: PipelineConfig) -> None:
    """Write the final labels, mask/probability intermediates and audit files.

    Wall-clock timings go to a separate ``timings.json`` so every other
    output is bit-identical across reruns of the same config/seed.
    """
    out = Path(config.output_dir)
    case_dir = out / result.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    save_volume(result.final, out / f"{result.case_id}_pred.nii.gz")

    final_rs: LabelVolume = result.intermediates["final_resampled"]
    save_volume(final_rs, case_dir / "final_resampled.nii.gz")
    for stage_key in ("coarse_i", "coarse_ii"):
        probs: ProbVolume = result.intermediates[f"{stage_key}_probs"]
        for c in range(probs.num_classes):
            channel = ScalarVolume(header=probs.header, voxels=probs.channels[c])
            save_volume(channel, case_dir / f"{result.case_id}_{stage_key}_{c}.nii.gz")
    header = final_rs.header
    for name in ("kidney_mask", "tumor_mask", "vein_mask", "artery_mask",
                 "voted_tumor", "tumor_pre", "vein_pre", "artery_pre"):
        mask = result.intermediates[name].astype(np.uint8)
        write_raw(LabelVolume(header=header, labels=mask), case_dir, name)
    audit = {k: v for k, v in result.audit.items() if k != "timings"}
    audit["rois"] = [box.to_json() for box in result.intermediates["rois"]]
    atomic_write_json(case_dir / "audit.json", audit)
    atomic_write_json(case_dir / "timings.json", result.audit["timings"])
