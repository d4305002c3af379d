"""Rule-based mask filters and fusions applied after model inference.

Every filter returns a voxel-subset of its input and is idempotent. Filters
optionally append removal records to an ``audit`` list so runs can explain
what they dropped and which rule fired.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .components import avg_pool3, centroid_distance, connected_components, expand_blocks, max_component
from .volume import CLASS_CODES, LabelVolume, ScalarVolume, VolumeHeader

log = logging.getLogger(__name__)

DEFAULT_PRECEDENCE = ("tumor", "artery", "vein", "kidney")


@dataclass(frozen=True)
class PostprocessConfig:
    vein_max_dist: float = 100.0       # centroid distance cutoff, voxel units
    artery_max_dist: float = 92.0
    artery_hu_max: float = 2200.0      # component HU aggregate above this is dropped
    tumor_min_size: int = 100          # components strictly smaller are dropped
    cyst_hu_threshold: float = 20.0    # fluid-density cutoff; components below are cysts
    ensemble_weights: tuple[float, float] = (0.4, 0.6)
    thin_block: tuple[int, int, int] = (3, 3, 3)
    thin_density_max: float = 0.5
    fusion_precedence: tuple[str, ...] = DEFAULT_PRECEDENCE
    distance_unit: str = "voxel"       # "voxel" or "mm"
    hu_aggregate: str = "mean"         # "mean" or "max"
    connectivity: int = 26

    def __post_init__(self):
        w = self.ensemble_weights
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must be nonnegative and sum to 1, got {w}")
        for name in ("vein_max_dist", "artery_max_dist", "artery_hu_max", "cyst_hu_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.thin_density_max <= 1.0:
            raise ValueError(f"thin_density_max must lie in (0, 1], got {self.thin_density_max}")
        if self.distance_unit not in ("voxel", "mm"):
            raise ValueError(f"distance_unit must be 'voxel' or 'mm', got {self.distance_unit!r}")
        if self.hu_aggregate not in ("mean", "max"):
            raise ValueError(f"hu_aggregate must be 'mean' or 'max', got {self.hu_aggregate!r}")
        if sorted(self.fusion_precedence) != sorted(DEFAULT_PRECEDENCE):
            raise ValueError(f"fusion_precedence must order {DEFAULT_PRECEDENCE}, "
                             f"got {self.fusion_precedence}")


def _record(audit: list | None, rule: str, component, **extra) -> None:
    if audit is None:
        return
    entry = {"rule": rule, "component_id": component.id, "size": component.size,
             "centroid": [round(c, 3) for c in component.centroid]}
    entry.update(extra)
    audit.append(entry)


def filter_kidney(kidney_mask: np.ndarray, *, connectivity: int = 26,
                  audit: list | None = None) -> np.ndarray:
    """Keep only the largest kidney component."""
    mask = np.asarray(kidney_mask).astype(bool)
    if not mask.any():
        log.warning("kidney mask empty before filtering")
        if audit is not None:
            audit.append({"rule": "kidney_max_component", "warning": "empty input mask"})
        return mask.copy()
    comp_set = connected_components(mask, connectivity=connectivity)
    best = int(np.argmax([c.size for c in comp_set.components])) + 1
    for comp in comp_set.components:
        if comp.id != best:
            _record(audit, "kidney_max_component", comp)
    return comp_set.label_map == best


def filter_vessel(mask: np.ndarray, max_dist: float, *, connectivity: int = 26,
                  spacing=None, audit: list | None = None,
                  rule_name: str = "vessel_centroid_distance") -> np.ndarray:
    """Keep the largest component plus nearby satellites.

    Satellites whose centroid is farther than ``max_dist`` from the largest
    component's centroid are removed. Distances are voxel units unless a
    spacing is supplied (mm mode).
    """
    if max_dist <= 0:
        raise ValueError(f"max_dist must be > 0, got {max_dist}")
    mask = np.asarray(mask).astype(bool)
    comp_set = connected_components(mask, connectivity=connectivity)
    if comp_set.count <= 1:
        return mask.copy()
    sizes = np.array([c.size for c in comp_set.components])
    main = comp_set.components[int(np.argmax(sizes))]
    keep_ids = []
    for comp in comp_set.components:
        dist = centroid_distance(comp.centroid, main.centroid, spacing)
        if comp.id == main.id or dist <= max_dist:
            keep_ids.append(comp.id)
        else:
            _record(audit, rule_name, comp, distance=round(dist, 3), max_dist=max_dist)
    return np.isin(comp_set.label_map, keep_ids)


def _component_hu(comp_set, image: ScalarVolume, aggregate: str) -> np.ndarray:
    values = np.zeros(comp_set.count)
    for i, comp in enumerate(comp_set.components):
        if aggregate == "mean":
            values[i] = comp.mean_hu
        else:
            values[i] = float(image.voxels[comp_set.label_map == comp.id].max())
    return values


def filter_artery_hu(artery_mask: np.ndarray, image: ScalarVolume, hu_max: float = 2200.0,
                     *, aggregate: str = "mean", connectivity: int = 26,
                     audit: list | None = None) -> np.ndarray:
    """Drop components whose HU aggregate exceeds ``hu_max`` (non-blood densities)."""
    mask = np.asarray(artery_mask).astype(bool)
    if mask.shape != image.shape:
        raise ValueError(f"mask/image shape mismatch: {mask.shape} vs {image.shape}")
    comp_set = connected_components(mask, connectivity=connectivity, intensity=image.voxels)
    if comp_set.count == 0:
        return mask.copy()
    hu = _component_hu(comp_set, image, aggregate)
    keep_ids = []
    for comp, value in zip(comp_set.components, hu):
        if value > hu_max:
            _record(audit, "artery_hu_cutoff", comp, hu=round(float(value), 2), hu_max=hu_max)
        else:
            keep_ids.append(comp.id)
    return np.isin(comp_set.label_map, keep_ids)


def cyst_filter(tumor_mask: np.ndarray, image: ScalarVolume, hu_threshold: float = 20.0,
                *, connectivity: int = 26, audit: list | None = None) -> np.ndarray:
    """Drop tumor components with fluid-like density (mean HU below the cutoff)."""
    mask = np.asarray(tumor_mask).astype(bool)
    if mask.shape != image.shape:
        raise ValueError(f"mask/image shape mismatch: {mask.shape} vs {image.shape}")
    comp_set = connected_components(mask, connectivity=connectivity, intensity=image.voxels)
    if comp_set.count == 0:
        return mask.copy()
    keep_ids = []
    for comp in comp_set.components:
        if comp.mean_hu < hu_threshold:
            _record(audit, "cyst_hu", comp, hu=round(comp.mean_hu, 2), threshold=hu_threshold)
        else:
            keep_ids.append(comp.id)
    return np.isin(comp_set.label_map, keep_ids)


def size_filter(mask: np.ndarray, min_size: int, *, connectivity: int = 26,
                audit: list | None = None, rule_name: str = "min_size") -> np.ndarray:
    """Drop components strictly smaller than ``min_size`` voxels."""
    if min_size < 0:
        raise ValueError(f"min_size must be >= 0, got {min_size}")
    mask = np.asarray(mask).astype(bool)
    comp_set = connected_components(mask, connectivity=connectivity)
    if comp_set.count == 0:
        return mask.copy()
    keep_ids = []
    for comp in comp_set.components:
        if comp.size < min_size:
            _record(audit, rule_name, comp, min_size=min_size)
        else:
            keep_ids.append(comp.id)
    return np.isin(comp_set.label_map, keep_ids)


def ensemble_vein(prob_i: np.ndarray, prob_ii: np.ndarray,
                  weights: tuple[float, float] = (0.4, 0.6)) -> np.ndarray:
    """Convex combination of two probability maps, thresholded at 0.5."""
    prob_i = np.asarray(prob_i, dtype=np.float64)
    prob_ii = np.asarray(prob_ii, dtype=np.float64)
    if prob_i.shape != prob_ii.shape:
        raise ValueError(f"probability shape mismatch: {prob_i.shape} vs {prob_ii.shape}")
    if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {weights}")
    fused = weights[0] * prob_i + weights[1] * prob_ii
    return fused >= 0.5


def thin_structure(mask: np.ndarray, block=(3, 3, 3), density_max: float = 0.5) -> np.ndarray:
    """Voxels of ``mask`` lying in low-density pooled blocks (narrow structures)."""
    mask = np.asarray(mask).astype(bool)
    pooled = avg_pool3(mask, block)
    low = (pooled.values > 0) & (pooled.values <= density_max)
    return mask & expand_blocks(low, block, mask.shape)


def fuse_artery(artery_i: np.ndarray, artery_ii: np.ndarray,
                config: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """Main artery trunk from path I plus thin structures detected in path II."""
    artery_i = np.asarray(artery_i).astype(bool)
    artery_ii = np.asarray(artery_ii).astype(bool)
    if artery_i.shape != artery_ii.shape:
        raise ValueError(f"artery mask shape mismatch: {artery_i.shape} vs {artery_ii.shape}")
    trunk = max_component(artery_i, connectivity=config.connectivity)
    thin = thin_structure(artery_ii, config.thin_block, config.thin_density_max)
    return trunk | thin


def vote_tumor(pred_i: np.ndarray, pred_ii: np.ndarray) -> np.ndarray:
    """Two-voter fusion: average-and-threshold for soft inputs, union for binary."""
    pred_i = np.asarray(pred_i)
    pred_ii = np.asarray(pred_ii)
    if pred_i.shape != pred_ii.shape:
        raise ValueError(f"prediction shape mismatch: {pred_i.shape} vs {pred_ii.shape}")
    if pred_i.dtype == bool and pred_ii.dtype == bool:
        return pred_i | pred_ii
    mean = (pred_i.astype(np.float64) + pred_ii.astype(np.float64)) / 2.0
    return mean >= 0.5


def fuse_labels(kidney: np.ndarray, tumor: np.ndarray, vein: np.ndarray, artery: np.ndarray,
                precedence: tuple[str, ...] = DEFAULT_PRECEDENCE,
                header: VolumeHeader | None = None) -> LabelVolume | np.ndarray:
    """Compose per-structure masks into one label map; ties go to the
    highest-precedence structure; unclaimed voxels stay background."""
    masks = {"kidney": np.asarray(kidney).astype(bool), "tumor": np.asarray(tumor).astype(bool),
             "vein": np.asarray(vein).astype(bool), "artery": np.asarray(artery).astype(bool)}
    shapes = {m.shape for m in masks.values()}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes differ: {shapes}")
    out = np.zeros(masks["kidney"].shape, dtype=np.uint8)
    for name in reversed(precedence):  # paint lowest precedence first
        out[masks[name]] = CLASS_CODES[name]
    if header is not None:
        return LabelVolume(header=header, labels=out)
    return out
