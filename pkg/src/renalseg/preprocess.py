"""Resampling, intensity normalization, augmentation and ROI cropping.

Resampling anchors voxel *centers*: output index ``j`` samples the input at
``j * (target_spacing / source_spacing)``, both grids sharing the volume
origin. Scalar volumes are interpolated trilinearly (border cells
extrapolate linearly, so affine intensity fields are reproduced exactly);
label volumes use nearest-neighbor so no new class ever appears.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyForegroundError, ZeroVarianceError
from .volume import LabelVolume, ScalarVolume, VolumeHeader, voxel_to_world


@dataclass(frozen=True)
class ForegroundStats:
    """Dataset-level intensity statistics over annotated foreground voxels."""

    mean: float
    std: float
    voxel_count: int

    def __post_init__(self):
        if self.voxel_count < 1:
            raise ValueError("voxel_count must be >= 1")
        if not self.std > 0:
            raise ValueError("std must be > 0")

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "voxel_count": self.voxel_count}

    @classmethod
    def from_json(cls, obj: dict) -> "ForegroundStats":
        return cls(mean=float(obj["mean"]), std=float(obj["std"]),
                   voxel_count=int(obj["voxel_count"]))


@dataclass(frozen=True)
class AugmentParams:
    """Spatial augmentation parameters (rotation radians, isotropic scale, mirror flags)."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    mirror: tuple[bool, bool, bool] = (False, False, False)
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError(f"scale must lie in [0.5, 2.0], got {self.scale}")
        if any(abs(r) > math.pi for r in self.rotation):
            raise ValueError("rotation components must lie in [-pi, pi]")

    @classmethod
    def random(cls, rng: np.random.Generator, *, max_rotation: float = math.pi / 12,
               scale_range: tuple[float, float] = (0.85, 1.15)) -> "AugmentParams":
        return cls(rotation=tuple(rng.uniform(-max_rotation, max_rotation, 3)),
                   scale=float(rng.uniform(*scale_range)),
                   mirror=tuple(bool(b) for b in rng.integers(0, 2, 3)),
                   seed=int(rng.integers(0, 2 ** 31)))


@dataclass(frozen=True)
class RoiBox:
    """Half-open voxel-index box [lower, upper) with its expansion factor."""

    lower: tuple[int, int, int]
    upper: tuple[int, int, int]
    expansion: float = 1.0

    def __post_init__(self):
        if any(l >= u for l, u in zip(self.lower, self.upper)):
            raise ValueError(f"empty box {self.lower}..{self.upper}")
        if not 1.0 <= self.expansion <= 1.5:
            raise ValueError(f"expansion must lie in [1.0, 1.5], got {self.expansion}")

    @property
    def size(self) -> tuple[int, int, int]:
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, u) for l, u in zip(self.lower, self.upper))

    def to_json(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "expansion": self.expansion}

    @classmethod
    def from_json(cls, obj: dict) -> "RoiBox":
        return cls(lower=tuple(obj["lower"]), upper=tuple(obj["upper"]),
                   expansion=float(obj.get("expansion", 1.0)))


def _round_half_up(x: np.ndarray | float):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _output_shape(shape: Sequence[int], spacing: Sequence[float],
                  target: Sequence[float]) -> tuple[int, int, int]:
    out = _round_half_up(np.asarray(shape) * np.asarray(spacing) / np.asarray(target))
    return tuple(int(max(1, n)) for n in out)


def _interp_linear_axis(vol: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """1D linear interpolation along one axis at per-axis grid coordinates.

    Base cells are clamped to [0, n-2] so border samples extrapolate the
    last cell linearly instead of clipping.
    """
    n = vol.shape[axis]
    if n == 1:
        return np.take(vol, np.zeros(len(coords), dtype=np.intp), axis=axis)
    base = np.clip(np.floor(coords), 0, n - 2).astype(np.intp)
    t = coords - base
    shape = [1] * vol.ndim
    shape[axis] = len(coords)
    t = t.reshape(shape)
    v0 = np.take(vol, base, axis=axis)
    v1 = np.take(vol, base + 1, axis=axis)
    return v0 * (1.0 - t) + v1 * t


def _nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    return np.clip(_round_half_up(coords), 0, n - 1).astype(np.intp)


def resample(volume: ScalarVolume | LabelVolume, target_spacing: Sequence[float],
             mode: str | None = None):
    """Resample onto an isotropic-or-not target grid derived from spacings.

    Output shape is ``round(shape * spacing / target)`` (half-up, min 1).
    ``mode`` defaults to "linear" for scalar volumes and "nearest" for labels.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be > 0, got {target}")
    out_shape = _output_shape(volume.header.shape, volume.header.spacing, target)
    header = volume.header.with_grid(out_shape, target)
    return resample_to_grid(volume, header, mode=mode)


def resample_to_grid(volume: ScalarVolume | LabelVolume, target_header: VolumeHeader,
                     mode: str | None = None):
    """Resample onto an explicit target grid sharing the volume's origin/direction."""
    if mode is None:
        mode = "nearest" if isinstance(volume, LabelVolume) else "linear"
    if mode not in ("linear", "nearest"):
        raise ValueError(f"mode must be 'linear' or 'nearest', got {mode!r}")

    src = volume.header
    ratio = np.asarray(target_header.spacing) / np.asarray(src.spacing)
    coords = [np.arange(n, dtype=np.float64) * ratio[ax]
              for ax, n in enumerate(target_header.shape)]

    if mode == "linear":
        if isinstance(volume, LabelVolume):
            raise ValueError("label volumes must be resampled with mode='nearest'")
        data = np.asarray(volume.voxels, dtype=np.float64)
        for ax in range(3):
            data = _interp_linear_axis(data, coords[ax], ax)
        return ScalarVolume(header=target_header, voxels=data.astype(np.float32))

    arr = volume.labels if isinstance(volume, LabelVolume) else volume.voxels
    ix = _nearest_index(coords[0], src.shape[0])
    iy = _nearest_index(coords[1], src.shape[1])
    iz = _nearest_index(coords[2], src.shape[2])
    data = arr[np.ix_(ix, iy, iz)]
    if isinstance(volume, LabelVolume):
        return LabelVolume(header=target_header, labels=data)
    return ScalarVolume(header=target_header, voxels=data)


def compute_foreground_stats(cases: Iterable[tuple[ScalarVolume, LabelVolume]]) -> ForegroundStats:
    """Single-pass mean/std (population) over label>0 voxels of all cases."""
    count = 0
    total = 0.0
    total_sq = 0.0
    for image, labels in cases:
        if image.shape != labels.shape:
            raise ValueError(f"image/label shape mismatch: {image.shape} vs {labels.shape}")
        fg = image.voxels[labels.labels > 0].astype(np.float64)
        count += fg.size
        total += float(fg.sum())
        total_sq += float(np.square(fg).sum())
    if count == 0:
        raise EmptyForegroundError("no foreground voxels (label > 0) in any case")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = math.sqrt(var)
    if std <= 0:
        raise ZeroVarianceError("foreground intensities are constant; std would be 0")
    return ForegroundStats(mean=mean, std=std, voxel_count=count)


def stats_from_hu_threshold(image: ScalarVolume, hu_threshold: float) -> ForegroundStats:
    """Fallback stats for unlabeled inputs: foreground = voxels above an HU cutoff."""
    fg = image.voxels[image.voxels > hu_threshold].astype(np.float64)
    if fg.size == 0:
        raise EmptyForegroundError(f"no voxels above {hu_threshold} HU")
    mean = float(fg.mean())
    std = float(fg.std())
    if std <= 0:
        raise ZeroVarianceError("thresholded foreground is constant")
    return ForegroundStats(mean=mean, std=std, voxel_count=int(fg.size))


def zscore_normalize(volume: ScalarVolume, stats: ForegroundStats) -> ScalarVolume:
    """Map every voxel to (x - mean) / std; metadata unchanged."""
    normalized = (volume.voxels - np.float32(stats.mean)) / np.float32(stats.std)
    return ScalarVolume(header=volume.header, voxels=normalized)


def _rotation_matrix(rotation: Sequence[float]) -> np.ndarray:
    rx, ry, rz = rotation
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _gather_trilinear(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear values at arbitrary points, clamping base cells at borders."""
    out = np.zeros(pts.shape[1], dtype=np.float64)
    base = []
    frac = []
    for ax in range(3):
        n = vol.shape[ax]
        if n == 1:
            base.append(np.zeros(pts.shape[1], dtype=np.intp))
            frac.append(np.zeros(pts.shape[1]))
        else:
            b = np.clip(np.floor(pts[ax]), 0, n - 2).astype(np.intp)
            base.append(b)
            frac.append(pts[ax] - b)
    for di in (0, 1):
        wx = frac[0] if di else 1.0 - frac[0]
        for dj in (0, 1):
            wy = frac[1] if dj else 1.0 - frac[1]
            for dk in (0, 1):
                wz = frac[2] if dk else 1.0 - frac[2]
                out += wx * wy * wz * vol[base[0] + (di if vol.shape[0] > 1 else 0),
                                          base[1] + (dj if vol.shape[1] > 1 else 0),
                                          base[2] + (dk if vol.shape[2] > 1 else 0)]
    return out


def augment(image: ScalarVolume, labels: LabelVolume, params: AugmentParams
            ) -> tuple[ScalarVolume, LabelVolume]:
    """Apply one rigid-ish transform (rotate, scale, mirror) to both volumes.

    The image is sampled trilinearly with out-of-bounds fill equal to its
    minimum intensity; labels are sampled nearest-neighbor with background
    fill. The map is about the volume center and identical for both inputs.
    """
    if image.shape != labels.shape:
        raise ValueError(f"image/label shape mismatch: {image.shape} vs {labels.shape}")
    shape = image.shape
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    mirror = np.diag([-1.0 if m else 1.0 for m in params.mirror])
    rot = _rotation_matrix(params.rotation)
    # forward map q -> center + scale*rot*mirror*(q-center); we sample its inverse
    inv = mirror @ rot.T / params.scale

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape],
                                indexing="ij"), axis=0).reshape(3, -1)
    pts = inv @ (grid - center[:, None]) + center[:, None]

    inside = np.ones(pts.shape[1], dtype=bool)
    for ax in range(3):
        inside &= (pts[ax] >= 0) & (pts[ax] <= shape[ax] - 1)

    img_vals = _gather_trilinear(np.asarray(image.voxels, dtype=np.float64), pts)
    fill = float(image.voxels.min()) if image.voxels.size else 0.0
    img_vals[~inside] = fill

    nearest = tuple(_nearest_index(pts[ax], shape[ax]) for ax in range(3))
    lbl_vals = labels.labels[nearest].astype(np.uint8)
    lbl_vals[~inside] = 0

    new_image = ScalarVolume(header=image.header,
                             voxels=img_vals.reshape(shape).astype(np.float32))
    new_labels = LabelVolume(header=labels.header, labels=lbl_vals.reshape(shape))
    return new_image, new_labels


def expand_box(lower: np.ndarray, upper: np.ndarray, expansion: float,
               bounds: Sequence[int]) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Scale a voxel box about its center (half-up rounding), then clamp.

    Clamping shifts the box back inside the volume before truncating, so the
    result always still contains the original box.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    size = upper - lower
    new_size = _round_half_up(size * expansion)
    center = (lower + upper) / 2.0
    new_lower = _round_half_up(center - new_size / 2.0).astype(np.int64)
    new_upper = new_lower + new_size.astype(np.int64)
    for ax, n in enumerate(bounds):
        if new_size[ax] >= n:
            new_lower[ax], new_upper[ax] = 0, n
            continue
        if new_lower[ax] < 0:
            new_upper[ax] -= new_lower[ax]
            new_lower[ax] = 0
        if new_upper[ax] > n:
            new_lower[ax] -= new_upper[ax] - n
            new_upper[ax] = n
    return tuple(int(v) for v in new_lower), tuple(int(v) for v in new_upper)


def self_adapting_crop(tumor_mask: np.ndarray | LabelVolume, image: ScalarVolume,
                       expansion: float = 1.25, *, min_component_voxels: int = 2000,
                       connectivity: int = 26
                       ) -> list[tuple[RoiBox, ScalarVolume, LabelVolume]]:
    """One expanded ROI per tumor component larger than the size cutoff.

    Returns (box, cropped image, cropped binary mask) triples; empty when no
    component qualifies.
    """
    from .components import connected_components  # local import to avoid a cycle

    if not 1.0 <= expansion <= 1.5:
        raise ValueError(f"expansion must lie in [1.0, 1.5], got {expansion}")
    mask = tumor_mask.labels if isinstance(tumor_mask, LabelVolume) else np.asarray(tumor_mask)
    mask = mask > 0
    if mask.shape != image.shape:
        raise ValueError(f"mask/image shape mismatch: {mask.shape} vs {image.shape}")

    rois = []
    comp_set = connected_components(mask, connectivity=connectivity)
    for comp in comp_set.components:
        if comp.size <= min_component_voxels:
            continue
        lower, upper = expand_box(comp.bbox.lower, comp.bbox.upper, expansion, mask.shape)
        box = RoiBox(lower=lower, upper=upper, expansion=expansion)
        sl = box.slices()
        sub_header = image.header.with_grid(
            box.size, image.header.spacing,
            origin=tuple(voxel_to_world(image.header, lower)))
        cropped_image = ScalarVolume(header=sub_header, voxels=image.voxels[sl])
        cropped_mask = LabelVolume(header=sub_header, labels=mask[sl].astype(np.uint8))
        rois.append((box, cropped_image, cropped_mask))
    return rois


def remap_labels(labels: LabelVolume, table: dict[int, int]) -> LabelVolume:
    """Recode label values (for datasets whose on-disk codes differ from ours)."""
    lut = np.arange(256, dtype=np.uint8)
    for src, dst in table.items():
        lut[int(src)] = int(dst)
    return LabelVolume(header=labels.header, labels=lut[labels.labels])
