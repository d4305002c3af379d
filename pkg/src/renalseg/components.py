"""3D connected components, component statistics and block average pooling.

Labeling is delegated to scipy.ndimage but component ids are re-issued in
x-fastest scan order of each component's first voxel, so results are
deterministic and independent of scipy's internal ordering.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .preprocess import RoiBox


@dataclass(frozen=True)
class Component:
    id: int
    size: int
    centroid: tuple[float, float, float]
    bbox: RoiBox
    mean_hu: float | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "size": self.size, "centroid": list(self.centroid),
               "bbox": {"lower": list(self.bbox.lower), "upper": list(self.bbox.upper)}}
        if self.mean_hu is not None:
            out["mean_hu"] = self.mean_hu
        return out


@dataclass(frozen=True)
class ComponentSet:
    label_map: np.ndarray  # int32, 0 = background, 1..K = components
    components: tuple[Component, ...]
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.components)

    def mask_of(self, component_id: int) -> np.ndarray:
        return self.label_map == component_id

    def to_json(self) -> dict:
        return {"connectivity": self.connectivity,
                "foreground_voxels": int(sum(c.size for c in self.components)),
                "components": [c.to_json() for c in self.components]}


@dataclass(frozen=True)
class PooledGrid:
    shape: tuple[int, int, int]
    values: np.ndarray
    block: tuple[int, int, int]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 26,
                         intensity: np.ndarray | None = None) -> ComponentSet:
    """Label a binary mask; ids follow first-voxel x-fastest scan order."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got {mask.ndim}D")
    mask = mask.astype(bool)
    if intensity is not None and intensity.shape != mask.shape:
        raise ValueError(f"intensity shape {intensity.shape} != mask shape {mask.shape}")

    raw, count = ndimage.label(mask, structure=_structure(connectivity))
    if count == 0:
        return ComponentSet(label_map=np.zeros(mask.shape, dtype=np.int32),
                            components=(), connectivity=connectivity)

    # reassign ids in x-fastest scan order of each component's first voxel
    flat = raw.ravel(order="F")
    first_seen = np.full(count + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    np.minimum.at(first_seen, flat[nz], nz)
    order = np.argsort(first_seen[1:], kind="stable")  # old id - 1, sorted by first voxel
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    label_map = remap[raw]

    flat_labels = label_map.ravel()
    sizes = np.bincount(flat_labels, minlength=count + 1)
    idx = np.nonzero(label_map)
    comp_of = label_map[idx]
    sums = [np.bincount(comp_of, weights=idx[ax], minlength=count + 1) for ax in range(3)]
    mins = [np.full(count + 1, mask.shape[ax], dtype=np.int64) for ax in range(3)]
    maxs = [np.full(count + 1, -1, dtype=np.int64) for ax in range(3)]
    for ax in range(3):
        np.minimum.at(mins[ax], comp_of, idx[ax])
        np.maximum.at(maxs[ax], comp_of, idx[ax])
    hu_means = None
    if intensity is not None:
        hu_sums = np.bincount(comp_of, weights=np.asarray(intensity, dtype=np.float64)[idx],
                              minlength=count + 1)
        hu_means = hu_sums[1:] / sizes[1:]

    components = []
    for cid in range(1, count + 1):
        size = int(sizes[cid])
        centroid = tuple(float(sums[ax][cid]) / size for ax in range(3))
        bbox = RoiBox(lower=tuple(int(mins[ax][cid]) for ax in range(3)),
                      upper=tuple(int(maxs[ax][cid]) + 1 for ax in range(3)))
        mean_hu = float(hu_means[cid - 1]) if hu_means is not None else None
        components.append(Component(id=cid, size=size, centroid=centroid,
                                    bbox=bbox, mean_hu=mean_hu))
    return ComponentSet(label_map=label_map, components=tuple(components),
                        connectivity=connectivity)


def max_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Largest component only; ties go to the smaller (scan-order) id.

    An empty mask comes back empty, not as an error.
    """
    comp_set = connected_components(mask, connectivity=connectivity)
    if comp_set.count == 0:
        return np.zeros(np.asarray(mask).shape, dtype=bool)
    sizes = np.array([c.size for c in comp_set.components])
    best = int(np.argmax(sizes)) + 1  # argmax returns the first (lowest-id) maximum
    return comp_set.label_map == best


def centroid_distance(a: Sequence[float], b: Sequence[float],
                      spacing: Sequence[float] | None = None) -> float:
    """Euclidean distance between two points, optionally spacing-scaled to mm."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if spacing is not None:
        diff = diff * np.asarray(spacing, dtype=np.float64)
    return float(np.linalg.norm(diff))


def _block_sum(arr: np.ndarray, block: tuple[int, int, int]) -> np.ndarray:
    padded_shape = [(-(-n // b)) * b for n, b in zip(arr.shape, block)]
    pad = [(0, p - n) for n, p in zip(arr.shape, padded_shape)]
    a = np.pad(arr, pad)
    ox, oy, oz = (p // b for p, b in zip(padded_shape, block))
    return (a.reshape(ox, block[0], oy, block[1], oz, block[2])
             .sum(axis=(1, 3, 5)))


def avg_pool3(mask: np.ndarray, block: Sequence[int] = (3, 3, 3)) -> PooledGrid:
    """Non-overlapping block means (kernel = stride); ragged edge blocks
    average over in-bounds voxels only."""
    block = tuple(int(b) for b in block)
    if any(b < 1 for b in block):
        raise ValueError(f"block components must be >= 1, got {block}")
    arr = np.asarray(mask, dtype=np.float64)
    sums = _block_sum(arr, block)
    counts = _block_sum(np.ones(arr.shape, dtype=np.float64), block)
    values = sums / counts
    return PooledGrid(shape=values.shape, values=values, block=block)


def expand_blocks(block_mask: np.ndarray, block: Sequence[int],
                  shape: Sequence[int]) -> np.ndarray:
    """Map a per-block boolean grid back to voxel space, cropped to ``shape``."""
    out = block_mask
    for ax, b in enumerate(block):
        out = np.repeat(out, b, axis=ax)
    return out[tuple(slice(0, n) for n in shape)]
