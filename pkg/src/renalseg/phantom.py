"""Procedural CT phantoms with known ground truth.

Each phantom places an ellipsoidal kidney, an embedded spherical tumor
(always > 2000 voxels so the adaptive-crop threshold is reachable), tubular
vein and artery trees meeting the kidney near a hilum point, an optional
fluid-density cyst (a distractor labeled background) and an optional bright
calcification-like blob, over noisy soft-tissue background. All structures
are kept mutually separated so connected-component rules can be exercised
without accidental merges. Deterministic per seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import ARTERY, KIDNEY, LabelVolume, ScalarVolume, TUMOR, VEIN, VolumeHeader

MIN_SIZE = 64
MIN_SIZE_WITH_CYST = 90  # a >2000-voxel cyst only fits next to the tumor in larger kidneys


@dataclass(frozen=True)
class PhantomLayout:
    """Geometry of the generated structures, for tests that need to aim at them."""

    kidney_center: tuple[float, float, float]
    kidney_axes: tuple[float, float, float]
    tumor_center: tuple[float, float, float]
    tumor_radius: float
    hilum: tuple[float, float, float]
    cyst_center: tuple[float, float, float] | None = None
    cyst_radius: float | None = None
    bright_center: tuple[float, float, float] | None = None
    bright_radius: float | None = None
    bright_hu: float | None = None


def _sphere(grid, center, radius) -> np.ndarray:
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return dist2 <= radius * radius


def _ellipsoid(grid, center, axes) -> np.ndarray:
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
    return q <= 1.0


def _tube(shape, polylines: Sequence[Sequence[np.ndarray]], radius: float) -> np.ndarray:
    """Rasterize polyline tubes: centerline voxels dilated to ``radius`` via an EDT."""
    center = np.zeros(shape, dtype=bool)
    for waypoints in polylines:
        for a, b in zip(waypoints[:-1], waypoints[1:]):
            steps = max(2, int(np.ceil(np.linalg.norm(b - a) * 2)))
            for t in np.linspace(0.0, 1.0, steps):
                p = np.round(a + t * (b - a)).astype(int)
                if all(0 <= p[ax] < shape[ax] for ax in range(3)):
                    center[tuple(p)] = True
    if not center.any():
        return center
    return ndimage.distance_transform_edt(~center) <= radius


def generate_phantom(seed: int, size: Sequence[int] = (96, 96, 96),
                     spacing: Sequence[float] = (1.0, 1.0, 1.0), *,
                     include_cyst: bool = False,
                     include_bright_blob: bool = False) -> tuple[ScalarVolume, LabelVolume]:
    """Deterministic synthetic CTA image plus ground-truth labels."""
    image, labels, _ = generate_phantom_with_layout(
        seed, size, spacing, include_cyst=include_cyst,
        include_bright_blob=include_bright_blob)
    return image, labels


def generate_phantom_with_layout(seed: int, size: Sequence[int] = (96, 96, 96),
                                 spacing: Sequence[float] = (1.0, 1.0, 1.0), *,
                                 include_cyst: bool = False,
                                 include_bright_blob: bool = False
                                 ) -> tuple[ScalarVolume, LabelVolume, PhantomLayout]:
    size = tuple(int(n) for n in size)
    if len(size) != 3 or any(n < MIN_SIZE for n in size):
        raise ValueError(f"phantom size must be >= {MIN_SIZE} per axis, got {size}")
    if include_cyst and min(size) < MIN_SIZE_WITH_CYST:
        raise ValueError(f"cyst-bearing phantoms need size >= {MIN_SIZE_WITH_CYST} per axis")
    rng = np.random.default_rng(seed)
    shape = size
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")

    center = np.array(shape, dtype=np.float64) / 2.0 + rng.uniform(-2, 2, 3)
    axes = np.array([0.21, 0.30, 0.23]) * min(shape) * rng.uniform(0.97, 1.03, 3)
    axes = np.maximum(axes, (15.0, 20.0, 16.0))
    kidney = _ellipsoid(grid, center, axes)

    # tumor on the -y flank (away from the hilum), strictly inside the kidney
    tumor_radius = 9.0
    tumor_center = center + np.array([rng.uniform(-1.5, 1.5),
                                      -(axes[1] - tumor_radius - 3.0),
                                      rng.uniform(-1.5, 1.5)])
    tumor = _sphere(grid, tumor_center, tumor_radius)

    # vessels approach the +y flank; the artery runs displaced in +z so the
    # tubes never touch each other
    hilum = center + np.array([0.0, axes[1] * 0.92, 0.0])
    vein_radius, artery_radius = 2.6, 2.2
    margin = 6.0
    vein_inner = hilum + np.array([0.0, -4.0, -2.0])
    vein_exit = np.array([shape[0] - margin, shape[1] - margin, center[2] - 10.0])
    vein_mid = (hilum + vein_exit) / 2.0 + np.array([0.0, 0.0, rng.uniform(-3, 0)])
    vein_branch_from = hilum + (vein_exit - hilum) * 0.45
    vein_branch_to = vein_branch_from + np.array([rng.uniform(8, 12), 4.0, -8.0])
    vein = _tube(shape, [[vein_inner, hilum, vein_mid, vein_exit],
                         [vein_branch_from, vein_branch_to]], vein_radius)

    artery_hilum = hilum + np.array([0.0, 0.0, 9.0])
    artery_inner = artery_hilum + np.array([0.0, -4.0, 1.0])
    artery_exit = np.array([shape[0] - margin, shape[1] - margin, center[2] + 16.0])
    artery_mid = (artery_hilum + artery_exit) / 2.0 + np.array([0.0, 0.0, rng.uniform(0, 2)])
    artery_branch_from = artery_hilum + (artery_exit - artery_hilum) * 0.5
    artery_branch_to = artery_branch_from + np.array([rng.uniform(-12, -8), 6.0, 6.0])
    artery = _tube(shape, [[artery_inner, artery_hilum, artery_mid, artery_exit],
                           [artery_branch_from, artery_branch_to]], artery_radius)
    artery &= ~vein  # keep the trees disjoint even if a jitter brings them close

    cyst = np.zeros(shape, dtype=bool)
    cyst_center = cyst_radius = None
    if include_cyst:
        # +y side, below the vessel entry, with a clear gap to the tumor
        cyst_radius = 9.0
        cyst_center = center + np.array([0.0, min(7.0, axes[1] - cyst_radius - 3.0), 0.0])
        cyst = _sphere(grid, cyst_center, cyst_radius) & kidney
        cyst &= ~(tumor | vein | artery)

    bright = np.zeros(shape, dtype=bool)
    bright_center = bright_radius = bright_hu = None
    if include_bright_blob:
        # near (within the 92-voxel rule) but clearly separated from the artery
        bright_radius = 5.0
        bright_hu = 2500.0
        bright_center = artery_mid + np.array([0.0, 0.0, 10.0])
        bright = _sphere(grid, bright_center, bright_radius)
        bright &= ~(kidney | vein | artery | tumor)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[kidney] = KIDNEY
    labels[tumor] = TUMOR
    labels[vein] = VEIN
    labels[artery] = ARTERY
    labels[cyst] = 0  # cysts are distractors, not annotated structures

    image = np.full(shape, rng.uniform(-20, 20), dtype=np.float64)
    image[kidney] = rng.uniform(30, 40)
    image[tumor] = rng.uniform(50, 70)
    image[vein] = rng.uniform(150, 220)
    image[artery] = rng.uniform(220, 300)
    if include_cyst:
        image[cyst] = rng.uniform(2, 12)
    if include_bright_blob:
        image[bright] = bright_hu
    image = image + rng.normal(0.0, 4.0, shape)

    header = VolumeHeader(shape=shape, spacing=tuple(float(s) for s in spacing))
    layout = PhantomLayout(
        kidney_center=tuple(center), kidney_axes=tuple(axes),
        tumor_center=tuple(tumor_center), tumor_radius=tumor_radius,
        hilum=tuple(hilum),
        cyst_center=tuple(cyst_center) if cyst_center is not None else None,
        cyst_radius=cyst_radius,
        bright_center=tuple(bright_center) if bright_center is not None else None,
        bright_radius=bright_radius, bright_hu=bright_hu)
    return (ScalarVolume(header=header, voxels=image.astype(np.float32)),
            LabelVolume(header=header, labels=labels),
            layout)
