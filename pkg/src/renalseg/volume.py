"""Core volume types: scalar (HU), label and probability grids.

Conventions used everywhere in this package:

* arrays are indexed ``[i, j, k]`` for the (x, y, z) voxel axes;
* serialized voxel streams are x-fastest (Fortran order), mirroring NIfTI;
* world coordinates are millimetres, ``world = origin + direction @ (index * spacing)``;
* volumes are immutable once constructed and safe to share between threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataQualityError

BACKGROUND, KIDNEY, TUMOR, VEIN, ARTERY = 0, 1, 2, 3, 4
NUM_CLASSES = 5
STRUCTURES = ("kidney", "tumor", "vein", "artery")
CLASS_CODES = {"background": BACKGROUND, "kidney": KIDNEY, "tumor": TUMOR,
               "vein": VEIN, "artery": ARTERY}

ORTHONORMAL_TOL = 1e-4


def _as_triple(value, dtype) -> tuple:
    out = tuple(dtype(v) for v in value)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class VolumeHeader:
    """Geometry and intensity metadata of a 3D grid.

    ``intensity_scale``/``intensity_offset`` record the scaling that was
    already applied when the file was parsed; they are provenance, not a
    pending transform, and are excluded from :meth:`equals`.
    """

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = None  # (3,3) orthonormal, defaults to identity
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_triple(self.shape, int))
        object.__setattr__(self, "spacing", _as_triple(self.spacing, float))
        object.__setattr__(self, "origin", _as_triple(self.origin, float))
        direction = np.eye(3) if self.direction is None else np.asarray(self.direction, dtype=np.float64)
        if direction.shape != (3, 3):
            raise ValueError(f"direction must be 3x3, got {direction.shape}")
        direction = direction.copy()
        direction.setflags(write=False)
        object.__setattr__(self, "direction", direction)
        if any(n < 1 for n in self.shape):
            raise ValueError(f"shape components must be >= 1, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        err = np.abs(direction.T @ direction - np.eye(3)).max()
        if err >= ORTHONORMAL_TOL:
            raise ValueError(f"direction matrix not orthonormal (|R^T R - I| = {err:.3g})")

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.shape))

    def equals(self, other: "VolumeHeader", tol: float = 1e-6) -> bool:
        """Geometric equality within ``tol`` (ignores intensity provenance)."""
        return (self.shape == other.shape
                and np.allclose(self.spacing, other.spacing, rtol=tol, atol=tol)
                and np.allclose(self.origin, other.origin, rtol=tol, atol=tol)
                and np.allclose(self.direction, other.direction, rtol=tol, atol=tol))

    def with_grid(self, shape, spacing, origin=None) -> "VolumeHeader":
        return VolumeHeader(shape=shape, spacing=spacing,
                            origin=self.origin if origin is None else origin,
                            direction=self.direction,
                            intensity_scale=self.intensity_scale,
                            intensity_offset=self.intensity_offset)


def _freeze(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Dense HU intensity grid (float32 after any slope/intercept scaling)."""

    header: VolumeHeader
    voxels: np.ndarray

    def __post_init__(self):
        voxels = _freeze(self.voxels, np.float32)
        if voxels.shape != self.header.shape:
            raise ValueError(f"voxel array shape {voxels.shape} != header shape {self.header.shape}")
        bad = int(np.size(voxels) - np.count_nonzero(np.isfinite(voxels)))
        if bad:
            raise DataQualityError(f"{bad} non-finite voxel(s) in scalar volume")
        object.__setattr__(self, "voxels", voxels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.header.shape


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense class-code grid over {0=background, 1=kidney, 2=tumor, 3=vein, 4=artery}."""

    header: VolumeHeader
    labels: np.ndarray

    def __post_init__(self):
        labels = _freeze(self.labels, np.uint8)
        if labels.shape != self.header.shape:
            raise ValueError(f"label array shape {labels.shape} != header shape {self.header.shape}")
        if labels.size and labels.max() >= NUM_CLASSES:
            bad = int(np.count_nonzero(labels >= NUM_CLASSES))
            raise DataQualityError(f"{bad} voxel(s) outside class codes 0..{NUM_CLASSES - 1}")
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.header.shape

    def mask(self, class_code: int) -> np.ndarray:
        return self.labels == class_code


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-class probability maps, ``channels[c]`` aligned to the header grid."""

    header: VolumeHeader
    channels: np.ndarray  # (C, nx, ny, nz) float32 in [0, 1]

    def __post_init__(self):
        channels = _freeze(self.channels, np.float32)
        if channels.ndim != 4 or channels.shape[1:] != self.header.shape:
            raise ValueError(f"channels shape {channels.shape} incompatible with grid {self.header.shape}")
        if channels.size and (channels.min() < -1e-6 or channels.max() > 1 + 1e-6):
            raise DataQualityError("probabilities outside [0, 1]")
        object.__setattr__(self, "channels", channels)

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]

    def argmax_labels(self) -> np.ndarray:
        return np.argmax(self.channels, axis=0).astype(np.uint8)

    def channel(self, class_code: int) -> np.ndarray:
        return self.channels[class_code]


def voxel_to_world(header: VolumeHeader, index: Sequence[float]) -> np.ndarray:
    """World position (mm) of a (possibly fractional) voxel index."""
    idx = np.asarray(index, dtype=np.float64)
    return np.asarray(header.origin) + header.direction @ (idx * np.asarray(header.spacing))


def world_to_voxel(header: VolumeHeader, world: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`voxel_to_world` for orthonormal directions."""
    w = np.asarray(world, dtype=np.float64) - np.asarray(header.origin)
    return (header.direction.T @ w) / np.asarray(header.spacing)
