"""Overlap and surface-distance metrics plus batch evaluation reports.

HD/AVD operate on surface voxels (foreground voxels with at least one
6-neighbor outside the mask), with Euclidean distances in millimetres via
the grid spacing. When exactly one mask is empty the distances are reported
as an infinity sentinel; aggregation excludes sentinels and counts them.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import CLASS_CODES, LabelVolume, STRUCTURES

log = logging.getLogger(__name__)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity 2|A∩B|/(|A|+|B|); two empty masks score 1.0."""
    a, b = _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        log.debug("dsc of two empty masks reported as 1.0 by convention")
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbor outside the mask
    (volume borders count as outside)."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for ax in range(3):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[ax] = slice(2, None) if shift == 1 else slice(0, -2)
            interior &= padded[tuple(sl)]
    return mask & ~interior


def _surface_points(mask: np.ndarray, spacing) -> np.ndarray:
    pts = np.argwhere(surface_voxels(mask)).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst)
    dist, _ = tree.query(src, k=1)
    return np.atleast_1d(dist)


def hausdorff(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between surface sets, in mm."""
    a, b = _check_shapes(a, b)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return math.inf
    pa = _surface_points(a, spacing)
    pb = _surface_points(b, spacing)
    return float(max(_directed_distances(pa, pb).max(),
                     _directed_distances(pb, pa).max()))


def avg_hausdorff(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric average surface distance (mean of the two directed means), in mm."""
    a, b = _check_shapes(a, b)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return math.inf
    pa = _surface_points(a, spacing)
    pb = _surface_points(b, spacing)
    return float((_directed_distances(pa, pb).mean()
                  + _directed_distances(pb, pa).mean()) / 2.0)


@dataclass(frozen=True)
class StructureMetrics:
    dsc: float
    hd_mm: float
    avd_mm: float


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    per_structure: dict[str, StructureMetrics]


@dataclass
class DatasetReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        """Per-structure mean/std of each metric; infinite HD/AVD excluded and counted."""
        out = {}
        for structure in STRUCTURES:
            rows = [c.per_structure[structure] for c in self.cases if structure in c.per_structure]
            block = {"cases": len(rows)}
            for name in ("dsc", "hd_mm", "avd_mm"):
                values = np.array([getattr(r, name) for r in rows], dtype=np.float64)
                finite = values[np.isfinite(values)]
                block[name] = {
                    "mean": float(finite.mean()) if finite.size else None,
                    "std": float(finite.std()) if finite.size else None,
                    "infinite": int(np.count_nonzero(~np.isfinite(values))),
                }
            out[structure] = block
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["case_id", "structure", "dsc", "hd_mm", "avd_mm"])
        for case in self.cases:
            for structure in STRUCTURES:
                if structure not in case.per_structure:
                    continue
                m = case.per_structure[structure]
                writer.writerow([case.case_id, structure,
                                 f"{m.dsc:.6f}", _fmt(m.hd_mm), _fmt(m.avd_mm)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "cases": [{"case_id": c.case_id,
                       "structures": {s: {"dsc": m.dsc,
                                          "hd_mm": _json_num(m.hd_mm),
                                          "avd_mm": _json_num(m.avd_mm)}
                                      for s, m in c.per_structure.items()}}
                      for c in self.cases],
            "errors": self.errors,
            "aggregate": self.aggregate(),
        }


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def _json_num(value: float):
    return "inf" if math.isinf(value) else value


def case_metrics(pred: LabelVolume, truth: LabelVolume, case_id: str = "case") -> CaseMetrics:
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch for {case_id}: {pred.shape} vs {truth.shape}")
    if not pred.header.equals(truth.header, tol=1e-4):
        raise ValueError(f"header mismatch for {case_id}")
    spacing = truth.header.spacing
    per_structure = {}
    for structure in STRUCTURES:
        code = CLASS_CODES[structure]
        a = pred.mask(code)
        b = truth.mask(code)
        per_structure[structure] = StructureMetrics(
            dsc=dsc(a, b), hd_mm=hausdorff(a, b, spacing), avd_mm=avg_hausdorff(a, b, spacing))
    return CaseMetrics(case_id=case_id, per_structure=per_structure)


def evaluate_dataset(pairs) -> DatasetReport:
    """Per-case metrics over (case_id, pred, truth) triples.

    A failing case is recorded as an error row; the run continues.
    """
    report = DatasetReport()
    for case_id, pred, truth in pairs:
        try:
            report.cases.append(case_metrics(pred, truth, case_id))
        except Exception as exc:  # error isolation is the contract here
            log.warning("case %s skipped: %s", case_id, exc)
            report.errors.append({"case_id": case_id, "error": str(exc)})
    return report
