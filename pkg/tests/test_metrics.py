import math

import numpy as np
import pytest

from oracles import all_pairs_surface_distances, surface_points_loop
from renalseg.metrics import (avg_hausdorff, case_metrics, dsc, evaluate_dataset,
                              hausdorff, surface_voxels)
from renalseg.volume import LabelVolume, VolumeHeader


def labels_vol(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.uint8)
    return LabelVolume(header=VolumeHeader(shape=arr.shape, spacing=spacing), labels=arr)


def random_mask(rng, shape=(12, 12, 12), density=0.3):
    mask = rng.random(shape) < density
    if not mask.any():
        mask[tuple(rng.integers(0, s) for s in shape)] = True
    return mask


class TestDsc:
    def test_identical(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[2:4, 2:4, 2:4] = True
        assert dsc(mask, mask) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6, 6), dtype=bool)
        b = np.zeros((6, 6, 6), dtype=bool)
        a[0, 0, 0] = True
        b[5, 5, 5] = True
        assert dsc(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = a[0, 0, 1] = True
        b[0, 0, 1] = b[0, 0, 2] = True
        assert dsc(a, b) == pytest.approx(0.5)

    def test_both_empty_convention(self):
        empty = np.zeros((4, 4, 4), dtype=bool)
        assert dsc(empty, empty) == 1.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = random_mask(rng)
            b = random_mask(rng)
            v = dsc(a, b)
            assert v == dsc(b, a)
            assert 0.0 <= v <= 1.0

    def test_one_iff_identical_nonempty(self):
        rng = np.random.default_rng(1)
        a = random_mask(rng)
        assert dsc(a, a) == 1.0
        b = a.copy()
        b[tuple(np.argwhere(a)[0])] = False
        if b.any():
            assert dsc(a, b) < 1.0


class TestSurface:
    def test_surface_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mask = random_mask(rng, (9, 9, 9), 0.5)
            got = sorted(map(tuple, np.argwhere(surface_voxels(mask))))
            want = sorted(surface_points_loop(mask))
            assert got == want

    def test_interior_removed(self):
        mask = np.zeros((7, 7, 7), dtype=bool)
        mask[1:6, 1:6, 1:6] = True
        surf = surface_voxels(mask)
        assert not surf[3, 3, 3]
        assert surf[1, 3, 3]

    def test_border_voxels_are_surface(self):
        mask = np.ones((3, 3, 3), dtype=bool)
        surf = surface_voxels(mask)
        assert not surf[1, 1, 1]  # only the center is interior
        assert int(surf.sum()) == 26


class TestHausdorff:
    def test_identical_masks_zero(self):
        rng = np.random.default_rng(3)
        mask = random_mask(rng)
        assert hausdorff(mask, mask) == 0.0
        assert avg_hausdorff(mask, mask) == 0.0

    def test_two_voxels_known_distance(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[1, 1, 1] = True
        b[6, 1, 1] = True  # 5 voxels apart along x
        s = 0.63281
        assert hausdorff(a, b, (s, s, s)) == pytest.approx(5 * s, abs=1e-12)
        assert avg_hausdorff(a, b, (s, s, s)) == pytest.approx(5 * s, abs=1e-12)

    def test_empty_mask_sentinel(self):
        mask = np.zeros((4, 4, 4), dtype=bool)
        full = np.ones((4, 4, 4), dtype=bool)
        assert math.isinf(hausdorff(mask, full))
        assert math.isinf(avg_hausdorff(full, mask))
        assert hausdorff(mask, mask) == 0.0

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(4)
        spacing = (0.9, 1.1, 1.3)
        for _ in range(15):
            a = random_mask(rng)
            b = random_mask(rng)
            hd = hausdorff(a, b, spacing)
            avd = avg_hausdorff(a, b, spacing)
            o_hd, o_avd = all_pairs_surface_distances(a, b, spacing)
            assert hd == pytest.approx(o_hd, abs=1e-9)
            assert avd == pytest.approx(o_avd, abs=1e-9)
            assert avd <= hd + 1e-12

    def test_symmetry_and_mirror_invariance(self):
        rng = np.random.default_rng(5)
        a = random_mask(rng)
        b = random_mask(rng)
        assert hausdorff(a, b) == pytest.approx(hausdorff(b, a), abs=1e-12)
        assert avg_hausdorff(a, b) == pytest.approx(avg_hausdorff(b, a), abs=1e-12)
        assert hausdorff(a[::-1], b[::-1]) == pytest.approx(hausdorff(a, b), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            hausdorff(np.zeros((3, 3, 3), dtype=bool), np.zeros((3, 3, 4), dtype=bool))


class TestEvaluateDataset:
    def _volume_pair(self, rng, identical=True):
        labels = rng.integers(0, 5, (10, 10, 10)).astype(np.uint8)
        truth = labels_vol(labels)
        pred = labels_vol(labels if identical else (labels + 1) % 5)
        return pred, truth

    def test_identical_pairs_all_perfect(self):
        rng = np.random.default_rng(6)
        pairs = []
        for i in range(3):
            pred, truth = self._volume_pair(rng)
            pairs.append((f"case{i}", pred, truth))
        report = evaluate_dataset(pairs)
        assert len(report.cases) == 3 and not report.errors
        for case in report.cases:
            for m in case.per_structure.values():
                assert m.dsc == 1.0 and m.hd_mm == 0.0 and m.avd_mm == 0.0

    def test_error_isolation(self):
        rng = np.random.default_rng(7)
        good_pred, good_truth = self._volume_pair(rng)
        bad_truth = labels_vol(rng.integers(0, 5, (8, 8, 8)))
        report = evaluate_dataset([("good", good_pred, good_truth),
                                   ("bad", good_pred, bad_truth)])
        assert len(report.cases) == 1
        assert len(report.errors) == 1
        assert report.errors[0]["case_id"] == "bad"

    def test_aggregate_matches_recomputation(self):
        rng = np.random.default_rng(8)
        pairs = []
        for i in range(4):
            pred = labels_vol(rng.integers(0, 5, (9, 9, 9)))
            truth = labels_vol(rng.integers(0, 5, (9, 9, 9)))
            pairs.append((f"case{i}", pred, truth))
        report = evaluate_dataset(pairs)
        agg = report.aggregate()
        for structure in ("kidney", "tumor", "vein", "artery"):
            values = [c.per_structure[structure].dsc for c in report.cases]
            assert agg[structure]["dsc"]["mean"] == pytest.approx(np.mean(values))
            hd_values = np.array([c.per_structure[structure].hd_mm for c in report.cases])
            finite = hd_values[np.isfinite(hd_values)]
            if finite.size:
                assert agg[structure]["hd_mm"]["mean"] == pytest.approx(finite.mean())
            assert agg[structure]["hd_mm"]["infinite"] == int(np.isinf(hd_values).sum())

    def test_csv_columns(self):
        rng = np.random.default_rng(9)
        pred, truth = self._volume_pair(rng)
        report = evaluate_dataset([("c0", pred, truth)])
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "case_id,structure,dsc,hd_mm,avd_mm"
        assert len(lines) == 1 + 4

    def test_metric_invariant_to_background_relabeling(self):
        rng = np.random.default_rng(10)
        labels = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
        truth = labels_vol(labels)
        pred_a = labels_vol(labels)
        m1 = case_metrics(pred_a, truth)
        # background stays code 0 everywhere; vein/artery stay absent
        for s in ("vein", "artery"):
            assert m1.per_structure[s].dsc == 1.0  # both empty convention
