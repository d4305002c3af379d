import numpy as np
import pytest

from oracles import bbox_of, nearest_label_ok
from renalseg.errors import EmptyForegroundError, ZeroVarianceError
from renalseg.preprocess import (AugmentParams, ForegroundStats, RoiBox, augment,
                                 compute_foreground_stats, expand_box, resample,
                                 resample_to_grid, self_adapting_crop, zscore_normalize)
from renalseg.volume import LabelVolume, ScalarVolume, VolumeHeader


def scalar(voxels, spacing=(1.0, 1.0, 1.0)):
    voxels = np.asarray(voxels, dtype=np.float32)
    return ScalarVolume(header=VolumeHeader(shape=voxels.shape, spacing=spacing), voxels=voxels)


def labels_vol(labels, spacing=(1.0, 1.0, 1.0)):
    labels = np.asarray(labels, dtype=np.uint8)
    return LabelVolume(header=VolumeHeader(shape=labels.shape, spacing=spacing), labels=labels)


class TestResample:
    def test_identity_spacing_is_exact(self):
        rng = np.random.default_rng(0)
        vol = scalar(rng.normal(size=(7, 6, 5)), spacing=(0.8, 1.1, 1.4))
        out = resample(vol, (0.8, 1.1, 1.4))
        assert out.shape == vol.shape
        assert np.array_equal(out.voxels, vol.voxels)

    @pytest.mark.parametrize("target", [(0.5, 0.5, 0.5), (2.0, 1.0, 0.75), (1.3, 1.3, 1.3)])
    def test_linear_field_reproduced(self, target):
        shape = (10, 9, 8)
        i, j, k = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
        vol = scalar(i + 2 * j + 3 * k)
        out = resample(vol, target)
        oi, oj, ok = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in out.shape],
                                 indexing="ij")
        expected = oi * target[0] + 2 * oj * target[1] + 3 * ok * target[2]
        assert np.abs(out.voxels - expected).max() < 1e-4

    def test_output_shape_rule(self):
        vol = scalar(np.zeros((10, 10, 10)), spacing=(1.0, 1.0, 1.0))
        out = resample(vol, (0.63281, 0.63281, 0.63281))
        # round-half-up of 10/0.63281 = 15.80... -> 16
        assert out.shape == (16, 16, 16)
        assert out.header.spacing == (0.63281, 0.63281, 0.63281)

    def test_world_extent_preserved_within_one_voxel(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            shape = tuple(rng.integers(4, 20, 3))
            spacing = tuple(rng.uniform(0.4, 3.0, 3))
            target = tuple(rng.uniform(0.4, 3.0, 3))
            vol = scalar(np.zeros(shape), spacing=spacing)
            out = resample(vol, target)
            for ax in range(3):
                extent_in = shape[ax] * spacing[ax]
                extent_out = out.shape[ax] * target[ax]
                assert abs(extent_in - extent_out) <= target[ax] + 1e-9

    def test_label_resample_matches_nearest_oracle(self):
        rng = np.random.default_rng(7)
        vol = labels_vol(rng.integers(0, 5, (12, 12, 12)))
        out = resample(vol, (2.0, 2.0, 2.0))
        ratio = np.array([2.0, 2.0, 2.0])
        assert nearest_label_ok(vol.labels, out.labels, ratio)

    def test_label_resample_never_invents_classes(self):
        rng = np.random.default_rng(8)
        for seed in range(10):
            arr = np.zeros((9, 9, 9), dtype=np.uint8)
            arr[rng.integers(0, 9, 30), rng.integers(0, 9, 30), rng.integers(0, 9, 30)] = \
                rng.integers(1, 5, 30).astype(np.uint8)
            vol = labels_vol(arr)
            out = resample(vol, tuple(rng.uniform(0.5, 2.5, 3)))
            assert set(np.unique(out.labels)) <= set(np.unique(arr))

    def test_bad_spacing_rejected(self):
        vol = scalar(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            resample(vol, (1.0, -1.0, 1.0))

    def test_resample_to_grid_round_trip_shape(self):
        rng = np.random.default_rng(9)
        vol = labels_vol(rng.integers(0, 5, (11, 10, 9)))
        down = resample(vol, (1.7, 1.7, 1.7))
        back = resample_to_grid(down, vol.header)
        assert back.shape == vol.shape


class TestForegroundStats:
    def test_two_point_case(self):
        image = scalar(np.array([[[10.0, 20.0]]]))
        labels = labels_vol(np.array([[[1, 1]]]))
        stats = compute_foreground_stats([(image, labels)])
        assert stats.mean == pytest.approx(15.0)
        assert stats.std == pytest.approx(5.0)  # population std
        assert stats.voxel_count == 2

    def test_constant_foreground_rejected(self):
        image = scalar(np.full((2, 2, 2), 42.0))
        labels = labels_vol(np.ones((2, 2, 2)))
        with pytest.raises(ZeroVarianceError):
            compute_foreground_stats([(image, labels)])

    def test_empty_foreground_rejected(self):
        image = scalar(np.zeros((2, 2, 2)))
        labels = labels_vol(np.zeros((2, 2, 2)))
        with pytest.raises(EmptyForegroundError):
            compute_foreground_stats([(image, labels)])

    def test_matches_concatenate_oracle(self):
        rng = np.random.default_rng(21)
        cases = []
        pool = []
        for _ in range(3):
            img = rng.normal(50, 30, (6, 7, 8))
            lbl = rng.integers(0, 3, (6, 7, 8)).astype(np.uint8)
            lbl = np.clip(lbl, 0, 4)
            cases.append((scalar(img), labels_vol(lbl)))
            pool.append(img[lbl > 0])
        stats = compute_foreground_stats(cases)
        ref = np.concatenate(pool)
        assert stats.mean == pytest.approx(float(ref.mean()), rel=1e-6)
        assert stats.std == pytest.approx(float(ref.std()), rel=1e-6)
        assert stats.voxel_count == ref.size


class TestZScore:
    def test_mean_maps_to_zero_and_one_sigma_to_one(self):
        stats = ForegroundStats(mean=40.0, std=25.0, voxel_count=10)
        image = scalar(np.array([[[40.0, 65.0]]]))
        out = zscore_normalize(image, stats)
        assert out.voxels.reshape(-1)[0] == pytest.approx(0.0)
        assert out.voxels.reshape(-1)[1] == pytest.approx(1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        stats = ForegroundStats(mean=12.0, std=7.5, voxel_count=5)
        image = scalar(rng.normal(30, 50, (5, 5, 5)))
        normalized = zscore_normalize(image, stats)
        back = normalized.voxels * stats.std + stats.mean
        assert np.abs(back - image.voxels).max() < 1e-4

    def test_fitted_dataset_normalizes_to_unit_stats(self):
        rng = np.random.default_rng(13)
        image = scalar(rng.normal(55, 22, (16, 16, 16)))
        labels = labels_vol((rng.random((16, 16, 16)) < 0.4).astype(np.uint8))
        stats = compute_foreground_stats([(image, labels)])
        out = zscore_normalize(image, stats)
        fg = out.voxels[labels.labels > 0].astype(np.float64)
        assert abs(fg.mean()) < 1e-5
        assert abs(fg.std() - 1.0) < 1e-5


class TestAugment:
    def test_identity_params(self):
        rng = np.random.default_rng(5)
        image = scalar(rng.normal(size=(8, 8, 8)))
        labels = labels_vol(rng.integers(0, 5, (8, 8, 8)))
        out_img, out_lbl = augment(image, labels, AugmentParams())
        assert np.array_equal(out_lbl.labels, labels.labels)
        assert np.abs(out_img.voxels - image.voxels).max() < 1e-5

    def test_mirror_twice_is_identity(self):
        rng = np.random.default_rng(6)
        image = scalar(rng.normal(size=(7, 8, 9)))
        labels = labels_vol(rng.integers(0, 5, (7, 8, 9)))
        params = AugmentParams(mirror=(True, False, False))
        once_img, once_lbl = augment(image, labels, params)
        twice_img, twice_lbl = augment(once_img, once_lbl, params)
        assert np.array_equal(twice_lbl.labels, labels.labels)
        assert np.abs(twice_img.voxels - image.voxels).max() < 1e-4

    def test_labels_stay_subset_of_inputs(self):
        rng = np.random.default_rng(12)
        for seed in range(8):
            image = scalar(rng.normal(size=(10, 10, 10)))
            arr = rng.integers(0, 5, (10, 10, 10)).astype(np.uint8)
            arr[0, 0, 0] = 0  # background always present (fill value)
            labels = labels_vol(arr)
            params = AugmentParams.random(np.random.default_rng(seed))
            _, out_lbl = augment(image, labels, params)
            assert set(np.unique(out_lbl.labels)) <= set(np.unique(arr))

    def test_shape_mismatch_rejected(self):
        image = scalar(np.zeros((4, 4, 4)))
        labels = labels_vol(np.zeros((4, 4, 5)))
        with pytest.raises(ValueError):
            augment(image, labels, AugmentParams())

    def test_rotation_bounds_validated(self):
        with pytest.raises(ValueError):
            AugmentParams(rotation=(4.0, 0.0, 0.0))
        with pytest.raises(ValueError):
            AugmentParams(scale=0.4)


class TestSelfAdaptingCrop:
    def _cube_volume(self, side, grid=64):
        arr = np.zeros((grid, grid, grid), dtype=np.uint8)
        lo = (grid - side) // 2
        arr[lo:lo + side, lo:lo + side, lo:lo + side] = 1
        image = scalar(np.random.default_rng(0).normal(size=(grid, grid, grid)))
        return labels_vol(arr), image, lo

    def test_small_component_yields_nothing(self):
        mask, image, _ = self._cube_volume(10)  # 1000 voxels, under the 2000 cutoff
        assert self_adapting_crop(mask, image, 1.0) == []

    def test_tight_box_for_qualifying_cube(self):
        mask, image, lo = self._cube_volume(15)  # 3375 voxels
        rois = self_adapting_crop(mask, image, 1.0)
        assert len(rois) == 1
        box, cropped, cropped_mask = rois[0]
        assert box.lower == (lo, lo, lo)
        assert box.upper == (lo + 15, lo + 15, lo + 15)
        assert cropped.shape == (15, 15, 15)
        assert cropped_mask.labels.all()

    def test_expansion_against_bbox_oracle(self):
        mask, image, lo = self._cube_volume(15)
        rois = self_adapting_crop(mask, image, 1.5)
        box = rois[0][0]
        o_lower, o_upper = bbox_of(mask.labels > 0)
        assert o_lower == (lo, lo, lo) and o_upper == (lo + 15, lo + 15, lo + 15)
        # round(15 * 1.5) = 23, centered on the cube center, clamped
        assert all(u - l == 23 for l, u in zip(box.lower, box.upper))
        center = (lo + lo + 15) / 2.0
        for l, u in zip(box.lower, box.upper):
            assert (l + u) / 2.0 == pytest.approx(center, abs=0.51)

    def test_roi_contains_component_after_clamping(self):
        grid = 64
        arr = np.zeros((grid, grid, grid), dtype=np.uint8)
        arr[0:15, 0:15, 0:15] = 1  # flush against the volume corner
        mask = labels_vol(arr)
        image = scalar(np.zeros((grid, grid, grid)))
        rois = self_adapting_crop(mask, image, 1.5)
        box = rois[0][0]
        assert box.lower == (0, 0, 0)
        assert all(u >= 15 for u in box.upper)


def test_expand_box_shift_keeps_original():
    lower, upper = expand_box((2, 2, 2), (6, 6, 6), 1.5, (64, 64, 64))
    assert all(l <= 2 for l in lower)
    assert all(u >= 6 for u in upper)


def test_roibox_json_round_trip():
    box = RoiBox(lower=(1, 2, 3), upper=(4, 5, 6), expansion=1.25)
    assert RoiBox.from_json(box.to_json()) == box
