import numpy as np
import pytest

from oracles import flood_fill_components, pool_means, scan_order_first_voxels
from renalseg.components import (avg_pool3, centroid_distance, connected_components,
                                 expand_blocks, max_component)


def partitions_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """Same foreground and same grouping, regardless of id numbering."""
    if not np.array_equal(a > 0, b > 0):
        return False
    fg = a > 0
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


class TestConnectedComponents:
    def test_single_voxel(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[2, 3, 4] = True
        comp_set = connected_components(mask, 26)
        assert comp_set.count == 1
        assert comp_set.components[0].size == 1
        assert comp_set.components[0].centroid == (2.0, 3.0, 4.0)

    def test_opposite_corners_two_components(self):
        mask = np.zeros((8, 8, 8), dtype=bool)
        mask[0, 0, 0] = True
        mask[7, 7, 7] = True
        for connectivity in (6, 26):
            assert connected_components(mask, connectivity).count == 2

    def test_diagonal_neighbors_depend_on_connectivity(self):
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[1, 1, 1] = True
        mask[2, 2, 2] = True
        assert connected_components(mask, 26).count == 1
        assert connected_components(mask, 6).count == 2

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_flood_fill_oracle(self, connectivity):
        rng = np.random.default_rng(42)
        for _ in range(25):
            mask = rng.random((16, 16, 16)) < 0.45
            got = connected_components(mask, connectivity).label_map
            want = flood_fill_components(mask, connectivity)
            assert partitions_equal(got, want)
            # scan-order ids mean the label maps match exactly, not just up
            # to permutation
            assert np.array_equal(got, want)

    def test_sizes_sum_to_foreground(self):
        rng = np.random.default_rng(1)
        for connectivity in (6, 26):
            mask = rng.random((12, 12, 12)) < 0.5
            comp_set = connected_components(mask, connectivity)
            assert sum(c.size for c in comp_set.components) == int(mask.sum())

    def test_centroid_inside_bbox(self):
        rng = np.random.default_rng(2)
        mask = rng.random((10, 10, 10)) < 0.4
        for comp in connected_components(mask, 26).components:
            for ax in range(3):
                assert comp.bbox.lower[ax] <= comp.centroid[ax] <= comp.bbox.upper[ax] - 1

    def test_mirror_invariance(self):
        rng = np.random.default_rng(3)
        mask = rng.random((9, 9, 9)) < 0.45
        direct = connected_components(mask, 26).label_map
        mirrored = connected_components(mask[::-1], 26).label_map[::-1]
        assert partitions_equal(direct, mirrored)

    def test_mean_hu_statistics(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[0:2, 0, 0] = True
        intensity = np.zeros((6, 6, 6))
        intensity[0, 0, 0] = 10.0
        intensity[1, 0, 0] = 30.0
        comp = connected_components(mask, 26, intensity=intensity).components[0]
        assert comp.mean_hu == pytest.approx(20.0)


class TestMaxComponent:
    def test_keeps_larger_cube(self):
        mask = np.zeros((12, 12, 12), dtype=bool)
        mask[0:3, 0:3, 0:3] = True   # 27 voxels
        mask[8:10, 8:10, 8:10] = True  # 8 voxels
        out = max_component(mask, 26)
        assert out[1, 1, 1] and not out[9, 9, 9]
        assert int(out.sum()) == 27

    def test_empty_mask_passes_through(self):
        out = max_component(np.zeros((4, 4, 4), dtype=bool), 26)
        assert not out.any()

    def test_survivor_size_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            mask = rng.random((14, 14, 14)) < 0.35
            out = max_component(mask, 26)
            oracle = flood_fill_components(mask, 26)
            sizes = np.bincount(oracle.ravel())
            expected = sizes[1:].max() if len(sizes) > 1 else 0
            assert int(out.sum()) == int(expected)

    def test_tie_goes_to_scan_order(self):
        mask = np.zeros((8, 8, 8), dtype=bool)
        mask[6, 6, 6] = True  # later in x-fastest scan
        mask[0, 0, 0] = True  # first in scan order
        out = max_component(mask, 26)
        assert out[0, 0, 0] and not out[6, 6, 6]

    def test_output_subset_and_connected(self):
        rng = np.random.default_rng(5)
        mask = rng.random((10, 10, 10)) < 0.4
        out = max_component(mask, 26)
        assert not (out & ~mask).any()
        assert connected_components(out, 26).count in (0, 1)


class TestCentroidDistance:
    def test_identical_points(self):
        assert centroid_distance((1, 2, 3), (1, 2, 3)) == 0.0

    def test_3_4_5(self):
        assert centroid_distance((0, 0, 0), (3, 4, 0)) == pytest.approx(5.0)

    def test_spacing_scaled(self):
        s = 0.63281
        assert centroid_distance((0, 0, 0), (3, 4, 0), (s, s, s)) == pytest.approx(5 * s)


class TestAvgPool:
    def test_full_block_of_ones(self):
        assert avg_pool3(np.ones((3, 3, 3)), (3, 3, 3)).values[0, 0, 0] == 1.0

    def test_single_voxel_in_block(self):
        mask = np.zeros((3, 3, 3))
        mask[1, 2, 0] = 1
        assert avg_pool3(mask, (3, 3, 3)).values[0, 0, 0] == pytest.approx(1 / 27)

    def test_matches_loop_oracle_with_ragged_edges(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            mask = (rng.random((10, 11, 8)) < 0.5).astype(float)
            got = avg_pool3(mask, (3, 3, 3))
            want = pool_means(mask, (3, 3, 3))
            assert got.values.shape == want.shape
            assert np.array_equal(got.values, want)

    def test_complement_sums_to_one_on_full_blocks(self):
        rng = np.random.default_rng(7)
        mask = rng.random((9, 9, 9)) < 0.5
        a = avg_pool3(mask, (3, 3, 3)).values
        b = avg_pool3(~mask, (3, 3, 3)).values
        assert np.allclose(a + b, 1.0)

    def test_block_validation(self):
        with pytest.raises(ValueError):
            avg_pool3(np.ones((3, 3, 3)), (0, 3, 3))

    def test_expand_blocks_round_trip(self):
        block_mask = np.array([[[True, False], [False, True]]])
        out = expand_blocks(block_mask, (3, 3, 3), (3, 5, 6))
        assert out.shape == (3, 5, 6)
        assert out[0, 0, 0] and out[2, 2, 2]
        assert not out[0, 0, 3]
        assert out[0, 3, 3]


def test_scan_order_ids_are_increasing():
    rng = np.random.default_rng(8)
    mask = rng.random((10, 10, 10)) < 0.3
    label_map = connected_components(mask, 26).label_map
    firsts = scan_order_first_voxels(label_map)
    assert firsts == sorted(firsts)
