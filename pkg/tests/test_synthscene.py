"""Scene generator: determinism, surface accuracy, split protocol, renderer consistency."""

import numpy as np
import pytest

from pf3d import synthscene as S
from pf3d.geometry import project_to_camera
from pf3d.tensor import ContractError


def cfg():
    return S.SceneConfig()


class TestGeneration:
    def test_zero_box_config(self):
        sample = S.generate_scene(S.SceneConfig(min_boxes=0, max_boxes=0), seed=3)
        assert sample.gt_boxes == []
        assert len(sample.points) > 100  # ground plane still visible
        # all points on the ground
        np.testing.assert_allclose(sample.points[:, 2], 0.0, atol=1e-9)

    def test_same_seed_bit_identical(self):
        a = S.generate_scene(cfg(), seed=11)
        b = S.generate_scene(cfg(), seed=11)
        assert np.array_equal(a.points, b.points)
        for ia, ib in zip(a.images, b.images):
            assert np.array_equal(ia, ib)
        for da, db in zip(a.depth_maps, b.depth_maps):
            assert np.array_equal(da, db)
        assert len(a.gt_boxes) == len(b.gt_boxes)
        for ba, bb in zip(a.gt_boxes, b.gt_boxes):
            assert (ba.x, ba.y, ba.yaw) == (bb.x, bb.y, bb.yaw)

    def test_box_surface_points_inside_inflated_box(self):
        for seed in range(5):
            sample = S.generate_scene(cfg(), seed=seed)
            for b_idx, box in enumerate(sample.gt_boxes):
                mask = sample.point_object_ids == b_idx
                if not mask.any():
                    continue
                pts = sample.points[mask, :3]
                c, s = np.cos(-box.yaw), np.sin(-box.yaw)
                rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
                local = (pts - [box.x, box.y, box.z]) @ rot.T
                half = box.corners_half() + 1e-6
                assert (np.abs(local) <= half).all()

    def test_boxes_intersect_bev_range(self):
        c = cfg()
        for seed in range(10):
            for box in S.generate_scene(c, seed=seed).gt_boxes:
                assert c.x_min < box.x < c.x_max
                assert c.y_min < box.y < c.y_max

    def test_images_in_unit_range(self):
        sample = S.generate_scene(cfg(), seed=4)
        for img in sample.images:
            assert img.shape == (3, 64, 96)
            assert img.min() >= 0.0 and img.max() <= 1.0
        for dep in sample.depth_maps:
            assert (dep > 0).all()


class TestRendererConsistency:
    def test_lidar_point_depth_matches_image_depth(self):
        checked = 0
        for seed in range(30):
            sample = S.generate_scene(cfg(), seed=100 + seed)
            for cam_i, calib in enumerate(sample.calibs):
                on_box = sample.point_object_ids >= 0
                pts = sample.points[on_box, :3]
                ids = sample.point_object_ids[on_box]
                uv, depth, ok = project_to_camera(pts, calib)
                col = np.floor(uv[:, 0]).astype(int)
                row = np.floor(uv[:, 1]).astype(int)
                inside = ok & (col >= 1) & (col < 95) & (row >= 1) & (row < 63)
                dmap = sample.depth_maps[cam_i]
                omap = sample.object_id_maps[cam_i]
                for n in np.flatnonzero(inside):
                    r, c = row[n], col[n]
                    # "seen" = the pixel and its 4 neighbors hit the same
                    # object on a smooth (non-grazing, non-silhouette) patch
                    if omap[r, c] != ids[n]:
                        continue
                    nb = [dmap[r - 1, c], dmap[r + 1, c], dmap[r, c - 1], dmap[r, c + 1]]
                    if any(omap[rr, cc] != ids[n]
                           for rr, cc in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]):
                        continue
                    if max(abs(v - dmap[r, c]) for v in nb) / dmap[r, c] > 0.005:
                        continue
                    assert abs(dmap[r, c] - depth[n]) / depth[n] < 0.01
                    checked += 1
        assert checked >= 25

    def test_class_balance_matches_prior(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(3)
        c = cfg()
        for _ in range(1000):
            for box in S.sample_boxes(c, rng):
                counts[box.class_id] += 1
        frac = counts / counts.sum()
        assert np.abs(frac - 1 / 3).max() < 0.1 / 3 + 0.02


class TestSplitLabels:
    def test_paper_group_20(self):
        assert S.split_labels(list(range(10)), 0.2) == [0, 5]

    def test_identity_100(self):
        ids = list(range(17))
        assert S.split_labels(ids, 1.0) == ids

    def test_40_percent_filter(self):
        out = S.split_labels(list(range(100)), 0.4)
        assert len(out) == 40
        assert all(i % 5 in (0, 2) for i in out)

    def test_exact_groups_on_0_999(self):
        ids = list(range(1000))
        expect = {
            0.2: {0},
            0.4: {0, 2},
            0.6: {0, 2, 4},
            0.8: {0, 1, 2, 4},
            1.0: {0, 1, 2, 3, 4},
        }
        for frac, groups in expect.items():
            out = S.split_labels(ids, frac)
            assert out == [i for i in ids if i % 5 in groups]

    def test_containment_chain(self):
        ids = list(range(50))
        s20 = set(S.split_labels(ids, 0.2))
        s40 = set(S.split_labels(ids, 0.4))
        s60 = set(S.split_labels(ids, 0.6))
        s80 = set(S.split_labels(ids, 0.8))
        assert s20 < s40 < s60 < s80

    def test_invalid_fraction(self):
        with pytest.raises(ContractError):
            S.split_labels([0, 1, 2], 0.5)

    def test_unsorted_rejected(self):
        with pytest.raises(ContractError):
            S.split_labels([3, 1, 2], 0.2)


class TestCache:
    def test_round_trip(self, tmp_path):
        sample = S.generate_scene(cfg(), seed=42)
        S.save_scene(tmp_path, sample)
        back = S.load_scene(tmp_path, 42)
        assert np.array_equal(back.points, sample.points)
        for a, b in zip(back.images, sample.images):
            assert np.array_equal(a, b)
        for a, b in zip(back.depth_maps, sample.depth_maps):
            assert np.array_equal(a, b)
        assert len(back.gt_boxes) == len(sample.gt_boxes)
        for a, b in zip(back.gt_boxes, sample.gt_boxes):
            assert a == b

    def test_pool_uses_cache(self, tmp_path):
        pool = S.ScenePool(cfg(), base_seed=7, cache_dir=tmp_path)
        first = pool.get(0)
        assert (tmp_path / "7" / "gt.json").exists()
        pool2 = S.ScenePool(cfg(), base_seed=7, cache_dir=tmp_path)
        again = pool2.get(0)
        assert np.array_equal(first.points, again.points)
