import numpy as np
import pytest

from desksr.resize import resize
from desksr.tiler import blend_weights, plan_tiles, tiled_apply


def _accumulate_weights(plan):
    total = np.zeros((plan.height, plan.width))
    for (r, c), w in zip(plan.positions, blend_weights(plan)):
        total[r:r + w.shape[0], c:c + w.shape[1]] += w
    return total


class TestPlan:
    def test_512_square(self):
        plan = plan_tiles(512, 512, tile=256, overlap=32)
        assert plan.row_anchors == (0, 224, 256)
        assert plan.col_anchors == (0, 224, 256)
        assert len(plan.positions) == 9

    def test_512_by_768(self):
        plan = plan_tiles(512, 768, tile=256, overlap=32)
        assert len(plan.row_anchors) == 3
        assert len(plan.col_anchors) == 4
        assert len(plan.positions) == 12

    def test_small_image_single_tile(self):
        plan = plan_tiles(100, 80, tile=256, overlap=32)
        assert plan.positions == [(0, 0)]

    def test_every_pixel_covered(self):
        for h, w in [(512, 768), (300, 511), (256, 256), (40, 700)]:
            plan = plan_tiles(h, w, tile=256, overlap=32)
            covered = np.zeros((h, w), dtype=bool)
            for r, c in plan.positions:
                covered[r:r + plan.tile, c:c + plan.tile] = True
            assert covered.all()

    def test_anchors_strictly_increasing(self):
        plan = plan_tiles(1000, 1000, tile=128, overlap=16)
        assert list(plan.row_anchors) == sorted(set(plan.row_anchors))
        assert plan.row_anchors[-1] == 1000 - 128

    def test_overlap_must_be_smaller_than_tile(self):
        with pytest.raises(ValueError):
            plan_tiles(512, 512, tile=64, overlap=64)

    def test_12mp_plan_enumerated(self):
        plan = plan_tiles(3072, 4096, tile=256, overlap=32)
        # stride 224: ceil((3072-256)/224)+1 anchors per axis, dedup'd
        assert len(plan.row_anchors) == len(set(plan.row_anchors))
        assert plan.row_anchors[0] == 0 and plan.row_anchors[-1] == 3072 - 256
        assert plan.col_anchors[-1] == 4096 - 256


class TestBlend:
    def test_single_tile_all_ones(self):
        plan = plan_tiles(100, 80, tile=256, overlap=32)
        (w,) = blend_weights(plan)
        np.testing.assert_array_equal(w, 1.0)

    def test_two_tile_seam_crosses_half(self):
        plan = plan_tiles(64, 96, tile=64, overlap=32)
        assert plan.col_anchors == (0, 32)
        w0, w1 = blend_weights(plan)
        seam0 = w0[0, 32:64]
        seam1 = w1[0, 0:32]
        np.testing.assert_allclose(seam0 + seam1, 1.0, atol=1e-9)
        assert seam1[15] < 0.5 < seam1[16]
        assert abs((seam1[15] + seam1[16]) - 1.0) < 1e-9

    def test_partition_of_unity_512(self):
        plan = plan_tiles(512, 512, tile=256, overlap=32)
        total = _accumulate_weights(plan)
        assert np.abs(total - 1.0).max() <= 1e-9

    def test_partition_of_unity_irregular_and_hann(self):
        for profile in ("linear_ramp", "hann"):
            plan = plan_tiles(300, 511, tile=128, overlap=24, weight_profile=profile)
            total = _accumulate_weights(plan)
            assert np.abs(total - 1.0).max() <= 1e-9


class TestTiledApply:
    def test_identity_law(self):
        rng = np.random.default_rng(0)
        img = rng.random((300, 320, 3))
        plan = plan_tiles(300, 320, tile=128, overlap=32)
        out = tiled_apply(lambda t: t, img, plan, k=1)
        assert np.abs(out - img).max() <= 1e-12

    def test_wrong_output_size_names_tile(self):
        img = np.zeros((300, 320, 3), dtype=np.float32)
        plan = plan_tiles(300, 320, tile=128, overlap=32)
        with pytest.raises(ValueError, match=r"\(0, 0\)"):
            tiled_apply(lambda t: t[:-1], img, plan, k=1)

    def test_tiled_bicubic_matches_whole_image(self):
        rng = np.random.default_rng(1)
        img = rng.random((256, 288, 3))
        plan = plan_tiles(256, 288, tile=128, overlap=32)
        k = 4
        tiled = tiled_apply(lambda t: resize(t, k, "bicubic"), img, plan, k=k)
        whole = resize(img, k, "bicubic")

        seam = np.zeros(img.shape[:2], dtype=bool)
        for anchors, axis_len, axis in ((plan.row_anchors, 256, 0), (plan.col_anchors, 288, 1)):
            for a in anchors:
                for edge in (a, a + plan.tile):
                    if edge <= 0 or edge >= axis_len:
                        continue
                    lo, hi = max(0, edge - plan.overlap), min(axis_len, edge + plan.overlap)
                    if axis == 0:
                        seam[lo:hi, :] = True
                    else:
                        seam[:, lo:hi] = True
        seam_up = np.repeat(np.repeat(seam, k, axis=0), k, axis=1)[..., None]
        seam_up = np.broadcast_to(seam_up, whole.shape)

        diff = np.abs(tiled - whole)
        assert diff[~seam_up].max() <= 1e-6
        assert diff[seam_up].mean() <= 1e-3
