"""Pre-training: mask bookkeeping, loss oracles, disjointness, full-step checks."""

import warnings

import numpy as np
import pytest

from pf3d import pretrain as P
from pf3d import tensor as T
from pf3d.gradcheck import check_gradients
from pf3d.model import ModelConfig
from pf3d.synthscene import SceneConfig, generate_scene
from pf3d.tensor import ContractError, Tensor


class TestMaskPlan:
    def test_exact_ceil_counts(self):
        rng = np.random.default_rng(0)
        plan = P.make_mask_plan(10, 10, rng)
        hi, lo = (plan.img_masked, plan.vox_masked)
        if plan.high_modality == "voxel":
            hi, lo = lo, hi
        assert len(hi) == 7  # ceil(0.7 * 10)
        assert len(lo) == 3  # ceil(0.3 * 10)

    def test_zero_ratio_guard(self):
        plan = P.make_mask_plan(5, 5, np.random.default_rng(1), r_hi=0.0, r_lo=0.0)
        assert len(plan.img_masked) == 0 and len(plan.vox_masked) == 0
        assert len(plan.img_unmasked) == 5

    def test_partition_properties(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n_img = int(rng.integers(1, 40))
            n_vox = int(rng.integers(1, 40))
            plan = P.make_mask_plan(n_img, n_vox, rng, pixels_per_token=4)
            for masked, unmasked, n in [
                (plan.img_masked, plan.img_unmasked, n_img),
                (plan.vox_masked, plan.vox_unmasked, n_vox),
            ]:
                assert len(set(masked) & set(unmasked)) == 0
                assert sorted(set(masked) | set(unmasked)) == list(range(n))
            assert plan.n_mp == len(plan.img_masked) * 4
            assert plan.n_up == len(plan.img_unmasked) * 4

    def test_coin_is_fair(self):
        rng = np.random.default_rng(3)
        highs = sum(
            P.make_mask_plan(4, 4, rng).high_modality == "image" for _ in range(10_000)
        )
        assert abs(highs / 10_000 - 0.5) < 0.02


class TestInjectNoise:
    def test_sigma_zero_identity(self):
        tokens = np.random.default_rng(4).random((5, 6))
        noised, rec = P.inject_noise(tokens, 0.0, np.random.default_rng(5))
        assert np.array_equal(noised, tokens)
        assert not rec.noise.any()

    def test_record_is_bit_exact(self):
        # the noised tokens are exactly tokens + record (same float op),
        # so the record reproduces the supervision target bit-for-bit
        tokens = np.random.default_rng(6).random((40, 8))
        noised, rec = P.inject_noise(tokens, 0.05, np.random.default_rng(7))
        assert np.array_equal(noised, tokens + rec.noise)
        assert rec.noise.any()

    def test_sample_std_matches_sigma(self):
        tokens = np.zeros((1000, 100))
        _, rec = P.inject_noise(tokens, 0.05, np.random.default_rng(8))
        assert abs(rec.noise.std() / 0.05 - 1.0) < 0.02


def naive_chamfer(a, b):
    total = 0.0
    for x in a:
        total += min(((x - y) ** 2).sum() for y in b)
    total /= len(a)
    back = 0.0
    for y in b:
        back += min(((x - y) ** 2).sum() for x in a)
    return total + back / len(b) if False else total + back / len(b)


def naive_chamfer_clean(a, b):
    fwd = np.mean([min(((x - y) ** 2).sum() for y in b) for x in a])
    bwd = np.mean([min(((y - x) ** 2).sum() for x in a) for y in b])
    return fwd + bwd


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(9).random((6, 3))
        assert P.chamfer_loss(pts, pts).item() == 0.0

    def test_unit_offset(self):
        out = P.chamfer_loss(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]))
        assert out.item() == 2.0

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        a, b = rng.random((5, 3)), rng.random((9, 3))
        assert abs(P.chamfer_loss(a, b).item() - P.chamfer_loss(b, a).item()) < 1e-15

    def test_matches_naive_oracle_100_cases(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a = rng.random((int(rng.integers(1, 8)), 3))
            b = rng.random((int(rng.integers(1, 8)), 3))
            got = P.chamfer_loss(a, b).item()
            assert abs(got - naive_chamfer_clean(a, b)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            P.chamfer_loss(np.zeros((0, 3)), np.zeros((1, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(12)
        gt = rng.random((5, 3))
        rec = Tensor(rng.random((7, 3)), requires_grad=True)
        check_gradients(lambda: P.chamfer_loss(gt, rec), [rec])


def naive_intensity_chamfer(gp, gi, rp, ri, lam, valid=None):
    valid = np.ones(len(gp), dtype=bool) if valid is None else valid
    fwd = 0.0
    for x, xi, ok in zip(gp, gi, valid):
        d = [((x - y) ** 2).sum() for y in rp]
        j = int(np.argmin(d))
        fwd += d[j] + (lam * abs(xi - ri[j]) if ok else 0.0)
    fwd /= len(gp)
    bwd = 0.0
    for y, yi in zip(rp, ri):
        d = [((y - x) ** 2).sum() for x in gp]
        j = int(np.argmin(d))
        bwd += d[j] + (lam * abs(yi - gi[j]) if valid[j] else 0.0)
    bwd /= len(rp)
    return fwd + bwd


class TestIntensityChamfer:
    def test_equal_everything_zero(self):
        rng = np.random.default_rng(13)
        pts, inten = rng.random((5, 3)), rng.random(5)
        total, geom, part = P.intensity_chamfer_loss(pts, inten, pts, inten, 1.0)
        assert total.item() == 0.0

    def test_equal_geometry_offset_intensity(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]])
        gi = np.array([0.5, 0.5, 0.5])
        ri = gi + 0.2
        total, geom, part = P.intensity_chamfer_loss(pts, gi, pts, ri, 1.0)
        assert abs(total.item() - 0.4) < 1e-12
        assert geom.item() == 0.0

    def test_matches_naive_oracle_100_cases(self):
        rng = np.random.default_rng(14)
        for case in range(100):
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            gp, rp = rng.random((n, 3)), rng.random((m, 3))
            gi, ri = rng.random(n), rng.random(m)
            lam = float(rng.uniform(0.3, 2.0))
            valid = rng.random(n) < 0.8 if case % 3 == 0 else None
            total, _, _ = P.intensity_chamfer_loss(gp, gi, rp, ri, lam, valid)
            want = naive_intensity_chamfer(gp, gi, rp, ri, lam, valid)
            assert abs(total.item() - want) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(15)
        gp, gi = rng.random((4, 3)), rng.random(4)
        rp = Tensor(rng.random((6, 3)), requires_grad=True)
        ri = Tensor(rng.random(6), requires_grad=True)
        check_gradients(
            lambda: P.intensity_chamfer_loss(gp, gi, rp, ri, 0.7)[0], [rp, ri]
        )


class TestImageLosses:
    def test_perfect_reconstruction(self):
        t = np.random.default_rng(16).random((4, 12))
        assert P.recon_loss_image(Tensor(t), t).item() == 0.0

    def test_constant_offset(self):
        t = np.random.default_rng(17).random((4, 12))
        assert abs(P.recon_loss_image(Tensor(t + 0.5), t).item() - 0.5) < 1e-12

    def test_matches_independent_mean_abs(self):
        rng = np.random.default_rng(18)
        for _ in range(100):
            pred = rng.random((3, 7))
            target = rng.random((3, 7))
            got = P.recon_loss_image(Tensor(pred), target).item()
            assert abs(got - np.abs(pred - target).mean()) < 1e-12

    def test_empty_warns_and_zero(self):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            out = P.recon_loss_image(Tensor(np.zeros((0, 4))), np.zeros((0, 4)))
        assert out.item() == 0.0
        assert len(w) == 1

    def test_denoise_zero_at_target(self):
        rng = np.random.default_rng(19)
        noise = rng.normal(0, 0.05, (6, 5))
        rec = P.NoiseRecord(noise, 0.05)
        assert P.denoise_loss_image(Tensor(noise), rec).item() == 0.0

    def test_denoise_zero_prediction_expectation(self):
        # E|N(0, sigma)| = sigma * sqrt(2/pi); sampling oracle at 1e5 draws
        rng = np.random.default_rng(20)
        noise = rng.normal(0, 0.05, (1000, 100))
        rec = P.NoiseRecord(noise, 0.05)
        got = P.denoise_loss_image(Tensor(np.zeros_like(noise)), rec).item()
        want = 0.05 * np.sqrt(2 / np.pi)
        assert abs(got / want - 1.0) < 0.02


class TestDenoiseVoxel:
    def test_identical_sets_zero(self):
        n = np.random.default_rng(21).normal(0, 0.05, (5, 3))
        assert P.denoise_loss_voxel(Tensor(n), n).item() == 0.0

    def test_matches_chamfer(self):
        rng = np.random.default_rng(22)
        a, b = rng.random((4, 3)), rng.random((6, 3))
        assert (
            P.denoise_loss_voxel(Tensor(b), a).item()
            == P.chamfer_loss(a, Tensor(b)).item()
        )


class TestDepthLoss:
    def test_zero_at_exact(self):
        d = np.random.default_rng(23).uniform(1, 20, 50)
        assert abs(P.depth_loss(d, Tensor(d)).item()) < 1e-24

    def test_double_depth_is_one(self):
        d = np.random.default_rng(24).uniform(1, 20, 50)
        out = P.depth_loss(d, Tensor(2 * d)).item()
        assert abs(out - 1.0) < 1e-12

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(25)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            d = rng.uniform(0.5, 30, n)
            dh = rng.uniform(0.5, 30, n)
            got = P.depth_loss(d, Tensor(dh)).item()
            lg = np.log(d) - np.log(dh)
            want = (lg**2).mean() - lg.mean() ** 2 + (((d - dh) / d).mean()) ** 2
            assert abs(got - want) < 1e-12

    def test_nonpositive_clamped_with_counter(self):
        from pf3d.diagnostics import counters

        counters.reset()
        d = np.array([1.0, -2.0, 0.0])
        out = P.depth_loss(d, Tensor(np.array([1.0, 1.0, 1.0])))
        assert np.isfinite(out.item())
        assert counters.get("depth_loss.clamped_targets") == 2

    def test_gradient(self):
        rng = np.random.default_rng(26)
        d = rng.uniform(1, 10, 8)
        raw = Tensor(rng.standard_normal(8), requires_grad=True)
        check_gradients(lambda: P.depth_loss(d, T.exp(raw) * 5.0), [raw])


class TestBatchedChamfer:
    def test_matches_single_pair_calls(self):
        rng = np.random.default_rng(27)
        k, c, n = 4, 3, 6
        gt = rng.random((k, c, 3))
        rec = rng.random((k, n, 3))
        gi = rng.random((k, c))
        ri = rng.random((k, n))
        geom, inten = P._batched_chamfer(gt, Tensor(rec), gi, Tensor(ri), None, 0.8)
        for v in range(k):
            total, g_ref, i_ref = P.intensity_chamfer_loss(
                gt[v], gi[v], rec[v], ri[v], 0.8
            )
            assert abs(geom.data[v] - g_ref.item()) < 1e-12
            assert abs(inten.data[v] - i_ref.item()) < 1e-12


def micro_config():
    return ModelConfig(
        embed_dim=8, heads=2, window=2, ffn_hidden=16, dec_dim=8, dec_heads=2,
        dec_ffn=16, n_queries=4, patch=8, voxel_points=4, depth_bins=4,
        head_hidden=16, n_x=16, n_y=16,
    )


def micro_scene(seed=0):
    return generate_scene(SceneConfig(), seed=seed)


class TestPretrainStep:
    def test_total_is_exact_sum_and_finite(self):
        from pf3d.pretrain import PretrainModel, pretrain_step

        model = PretrainModel(micro_config(), seed=1).eval()
        scene = micro_scene(3)
        total, parts = pretrain_step(scene, model, np.random.default_rng(4))
        component_sum = (
            parts["L_recon_img"] + parts["L_recon_vox"] + parts["L_den_img"]
            + parts["L_den_vox"] + parts["L_xmodal_int"] + parts["L_depth"]
        )
        assert total.item() == parts["total"]
        assert abs(parts["total"] - component_sum) < 1e-12
        assert all(np.isfinite(v) for v in parts.values())
        assert all(v >= 0 for v in parts.values())

    def test_fuzz_many_scenes_finite(self):
        from pf3d.pretrain import PretrainModel, pretrain_step

        model = PretrainModel(micro_config(), seed=2).eval()
        for seed in range(12):
            scene = micro_scene(100 + seed)
            total, parts = pretrain_step(scene, model, np.random.default_rng(seed))
            assert np.isfinite(total.item())

    def test_masked_unmasked_losses_disjoint(self):
        # zeroing predictions on unmasked tokens must not change
        # reconstruction losses: they read masked features only, and the
        # mask plan partitions the token set
        rng = np.random.default_rng(28)
        plan = P.make_mask_plan(12, 9, rng, pixels_per_token=4)
        assert set(plan.img_masked).isdisjoint(plan.img_unmasked)
        assert set(plan.vox_masked).isdisjoint(plan.vox_unmasked)

    def test_gradients_micro(self):
        from pf3d.pretrain import PretrainModel, pretrain_step

        cfg = ModelConfig(
            embed_dim=8, heads=2, window=2, ffn_hidden=16, patch=8,
            voxel_points=4, depth_bins=4, head_hidden=8,
            n_x=8, n_y=8, s_x=2.0, s_y=2.0, n_z=4,
        )
        model = PretrainModel(cfg, seed=5).eval()
        scene = generate_scene(
            SceneConfig(image_width=32, image_height=16, n_azimuth=24, n_elevation=8),
            seed=9,
        )
        leaves = [
            model.mask_patch,
            model.mask_voxel,
            model.head_vox_recon.layers[0].weight,
            model.head_depth.layers[1].weight,
            model.backbone.image_encoder.blocks[0].conv.weight,
            model.backbone.voxel_encoder.point_mlp.layers[0].weight,
            model.backbone.depth_head.weight,
            model.backbone.lift_reduce.weight,
        ]

        def loss():
            total, _ = pretrain_step(scene, model, np.random.default_rng(77))
            return total

        worst = check_gradients(loss, leaves, max_coords_per_leaf=2)
        assert worst < 1e-4
