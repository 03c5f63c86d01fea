"""Harness: optimizer, schedule, checkpoint round-trips, smoke runs, determinism."""

import dataclasses
import json

import numpy as np
import pytest

from pf3d import harness as H
from pf3d.model import Detector, ModelConfig
from pf3d.synthscene import SceneConfig, ScenePool
from pf3d.tensor import ContractError, Parameter


def tiny_model_cfg():
    return ModelConfig(
        embed_dim=8, heads=2, window=2, ffn_hidden=16, dec_dim=8, dec_heads=2,
        dec_ffn=16, n_queries=6, patch=8, voxel_points=4, depth_bins=4,
        head_hidden=16,
    )


def tiny_train_cfg(tmp_path, **over):
    base = dict(
        mode="detect", epochs=2, batch_size=4, seed=0, peak_lr=1e-3,
        n_scenes=4, eval_scenes=2, out_dir=str(tmp_path / "run"),
        model=tiny_model_cfg(),
        scene=SceneConfig(image_width=32, image_height=16, n_azimuth=24,
                          n_elevation=8),
    )
    base.update(over)
    return H.TrainConfig(**base)


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = Parameter(np.array([1.0, -2.0]), name="p")
        p.grad = np.zeros(2)
        opt = H.AdamW([("p", p)], weight_decay=0.0)
        opt.step(1e-2)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_descent_on_quadratic(self):
        p = Parameter(np.array([1.0]), name="p")
        opt = H.AdamW([("p", p)], weight_decay=0.0)
        p.grad = 2 * p.data
        opt.step(1e-1)
        assert abs(p.data[0]) < 1.0

    def test_convergence_200_steps(self):
        rng = np.random.default_rng(0)
        p = Parameter(rng.standard_normal(5), name="p")
        opt = H.AdamW([("p", p)], weight_decay=0.0)
        for t in range(200):
            p.grad = 2 * p.data
            opt.step(0.3 * 0.97**t)
        assert np.linalg.norm(p.data) < 1e-3

    def test_nan_grad_aborts(self):
        p = Parameter(np.array([1.0]), name="p")
        p.grad = np.array([np.nan])
        opt = H.AdamW([("p", p)])
        with pytest.raises(H.NanGradientError):
            opt.step(1e-2)
        np.testing.assert_array_equal(p.data, [1.0])

    def test_lr_zero_leaves_params(self):
        p = Parameter(np.array([3.0]), name="p")
        p.grad = np.array([1.0])
        opt = H.AdamW([("p", p)])
        opt.step(0.0)
        np.testing.assert_array_equal(p.data, [3.0])

    def test_skipped_params_without_grad(self):
        p = Parameter(np.array([3.0]), name="p")
        p.grad = None
        H.AdamW([("p", p)]).step(1e-2)
        np.testing.assert_array_equal(p.data, [3.0])


class TestLrSchedule:
    def sched(self):
        return H.LrSchedule(warmup_steps=100, peak=1e-3, floor=1e-6,
                            total_steps=1000)

    def test_step_zero_initial(self):
        assert H.lr_at(0, self.sched()) == 1e-4  # init_frac * peak

    def test_peak_at_warmup(self):
        assert H.lr_at(100, self.sched()) == 1e-3

    def test_floor_at_final_step(self):
        assert abs(H.lr_at(1000, self.sched()) - 1e-6) < 1e-12
        assert abs(H.lr_at(999, self.sched()) - 1e-6) < 1e-8

    def test_monotone_after_peak(self):
        s = self.sched()
        vals = [H.lr_at(t, s) for t in range(100, 1001, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ContractError):
            H.lr_at(-1, self.sched())


class TestConfigRoundTrip:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_train_cfg(tmp_path, epochs=7, peak_lr=3e-3)
        text = H.config_to_json(cfg)
        back = H.config_from_json(text)
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError):
            H.config_from_json(json.dumps({"not_a_field": 1}))

    def test_hash_stable_and_sensitive(self, tmp_path):
        cfg = tiny_train_cfg(tmp_path)
        assert H.config_hash(cfg) == H.config_hash(tiny_train_cfg(tmp_path))
        other = dataclasses.replace(cfg, epochs=99)
        assert H.config_hash(other) != H.config_hash(cfg)


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        cfg = tiny_model_cfg()
        model = Detector(cfg, seed=3)
        opt = H.AdamW(list(model.named_parameters()))
        pool = ScenePool(SceneConfig(image_width=32, image_height=16,
                                     n_azimuth=24, n_elevation=8), 50)
        scene = pool.get(0)
        model.eval()
        before = model(scene).final.logits.data.copy()
        path = tmp_path / "ck.pf3d"
        rng = np.random.default_rng(9)
        rng.random(3)
        H.save_checkpoint(path, model, opt, 5, "abc123", rng)

        model2 = Detector(cfg, seed=77)  # different init
        ck = H.load_checkpoint(path)
        assert ck.epoch == 5 and ck.config_hash == "abc123"
        own = dict(model2.named_parameters())
        for name, arr in ck.params.items():
            own[name].data = arr
        model2.eval()
        after = model2(scene).final.logits.data
        assert np.array_equal(before, after)
        # optimizer moments and rng state survive too
        assert ck.opt_t == opt.t
        some = next(iter(ck.opt_m))
        assert np.array_equal(ck.opt_m[some], opt.m[some])
        rng2 = np.random.default_rng(1)
        rng2.bit_generator.state = ck.rng_state
        assert rng2.random() == rng.random()

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError) as e:
            H.load_checkpoint(tmp_path / "nope.pf3d")
        assert "nope.pf3d" in str(e.value)


class TestSmokeRuns:
    def test_detect_smoke_finite_and_deterministic(self, tmp_path):
        cfg = tiny_train_cfg(tmp_path)
        res = H.run_detect(cfg)
        assert all(np.isfinite(r["loss"]) for r in res["epochs"])
        assert res["mAP"] is not None
        log1 = open(res["log"]).read()

        cfg2 = dataclasses.replace(cfg, out_dir=str(tmp_path / "run2"))
        res2 = H.run_detect(cfg2)
        log2 = open(res2["log"]).read()
        assert log1 == log2  # bit-identical metrics logs for same seed/config

    def test_pretrain_smoke(self, tmp_path):
        cfg = tiny_train_cfg(tmp_path, mode="pretrain", eval_scenes=0,
                             out_dir=str(tmp_path / "pre"))
        res = H.run_pretrain(cfg)
        assert len(res["epochs"]) == 2
        for row in res["epochs"]:
            for key in ("L_recon_img", "L_recon_vox", "L_den_img", "L_den_vox",
                        "L_xmodal_int", "L_depth", "total"):
                assert np.isfinite(row[key])
        # checkpoint exists and loads
        ck = H.load_checkpoint(res["checkpoint"])
        assert any(n.startswith("backbone.") for n in ck.params)

    def test_pretrained_init_transfers_backbone(self, tmp_path):
        pre = H.run_pretrain(
            tiny_train_cfg(tmp_path, mode="pretrain", eval_scenes=0,
                           out_dir=str(tmp_path / "pre"))
        )
        cfg = tiny_train_cfg(
            tmp_path, init="pretrained", init_checkpoint=pre["checkpoint"],
            out_dir=str(tmp_path / "ft"),
        )
        model = Detector(cfg.model, seed=cfg.seed)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        n = H.load_pretrained_backbone(model, pre["checkpoint"])
        assert n > 0
        changed = sum(
            not np.array_equal(before[nm], p.data)
            for nm, p in model.named_parameters() if nm.startswith("backbone.")
        )
        assert changed > 0
        for nm, p in model.named_parameters():
            if not nm.startswith("backbone."):
                assert np.array_equal(before[nm], p.data)

    def test_missing_checkpoint_errors_with_path(self, tmp_path):
        cfg = tiny_train_cfg(tmp_path, init="pretrained",
                             init_checkpoint=str(tmp_path / "missing.pf3d"))
        with pytest.raises(FileNotFoundError) as e:
            H.run_detect(cfg)
        assert "missing.pf3d" in str(e.value)


class TestPlot:
    def test_metrics_plot_svg(self, tmp_path):
        rows = [{"epoch": e, "loss": 1.0 / (e + 1), "loss_cls": 0.5 / (e + 1)}
                for e in range(1, 6)]
        log = tmp_path / "m.jsonl"
        with open(log, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
        out = tmp_path / "m.svg"
        H.plot_metrics_log(log, out)
        text = out.read_text()
        assert text.startswith("<svg") and "polyline" in text
