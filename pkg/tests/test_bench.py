"""Scene synthesis, classical baselines, recipes and the experiment driver."""

import csv
import json
import os

import numpy as np
import pytest

from panfuse.bench import (
    PhaseTimer,
    RECIPE_DEFAULTS,
    WorldModel,
    exp_pansharpen,
    gihs_pansharpen,
    loss_study,
    parse_recipe,
    profile_for_world,
    run_experiment,
    synth_scene,
    worlds_for_recipe,
)
from panfuse.dsp import interp23, lowpass_decimate, mtf_kernels
from panfuse.raster import MultibandImage

from conftest import random_dn


class TestSynthScene:
    def test_shapes_and_dtype(self):
        ms, pan, gt = synth_scene(3, 128, 4)
        assert ms.data.shape == (4, 32, 32)
        assert pan.data.shape == (1, 128, 128)
        assert gt.data.shape == (4, 128, 128)
        assert ms.data.dtype == np.float32

    def test_deterministic(self):
        a = synth_scene(9, 64, 4)
        b = synth_scene(9, 64, 4)
        for x, y in zip(a, b):
            assert np.array_equal(x.data, y.data)

    def test_seed_changes_scene(self):
        a = synth_scene(1, 64, 4)[2]
        b = synth_scene(2, 64, 4)[2]
        assert not np.array_equal(a.data, b.data)

    def test_mixing_seed_changes_spectra_only_world(self):
        a = synth_scene(1, 64, 4, WorldModel(mixing_seed=0))[2]
        b = synth_scene(1, 64, 4, WorldModel(mixing_seed=5))[2]
        assert not np.array_equal(a.data, b.data)

    def test_ms_is_exact_degradation_of_gt(self):
        world = WorldModel()
        ms, pan, gt = synth_scene(7, 96, 4, world)
        profile = profile_for_world("ge1", 4, world)
        taps, _ = mtf_kernels(profile)
        again = lowpass_decimate(gt, taps, 4)
        assert np.array_equal(again.data, ms.data)

    def test_dn_range_sane(self):
        ms, pan, gt = synth_scene(11, 96, 4)
        full = 2.0 ** 11
        for img in (ms, pan, gt):
            assert img.data.min() > 0
            assert img.data.max() < full

    def test_validation(self):
        with pytest.raises(ValueError):
            synth_scene(0, 30, 4)  # not divisible by the ratio
        with pytest.raises(ValueError):
            synth_scene(0, 64, 0)


class TestProfileForWorld:
    def test_gains_taken_from_world(self):
        world = WorldModel(gnyq_ms=0.42, gnyq_pan=0.21)
        p = profile_for_world("ge1", 4, world)
        assert p.gnyq_ms == (0.42,) * 4
        assert p.gnyq_pan == 0.21

    def test_band_mismatch(self):
        with pytest.raises(ValueError):
            profile_for_world("ge1", 8, WorldModel())


class TestBaselines:
    def test_exp_is_plain_upsampling(self, rng):
        ms = MultibandImage(random_dn(rng, 4, 16, 16))
        assert np.array_equal(exp_pansharpen(ms, 4).data, interp23(ms, 4).data)

    def test_gihs_band_mean_equals_pan(self, rng):
        # adding (PAN - intensity) to every band moves the band mean to PAN
        ms = MultibandImage(random_dn(rng, 4, 8, 8))
        pan = MultibandImage(random_dn(rng, 1, 32, 32))
        fused = gihs_pansharpen(ms, pan, 4)
        assert np.allclose(fused.data.mean(axis=0), pan.data[0], atol=1e-3)

    def test_gihs_grid_mismatch(self, rng):
        ms = MultibandImage(random_dn(rng, 4, 8, 8))
        pan = MultibandImage(random_dn(rng, 1, 16, 16))
        with pytest.raises(ValueError):
            gihs_pansharpen(ms, pan, 4)


class TestRecipes:
    def test_defaults_returned_for_none(self):
        assert parse_recipe(None) == RECIPE_DEFAULTS

    def test_dict_overrides(self):
        r = parse_recipe({"size": 320, "tile_size": 17, "condition": "challenging"})
        assert r["size"] == 320
        assert r["condition"] == "challenging"
        assert r["tiles"] == RECIPE_DEFAULTS["tiles"]

    def test_file_parsing_and_coercion(self, tmp_path):
        path = tmp_path / "r.recipe"
        path.write_text("# comment\nsize=320\ntile_size=17\nresidual=false\nloss=l2\n")
        r = parse_recipe(path)
        assert r["size"] == 320
        assert r["residual"] is False
        assert r["loss"] == "l2"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            parse_recipe({"sizes": 128})

    def test_bad_condition_rejected(self):
        with pytest.raises(ValueError):
            parse_recipe({"condition": "weird"})

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "r.recipe"
        path.write_text("size 96\n")
        with pytest.raises(ValueError):
            parse_recipe(path)

    def test_geometry_guards(self):
        with pytest.raises(ValueError):
            parse_recipe({"size": 288})  # not divisible by 64
        with pytest.raises(ValueError):
            parse_recipe({"size": 128})  # twice-degraded grid < tile_size
        with pytest.raises(ValueError):
            parse_recipe({"train_size": 100})

    def test_worlds_for_conditions(self):
        typical = parse_recipe({"condition": "typical"})
        a, b = worlds_for_recipe(typical)
        assert a == b
        hard = parse_recipe({"condition": "challenging"})
        a, b = worlds_for_recipe(hard)
        assert b.mixing_seed == hard["alt_world_seed"]
        assert b.gnyq_ms == hard["alt_gnyq_ms"]


class TestPhaseTimer:
    def test_rows_and_deterministic_csv(self, tmp_path):
        t = PhaseTimer()
        out = t.run("add", lambda a, b: a + b, 1, b=2)
        assert out == 3
        assert t.rows[0][0] == "add"
        path = tmp_path / "t.csv"
        t.to_csv(path, deterministic=True)
        assert path.read_text().splitlines()[1] == "add,0.000"


SMOKE_RECIPE = {
    "condition": "challenging",
    "size": 320,
    "train_size": 160,
    "tiles": 96,
    "val_tiles": 16,
    "tile_size": 17,
    "train_iters": 2,
    "ft_iters": 1,
    "max_tiles": 64,
    "batch_size": 32,
    "deterministic": True,
}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    rows_reduced, rows_full = run_experiment(SMOKE_RECIPE, out)
    return out, rows_reduced, rows_full


class TestExperimentDriver:
    def test_run_experiment_artifacts(self, smoke_run):
        out, rows_reduced, rows_full = smoke_run
        names = [n for n, _ in rows_reduced]
        assert names == ["exp", "gihs", "net", "net_ft"]
        assert [n for n, _ in rows_full] == names
        for fname in ("history_train.csv", "net.pnnw", "report_reduced.csv",
                      "report_full.csv", "history_ft_reduced.csv",
                      "history_ft_full.csv", "timing.csv", "summary.json",
                      "target_ms.mbir", "target_pan.mbir", "target_gt.mbir",
                      "preview_gt.ppm", "preview_pan.ppm", "preview_net.ppm"):
            assert (out / fname).exists(), fname

        with open(out / "report_reduced.csv") as fh:
            table = list(csv.DictReader(fh))
        assert [row["method"] for row in table] == names
        for row in table:
            assert float(row["SAM"]) >= 0
            assert row["QNR"] == ""

        summary = json.load(open(out / "summary.json"))
        assert set(summary) == {"reduced", "full"}

    def test_reports_score_sensible_values(self, smoke_run):
        _, rows_reduced, rows_full = smoke_run
        red = dict(rows_reduced)
        # the upsampling baseline must at least be a valid fusion
        assert 0 < red["exp"].sam_deg < 90
        assert red["exp"].ergas > 0
        full = dict(rows_full)
        assert 0 <= full["exp"].d_lambda <= 1
        assert 0 <= full["exp"].qnr <= 1

    def test_loss_study_histories(self, tmp_path):
        out = tmp_path / "ls"
        hist = loss_study(dict(SMOKE_RECIPE, train_iters=3), out,
                          variants=("l2", "l1rl"))
        assert set(hist) == {"l2", "l1rl"}
        assert len(hist["l2"]) == 3
        assert (out / "history_l2.csv").exists()
        assert (out / "history_l1rl.csv").exists()
        header = (out / "history_l1rl.csv").read_text().splitlines()[0]
        assert header == "iteration,seconds,train_loss,val_mse,val_mae"
