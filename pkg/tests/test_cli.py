"""Command-line surface: subcommands, stdout metric lines and exit codes."""

from __future__ import annotations

import json

import numpy as np
import pytest

import services.training
from main import main
from services.dataset import read_image, write_image, write_mask
from services.dsm_io import DsmRaster, read_dsm, write_dsm

from conftest import tiny_run_config, tiny_scene_spec


# ── Helpers ──────────────────────────────────────────────────────────────

@pytest.fixture(autouse=True)
def no_thread_env(monkeypatch):
    monkeypatch.delenv("SATNGP_THREADS", raising=False)


def _config_file(directory, **overrides):
    path = directory / "run.json"
    path.write_text(json.dumps(tiny_run_config(**overrides).to_dict()))
    return path


@pytest.fixture(scope="module")
def untrained(tiny_scene, tmp_path_factory):
    """Run directory holding the step-0 checkpoint of the tiny scene."""
    run = tmp_path_factory.mktemp("run")
    manifest, _ = tiny_scene
    code = main(["train", str(manifest), "--out", str(run), "--config", str(_config_file(run)), "--epochs", "0"])
    assert code == 0
    return run


# ── synth / train ───────────────────────────────────────────────────────

class TestSynthAndTrain:

    def test_synth(self, tmp_path):
        spec = tmp_path / "scene.json"
        spec.write_text(json.dumps(tiny_scene_spec().to_dict()))
        assert main(["synth", str(spec), str(tmp_path / "out"), "--seed", "5"]) == 0
        assert (tmp_path / "out" / "manifest.json").exists()
        assert json.loads((tmp_path / "out" / "scene.json").read_text())["seed"] == 5

    def test_synth_missing_spec(self, tmp_path, capsys):
        assert main(["synth", str(tmp_path / "absent.json"), str(tmp_path / "out")]) == 2
        assert "absent.json" in capsys.readouterr().err

    def test_train_zero_epochs(self, untrained):
        assert (untrained / "model.satngp").exists()
        assert (untrained / "metrics.csv").exists()
        effective = json.loads((untrained / "config.json").read_text())
        assert effective["train"]["epochs"] == 0

    def test_unknown_override_names_key(self, tiny_scene, tmp_path, capsys):
        code = main(["train", str(tiny_scene[0]), "--out", str(tmp_path), "--set", "train.foo=1"])
        assert code == 2
        assert "train.foo" in capsys.readouterr().err

    def test_malformed_override(self, tiny_scene, tmp_path):
        assert main(["train", str(tiny_scene[0]), "--out", str(tmp_path), "--set", "epochs"]) == 2

    def test_missing_manifest(self, tmp_path):
        assert main(["train", str(tmp_path / "none.json"), "--out", str(tmp_path / "run")]) == 2

    def test_divergence_exit_code(self, tiny_scene, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(services.training, "loss_final", lambda robust, solar, lam=0.05: robust * np.nan)
        code = main(["train", str(tiny_scene[0]), "--out", str(tmp_path), "--config", str(_config_file(tmp_path))])
        assert code == 3
        assert "model.satngp" in capsys.readouterr().err

    def test_bad_thread_env(self, tiny_scene, tmp_path, monkeypatch):
        monkeypatch.setenv("SATNGP_THREADS", "many")
        assert main(["synth", str(tmp_path / "x.json"), str(tmp_path)]) == 2


# ── render / dsm ────────────────────────────────────────────────────────

class TestRenderAndDsm:

    def test_render_manifest_view(self, untrained, tiny_scene, tmp_path):
        out = tmp_path / "view.png"
        code = main(["render", str(untrained / "model.satngp"), "--manifest", str(tiny_scene[0]), "--view", "3",
                     "--out", str(out)])
        assert code == 0
        assert read_image(out).shape == (16, 16, 3)

    def test_render_relit_view_spec(self, untrained, tiny_scene, tmp_path):
        record = json.loads(tiny_scene[0].read_text())["images"][0]
        spec = tmp_path / "view.json"
        spec.write_text(json.dumps({k: record[k] for k in ("camera", "width", "height", "sun_azimuth",
                                                           "sun_elevation")}))
        out = tmp_path / "relit.f32"
        code = main(["render", str(untrained / "model.satngp"), "--view-spec", str(spec), "--out", str(out),
                     "--sun-elevation", "30"])
        assert code == 0
        assert read_image(out, 16, 16).shape == (16, 16, 3)

    def test_render_needs_a_view(self, untrained, tmp_path):
        assert main(["render", str(untrained / "model.satngp"), "--out", str(tmp_path / "v.png")]) == 2

    def test_dsm_like_ground_truth(self, untrained, tiny_scene, tmp_path):
        gt = tiny_scene[0].parent / "dsm.asc"
        out = tmp_path / "pred.asc"
        assert main(["dsm", str(untrained / "model.satngp"), "--like", str(gt), "--out", str(out)]) == 0
        assert read_dsm(out).same_grid(read_dsm(gt))

    def test_dsm_cell_size(self, untrained, tmp_path):
        out = tmp_path / "coarse.asc"
        assert main(["dsm", str(untrained / "model.satngp"), "--cell-size", "8", "--out", str(out)]) == 0
        # tiny scene covers 64 m x 64 m
        assert read_dsm(out).altitudes.shape == (8, 8)


# ── eval ────────────────────────────────────────────────────────────────

class TestEval:

    def test_mae_of_identical_dsms(self, tiny_scene, capsys):
        gt = tiny_scene[0].parent / "dsm.asc"
        assert main(["eval", str(gt), str(gt)]) == 0
        assert capsys.readouterr().out.strip() == "MAE=0.000m"

    def test_psnr_of_raw_images(self, tmp_path, capsys):
        a = write_image(tmp_path / "a.f32", np.full((4, 5, 3), 0.5))
        b = write_image(tmp_path / "b.f32", np.full((4, 5, 3), 0.6))
        assert main(["eval", str(a), str(b), "--height", "4", "--width", "5"]) == 0
        assert capsys.readouterr().out.strip() == "PSNR=20.000dB"

    def test_psnr_identical(self, tmp_path, capsys):
        a = write_image(tmp_path / "a.png", np.full((2, 2, 3), 0.5))
        assert main(["eval", str(a), str(a)]) == 0
        assert capsys.readouterr().out.strip() == "PSNR=infdB"

    def test_residue(self, tmp_path, capsys):
        a = write_image(tmp_path / "a.f32", np.zeros((2, 2, 3)))
        b = write_image(tmp_path / "b.f32", np.full((2, 2, 3), 0.25))
        mask = write_mask(tmp_path / "m.png", np.array([[True, False], [False, False]]))
        code = main(["eval", str(a), str(b), "--metric", "residue", "--mask", str(mask), "--height", "2",
                     "--width", "2"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "RESIDUE=0.2500"

    def test_grid_mismatch_exit_code(self, tmp_path):
        a = write_dsm(DsmRaster(0.0, 0.0, 1.0, np.zeros((3, 3))), tmp_path / "a.asc")
        b = write_dsm(DsmRaster(0.0, 0.0, 0.5, np.zeros((3, 3))), tmp_path / "b.asc")
        assert main(["eval", str(a), str(b)]) == 4

    def test_missing_file(self, tmp_path):
        assert main(["eval", str(tmp_path / "a.asc"), str(tmp_path / "b.asc")]) == 2
