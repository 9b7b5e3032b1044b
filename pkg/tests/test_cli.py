import json
import shutil
import subprocess

import numpy as np
import pytest

from illumest import (
    IlluminantEstimate,
    LinearImage,
    estimate_named,
    load_image,
    load_pfm,
    save_ground_truth,
    save_image,
)
from illumest.cli import main

TINY_TOML = """
[cnn]
patch_size = 4
conv_filters = 3
pool_field = 2
hidden_units = 5

[train]
epochs = 2
patches_per_image = 8
batch_size = 16
"""


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A scene set, a tiny trained model, and a config file."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_TOML)
    code = main([
        "gen-scenes", "--count", "6", "--width", "48", "--height", "36",
        "--surfaces", "6", "--seed", "17", "--output-dir", str(root / "scenes"),
    ])
    assert code == 0
    code = main([
        "train-cnn", "--index", str(root / "scenes"), "--config", str(cfg),
        "--out", "model.bin", "--output-dir", str(root), "--seed", "3",
    ])
    assert code == 0
    return root


class TestEstimate:
    def test_named_method_json(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, out, _ = run_cli(capsys, "estimate", "--image", str(image),
                               "--method", "GW")
        assert code == 0
        payload = json.loads(out)
        assert payload["method"] == "GW"
        est = estimate_named(load_image(image), "GW")
        assert np.allclose(payload["estimate"], est.rgb, atol=1e-12)

    def test_custom_method(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, out, _ = run_cli(
            capsys, "estimate", "--image", str(image), "--method", "custom",
            "--order", "0", "--p", "inf", "--sigma", "0",
        )
        assert code == 0
        wp = json.loads(out)["estimate"]
        est = estimate_named(load_image(image), "WP")
        assert np.allclose(wp, est.rgb, atol=1e-12)

    def test_custom_requires_p(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, _, err = run_cli(capsys, "estimate", "--image", str(image),
                               "--method", "custom")
        assert code == 1
        assert "usage error" in err

    def test_cnn_median_method(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0001.pfm"
        code, out, _ = run_cli(
            capsys, "estimate", "--image", str(image), "--method", "cnn-median",
            "--cnn", str(workspace / "model.bin"),
        )
        assert code == 0
        est = json.loads(out)["estimate"]
        assert np.linalg.norm(est) == pytest.approx(1.0, abs=1e-9)

    def test_cnn_method_without_model(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0001.pfm"
        code, _, err = run_cli(capsys, "estimate", "--image", str(image),
                               "--method", "cnn-median")
        assert code == 1

    def test_missing_image_is_data_error(self, capsys, workspace):
        code, _, err = run_cli(capsys, "estimate", "--image",
                               str(workspace / "nope.pfm"))
        assert code == 2
        assert "data error" in err


class TestCorrect:
    def test_explicit_illuminant_green_preserved(self, capsys, workspace, tmp_path):
        image = workspace / "scenes" / "scene_0002.pfm"
        code, out, _ = run_cli(
            capsys, "correct", "--image", str(image),
            "--illuminant", "0.8,1.0,0.5", "--output-dir", str(tmp_path),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["decision"] == "single"
        corrected = load_pfm(tmp_path / "scene_0002.corrected.pfm")
        original = load_image(image)
        assert np.allclose(corrected[:, :, 1], original.data[:, :, 1], rtol=1e-6)
        # red divided by 0.8 (after green scaling)
        assert np.allclose(
            corrected[:, :, 0], original.data[:, :, 0] / 0.8, rtol=1e-5
        )

    def test_use_gt(self, capsys, workspace, tmp_path):
        image = workspace / "scenes" / "scene_0003.pfm"
        code, out, _ = run_cli(capsys, "correct", "--image", str(image),
                               "--use-gt", "--output-dir", str(tmp_path))
        assert code == 0
        assert json.loads(out)["decision"] == "single"

    def test_method_with_preview(self, capsys, workspace, tmp_path):
        image = workspace / "scenes" / "scene_0004.pfm"
        code, out, _ = run_cli(
            capsys, "correct", "--image", str(image), "--method", "GW",
            "--preview", "--output-dir", str(tmp_path),
        )
        assert code == 0
        assert (tmp_path / "scene_0004.corrected.pfm").exists()
        assert (tmp_path / "scene_0004.corrected.png").exists()

    def test_pipeline_mode(self, capsys, workspace, tmp_path):
        image = workspace / "scenes" / "scene_0005.pfm"
        code, out, _ = run_cli(
            capsys, "correct", "--image", str(image), "--pipeline",
            "--cnn", str(workspace / "model.bin"), "--mode", "force-single",
            "--output-dir", str(tmp_path),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["decision"] == "single"
        assert isinstance(payload["illuminant"], list)

    def test_exactly_one_source(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, _, err = run_cli(capsys, "correct", "--image", str(image),
                               "--illuminant", "1,1,1", "--use-gt")
        assert code == 1
        code, _, err = run_cli(capsys, "correct", "--image", str(image))
        assert code == 1

    def test_bad_triplet(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, _, err = run_cli(capsys, "correct", "--image", str(image),
                               "--illuminant", "1,1")
        assert code == 1


class TestDetect:
    def test_single_scene(self, capsys, workspace):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, out, _ = run_cli(capsys, "detect", "--image", str(image),
                               "--cnn", str(workspace / "model.bin"))
        assert code == 0
        payload = json.loads(out)
        assert payload["decision"] in ("single", "multiple")
        assert payload["modes"]
        assert payload["max_pairwise_angle_deg"] >= 0.0

    def test_dump_density(self, capsys, workspace, tmp_path):
        image = workspace / "scenes" / "scene_0000.pfm"
        code, out, _ = run_cli(
            capsys, "detect", "--image", str(image),
            "--cnn", str(workspace / "model.bin"),
            "--dump-density", "--output-dir", str(tmp_path),
        )
        assert code == 0
        grid = load_pfm(tmp_path / "scene_0000.density.pfm")
        assert grid.shape == (256, 256)
        meta = json.loads((tmp_path / "scene_0000.density.json").read_text())
        assert len(meta["bounds"]) == 4
        assert meta["points"] > 0


class TestTraining:
    def test_train_cnn_outputs(self, workspace):
        assert (workspace / "model.bin").exists()
        side = json.loads((workspace / "model.bin.json").read_text())
        assert side["kind"] == "patch-cnn"
        assert side["epochs"] == 2
        assert len(side["history"]) == 2
        assert "val_loss" in side["history"][0]

    def test_train_determinism(self, capsys, workspace, tmp_path):
        cfg = workspace / "tiny.toml"
        for sub in ("a", "b"):
            code, _, _ = run_cli(
                capsys, "train-cnn", "--index", str(workspace / "scenes"),
                "--config", str(cfg), "--out", "m.bin",
                "--output-dir", str(tmp_path / sub), "--seed", "3",
            )
            assert code == 0
        assert (tmp_path / "a" / "m.bin").read_bytes() == (
            tmp_path / "b" / "m.bin"
        ).read_bytes()

    def test_train_aggregator(self, capsys, workspace, tmp_path):
        code, out, _ = run_cli(
            capsys, "train-aggregator", "--index", str(workspace / "scenes"),
            "--cnn", str(workspace / "model.bin"),
            "--output-dir", str(tmp_path),
        )
        assert code == 0
        payload = json.loads(out)
        assert (tmp_path / "aggregator.bin").exists()
        assert payload["C"] in (1, 10, 100)
        assert payload["validation_median_deg"] >= 0.0

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_exit_code(self, capsys, workspace, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY_TOML.replace(
            "epochs = 2", "epochs = 8\nlearning_rate = 1e18"))
        code, _, err = run_cli(
            capsys, "train-cnn", "--index", str(workspace / "scenes"),
            "--config", str(bad), "--output-dir", str(tmp_path), "--seed", "3",
        )
        assert code == 3
        assert "numeric error" in err

    def test_unknown_config_key(self, capsys, workspace, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY_TOML.replace("[train]", "[train]\nwhatever = 1"))
        code, _, err = run_cli(
            capsys, "train-cnn", "--index", str(workspace / "scenes"),
            "--config", str(bad), "--output-dir", str(tmp_path),
        )
        assert code == 2
        assert "whatever" in err


class TestDataCommands:
    def test_gen_scenes_deterministic(self, capsys, tmp_path):
        for sub in ("a", "b"):
            code, out, _ = run_cli(
                capsys, "gen-scenes", "--count", "3", "--width", "48",
                "--height", "36", "--seed", "8", "--output-dir",
                str(tmp_path / sub),
            )
            assert code == 0
            assert json.loads(out)["count"] == 3
        for name in ("scene_0000.pfm", "index.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_seed_before_subcommand(self, capsys, tmp_path):
        code, _, _ = run_cli(
            capsys, "--seed", "8", "gen-scenes", "--count", "1", "--width", "48",
            "--height", "36", "--output-dir", str(tmp_path / "pre"),
        )
        assert code == 0
        code, _, _ = run_cli(
            capsys, "gen-scenes", "--seed", "8", "--count", "1", "--width", "48",
            "--height", "36", "--output-dir", str(tmp_path / "post"),
        )
        assert code == 0
        assert (tmp_path / "pre" / "scene_0000.pfm").read_bytes() == (
            tmp_path / "post" / "scene_0000.pfm"
        ).read_bytes()

    def test_relight(self, capsys, workspace, tmp_path):
        code, out, _ = run_cli(
            capsys, "relight", "--index", str(workspace / "scenes"),
            "--sigma", "2.0", "--seed", "4", "--output-dir", str(tmp_path / "relit"),
        )
        assert code == 0
        assert json.loads(out)["count"] == 6
        assert (tmp_path / "relit" / "relit_0000.gt.pfm").exists()

    def test_relight_missing_index(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "relight", "--index", str(tmp_path / "missing"),
            "--output-dir", str(tmp_path / "out"),
        )
        assert code == 2


class TestEvaluate:
    def test_report_and_summary(self, capsys, workspace, tmp_path):
        code, out, _ = run_cli(
            capsys, "evaluate", "--index", str(workspace / "scenes"),
            "--methods", "GW,DN,cnn-median", "--cnn", str(workspace / "model.bin"),
            "--output-dir", str(tmp_path),
        )
        assert code == 0
        assert "method" in out and "median" in out
        assert "GW" in out and "DN" in out
        assert (tmp_path / "errors.csv").exists()
        assert (tmp_path / "stats.json").exists()
        assert (tmp_path / "hist_GW.csv").exists()

    def test_run_restriction(self, capsys, workspace, tmp_path):
        code, _, _ = run_cli(
            capsys, "evaluate", "--index", str(workspace / "scenes"),
            "--methods", "DN", "--run", "0", "--output-dir", str(tmp_path),
        )
        assert code == 0
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert stats["DN"]["count"] == 2  # fold 0 of six scenes

    def test_unknown_method_exit_code(self, capsys, workspace, tmp_path):
        code, _, _ = run_cli(
            capsys, "evaluate", "--index", str(workspace / "scenes"),
            "--methods", "nope", "--output-dir", str(tmp_path),
        )
        assert code == 1

    def test_empty_methods(self, capsys, workspace, tmp_path):
        code, _, _ = run_cli(
            capsys, "evaluate", "--index", str(workspace / "scenes"),
            "--methods", " , ", "--output-dir", str(tmp_path),
        )
        assert code == 1


class TestInspect:
    def test_activation_dump(self, capsys, workspace, tmp_path):
        code, out, _ = run_cli(
            capsys, "inspect-activations", "--cnn", str(workspace / "model.bin"),
            "--image", str(workspace / "scenes" / "scene_0000.pfm"),
            "--image", str(workspace / "scenes" / "scene_0001.pfm"),
            "--unit", "1", "--top", "4", "--output-dir", str(tmp_path),
        )
        assert code == 0
        assert json.loads(out)["written"] == 4
        meta = json.loads((tmp_path / "unit01_activations.json").read_text())
        assert len(meta["patches"]) == 4
        acts = [p["activation"] for p in meta["patches"]]
        assert acts == sorted(acts, reverse=True)
        for entry in meta["patches"]:
            assert (tmp_path / entry["preview"]).exists()

    def test_unit_out_of_range(self, capsys, workspace, tmp_path):
        code, _, _ = run_cli(
            capsys, "inspect-activations", "--cnn", str(workspace / "model.bin"),
            "--image", str(workspace / "scenes" / "scene_0000.pfm"),
            "--unit", "99", "--output-dir", str(tmp_path),
        )
        assert code == 1


class TestTopLevel:
    def test_no_command_prints_help(self, capsys):
        code, out, _ = run_cli(capsys)
        assert code == 1
        assert "estimate" in out and "evaluate" in out

    def test_unknown_flag(self, capsys):
        code, _, err = run_cli(capsys, "estimate", "--nope")
        assert code == 1

    def test_console_script_installed(self, workspace):
        exe = shutil.which("illumest")
        assert exe, "console script not on PATH"
        result = subprocess.run(
            [exe, "estimate", "--image",
             str(workspace / "scenes" / "scene_0000.pfm"), "--method", "GW"],
            capture_output=True, text=True,
        )
        assert result.returncode == 0
        assert json.loads(result.stdout)["method"] == "GW"

    def test_json_config_accepted(self, capsys, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"scene": {"num_surfaces": 4}}))
        code, _, _ = run_cli(
            capsys, "gen-scenes", "--count", "1", "--width", "48", "--height",
            "36", "--config", str(cfg), "--output-dir", str(tmp_path / "s"),
        )
        assert code == 0
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["config"]["num_surfaces"] == 4

    def test_config_missing_file(self, capsys, tmp_path):
        code, _, _ = run_cli(
            capsys, "gen-scenes", "--count", "1", "--config",
            str(tmp_path / "nope.toml"), "--output-dir", str(tmp_path / "s"),
        )
        assert code == 2
