"""BlindQE - Command-Line Tests"""
import numpy as np
import pytest
import torch
from PIL import Image
from pydantic import ValidationError

from app.cli.commands import COMMANDS, build_parser
from app.cli.dependencies import settings_from_args
from app.config import Settings
from app.main import run
from app.nets import ModelWeights, load_checkpoint, save_checkpoint
from app.pipeline.enhancement_pipeline import EnhancementPipeline
from app.services.codec_service import to_uint8
from app.services.dataset_service import MANIFEST_NAME, load_luma, manifest_digest
from app.services.evaluation_service import delta_psnr

from tests.conftest import TINY, write_rgb


def tiny_flags(**changes) -> list:
    flags = []
    for name, value in {**TINY, **changes}.items():
        flags += ["--" + name.replace("_", "-"), str(value)]
    return flags


@pytest.fixture
def checkpoint(tiny_arch, tmp_path):
    """FULL-variant weights whose decoder is no longer the identity."""
    weights = ModelWeights.build(tiny_arch, seed=1)
    generator = torch.Generator().manual_seed(2)
    with torch.no_grad():
        tail = weights.decoder.tail.weight
        tail.copy_(1e-2 * torch.randn(tail.shape, generator=generator))
    return save_checkpoint(weights, tmp_path / "model.pt")


class TestUsage:
    def test_help_lists_subcommands(self, capsys):
        assert run(["--help"]) == 0
        out = capsys.readouterr().out
        for name in COMMANDS:
            assert name in out

    def test_no_subcommand(self, capsys):
        assert run([]) == 2
        assert "subcommand is required" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2
        assert "unknown subcommand 'frobnicate'" in capsys.readouterr().err

    def test_missing_required_flag(self, tmp_path, capsys):
        assert run(["enhance", "--in", str(tmp_path / "a.png"), "--out", str(tmp_path / "b.png")]) == 2
        assert "--weights" in capsys.readouterr().err

    def test_bad_setting_value(self, tmp_path, capsys):
        code = run(["report", "--records", str(tmp_path / "r.csv"), "--qp-set", "27,99"])
        assert code == 2
        assert "qp_set" in capsys.readouterr().err

    def test_patch_size_must_fit_the_networks(self, tmp_path, capsys):
        with pytest.raises(ValidationError, match="multiple of 16"):
            Settings(patch_size=24)
        assert Settings(**{**TINY, "patch_size": 24}).patch_size == 24
        code = run(["report", "--records", str(tmp_path / "r.csv"), "--patch-size", "24"])
        assert code == 2
        assert "patch_size 24 must be a multiple of 16" in capsys.readouterr().err

    def test_help_names_environment_variables(self, capsys):
        assert run(["build-dataset", "--help"]) == 0
        out = " ".join(capsys.readouterr().out.split())
        assert "--hevc-encoder-path" in out
        assert "env HEVC_ENCODER_PATH" in out

    def test_config_file_then_flags(self, tmp_path):
        config = tmp_path / "blindqe.cfg"
        config.write_text("# tiny run\nseed = 5\npatch-size = 16\n")
        args = build_parser().parse_args(["report", "--records", "r.csv", "--config", str(config), "--seed", "7"])
        settings = settings_from_args(args)
        assert settings.seed == 7
        assert settings.patch_size == 16


class TestEnhance:
    def test_twice_gives_identical_bytes(self, checkpoint, tmp_path):
        image = write_rgb(tmp_path / "in.png", seed=4)
        for name in ("a.png", "b.png"):
            assert run(["enhance", "--in", str(image), "--weights", str(checkpoint), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_identity_weights_reproduce_input(self, tiny_arch, tmp_path):
        weights_path = save_checkpoint(ModelWeights.build(tiny_arch), tmp_path / "identity.pt")
        image = write_rgb(tmp_path / "in.png", seed=4)
        out = tmp_path / "out.png"
        assert run(["enhance", "--in", str(image), "--weights", str(weights_path), "--out", str(out)]) == 0
        expected = to_uint8(load_luma(image))
        assert np.array_equal(np.array(Image.open(out)), expected)

    def test_reports_delta_psnr(self, checkpoint, tmp_path, capsys):
        image = write_rgb(tmp_path / "in.png", seed=4)
        gt = write_rgb(tmp_path / "gt.png", seed=5)
        code = run([
            "enhance", "--in", str(image), "--weights", str(checkpoint),
            "--out", str(tmp_path / "out.png"), "--gt", str(gt),
        ])
        assert code == 0
        (line,) = [line for line in capsys.readouterr().out.splitlines() if line.startswith("delta_psnr")]

        weights, _ = load_checkpoint(checkpoint)
        plane = load_luma(image)
        expected = delta_psnr(EnhancementPipeline(weights).enhance(plane, 0), plane, load_luma(gt))
        assert float(line.split()[1]) == pytest.approx(expected, abs=1e-9)

    def test_missing_weights_file(self, tmp_path, capsys):
        image = write_rgb(tmp_path / "in.png", seed=4)
        missing = tmp_path / "nowhere.pt"
        assert run(["enhance", "--in", str(image), "--weights", str(missing), "--out", str(tmp_path / "o.png")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_padding_is_opt_in(self, checkpoint, tmp_path, capsys):
        image = write_rgb(tmp_path / "odd.png", seed=4, size=20)
        out = tmp_path / "out.png"
        assert run(["enhance", "--in", str(image), "--weights", str(checkpoint), "--out", str(out)]) == 1
        assert "--pad" in capsys.readouterr().err
        assert run(["enhance", "--in", str(image), "--weights", str(checkpoint), "--out", str(out), "--pad"]) == 0
        assert Image.open(out).size == (20, 20)


class TestEndToEnd:
    def test_build_train_evaluate_report(self, corpus_dir, tmp_path, capsys):
        data, runs, reports = tmp_path / "data", tmp_path / "runs", tmp_path / "reports"
        flags = tiny_flags()

        assert run(["build-dataset", "--corpus", str(corpus_dir), "--out", str(data), *flags]) == 0
        assert run(["train", "--stage", "stage1", "--data", str(data), "--out", str(runs), *flags]) == 0
        assert (runs / "stage1.pt").is_file()

        code = run([
            "train", "--stage", "stage2", "--data", str(data), "--out", str(runs),
            "--stage1-weights", str(runs / "stage1.pt"), *flags,
        ])
        assert code == 0
        assert (runs / "metrics.jsonl").is_file()

        capsys.readouterr()
        assert run(["eval", "--weights", str(runs / "stage2.pt"), "--data", str(data), "--out", str(reports), *flags]) == 0
        assert capsys.readouterr().out.startswith("Delta PSNR (dB) by QP")
        assert (reports / "report.txt").is_file()

        assert run(["report", "--records", str(reports / "records.csv")]) == 0
        out = capsys.readouterr().out
        assert "dPSNR full" in out
        assert "Average" in out

    def test_build_dataset_prints_manifest_digest(self, corpus_dir, tmp_path, capsys):
        data = tmp_path / "data"
        assert run(["build-dataset", "--corpus", str(corpus_dir), "--out", str(data), *tiny_flags()]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == f"6 entries written to {data / MANIFEST_NAME}"
        assert lines[1] == f"sha256 {manifest_digest(data / MANIFEST_NAME)}"

    def test_empty_split_is_reported(self, dataset, checkpoint, tmp_path, capsys):
        _, root = dataset
        code = run([
            "eval", "--weights", str(checkpoint), "--data", str(root),
            "--out", str(tmp_path / "reports"), "--split", "test", *tiny_flags(),
        ])
        assert code == 1
        assert "no 'test' entries" in capsys.readouterr().err
        assert not (tmp_path / "reports" / "report.txt").exists()

    def test_stage2_needs_stage1_weights(self, dataset, tmp_path, capsys):
        _, root = dataset
        code = run(["train", "--stage", "stage2", "--data", str(root), "--out", str(tmp_path / "runs"), *tiny_flags()])
        assert code == 2
        assert "--stage1-weights" in capsys.readouterr().err
