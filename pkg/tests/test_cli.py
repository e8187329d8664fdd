"""Command-line behavior: exit codes, outputs, validation, determinism."""

import os
import pathlib

import pytest

from clinfuse.cli import parse_config_file, run
from clinfuse.data import load_dataset


SMOKE_CFG = """
variant = full
image_size = 9
stem_channels = 4
stage_channels = 4,8
stage_blocks = 1,1
attention_stages = 1
d_clin = 6
clin_hidden = 8
d_emb = 8

learning_rate = 0.003
epochs = 2
batch_size = 8
seed = 3

synth_patients = 24
synth_slices = 1
image_signal = 1.5
clinical_signal = 1.0
shared_signal = 0.4
noise_sigma = 0.3

folds = 2
"""


@pytest.fixture
def smoke_cfg(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE_CFG)
    return str(path)


class TestUsage:
    def test_no_arguments_prints_usage_and_exits_1(self, capsys):
        assert run([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag(self, capsys):
        assert run(["ablate", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_unknown_config_key_rejected_before_output(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_real_key = 3\n")
        out_dir = tmp_path / "out"
        code = run(["synth", "--config", str(cfg), "--out", str(out_dir)])
        assert code == 1
        assert "not_a_real_key" in capsys.readouterr().err
        assert not out_dir.exists()

    def test_malformed_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        assert run(["synth", "--config", str(cfg), "--out",
                    str(tmp_path / "o")]) == 1

    def test_missing_config_file(self, tmp_path):
        assert run(["synth", "--config", str(tmp_path / "nope.cfg"),
                    "--out", str(tmp_path / "o")]) == 1

    def test_invalid_model_geometry_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("image_size = 16\n")  # even sizes cannot downsample
        out_dir = tmp_path / "out"
        assert run(["synth", "--config", str(cfg), "--out", str(out_dir)]) == 1
        assert not out_dir.exists()


class TestConfigParsing:
    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n\nseed = 5  # trailing\n")
        assert parse_config_file(str(cfg)) == {"seed": 5}

    def test_typed_values(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("stage_channels = 4,8\nattention_squash = false\n"
                       "learning_rate = 0.5\n")
        values = parse_config_file(str(cfg))
        assert values["stage_channels"] == (4, 8)
        assert values["attention_squash"] is False
        assert values["learning_rate"] == 0.5


class TestPipeline:
    def test_synth_then_train_then_eval(self, smoke_cfg, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert run(["synth", "--config", smoke_cfg, "--out", out]) == 0
        data_dir = os.path.join(out, "dataset")
        ds = load_dataset(os.path.join(data_dir, "clinical.csv"),
                          os.path.join(data_dir, "images"))
        assert len(ds.records) == 24

        cfg2 = tmp_path / "train.cfg"
        cfg2.write_text(SMOKE_CFG + f"\ndata_dir = {data_dir}\n")
        assert run(["train", "--config", str(cfg2), "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "model.ckpt"))
        log_lines = pathlib.Path(out, "train.log").read_text().splitlines()
        assert len(log_lines) == 2

        cfg3 = tmp_path / "eval.cfg"
        cfg3.write_text(SMOKE_CFG + f"\ndata_dir = {data_dir}\n"
                        f"checkpoint = {os.path.join(out, 'model.ckpt')}\n")
        assert run(["eval", "--config", str(cfg3), "--out", out]) == 0
        captured = capsys.readouterr().out
        assert "acc" in captured
        assert os.path.exists(os.path.join(out, "report.csv"))

    def test_cv_writes_report(self, smoke_cfg, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert run(["synth", "--config", smoke_cfg, "--out", out]) == 0
        data_dir = os.path.join(out, "dataset")
        cfg2 = tmp_path / "cv.cfg"
        cfg2.write_text(SMOKE_CFG + f"\ndata_dir = {data_dir}\n")
        assert run(["cv", "--config", str(cfg2), "--out", out]) == 0
        report = pathlib.Path(out, "report.csv").read_text().splitlines()
        # header + 2 folds + mean + std
        assert len(report) == 1 + 2 + 2
        assert report[0] == "variant,fold,acc,sensitivity,specificity,ppv,npv"

    def test_ablate_writes_three_variant_table(self, smoke_cfg, tmp_path,
                                               capsys):
        out = str(tmp_path / "run")
        assert run(["ablate", "--config", smoke_cfg, "--out", out]) == 0
        stdout = capsys.readouterr().out
        for name in ("image-only", "image-clinical", "full"):
            assert name in stdout
        rows = pathlib.Path(out, "ablation.csv").read_text().splitlines()
        # header + 3 variants * (2 folds + mean + std)
        assert len(rows) == 1 + 3 * 4

    def test_ablate_byte_identical_across_runs(self, smoke_cfg, tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        assert run(["ablate", "--config", smoke_cfg, "--seed", "11",
                    "--out", out_a]) == 0
        assert run(["ablate", "--config", smoke_cfg, "--seed", "11",
                    "--out", out_b]) == 0
        bytes_a = pathlib.Path(out_a, "ablation.csv").read_bytes()
        bytes_b = pathlib.Path(out_b, "ablation.csv").read_bytes()
        assert bytes_a == bytes_b

    def test_seed_flag_overrides_config(self, smoke_cfg, tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        assert run(["synth", "--config", smoke_cfg, "--out", out_a]) == 0
        assert run(["synth", "--config", smoke_cfg, "--seed", "99",
                    "--out", out_b]) == 0
        csv_a = pathlib.Path(out_a, "dataset", "clinical.csv").read_text()
        csv_b = pathlib.Path(out_b, "dataset", "clinical.csv").read_text()
        assert csv_a != csv_b

    def test_variant_flag_overrides_config(self, smoke_cfg, tmp_path):
        out = str(tmp_path / "run")
        assert run(["synth", "--config", smoke_cfg, "--out", out]) == 0
        data_dir = os.path.join(out, "dataset")
        cfg2 = tmp_path / "t.cfg"
        cfg2.write_text(SMOKE_CFG + f"\ndata_dir = {data_dir}\n")
        assert run(["train", "--config", str(cfg2), "--variant", "image-only",
                    "--out", out]) == 0
        # checkpoint must carry the overridden variant
        manifest = pathlib.Path(out, "model.ckpt").read_bytes()[:2000]
        assert b"variant = image-only" in manifest

    def test_eval_needs_checkpoint_key(self, smoke_cfg, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert run(["synth", "--config", smoke_cfg, "--out", out]) == 0
        cfg2 = tmp_path / "e.cfg"
        cfg2.write_text(SMOKE_CFG + f"\ndata_dir = {os.path.join(out, 'dataset')}\n")
        assert run(["eval", "--config", str(cfg2)]) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_train_on_missing_data_dir(self, smoke_cfg, tmp_path):
        cfg2 = tmp_path / "t.cfg"
        cfg2.write_text(SMOKE_CFG + f"\ndata_dir = {tmp_path / 'absent'}\n")
        code = run(["train", "--config", str(cfg2), "--out",
                    str(tmp_path / "o")])
        assert code in (1, 2)


class TestGradcheckCommand:
    def test_reports_small_error_and_exits_zero(self, capsys):
        assert run(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out
        assert "OK" in out
