import json

import numpy as np
import pytest

from rosettavae import cli
from rosettavae.datasets import load_tabular
from rosettavae.distill import load_rosetta
from rosettavae.vae import load_checkpoint


def run_cli(args):
    return cli.main([str(a) for a in args])


def tiny_flags(out_dir):
    return [
        "--n-per-component", 8,
        "--epochs", 2,
        "--n-repeats", 2,
        "--k", 2,
        "--batch-size", 16,
        "--out-dir", out_dir,
    ]


class TestGenData:
    def test_writes_loadable_dataset(self, tmp_path, capsys):
        out = tmp_path / "d1.csv"
        assert run_cli(["gen-data", "--n-per-component", 4, "--partition", "D1", "--out", out]) == 0
        data = load_tabular(out)
        assert len(data) == 16
        assert "wrote 16 rows" in capsys.readouterr().out

    def test_raw_format(self, tmp_path):
        out = tmp_path / "joint.raw"
        assert run_cli(["gen-data", "--n-per-component", 3, "--format", "raw", "--out", out]) == 0
        data = load_tabular(out, fmt="raw")
        assert data.inputs.shape == (24, 5)


class TestTrainDistillExport:
    def test_full_single_model_flow(self, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        trace = tmp_path / "trace.csv"
        args = ["train", "--method", "vae", "--partition", "D1",
                "--checkpoint-out", ckpt, "--trace-out", trace,
                "--n-per-component", 6, "--epochs", 2, "--batch-size", 16]
        assert run_cli(args) == 0
        model = load_checkpoint(ckpt)
        assert model.arch.input_dim == 5
        assert trace.read_text().startswith("epoch,train_loss,val_loss")

        anchors = tmp_path / "anchors.txt"
        assert run_cli(["distill", "--checkpoint", ckpt, "--partition", "D1",
                        "--k", 3, "--n-per-component", 6, "--out", anchors]) == 0
        ros = load_rosetta(anchors)
        assert len(ros) == 3

        ckpt2 = tmp_path / "anchored.ckpt"
        assert run_cli(["train", "--method", "r_vae", "--partition", "D2",
                        "--rosetta", anchors, "--checkpoint-out", ckpt2,
                        "--n-per-component", 6, "--epochs", 2, "--batch-size", 16]) == 0
        assert ckpt2.exists()

        emb = tmp_path / "emb.csv"
        assert run_cli(["export", "--checkpoint", ckpt, "--partition", "D1",
                        "--n-per-component", 6, "--out", emb]) == 0
        table = load_tabular(emb)
        assert len(table) == 24

    def test_r_vae_without_anchors_fails_cleanly(self, tmp_path, capsys):
        code = run_cli(["train", "--method", "r_vae", "--partition", "D2",
                        "--checkpoint-out", tmp_path / "x.ckpt",
                        "--n-per-component", 4, "--epochs", 1])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert payload["error"] == "ValueError"
        assert "rosetta" in payload["message"]


class TestProtocolCommands:
    def test_repro_and_report(self, tmp_path, capsys):
        out = tmp_path / "runs"
        assert run_cli(["repro", *tiny_flags(out)]) == 0
        stdout = capsys.readouterr().out
        assert "rv_rosetta_points" in stdout
        assert run_cli(["report", out / "report.csv"]) == 0
        assert "rv_rest_of_data" in capsys.readouterr().out

    def test_sequential(self, tmp_path, capsys):
        out = tmp_path / "runs"
        assert run_cli(["sequential", *tiny_flags(out)]) == 0
        assert "lsd_d2" in capsys.readouterr().out

    def test_ablate(self, tmp_path, capsys):
        out = tmp_path / "runs"
        assert run_cli(["ablate", *tiny_flags(out), "--rp-counts", "2,3"]) == 0
        assert "rp_count=3" in capsys.readouterr().out

    def test_grid(self, tmp_path, capsys):
        out = tmp_path / "runs"
        args = ["grid", *tiny_flags(out), "--grid-epochs", 1,
                "--beta-grid-stop", 2.5, "--rho-grid-stop", 0.75,
                "--beta-grid-step", 2.5, "--rho-grid-step", 0.75]
        assert run_cli(args) == 0
        assert "beta_best=" in capsys.readouterr().out


class TestConfigFile:
    def test_config_file_with_flag_override(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"n_per_component": 4, "epochs": 1, "seed": 3}))
        out = tmp_path / "d.csv"
        assert run_cli(["gen-data", "--config", cfg_path, "--n-per-component", 5,
                        "--out", out]) == 0
        data = load_tabular(out)
        assert len(data) == 40  # flag override wins over the file's 4

    def test_determinism_of_protocol_cli(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["repro", *tiny_flags(out_a)]) == 0
        assert run_cli(["repro", *tiny_flags(out_b)]) == 0
        assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()


class TestErrorSurface:
    def test_missing_file_gives_json_error_line(self, tmp_path, capsys):
        code = run_cli(["report", tmp_path / "missing.csv"])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert "error" in payload and "message" in payload

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bogus"])
        assert exc.value.code == 2
