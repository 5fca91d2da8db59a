import hashlib
import os

import numpy as np
import pytest

from sagrid.cli import main
from sagrid.data import load_image
from sagrid.model import BackboneConfig, build_model, save_checkpoint

TINY_FLAGS = ["--channels", "4,8,16,32"]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = main(["synth", "--out", str(root), "--ids", "4", "--cams", "2",
                 "--per", "3", "--seed", "1"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(dataset), "--out", str(out), "--depths", "4",
                 "--epochs", "2", "--seed", "0", "--quiet", *TINY_FLAGS])
    assert code == 0
    return out


class TestSynth:
    def test_summary_fields(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "d"),
                           "--ids", "8", "--cams", "2", "--per", "10", "--seed", "0")
        assert code == 0
        fields = dict(line.split("\t") for line in out.strip().splitlines())
        assert fields["images"] == "160"
        assert fields["ids"] == "8"
        assert fields["cameras"] == "2"
        assert fields["train_ids"] == "4"

    def test_single_identity_rejected(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "d"), "--ids", "1")
        assert code != 0
        assert "error:" in err

    def test_unknown_flag_rejected(self, capsys, tmp_path):
        code, _, _ = run(capsys, "synth", "--out", str(tmp_path / "d"), "--frobnicate", "1")
        assert code != 0


class TestTrain:
    def test_outputs_layout(self, trained):
        assert (trained / "checkpoints" / "final.ckpt").exists()
        assert (trained / "checkpoints" / "best.ckpt").exists()
        assert (trained / "logs" / "train.log").exists()

    def test_log_lines_tab_separated(self, trained):
        lines = (trained / "logs" / "train.log").read_text().strip().splitlines()
        assert len(lines) == 2
        assert all(len(line.split("\t")) == 5 for line in lines)

    def test_missing_manifest_fails(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--data", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "out"))
        assert code != 0 and "error:" in err

    def test_depths_none_is_baseline(self, capsys, dataset, tmp_path):
        code, _, _ = run(capsys, "train", "--data", str(dataset), "--out",
                         str(tmp_path / "out"), "--depths", "none", "--epochs", "1",
                         "--quiet", *TINY_FLAGS)
        assert code == 0

    def test_bad_depths_rejected(self, capsys, dataset, tmp_path):
        code, _, err = run(capsys, "train", "--data", str(dataset), "--out",
                           str(tmp_path / "out"), "--depths", "7")
        assert code != 0 and "error:" in err

    def test_config_file_with_cli_override(self, capsys, dataset, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs=5\nbatch_size=8\n# comment\nseed=3\n")
        out = tmp_path / "out"
        code, _, _ = run(capsys, "train", "--data", str(dataset), "--out", str(out),
                         "--config", str(cfg), "--epochs", "1", "--depths", "none",
                         "--quiet", *TINY_FLAGS)
        assert code == 0
        lines = (out / "logs" / "train.log").read_text().strip().splitlines()
        assert len(lines) == 1  # CLI --epochs 1 overrides the file's 5

    def test_unknown_config_key_rejected(self, capsys, dataset, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning=fast\n")
        code, _, err = run(capsys, "train", "--data", str(dataset),
                           "--out", str(tmp_path / "out"), "--config", str(cfg))
        assert code != 0 and "error:" in err

    def test_determinism_across_runs(self, capsys, dataset, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code, _, _ = run(capsys, "train", "--data", str(dataset), "--out", str(out),
                             "--depths", "4", "--epochs", "1", "--seed", "9",
                             "--quiet", *TINY_FLAGS)
            assert code == 0
            outs.append(out)
        log0 = [(o / "logs" / "train.log").read_bytes().splitlines()[0] for o in outs]
        assert log0[0] == log0[1]
        hashes = [hashlib.sha256((o / "checkpoints" / "final.ckpt").read_bytes()).hexdigest()
                  for o in outs]
        assert hashes[0] == hashes[1]


class TestEval:
    def test_report_columns(self, capsys, dataset, trained):
        code, out, _ = run(capsys, "eval", "--checkpoint",
                           str(trained / "checkpoints" / "final.ckpt"),
                           "--data", str(dataset))
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "method\tR1\tR5\tR10\tmAP"
        assert lines[1].startswith("SAG\t")
        assert "rank1=" in out and "map=" in out

    def test_rerank_adds_row(self, capsys, dataset, trained):
        code, out, _ = run(capsys, "eval", "--checkpoint",
                           str(trained / "checkpoints" / "final.ckpt"),
                           "--data", str(dataset), "--rerank", "--k1", "8", "--k2", "3")
        assert code == 0
        assert any(line.startswith("SAG+RR\t") for line in out.splitlines())

    def test_untrained_checkpoint_evaluates(self, capsys, dataset, tmp_path):
        cfg = BackboneConfig(stage_channels=(4, 8, 16, 32), num_classes=2)
        model = build_model(cfg, {4}, seed=0)
        ckpt = tmp_path / "raw.ckpt"
        save_checkpoint(model, ckpt)
        code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(dataset))
        assert code == 0
        values = dict(line.split("=") for line in out.strip().splitlines() if "=" in line)
        for key in ("rank1", "map"):
            assert 0.0 <= float(values[key]) <= 1.0

    def test_saves_embedding_file(self, capsys, dataset, trained, tmp_path):
        emb_path = tmp_path / "feats.emb"
        code, _, _ = run(capsys, "eval", "--checkpoint",
                         str(trained / "checkpoints" / "final.ckpt"),
                         "--data", str(dataset), "--save-embeddings", str(emb_path))
        assert code == 0
        from sagrid.retrieval import load_embeddings

        emb = load_embeddings(emb_path)
        assert emb.features.shape[1] == 32  # tiny config stage-4 width
        # 2 test ids: 2x2 query images plus 2x2x2 gallery images
        assert emb.features.shape[0] == 4 + 8

    def test_missing_checkpoint_fails(self, capsys, dataset, tmp_path):
        code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                           "--data", str(dataset))
        assert code != 0 and "error:" in err


class TestVisualize:
    def test_grid_and_overlay_outputs(self, capsys, dataset, trained, tmp_path):
        image = next(
            os.path.join(root, f)
            for root, _, files in os.walk(dataset)
            for f in sorted(files) if f.endswith(".ppm")
        )
        out = tmp_path / "viz"
        code, _, _ = run(capsys, "visualize", "--checkpoint",
                         str(trained / "checkpoints" / "final.ckpt"),
                         "--images", image, "--out", str(out))
        assert code == 0
        stem = os.path.splitext(os.path.basename(image))[0]
        grid_img = load_image(out / "viz" / f"{stem}_d4_grid.ppm")
        assert grid_img.shape == (3, 5, 2)  # native final-stage grid extent
        # inverse of the 8-bit quantization recovers a unit-sum grid
        assert grid_img[0].sum() == pytest.approx(1.0, abs=10 * 0.5 / 255 + 1e-6)
        overlay = load_image(out / "viz" / f"{stem}_d4_overlay.ppm")
        assert overlay.shape == load_image(image).shape

    def test_baseline_checkpoint_rejected(self, capsys, dataset, tmp_path):
        cfg = BackboneConfig(stage_channels=(4, 8, 16, 32), num_classes=2)
        ckpt = tmp_path / "base.ckpt"
        save_checkpoint(build_model(cfg, (), seed=0), ckpt)
        code, _, err = run(capsys, "visualize", "--checkpoint", str(ckpt),
                           "--images", "x.ppm", "--out", str(tmp_path / "v"))
        assert code != 0 and "error:" in err


class TestAblate:
    def test_table_shape_and_order(self, capsys, dataset, tmp_path):
        out = tmp_path / "ablation"
        code, stdout, _ = run(capsys, "ablate", "--data", str(dataset), "--out", str(out),
                              "--epochs", "1", "--seed", "0", *TINY_FLAGS)
        assert code == 0
        report = (out / "reports" / "ablation.tsv").read_text().strip().splitlines()
        assert report[0].split("\t")[0] == "config"
        labels = [line.split("\t")[0] for line in report[1:]]
        assert labels == ["Baseline", "D1", "D2", "D3", "D4", "D1,2", "D1,2,3", "D1,2,3,4"]
        d4 = report[5].split("\t")
        assert "(h=5,w=2)" in d4[1]
        d123 = report[7].split("\t")
        assert "(h=40,w=16)" in d123[1] and "(h=10,w=4)" in d123[1]
        for line in report[1:]:
            for value in line.split("\t")[2:]:
                assert 0.0 <= float(value) <= 100.0


def test_exactly_one_subcommand_required(capsys):
    assert main([]) != 0
    assert main(["bogus"]) != 0
