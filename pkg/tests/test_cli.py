"""CLI surface: command outputs, exit codes, seeds, tiny end-to-end run."""

import hashlib
import os

import numpy as np
import pytest

from cellfuse.cli import main


def sha_tree(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(name.encode())
            digest.update(open(path, "rb").read())
    return digest.hexdigest()


TRAIN_CFG = """
seed=7
input_size=32
n_cell_types=2
encoder_kind=hierarchical
encoder_base_channels=16
epochs=5
batch_size=4
lr_peak=1e-3
lr_final=1e-5
min_seed_area=4
data_dir={data}
out_dir={out}
"""


class TestSimpleCommands:
    def test_select_blocks_stdout(self, capsys):
        assert main(["select-blocks", "--n", "32", "--strategy", "mixed"]) == 0
        assert capsys.readouterr().out.strip() == "2 5 14 28"

    def test_select_blocks_config_error_exit_2(self, capsys):
        assert main(["select-blocks", "--n", "4", "--strategy", "mixed"]) == 2
        assert "error: config:" in capsys.readouterr().err

    def test_missing_config_exit_3(self, capsys):
        assert main(["train", "--config", "/nonexistent/cfg"]) == 3
        assert "error: missing:" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "cfg"
        cfg.write_text("bogus_key=1\n")
        assert main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "bogus_key" in err

    def test_help_lists_every_flag_with_default(self, capsys):
        with pytest.raises(SystemExit):
            main(["gen-synth", "--help"])
        out = capsys.readouterr().out
        for flag in ("--count", "--size", "--touch-prob", "--seed", "--noise"):
            assert flag in out
        assert "default" in out

    def test_gen_synth_seed_determinism(self, tmp_path, capsys):
        args = ["gen-synth", "--count", "10", "--size", "32", "--min-count", "2",
                "--max-count", "4", "--seed", "5"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert sha_tree(tmp_path / "a") == sha_tree(tmp_path / "b")


class TestEval:
    def test_eval_identity_scores_100(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["gen-synth", "--out", str(data), "--count", "10", "--size", "32",
                     "--min-count", "2", "--max-count", "3", "--seed", "1"]) == 0
        labels = str(data / "labels")
        out_csv = str(tmp_path / "metrics.csv")
        assert main(["eval", "--gt", labels, "--pred", labels, "--out", out_csv,
                     "--n-types", "3"]) == 0
        out = capsys.readouterr().out
        assert "100.00" in out
        rows = open(out_csv).read().strip().splitlines()
        assert rows[0] == "image_id,P,R,DQ,SQ,PQ"
        assert all(line.endswith("1.000000") for line in rows[1:])

    def test_eval_missing_pred_exit_3(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(["gen-synth", "--out", str(data), "--count", "10", "--size", "32",
              "--min-count", "1", "--max-count", "2", "--seed", "2"])
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--gt", str(data / "labels"), "--pred", str(empty),
                     "--out", str(tmp_path / "m.csv")]) == 3


@pytest.mark.slow
class TestEndToEnd:
    def test_tiny_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        assert main(["gen-synth", "--out", str(data), "--count", "40", "--size", "32",
                     "--n-types", "2", "--min-count", "2", "--max-count", "4",
                     "--min-radius", "3", "--max-radius", "6", "--seed", "3"]) == 0

        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(TRAIN_CFG.format(data=data, out=run))
        assert main(["train", "--config", str(cfg_path)]) == 0
        assert (run / "best.fckp").exists()
        assert (run / "loss_curve.csv").exists()

        # infer on the test split images (copy them into a directory)
        from cellfuse.dataio import read_manifest
        manifest = read_manifest(str(data / "manifest.tsv"))
        test_recs = manifest.by_split("test")
        test_dir = tmp_path / "test_images"
        gt_dir = tmp_path / "test_labels"
        test_dir.mkdir()
        gt_dir.mkdir()
        import shutil
        for rec in test_recs:
            shutil.copy(data / rec.image_path, test_dir / os.path.basename(rec.image_path))
            shutil.copy(data / rec.label_path, gt_dir / os.path.basename(rec.label_path))
            side = os.path.splitext(rec.label_path)[0] + ".types.json"
            shutil.copy(data / side, gt_dir / os.path.basename(side))

        maps_dir = tmp_path / "maps"
        assert main(["infer", "--config", str(cfg_path), "--checkpoint",
                     str(run / "best.fckp"), "--input", str(test_dir),
                     "--out", str(maps_dir)]) == 0
        assert len(list(maps_dir.glob("*.maps.npz"))) == len(test_recs)

        pred_dir = tmp_path / "pred"
        assert main(["postproc", "--maps", str(maps_dir), "--out", str(pred_dir),
                     "--min-seed-area", "4", "--threads", "2"]) == 0

        out_csv = tmp_path / "metrics.csv"
        assert main(["eval", "--gt", str(gt_dir), "--pred", str(pred_dir),
                     "--out", str(out_csv), "--n-types", "2", "--threads", "2"]) == 0
        rows = open(out_csv).read().strip().splitlines()[1:]
        mean_pq = sum(float(r.split(",")[5]) for r in rows) / len(rows)
        assert mean_pq > 0.0  # 5 epochs on a tiny model already detects something

        assert main(["report", str(out_csv)]) == 0
        out = capsys.readouterr().out
        assert "mPQ+" in out
