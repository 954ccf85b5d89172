import json

import pytest

from distillkit.backbone import build_student, desk_student_config
from distillkit.cli import main
from distillkit.config import ConfigError, load_run_config


class TestConfigLoading:
    def test_defaults_round_out_missing_sections(self, tmp_path):
        path = tmp_path / "min.toml"
        path.write_text('[run]\nseed = 3\n')
        cfg = load_run_config(path)
        assert cfg.run.seed == 3
        assert cfg.data.kind == "synthetic"
        assert cfg.run.name == "min"
        assert cfg.config_hash

    def test_unknown_key_named_in_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[train]\nlearning_rate = 0.1\n')
        with pytest.raises(ConfigError, match="learning_rate"):
            load_run_config(path)

    def test_wrong_type_named_in_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[train]\nepochs = "ten"\n')
        with pytest.raises(ConfigError, match="train.epochs"):
            load_run_config(path)

    def test_folder_kind_requires_root(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[data]\nkind = "folder"\n')
        with pytest.raises(ConfigError, match="data.root"):
            load_run_config(path)

    def test_bad_distill_weight_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[distill]\nweight_inter = -1.0\n')
        with pytest.raises(ConfigError, match="weight_inter"):
            load_run_config(path)

    def test_stage_tables_parsed(self, write_config):
        cfg = load_run_config(write_config())
        assert len(cfg.student_stages) == 2
        assert cfg.student_stages[1].out_channels == 32


class TestTrainCommand:
    def test_train_writes_all_artifacts(self, write_config, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["train", "--config", str(write_config()), "--out", str(out)])
        assert code == 0
        run_dir = out / "desk-s0"
        for artifact in ("history.csv", "last.ckpt", "best.ckpt", "eval.json",
                         "manifest.json", "student.graph"):
            assert (run_dir / artifact).exists(), artifact
        assert (run_dir / "teacher" / "history.csv").exists()
        assert "top1=" in capsys.readouterr().out

    def test_rerun_same_seed_reproduces_history(self, write_config, tmp_path):
        cfg = write_config()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(cfg), "--out", str(out_a)]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(out_b)]) == 0
        hist_a = (out_a / "desk-s0" / "history.csv").read_bytes()
        hist_b = (out_b / "desk-s0" / "history.csv").read_bytes()
        assert hist_a == hist_b

    def test_missing_dataset_root_exits_2(self, write_config, tmp_path, capsys):
        code = main(["train", "--config", str(write_config()),
                     "--dataset-root", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nepochs = -3\n")
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "epochs" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "ghost.toml")]) == 2

    def test_env_var_sets_output_root(self, write_config, tmp_path, monkeypatch):
        env_out = tmp_path / "env-out"
        monkeypatch.setenv("DISTILLKIT_OUT", str(env_out))
        assert main(["train", "--config", str(write_config())]) == 0
        assert (env_out / "desk-s0" / "history.csv").exists()

    def test_folder_dataset_without_distillation(self, tmp_path):
        from PIL import Image
        import numpy as np

        rng = np.random.default_rng(0)
        root = tmp_path / "tree"
        for name in ("stripey", "plain"):
            (root / name).mkdir(parents=True)
            for i in range(10):
                pixels = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
                if name == "stripey":
                    pixels[::2] = 255
                Image.fromarray(pixels).save(root / name / f"img_{i:02d}.jpg")

        config = tmp_path / "folder.toml"
        config.write_text(
            f'[run]\nname = "folder"\nseed = 0\n\n'
            f'[data]\nkind = "folder"\nroot = "{root.as_posix()}"\n'
            f'image_hw = [32, 32]\n\n'
            '[student]\nstem_channels = 4\nstages = [\n'
            '  {out_channels = 8, blocks = 2, ghost_ratio = 0.5, stride = 2},\n'
            ']\n\n'
            '[train]\nepochs = 2\nbatch_size = 8\n\n'
            '[distill]\nenabled = false\n')
        out = tmp_path / "out"
        assert main(["train", "--config", str(config), "--out", str(out)]) == 0
        run_dir = out / "folder-s0"
        assert (run_dir / "history.csv").exists()
        assert not (run_dir / "teacher").exists()  # no teacher when disabled
        history = (run_dir / "history.csv").read_text().splitlines()
        assert len(history) == 3  # header + 2 epochs


class TestEvalCommand:
    def test_eval_rewrites_report(self, write_config, tmp_path):
        out = tmp_path / "out"
        cfg = write_config()
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        run_dir = out / "desk-s0"
        (run_dir / "eval.json").unlink()
        assert main(["eval", "--config", str(cfg), "--run", str(run_dir)]) == 0
        report = json.loads((run_dir / "eval.json").read_text())
        assert set(report) >= {"n_total", "top1", "top5", "params", "flops"}

    def test_eval_missing_checkpoint_exits_2(self, write_config, tmp_path):
        code = main(["eval", "--config", str(write_config()),
                     "--run", str(tmp_path / "empty-run")])
        assert code == 2


class TestAnalyzeCommand:
    def test_analyze_prints_millions_with_two_decimals(self, tmp_path, capsys):
        graph = build_student(desk_student_config())
        path = tmp_path / "student.graph"
        graph.save(path)
        assert main(["analyze", str(path), "--input-hw", "32", "32"]) == 0
        out = capsys.readouterr().out
        assert "params (M):" in out
        assert "multiply-accumulates" in out

    def test_input_hw_scales_macs(self, tmp_path, capsys):
        graph = build_student(desk_student_config())
        path = tmp_path / "student.graph"
        graph.save(path)
        macs = {}
        for hw in ("32", "64"):
            assert main(["analyze", str(path), "--input-hw", hw, hw, "--json"]) == 0
            macs[hw] = json.loads(capsys.readouterr().out)["total_macs"]
        assert macs["64"] > 3 * macs["32"]

    def test_malformed_graph_exits_2_with_line_number(self, tmp_path, capsys):
        path = tmp_path / "broken.graph"
        path.write_text("# layergraph v1\nin input channels=3 <- -\nbroken\n")
        assert main(["analyze", str(path), "--input-hw", "32", "32"]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_stage_crosscheck_prints_ratios(self, capsys):
        assert main(["analyze", "--stage", "n=4,ghost_ratio=0.5,channels=64",
                     "--input-hw", "32", "32"]) == 0
        out = capsys.readouterr().out
        assert "empirical" in out and "symbolic" in out

    def test_stage_spec_typo_exits_2(self, capsys):
        assert main(["analyze", "--stage", "n=4,ghost=0.5,channels=64"]) == 2


class TestAblateCommand:
    def test_three_row_table_with_expected_pattern(self, write_config, tmp_path, capsys):
        out = tmp_path / "ablate-out"
        code = main(["ablate", "--config", str(write_config(epochs=2, teacher_epochs=2)),
                     "--out", str(out)])
        assert code == 0
        csv_text = (out / "ablation.csv").read_text()
        lines = csv_text.strip().splitlines()
        assert len(lines) == 4  # header + 3 rows
        rows = [line.split(",") for line in lines[1:]]
        assert [r[1] for r in rows] == ["×", "✓", "✓"]
        assert [r[2] for r in rows] == ["×", "×", "✓"]
        # rows 2 and 3 share the student architecture, so identical params
        assert rows[1][3] == rows[2][3]
        assert (out / "ablation.txt").exists()


class TestReportCommand:
    def test_report_merges_runs_sorted_by_params(self, write_config, tmp_path):
        out = tmp_path / "out"
        cfg = write_config()
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == 0
        report_dir = tmp_path / "report"
        runs = [str(out / "desk-s0"), str(out / "desk-s1")]
        assert main(["report", *runs, "--out", str(report_dir)]) == 0
        csv_text = (report_dir / "report.csv").read_text()
        assert csv_text.splitlines()[0] == "model,params_m,flops_m,top1,top5"
        assert len(csv_text.strip().splitlines()) == 3
        assert (report_dir / "desk-s0-curves.png").exists()
        assert (report_dir / "desk-s1-curves.png").exists()
        # csv -> render -> csv is lossless
        roundtrip = (report_dir / "report_roundtrip.csv").read_text()
        assert roundtrip == csv_text

    def test_report_is_idempotent(self, write_config, tmp_path):
        out = tmp_path / "out"
        cfg = write_config()
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        report_dir = tmp_path / "report"
        assert main(["report", str(out / "desk-s0"), "--out", str(report_dir)]) == 0
        first = (report_dir / "report.csv").read_text()
        first_txt = (report_dir / "report.txt").read_text()
        assert main(["report", str(out / "desk-s0"), "--out", str(report_dir)]) == 0
        assert (report_dir / "report.csv").read_text() == first
        assert (report_dir / "report.txt").read_text() == first_txt

    def test_no_runs_found_exits_2(self, tmp_path):
        assert main(["report", str(tmp_path / "missing-run")]) == 2
