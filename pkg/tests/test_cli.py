"""End-to-end CLI tests on miniature configurations."""

from __future__ import annotations

import json

import pytest

from camp.cli import read_config_file, run

TINY_TRAIN_CFG = """
# miniature run for tests
model.d_model = 32
model.d_node = 16
model.d_mlp = 64
model.n_layers = 2
model.n_heads = 2
model.mpnn_steps = 2
model.dropout_rate = 0.0
train.support_sizes = 2,3
train.batch_size = 2
train.max_epochs = 2
train.batches_per_epoch = 2
train.base_lr = 1e-3
train.warmup_steps = 5
train.val_episodes = 4
data.split_fractions = 0.5,0.25,0.25
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    code = run(
        [
            "synth-data", "--tasks", "8", "--molecules", "10", "--feature-dim", "6",
            "--out", str(data), "--seed", "7",
        ]
    )
    assert code == 0
    cfg = root / "run.cfg"
    cfg.write_text(TINY_TRAIN_CFG, encoding="utf-8")
    return root, data, cfg


@pytest.fixture(scope="module")
def trained(workspace):
    root, data, cfg = workspace
    out = root / "ckpt"
    code = run(
        [
            "train", "--data", str(data), "--config", str(cfg),
            "--out", str(out), "--seed", "3",
        ]
    )
    assert code == 0
    return out


class TestSynthData:
    def test_dataset_and_manifest_written(self, workspace):
        root, data, _ = workspace
        assert data.exists()
        manifest = json.loads((data.parent / "manifest.json").read_text())
        assert manifest["command"] == "synth-data"
        assert manifest["seed"] == 7
        lines = data.read_text().splitlines()
        assert len(lines) == 9  # header + 8 tasks

    def test_unknown_flag_exits_one(self):
        assert run(["synth-data", "--bogus"]) == 1

    def test_missing_subcommand_exits_one(self):
        assert run([]) == 1


class TestTrain:
    def test_outputs(self, trained):
        for name in ("history.csv", "model.ckpt", "model.ckpt.meta.json",
                     "manifest.json", "valid_tasks.jsonl", "test_tasks.jsonl"):
            assert (trained / name).exists(), name

    def test_determinism_byte_identical(self, workspace, tmp_path):
        root, data, cfg = workspace
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run(
                [
                    "train", "--data", str(data), "--config", str(cfg),
                    "--out", str(out), "--seed", "11",
                ]
            )
            assert code == 0
            outs.append(out)
        a, b = outs
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_missing_data_file_exits_two(self, workspace, tmp_path):
        root, data, cfg = workspace
        code = run(
            [
                "train", "--data", str(tmp_path / "nope.jsonl"), "--config", str(cfg),
                "--out", str(tmp_path / "o"), "--seed", "0",
            ]
        )
        assert code == 2


class TestEvaluate:
    def test_sweep_csv(self, workspace, trained, tmp_path):
        root, data, cfg = workspace
        out = tmp_path / "eval"
        code = run(
            [
                "evaluate", "--data", str(trained / "test_tasks.jsonl"),
                "--model", str(trained / "model.ckpt"), "--out", str(out),
                "--support-sizes", "2,3", "--seeds", "2", "--seed", "0",
            ]
        )
        assert code == 0
        sweep = (out / "sweep.csv").read_text().splitlines()
        assert sweep[0].startswith("record,")
        assert any(line.startswith("aggregate,") for line in sweep)


class TestAnalyze:
    def test_artifacts(self, workspace, trained, tmp_path):
        root, data, cfg = workspace
        out = tmp_path / "analysis"
        code = run(
            [
                "analyze", "--data", str(data), "--model", str(trained / "model.ckpt"),
                "--out", str(out), "--seed", "1", "--support-size", "4",
            ]
        )
        assert code == 0
        assert (out / "pca" / "pre_encoder.csv").exists()
        assert (out / "pca" / "post_encoder.csv").exists()
        assert (out / "striation.csv").exists()
        flip = json.loads((out / "label_flip.json").read_text())
        assert flip["flip_index"] == 1
        attention = list((out / "attention").glob("*.json"))
        assert len(attention) == 4  # 2 layers x 2 heads


class TestBenchLatency:
    def test_latency_csv(self, workspace, trained, tmp_path):
        root, data, cfg = workspace
        out = tmp_path / "bench"
        code = run(
            [
                "bench-latency", "--data", str(trained / "test_tasks.jsonl"),
                "--model", str(trained / "model.ckpt"), "--out", str(out),
                "--support-sizes", "2,4", "--repeats", "2", "--seed", "0",
            ]
        )
        assert code == 0
        lines = (out / "latency.csv").read_text().splitlines()
        assert lines[0] == "support_size,repeat,seconds,n_episodes,us_per_episode"
        assert len(lines) == 5


class TestAblate:
    def test_positional_report_includes_invariance_check(self, workspace, tmp_path):
        root, data, cfg = workspace
        out = tmp_path / "ablate"
        code = run(
            [
                "ablate", "--data", str(data), "--config", str(cfg),
                "--out", str(out), "--seed", "5", "--variant", "positional",
            ]
        )
        assert code == 0
        assert (out / "history_camp.csv").exists()
        assert (out / "history_positional.csv").exists()
        report = (out / "ablation_report.txt").read_text()
        assert "invariance check" in report
        assert "PASS" in report

    def test_naive_variant_trains(self, workspace, tmp_path):
        root, data, cfg = workspace
        out = tmp_path / "ablate_naive"
        code = run(
            [
                "ablate", "--data", str(data), "--config", str(cfg),
                "--out", str(out), "--seed", "5", "--variant", "naive-icl",
            ]
        )
        assert code == 0
        assert (out / "history_naive_icl.csv").exists()


class TestConfigFile:
    def test_parse_types(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "a.x = 3\nb.y = 2.5\nc.z = true\nd.w = 4,8,16\ne.s = hello  # comment\n"
        )
        cfg = read_config_file(path)
        assert cfg == {
            "a.x": 3, "b.y": 2.5, "c.z": True, "d.w": (4, 8, 16), "e.s": "hello"
        }

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("not a key value line\n")
        from camp.moldata import DataError

        with pytest.raises(DataError):
            read_config_file(path)


class TestPlots:
    def test_evaluate_and_analyze_emit_svg(self, workspace, trained, tmp_path):
        pytest.importorskip("matplotlib")
        root, data, cfg = workspace
        out = tmp_path / "eval_plots"
        code = run(
            [
                "evaluate", "--data", str(trained / "test_tasks.jsonl"),
                "--model", str(trained / "model.ckpt"), "--out", str(out),
                "--support-sizes", "2,3", "--seeds", "2", "--seed", "0", "--plots",
            ]
        )
        assert code == 0
        svg = (out / "sweep.svg").read_text()
        assert "<svg" in svg

        out2 = tmp_path / "analysis_plots"
        code = run(
            [
                "analyze", "--data", str(data), "--model", str(trained / "model.ckpt"),
                "--out", str(out2), "--seed", "1", "--support-size", "4", "--plots",
            ]
        )
        assert code == 0
        assert "<svg" in (out2 / "snapshot.svg").read_text()
        assert "<svg" in (out2 / "label_flip.svg").read_text()


class TestNumericalFailureExit:
    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergent_training_exits_three(self, workspace, tmp_path):
        root, data, cfg = workspace
        bad_cfg = tmp_path / "bad.cfg"
        bad_cfg.write_text(
            TINY_TRAIN_CFG + "train.base_lr = 1e200\ntrain.warmup_steps = 1\n",
            encoding="utf-8",
        )
        code = run(
            [
                "train", "--data", str(data), "--config", str(bad_cfg),
                "--out", str(tmp_path / "boom"), "--seed", "0",
            ]
        )
        assert code == 3


class TestConfigResolution:
    def test_derived_widths_follow_config(self, tmp_path):
        from argparse import Namespace

        from camp.cli import _resolve_configs
        from camp.moldata import make_synthetic_tasks

        import numpy as np

        tasks = make_synthetic_tasks(2, 6, 5, np.random.default_rng(0))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("model.d_model = 64\nmodel.n_heads = 4\n")
        args = Namespace(config=str(cfg), profile="desk", seed=0)
        model_cfg, train_cfg = _resolve_configs(args, tasks)
        assert model_cfg.d_model == 64
        assert model_cfg.d_label == 8  # recomputed from d_model, not stale
        assert model_cfg.d_head == 64

    def test_unknown_key_rejected(self, tmp_path):
        from argparse import Namespace

        from camp.cli import _resolve_configs
        from camp.moldata import DataError, make_synthetic_tasks

        import numpy as np

        tasks = make_synthetic_tasks(2, 6, 5, np.random.default_rng(0))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("modle.d_model = 64\n")
        args = Namespace(config=str(cfg), profile="desk", seed=0)
        with pytest.raises(DataError, match="unknown config key"):
            _resolve_configs(args, tasks)

    def test_profile_then_config_precedence(self, tmp_path):
        from argparse import Namespace

        from camp.cli import _resolve_configs
        from camp.moldata import make_synthetic_tasks

        import numpy as np

        tasks = make_synthetic_tasks(2, 6, 5, np.random.default_rng(0))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("train.batch_size = 32\n")
        args = Namespace(config=str(cfg), profile="paper", seed=0)
        model_cfg, train_cfg = _resolve_configs(args, tasks)
        assert model_cfg.d_model == 768  # from the profile
        assert train_cfg.batch_size == 32  # config file overrides profile
        assert train_cfg.warmup_steps == 2000
