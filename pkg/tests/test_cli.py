import json

import pytest

from ccreid.cli import build_parser, main
from ccreid.config import default_key_listing


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = run(["synth", "--out", str(out), "--ids", "4", "--clothes", "2",
                "--per", "4", "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def small_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    cfg = {"backbone": {"out_channels": 16}, "cdn": {"j_out": 8},
           "trainer": {"p": 2, "k": 2, "epochs": 1, "lr_decay_epochs": []}}
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained_dir(cli_dataset, small_config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                "--config", str(small_config_file), "--out", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_outputs_valid_dataset(self, cli_dataset):
        from ccreid.data import load_manifest
        m = load_manifest(cli_dataset / "manifest.json")
        assert len(m.records) == 4 * 2 * 4

    def test_rerun_without_force_fails(self, cli_dataset, capsys):
        code = run(["synth", "--out", str(cli_dataset), "--ids", "2",
                    "--clothes", "2", "--per", "2"])
        assert code == 2
        assert "--force" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("r1", "r2"):
            assert run(["synth", "--out", str(tmp_path / name), "--ids", "2",
                        "--clothes", "2", "--per", "2", "--seed", "7"]) == 0
        a = sorted((tmp_path / "r1").rglob("*.*"))
        b = sorted((tmp_path / "r2").rglob("*.*"))
        assert [f.name for f in a] == [f.name for f in b]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


class TestTrain:
    def test_missing_config_file(self, cli_dataset, tmp_path, capsys):
        code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(tmp_path / "absent.json"),
                    "--out", str(tmp_path / "o")])
        assert code == 2

    def test_epochs_flag_beats_config(self, cli_dataset, small_config_file,
                                      tmp_path):
        out = tmp_path / "short"
        code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(small_config_file), "--out", str(out),
                    "--epochs", "2"])
        assert code == 0
        records = [json.loads(line) for line in
                   (out / "train_log.jsonl").read_text().splitlines()]
        assert max(r["epoch"] for r in records) == 2

    def test_dotted_override(self, cli_dataset, small_config_file, tmp_path):
        out = tmp_path / "ovr"
        code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(small_config_file), "--out", str(out),
                    "--trainer.epochs=2", "--losses.alpha=0.5"])
        assert code == 0
        from ccreid.trainer import load_training_checkpoint
        _, _, epoch, cfg = load_training_checkpoint(out / "checkpoint.ckpt")
        assert epoch == 2
        assert cfg.losses.alpha == 0.5

    def test_unknown_override_key(self, cli_dataset, small_config_file,
                                  tmp_path, capsys):
        code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(small_config_file),
                    "--out", str(tmp_path / "x"), "--trainer.bogus=1"])
        assert code == 2
        assert "bogus" in capsys.readouterr().err

    def test_ablation_flag_recorded(self, cli_dataset, small_config_file,
                                    tmp_path):
        out = tmp_path / "abl"
        code = run(["train", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(small_config_file), "--out", str(out),
                    "--ablation", "mgr"])
        assert code == 0
        from ccreid.trainer import load_training_checkpoint
        _, _, _, cfg = load_training_checkpoint(out / "checkpoint.ckpt")
        assert cfg.trainer.ablation == ["mgr"]


class TestEvalAndExtract:
    def test_eval_report_schema(self, cli_dataset, trained_dir, tmp_path,
                                capsys):
        report_path = tmp_path / "report.json"
        code = run(["eval", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
                    "--manifest", str(cli_dataset / "manifest.json"),
                    "--out", str(report_path), "--cloth-change-only"])
        assert code == 0
        report = json.loads(report_path.read_text())
        for key in ("mAP", "rank1", "cmc", "num_queries", "num_dropped",
                    "cloth_change_only"):
            assert key in report
        assert report["cloth_change_only"] is True
        assert 0.0 <= report["mAP"] <= 1.0

    def test_extract_writes_descriptors(self, cli_dataset, trained_dir,
                                        tmp_path):
        out = tmp_path / "g.desc"
        code = run(["extract", "--checkpoint",
                    str(trained_dir / "checkpoint.ckpt"),
                    "--manifest", str(cli_dataset / "manifest.json"),
                    "--split", "gallery", "--out", str(out)])
        assert code == 0
        from ccreid.evaluator import load_descriptors
        d = load_descriptors(out)
        assert d.features.shape[0] == 4  # one gallery image per identity
        assert (d.features.shape[1] ==
                6 * 8)

    def test_bad_checkpoint_path(self, cli_dataset, tmp_path, capsys):
        code = run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                    "--manifest", str(cli_dataset / "manifest.json")])
        assert code in (1, 2)


class TestAblate:
    def test_four_variants_trained_and_reported(self, cli_dataset,
                                                small_config_file, tmp_path):
        out = tmp_path / "ablation"
        code = run(["ablate", "--manifest", str(cli_dataset / "manifest.json"),
                    "--config", str(small_config_file), "--out", str(out),
                    "--cloth-change-only"])
        assert code == 0
        report = json.loads((out / "ablation_report.json").read_text())
        variants = [r["variant"] for r in report["rows"]]
        assert variants == ["baseline", "mgr", "mgr+cdn", "mgr+cdn+psa"]
        for r in report["rows"]:
            assert 0.0 <= r["mAP"] <= 1.0
            assert 0.0 <= r["rank1"] <= 1.0


class TestHelp:
    def test_help_lists_every_config_key(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for line in default_key_listing():
            key = line.split(" = ")[0]
            assert key in text, f"--help is missing config key {key}"

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["not-a-command"])
        assert exc.value.code == 2
