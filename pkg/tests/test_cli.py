"""Command line entry point, driven through main()."""

import json

import pytest

from config_manager import CACHE_ENV_VAR, ConfigManager
from data_manager import DataManager
from main import build_parser, main


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV_VAR, str(tmp_path / "cache"))


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_protocol_gen_synthetic(tmp_path, capsys):
    out = tmp_path / "p.json"
    code = main(["protocol", "gen", "--setting", "RGBD_MISS_D", "--alpha", "0.3", "--seed", "0",
                 "--synthetic", "20", "--out", str(out)])
    assert code == 0
    assert "RGB=6" in capsys.readouterr().out
    assignment = DataManager(tmp_path).load_protocol("p.json")
    assert dict(assignment.counts) == {"RGB": 6, "RGB-D": 14, "RGB-IR": 0, "RGB-D-IR": 0}


def test_invalid_alpha_reports_error(tmp_path, capsys):
    code = main(["protocol", "gen", "--setting", "RGBD_MISS_D", "--alpha", "1.5",
                 "--synthetic", "10", "--out", str(tmp_path / "p.json")])
    assert code == 1
    assert "❌" in capsys.readouterr().err
    assert not (tmp_path / "p.json").exists()


def test_data_synth_then_protocol_from_manifest(tmp_path, capsys):
    root = tmp_path / "data"
    assert main(["data", "synth", "--n-train", "6", "--n-dev", "4", "--n-test", "4", "--image-size", "8",
                 "--out", str(root)]) == 0
    assert len(list((root / "images").glob("*_rgb.png"))) == 14
    code = main(["protocol", "gen", "--setting", "RGBDIR_LIMITED", "--alpha", "0.2", "--manifest",
                 str(root / "manifest.csv"), "--split", "dev", "--out", str(tmp_path / "dev.json")])
    assert code == 0
    assignment = DataManager(tmp_path).load_protocol("dev.json")
    assert sorted(assignment.availability) == [f"dev-{i:06d}" for i in range(4)]
    missing = main(["protocol", "gen", "--setting", "RGBD_MISS_D", "--alpha", "0.2", "--manifest",
                    str(root / "manifest.csv"), "--split", "val", "--out", str(tmp_path / "val.json")])
    assert missing == 1


def test_params_report(capsys):
    assert main(["params"]) == 0
    out = capsys.readouterr().out
    assert "Parameter breakdown" in out and "Trainable" in out
    assert main(["params", "--variant", "vit"]) == 0


def test_config_save(tmp_path, capsys):
    target = tmp_path / "resolved.json"
    assert main(["config", "--variant", "prompt", "--save", str(target)]) == 0
    assert "Configuration Status" in capsys.readouterr().out
    data = json.loads(target.read_text(encoding="utf-8"))
    assert data["variant"] == "prompt" and data["use_mmr"] is False


def test_cache_stats_and_clear(tmp_path, capsys):
    assert main(["cache", "stats"]) == 0
    assert "total_entries: 0" in capsys.readouterr().out
    assert main(["cache", "clear"]) == 0
    assert "Removed 0" in capsys.readouterr().out


def test_check_masking(capsys):
    assert main(["check", "masking", "--gamma", "0.1", "--draws", "200000"]) == 0
    out = capsys.readouterr().out
    assert "MASK_D_IR" in out and "passed" in out


def test_sweep_rejects_unknown_setting(tmp_path, capsys):
    code = main(["sweep", "--settings", "RGB_ONLY", "--alphas", "0.5", "--out", str(tmp_path / "s")])
    assert code == 1
    assert "RGB_ONLY" in capsys.readouterr().err


def test_train_then_eval(tmp_path, tiny_experiment, capsys):
    config_path = ConfigManager(tmp_path).save(tiny_experiment, tmp_path / "exp.json")
    assert main(["train", "--config", str(config_path)]) == 0
    assert "Test ACER" in capsys.readouterr().out
    run = tmp_path / "run"

    assert main(["eval", "--dev", str(run / "scores_dev.csv"), "--test", str(run / "scores_test.csv")]) == 0
    assert "acer" in capsys.readouterr().out
    from_scores = json.loads((run / "report.json").read_text(encoding="utf-8"))

    out = tmp_path / "eval.json"
    assert main(["eval", "--ckpt", str(run / "checkpoint.fpk"), "--dev", str(run / "protocol_dev.json"),
                 "--test", str(run / "protocol_test.json"), "--out", str(out)]) == 0
    rescored = json.loads(out.read_text(encoding="utf-8"))
    assert rescored["acer"] == pytest.approx(from_scores["acer"])
    assert rescored["threshold"] == pytest.approx(from_scores["threshold"])


def test_train_on_directory_dataset(tmp_path, tiny_experiment, capsys):
    root = tmp_path / "data"
    assert main(["data", "synth", "--n-train", "8", "--n-dev", "4", "--n-test", "4", "--image-size", "16",
                 "--out", str(root)]) == 0
    cfg = tiny_experiment.to_dict()
    cfg["dataset"].update(source="directory", root=str(root), manifest=str(root / "manifest.csv"))
    config_path = tmp_path / "dir.json"
    config_path.write_text(json.dumps(cfg), encoding="utf-8")
    assert main(["train", "--config", str(config_path), "--output-dir", str(tmp_path / "dir_run"),
                 "--select", "last"]) == 0
    assert (tmp_path / "dir_run" / "checkpoint.fpk").exists()
