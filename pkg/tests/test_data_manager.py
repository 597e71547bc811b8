"""Tensor archives, JSON artifacts, protocols and score files."""

import pytest
import torch

from data_manager import DataManager, read_scores, read_tensor_archive, write_tensor_archive
from data_structures import (
    EpochRecord, EvalReport, ProtocolSetting, ProtocolSpec, RunRecord, ScoreSet,
)
from flexdata import generate_protocol
from validation import CheckpointError, DatasetError


def test_tensor_archive_round_trip(tmp_path):
    tensors = {
        "b": torch.arange(6, dtype=torch.float64).reshape(2, 3),
        "a": torch.tensor([1.5, -2.0], dtype=torch.float32),
        "c": torch.tensor([[1, 2]], dtype=torch.int64),
    }
    path = tmp_path / "x.fpk"
    write_tensor_archive(path, {"k": [1, 2]}, tensors, "abc")
    config, loaded, fingerprint = read_tensor_archive(path)
    assert config == {"k": [1, 2]}
    assert fingerprint == "abc"
    assert set(loaded) == set(tensors)
    for name, tensor in tensors.items():
        assert loaded[name].dtype == tensor.dtype
        assert torch.equal(loaded[name], tensor)


def test_tensor_archive_bytes_are_deterministic(tmp_path):
    tensors = {"w": torch.linspace(0, 1, 5)}
    write_tensor_archive(tmp_path / "one.fpk", {"b": 1, "a": 2}, tensors, "f")
    write_tensor_archive(tmp_path / "two.fpk", {"a": 2, "b": 1}, tensors, "f")
    assert (tmp_path / "one.fpk").read_bytes() == (tmp_path / "two.fpk").read_bytes()


def test_corrupt_archive(tmp_path):
    path = tmp_path / "broken.fpk"
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        read_tensor_archive(path)


def test_safe_json_backs_up_corrupt_file(tmp_path):
    dm = DataManager(tmp_path)
    (tmp_path / "state.json").write_text("{oops", encoding="utf-8")
    assert dm.safe_json_load("state.json", default_value={}) == {}
    assert not (tmp_path / "state.json").exists()
    assert list(tmp_path.glob("state.json.backup_*"))


def test_safe_json_save_is_sorted(tmp_path):
    dm = DataManager(tmp_path)
    dm.safe_json_save("out.json", {"z": 1, "a": {"y": 2, "b": 3}})
    text = (tmp_path / "out.json").read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"z"')
    assert dm.safe_json_load("out.json") == {"z": 1, "a": {"y": 2, "b": 3}}
    assert dm.safe_json_load("missing.json", default_value=7) == 7


def test_protocol_round_trip(tmp_path):
    dm = DataManager(tmp_path)
    assignment = generate_protocol([f"s{i}" for i in range(12)], ProtocolSpec(ProtocolSetting.RGBDIR_LIMITED, 0.3, 4))
    dm.save_protocol(assignment, "p.json")
    loaded = dm.load_protocol("p.json")
    assert loaded.spec == assignment.spec
    assert dict(loaded.availability) == dict(assignment.availability)
    assert dict(loaded.counts) == dict(assignment.counts)
    with pytest.raises(DatasetError):
        dm.load_protocol("absent.json")


def test_scores_round_trip(tmp_path):
    dm = DataManager(tmp_path)
    scores = ScoreSet(scores=[0.1, 0.9, 1 / 3], labels=[0, 1, 1], split="dev", ids=["a", "b", "c"])
    path = dm.write_scores(scores, "scores_dev.csv")
    loaded = read_scores(path)
    assert loaded.scores == scores.scores
    assert loaded.labels == scores.labels
    assert loaded.ids == scores.ids
    assert loaded.split == "dev"
    assert read_scores(path, split="test").scores == []


def test_read_scores_header(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("id,value\na,0.5\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        read_scores(path)


def test_reports_and_records(tmp_path):
    dm = DataManager(tmp_path)
    report = EvalReport(threshold=0.4, apcer=0.1, bpcer=0.2, acer=0.15, counts={"live": 3, "spoof": 4})
    dm.save_report(report)
    assert EvalReport.from_dict(dm.safe_json_load("report.json")) == report
    record = RunRecord(config_hash="h", best_epoch=2, test_report=report)
    record.append(EpochRecord(epoch=1, bce=0.6, mmr=-0.5, total=0.1, dev_acer=0.3))
    dm.save_run_record(record)
    again = RunRecord.from_dict(dm.safe_json_load("run_record.json"))
    assert again.epochs == record.epochs
    assert again.test_report == report
