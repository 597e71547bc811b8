"""
File I/O for flexprompt artifacts.

This module handles saving and loading of:
- Tensor archives (prompt/head checkpoints and backbone exports)
- Protocol assignments, the reproducibility artifact of every run
- Score files and evaluation reports
- Resolved configs and run records

JSON is written canonically (sorted keys) so that identical runs produce
identical bytes. Tensor archives are zip files with fixed timestamps for
the same reason.
"""

import csv
import io
import json
import logging
import os
import zipfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from data_structures import EvalReport, ProtocolAssignment, RunRecord, ScoreSet
from validation import CheckpointError, DatasetError

logger = logging.getLogger(__name__)

ARCHIVE_EPOCH = (1980, 1, 1, 0, 0, 0)
SCORE_HEADER = ["id", "score", "label", "split"]


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _zip_write(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=ARCHIVE_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, payload)


def write_tensor_archive(path: Union[str, Path], config: dict, tensors: Dict[str, torch.Tensor],
                         fingerprint: str) -> None:
    """
    Write config, named tensors and a backbone fingerprint into one archive.

    Layout:
        config.json     canonical JSON
        manifest.json   [{name, dtype, shape, offset, nbytes}, ...] in name order
        tensors.bin     row-major little-endian data, concatenated
        fingerprint.txt SHA-256 hex digest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, blob, offset = [], io.BytesIO(), 0
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().contiguous().numpy()
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        manifest.append({
            "name": name,
            "dtype": array.dtype.name,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blob.write(data)
        offset += len(data)

    temp_path = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(temp_path, "w") as archive:
        _zip_write(archive, "config.json", canonical_json(config).encode("utf-8"))
        _zip_write(archive, "manifest.json", canonical_json(manifest).encode("utf-8"))
        _zip_write(archive, "tensors.bin", blob.getvalue())
        _zip_write(archive, "fingerprint.txt", fingerprint.encode("ascii"))
    os.replace(temp_path, path)


def read_tensor_archive(path: Union[str, Path]) -> Tuple[dict, Dict[str, torch.Tensor], str]:
    """
    Read an archive written by write_tensor_archive.

    Returns:
        Tuple of (config, tensors, fingerprint)
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as archive:
            config = json.loads(archive.read("config.json").decode("utf-8"))
            manifest = json.loads(archive.read("manifest.json").decode("utf-8"))
            blob = archive.read("tensors.bin")
            fingerprint = archive.read("fingerprint.txt").decode("ascii").strip()
    except (zipfile.BadZipFile, KeyError, OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Could not read archive {path}: {e}")

    tensors = {}
    for entry in manifest:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
    return config, tensors, fingerprint


class DataManager:
    """
    Handles all file I/O for one artifact directory.

    Features:
    - Atomic JSON writes via a temporary file
    - Corrupted JSON files are backed up instead of silently overwritten
    - Score CSVs and protocol JSONs in the documented formats
    """

    def __init__(self, data_dir: Union[str, Path]):
        """
        Initialize the data manager.

        Args:
            data_dir: Directory to store artifacts in
        """
        self.data_dir = Path(data_dir)
        self._ensure_data_directory()

    def _ensure_data_directory(self) -> None:
        try:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IOError(f"Could not create data directory '{self.data_dir}': {e}")

    def path(self, name: str) -> Path:
        return self.data_dir / name

    def safe_json_load(self, name: str, default_value: Any = None) -> Any:
        """
        Load JSON from a file, backing up corrupted files.

        Args:
            name: File name inside the data directory
            default_value: Value to return if the file doesn't exist or is invalid
        """
        filepath = self.path(name)
        try:
            if not filepath.exists():
                return default_value
            content = filepath.read_text(encoding="utf-8").strip()
            if not content:
                return default_value
            return json.loads(content)
        except (json.JSONDecodeError, IOError, UnicodeDecodeError) as e:
            logger.warning("Could not load %s: %s", filepath, e)
            backup_path = filepath.with_name(f"{filepath.name}.backup_{datetime.now().strftime('%Y%m%d_%H%M%S')}")
            try:
                os.rename(filepath, backup_path)
                logger.warning("Corrupted file backed up to: %s", backup_path)
            except OSError:
                pass
            return default_value

    def safe_json_save(self, name: str, data: Any, indent: Optional[int] = 2) -> Path:
        """Write JSON atomically; keys are sorted so equal data gives equal bytes."""
        filepath = self.path(name)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        temp_filepath = filepath.with_name(filepath.name + ".tmp")
        try:
            with open(temp_filepath, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=indent, sort_keys=True, ensure_ascii=False)
                f.write("\n")
            os.replace(temp_filepath, filepath)
        except (IOError, OSError):
            if temp_filepath.exists():
                temp_filepath.unlink()
            raise
        return filepath

    def save_protocol(self, assignment: ProtocolAssignment, name: str = "protocol.json") -> Path:
        return self.safe_json_save(name, assignment.to_dict())

    def load_protocol(self, name: str = "protocol.json") -> ProtocolAssignment:
        data = self.safe_json_load(name)
        if data is None:
            raise DatasetError(f"Protocol file {self.path(name)} is missing or empty")
        return ProtocolAssignment.from_dict(data)

    def save_report(self, report: EvalReport, name: str = "report.json") -> Path:
        return self.safe_json_save(name, report.to_dict())

    def save_run_record(self, record: RunRecord, name: str = "run_record.json") -> Path:
        return self.safe_json_save(name, record.to_dict())

    def write_scores(self, scores: ScoreSet, name: str) -> Path:
        ids = scores.ids or [str(i) for i in range(len(scores.scores))]
        filepath = self.path(name)
        with open(filepath, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(SCORE_HEADER)
            for sid, score, label in zip(ids, scores.scores, scores.labels):
                writer.writerow([sid, repr(float(score)), int(label), scores.split])
        return filepath


def read_scores(path: Union[str, Path], split: Optional[str] = None) -> ScoreSet:
    """Read an `id,score,label,split` CSV, optionally keeping a single split."""
    ids: List[str] = []
    scores: List[float] = []
    labels: List[int] = []
    seen_split = split
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(SCORE_HEADER) - set(reader.fieldnames):
            raise DatasetError(f"Score file {path} must have header {','.join(SCORE_HEADER)}")
        for row in reader:
            if split is not None and row["split"] != split:
                continue
            ids.append(row["id"])
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
            seen_split = row["split"]
    return ScoreSet(scores=scores, labels=labels, split=seen_split or "test", ids=ids)
