"""On-disk dataset format: ``manifest.json`` plus one ``<id>.ecg`` file per record.

Each ``.ecg`` file holds the preprocessed signal as raw little-endian
float32, lead-major (all samples of lead 0, then lead 1, ...). The manifest
lists the task, label names, lead order and per-record entries
``{"id", "file", "offset", "labels"}``.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..backbone import LEAD_NAMES
from ..errors import InputError
from .preprocess import TARGET_LENGTH, TARGET_RATE, preprocess

DATA_VERSION = "ecgsoup-data-v1"
MANIFEST = "manifest.json"
_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray
    labels: np.ndarray
    source_rate: float = TARGET_RATE
    source_length: int = TARGET_LENGTH

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if not _ID_RE.match(self.id):
            raise InputError(f"record id {self.id!r} must match {_ID_RE.pattern}")
        if self.signal.ndim != 2:
            raise InputError(f"record {self.id}: signal must be (leads, samples), got {self.signal.shape}")
        if not np.all(np.isfinite(self.signal)):
            raise InputError(f"record {self.id}: non-finite samples")


@dataclass
class DatasetManifest:
    task: str
    label_names: list
    records: list = field(default_factory=list)
    leads: list = field(default_factory=lambda: list(LEAD_NAMES))
    length: int = TARGET_LENGTH
    sampling_rate: int = TARGET_RATE
    version: str = DATA_VERSION

    def validate(self):
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise InputError("record ids in the manifest are not unique")
        width = len(self.label_names)
        for r in self.records:
            if len(r["labels"]) != width:
                raise InputError(f"record {r['id']} has {len(r['labels'])} labels, expected {width}")

    @property
    def ids(self):
        return [r["id"] for r in self.records]

    def to_dict(self):
        return {
            "version": self.version,
            "task": self.task,
            "label_names": list(self.label_names),
            "leads": list(self.leads),
            "length": self.length,
            "sampling_rate": self.sampling_rate,
            "records": self.records,
        }


@dataclass
class Dataset:
    manifest: DatasetManifest
    signals: np.ndarray
    labels: np.ndarray

    @property
    def ids(self):
        return self.manifest.ids

    def __len__(self):
        return len(self.signals)

    def subset(self, ids):
        pos = {rid: i for i, rid in enumerate(self.ids)}
        idx = np.array([pos[i] for i in ids], dtype=int)
        records = [self.manifest.records[i] for i in idx]
        m = DatasetManifest(self.manifest.task, self.manifest.label_names, records, self.manifest.leads,
                            self.manifest.length, self.manifest.sampling_rate)
        return Dataset(m, self.signals[idx], self.labels[idx])


def write_dataset(directory, records, task: str, label_names) -> DatasetManifest:
    """Write records (already preprocessed) and their manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    length = None
    for rec in records:
        sig = np.ascontiguousarray(rec.signal, dtype="<f4")
        length = sig.shape[1] if length is None else length
        if sig.shape[1] != length:
            raise InputError(f"record {rec.id}: length {sig.shape[1]} differs from {length}")
        fname = f"{rec.id}.ecg"
        try:
            (directory / fname).write_bytes(sig.tobytes())
        except OSError as exc:
            raise OSError(f"cannot write {directory / fname}: {exc}") from exc
        entries.append({"id": rec.id, "file": fname, "offset": 0, "labels": [int(v) for v in rec.labels]})
    manifest = DatasetManifest(task, list(label_names), entries, length=length or TARGET_LENGTH)
    manifest.validate()
    try:
        (directory / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {directory / MANIFEST}: {exc}") from exc
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if raw.get("version") != DATA_VERSION:
        raise InputError(f"{path}: expected version {DATA_VERSION!r}, found {raw.get('version')!r}")
    m = DatasetManifest(
        raw["task"], raw["label_names"], raw["records"], raw.get("leads", list(LEAD_NAMES)),
        raw.get("length", TARGET_LENGTH), raw.get("sampling_rate", TARGET_RATE),
    )
    m.validate()
    return m


def read_dataset(directory) -> Dataset:
    """Load every signal listed in the manifest into a (n, C, L) float32 array."""
    directory = Path(directory)
    m = read_manifest(directory)
    c, length = len(m.leads), m.length
    signals = np.empty((len(m.records), c, length), dtype=np.float32)
    for i, r in enumerate(m.records):
        path = directory / r["file"]
        try:
            with open(path, "rb") as fh:
                fh.seek(int(r.get("offset", 0)))
                raw = fh.read(c * length * 4)
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
        if len(raw) != c * length * 4:
            raise InputError(f"{path}: expected {c * length * 4} bytes, got {len(raw)}")
        signals[i] = np.frombuffer(raw, dtype="<f4").reshape(c, length)
    labels = np.array([r["labels"] for r in m.records], dtype=np.int8).reshape(len(m.records), len(m.label_names))
    return Dataset(m, signals, labels)


def read_csv_record(path) -> np.ndarray:
    """Read one record from CSV: a header naming the 12 leads, one row per sample.

    Columns may appear in any order; the result follows the standard lead
    order I, II, III, AVR, AVL, AVF, V1..V6.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty CSV")
    header = [h.strip().upper() for h in rows[0]]
    if sorted(header) != sorted(LEAD_NAMES):
        raise InputError(f"{path}: header must name leads {', '.join(LEAD_NAMES)}; got {rows[0]}")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric sample ({exc})") from exc
    if data.size == 0:
        raise InputError(f"{path}: no samples")
    order = [header.index(name) for name in LEAD_NAMES]
    return data[:, order].T.copy()


def ingest_csv(paths, src_rate: float, labels, label_names, out_dir, task="csv") -> DatasetManifest:
    """Preprocess CSV recordings and write them as a dataset.

    ``labels`` maps each path (or its stem) to a multi-hot vector.
    """
    records = []
    for path in paths:
        path = Path(path)
        raw = read_csv_record(path)
        lab = labels.get(str(path), labels.get(path.stem))
        if lab is None:
            raise InputError(f"no labels given for {path}")
        records.append(EcgRecord(path.stem, preprocess(raw, src_rate), lab, src_rate, raw.shape[1]))
    return write_dataset(out_dir, records, task, label_names)
