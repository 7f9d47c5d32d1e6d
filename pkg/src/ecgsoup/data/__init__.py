"""Dataset format, preprocessing, synthetic generation, folds and metrics."""

from .folds import FoldSplit, check_disjoint, kfold_split
from .metrics import METRIC_NAMES, binary_auc, evaluate
from .preprocess import TARGET_LENGTH, TARGET_RATE, fix_length, preprocess, resample_linear, znormalize
from .records import (
    DATA_VERSION,
    Dataset,
    DatasetManifest,
    EcgRecord,
    ingest_csv,
    read_csv_record,
    read_dataset,
    read_manifest,
    write_dataset,
)
from .synth import ClassTemplate, SyntheticSpec, Wave, synth_generate, synth_records

__all__ = [
    "DATA_VERSION",
    "METRIC_NAMES",
    "TARGET_LENGTH",
    "TARGET_RATE",
    "ClassTemplate",
    "Dataset",
    "DatasetManifest",
    "EcgRecord",
    "FoldSplit",
    "SyntheticSpec",
    "Wave",
    "binary_auc",
    "check_disjoint",
    "evaluate",
    "fix_length",
    "ingest_csv",
    "kfold_split",
    "preprocess",
    "read_csv_record",
    "read_dataset",
    "read_manifest",
    "resample_linear",
    "synth_generate",
    "synth_records",
    "write_dataset",
    "znormalize",
]
