"""Masked-reconstruction pretraining of a 12-lead ECG transformer, layer
aggregation for downstream classification, and representation diagnostics."""

from .aggregate import (
    AggregationMode,
    ClassifierHead,
    DownstreamConfig,
    GateNetwork,
    finetune_train,
    layerwise_probe_sweep,
    pma_aggregate,
    ppa_aggregate,
    probe_train,
)
from .backbone import VitConfig, VitEncoder
from .estimators import LayerAggregationClassifier, MaskedEcgPretrainer
from .pretrain import DecoderConfig, MaskedAutoencoder, PretrainConfig, pretrain_loop

__version__ = "0.1.0"

__all__ = [
    "AggregationMode",
    "ClassifierHead",
    "DecoderConfig",
    "DownstreamConfig",
    "GateNetwork",
    "LayerAggregationClassifier",
    "MaskedAutoencoder",
    "MaskedEcgPretrainer",
    "PretrainConfig",
    "VitConfig",
    "VitEncoder",
    "finetune_train",
    "layerwise_probe_sweep",
    "pma_aggregate",
    "ppa_aggregate",
    "probe_train",
    "pretrain_loop",
]
