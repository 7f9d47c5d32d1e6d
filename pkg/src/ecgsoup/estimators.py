"""scikit-learn style wrappers around pretraining and downstream training.

``X`` is always an ``(n_samples, n_leads, n_samples_per_lead)`` array of
preprocessed signals; ``Y`` a multi-hot ``(n_samples, n_labels)`` matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .aggregate import (
    DownstreamConfig,
    compute_summaries,
    finetune_train,
    ppa_aggregate,
    predict_scores,
    probe_train,
)
from .backbone import VitConfig, VitEncoder
from .errors import InputError
from .numcore import precision
from .pretrain import DecoderConfig, PretrainConfig, pretrain_loop


def check_signals(X, leads=None, length=None):
    """Validate a finite ``(n, C, L)`` float array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise InputError(f"expected signals of shape (n, leads, samples), got {X.shape}")
    if leads is not None and X.shape[1] != leads:
        raise InputError(f"expected {leads} leads, got {X.shape[1]}")
    if length is not None and X.shape[2] != length:
        raise InputError(f"expected {length} samples per lead, got {X.shape[2]}")
    return X


def check_targets(Y, n):
    Y = check_array(Y, ensure_2d=False, dtype=None)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise InputError(f"{n} signals but {Y.shape[0]} label rows")
    if not np.isin(Y, (0, 1)).all():
        raise InputError("targets must be multi-hot 0/1")
    return Y.astype(np.int8)


class MaskedEcgPretrainer(TransformerMixin, BaseEstimator):
    """Masked-patch reconstruction pretraining of the 1D ViT encoder.

    After ``fit``, ``transform`` returns layer-averaged representations of
    shape ``(n, embed_dim)`` (or per-layer summaries with ``per_layer=True``).
    """

    def __init__(self, embed_dim=64, depth=12, heads=4, patch_length=50, mlp_ratio=4,
                 decoder_dim=None, decoder_depth=4, mask_ratio=0.75, mode="stmem",
                 epochs=800, batch_size=128, lr=6e-4, warmup_epochs=40, weight_decay=1e-3,
                 per_layer=False, random_state=0):
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.patch_length = patch_length
        self.mlp_ratio = mlp_ratio
        self.decoder_dim = decoder_dim
        self.decoder_depth = decoder_depth
        self.mask_ratio = mask_ratio
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.per_layer = per_layer
        self.random_state = random_state

    def _configs(self, X):
        vit = VitConfig(leads=X.shape[1], signal_length=X.shape[2], patch_length=self.patch_length,
                        embed_dim=self.embed_dim, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio)
        dec = DecoderConfig(dim=self.decoder_dim, depth=self.decoder_depth)
        pre = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
                             mask_ratio=self.mask_ratio, mode=self.mode, seed=int(self.random_state))
        return vit, dec, pre

    def fit(self, X, y=None):
        X = check_signals(X)
        vit, dec, pre = self._configs(X)
        with precision(np.float64):
            result = pretrain_loop(pre, X, vit, dec)
        self.model_ = result.model
        self.encoder_ = result.model.encoder
        self.loss_curve_ = result.losses
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        cfg = self.encoder_.config
        X = check_signals(X, cfg.leads, cfg.signal_length)
        summaries = compute_summaries(self.encoder_, X)
        return summaries if self.per_layer else ppa_aggregate(summaries)


class LayerAggregationClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label head on top of a pretrained encoder's aggregated layers.

    Parameters
    ----------
    encoder : VitEncoder or fitted MaskedEcgPretrainer
    agg : {"ppa", "pma", "last"} or "layer:k"
    finetune : bool
        Train the encoder too (cosine schedule with warmup); otherwise linear probing.
    """

    def __init__(self, encoder=None, agg="ppa", finetune=False, epochs=100, batch_size=64, lr=1e-3,
                 weight_decay=1e-3, dropout=0.0, hidden=False, threshold=0.5, encoder_lr_scale=1.0,
                 random_state=0):
        self.encoder = encoder
        self.agg = agg
        self.finetune = finetune
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.hidden = hidden
        self.threshold = threshold
        self.encoder_lr_scale = encoder_lr_scale
        self.random_state = random_state

    def _encoder(self):
        enc = self.encoder
        if isinstance(enc, MaskedEcgPretrainer):
            check_is_fitted(enc, "encoder_")
            enc = enc.encoder_
        if not isinstance(enc, VitEncoder):
            raise InputError("encoder must be a VitEncoder or a fitted MaskedEcgPretrainer")
        return enc

    def _config(self):
        return DownstreamConfig(mode="finetune" if self.finetune else "linear_probe", epochs=self.epochs,
                                batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                                dropout=self.dropout, hidden=self.hidden, threshold=self.threshold,
                                encoder_lr_scale=self.encoder_lr_scale, seed=int(self.random_state))

    def fit(self, X, Y):
        enc = self._encoder()
        X = check_signals(X, enc.config.leads, enc.config.signal_length)
        Y = check_targets(Y, len(X))
        ids = [f"r{i}" for i in range(len(X))]
        config = self._config()
        if self.finetune:
            import copy

            enc = copy.deepcopy(enc)
            result = finetune_train(enc, (ids, X, Y), agg=self.agg, config=config)
            self.encoder_ = result.encoder
        else:
            self.encoder_ = enc
            result = probe_train((ids, compute_summaries(enc, X), Y), agg=self.agg, config=config)
        self.head_ = result.head
        self.aggregator_ = result.aggregator
        self.loss_curve_ = result.losses
        self.classes_ = np.arange(Y.shape[1])
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        cfg = self.encoder_.config
        X = check_signals(X, cfg.leads, cfg.signal_length)
        scores, _ = predict_scores(self.head_, self.aggregator_, compute_summaries(self.encoder_, X))
        return scores

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.int8)

    def score(self, X, Y, sample_weight=None):
        """Macro AUC on ``(X, Y)``."""
        from .data.metrics import evaluate

        Y = check_targets(Y, len(X))
        return evaluate(self.predict_proba(X), Y, self.threshold)["macro_auc"]
