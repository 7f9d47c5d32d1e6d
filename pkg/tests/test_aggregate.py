import csv

import numpy as np
import pytest

from ecgsoup.aggregate import (
    AggregationMode,
    Aggregator,
    ClassifierHead,
    DownstreamConfig,
    GateNetwork,
    bce_multilabel_loss,
    compute_summaries,
    finetune_train,
    layer_summaries,
    layerwise_probe_sweep,
    pma_aggregate,
    ppa_aggregate,
    probe_train,
    read_activation_cache,
    write_activation_cache,
)
from ecgsoup.backbone import LayerActivations, TokenLayout, VitConfig, VitEncoder
from ecgsoup.errors import ConfigError, FoldLeakError, InputError, UsageError
from ecgsoup.numcore import Tensor

VIT = VitConfig.tiny(leads=2, signal_length=40, patch_length=10)


def ids(prefix, n):
    return [f"{prefix}{i}" for i in range(n)]


def separable(n=120, depth=3, dim=6, seed=0, informative=None):
    """Two-label summaries; labels are read off one direction of the chosen layer(s)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, depth, dim))
    y = rng.integers(0, 2, (n, 2))
    layers = range(depth) if informative is None else [informative]
    for l in layers:
        x[:, l, 0] += 3.0 * (2 * y[:, 0] - 1)
        x[:, l, 1] += 3.0 * (2 * y[:, 1] - 1)
    return x, y


def split(x, y, n_train, n_val=0):
    tr = (ids("tr", n_train), x[:n_train], y[:n_train])
    rest = len(x) - n_train - n_val
    va = (ids("va", n_val), x[n_train : n_train + n_val], y[n_train : n_train + n_val]) if n_val else None
    te = (ids("te", rest), x[n_train + n_val :], y[n_train + n_val :])
    return tr, va, te


# ---------------------------------------------------------------------------
# summaries and aggregation
# ---------------------------------------------------------------------------


def test_layer_summaries_trivial_cases():
    layout = TokenLayout.full(1, 2)
    v = np.array([0.3, -2.0])
    acts = LayerActivations([np.tile(v, (1, 4, 1))] * 3, [], layout)
    assert np.array_equal(layer_summaries(acts), np.tile(v, (1, 3, 1)))
    h = np.array([[[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [9.0, 9.0]]])
    assert np.array_equal(layer_summaries(LayerActivations([h], [], layout))[0, 0], [0.5, 0.5])
    with pytest.raises(UsageError):
        layer_summaries(None)
    with pytest.raises(UsageError):
        layer_summaries(LayerActivations([h], []))


def test_layer_summaries_match_manual_mean_on_model():
    enc = VitEncoder(VIT, np.random.default_rng(0))
    sig = np.random.default_rng(1).standard_normal((3, 2, 40))
    _, acts = enc.forward_signals(sig, capture=True)
    got = layer_summaries(acts).data
    keep = [t for t in range(12) if t % 6 not in (0, 5)]
    for l in range(2):
        assert np.allclose(got[:, l], acts.hidden[l].data[:, keep].mean(axis=1), atol=1e-15)
    assert np.array_equal(compute_summaries(enc, sig, batch_size=2), got)


def test_ppa_trivial_cases():
    assert np.array_equal(ppa_aggregate(np.array([[[2.0, 0.0], [0.0, 2.0]]])), [[1.0, 1.0]])
    x = np.random.default_rng(0).standard_normal((4, 1, 3))
    assert np.array_equal(ppa_aggregate(x), x[:, 0])


def test_ppa_equals_uniform_frozen_gate():
    s = np.random.default_rng(0).standard_normal((7, 12, 16))
    gate = GateNetwork(16, 12, np.random.default_rng(1)).freeze_uniform()
    vec, w = pma_aggregate(s, gate)
    assert np.allclose(w, 1 / 12, atol=1e-15)
    assert np.max(np.abs(vec.data - ppa_aggregate(s))) <= 1e-12
    assert not any(p.trainable for p in gate.parameters())


def test_gate_weights_and_manual_weighted_sum():
    s = np.random.default_rng(0).standard_normal((5, 4, 6))
    gate = GateNetwork(6, 4, np.random.default_rng(1))
    gate.proj.weight.data[...] = np.random.default_rng(2).standard_normal((6, 4))
    vec, w = pma_aggregate(s, gate)
    assert (w >= 0).all() and np.allclose(w.sum(1), 1.0, atol=1e-9)
    logits = s.mean(axis=1) @ gate.proj.weight.data + gate.proj.bias.data
    manual_w = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert np.allclose(w, manual_w, atol=1e-14)
    assert np.allclose(vec.data, np.einsum("bl,bld->bd", manual_w, s), atol=1e-14)


def test_gate_saturation_recovers_single_layer():
    s = np.random.default_rng(0).standard_normal((3, 5, 4))
    gate = GateNetwork(4, 5, np.random.default_rng(1))
    gate.proj.weight.data[...] = 0
    gate.proj.bias.data[...] = 0
    gate.proj.bias.data[2] = 1e6
    vec, _ = pma_aggregate(s, gate)
    assert np.max(np.abs(vec.data - s[:, 2])) <= 1e-9


@pytest.mark.parametrize("text,kind,layer", [("ppa", "ppa", None), ("PMA", "pma", None),
                                             ("last", "single", 12), ("layer:3", "single", 3)])
def test_aggregation_mode_parse(text, kind, layer):
    m = AggregationMode.parse(text, 12)
    assert (m.kind, m.layer) == (kind, layer)
    assert AggregationMode.parse(str(m), 12) == m


@pytest.mark.parametrize("text", ["mean", "layer:0", "layer:13", "layer:x"])
def test_aggregation_mode_rejects(text):
    with pytest.raises(ConfigError):
        AggregationMode.parse(text, 12)


def test_bce_multilabel():
    assert bce_multilabel_loss(Tensor(np.zeros((3, 2))), np.array([[0, 1]] * 3)).item() == pytest.approx(np.log(2))
    with pytest.raises(InputError):
        bce_multilabel_loss(Tensor(np.zeros((1, 2))), np.array([[0, 2]]))


def test_head_structure():
    head = ClassifierHead(6, 3, np.random.default_rng(0))
    assert head.hidden is None
    assert [n for n, _ in head.named_parameters()] == ["norm.gamma", "norm.beta", "out.weight", "out.bias"]
    deep = ClassifierHead(6, 3, np.random.default_rng(0), hidden=True)
    assert deep.hidden is not None
    with pytest.raises(ConfigError):
        ClassifierHead(6, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# probe / fine-tune drivers
# ---------------------------------------------------------------------------


def test_probe_on_separable_features():
    x, y = separable(200)
    tr, va, te = split(x, y, 140, 20)
    res = probe_train(tr, va, te, "ppa", DownstreamConfig(epochs=100, batch_size=32, lr=1e-2))
    assert res.test_metrics["macro_auc"] >= 0.99
    assert all(0.0 <= v <= 1.0 for v in res.test_metrics.values())


def test_probe_loss_decreases_monotonically_at_first():
    x, y = separable(128)
    tr, _, _ = split(x, y, 120)
    res = probe_train(tr, agg="ppa", config=DownstreamConfig(epochs=10, batch_size=128, lr=1e-2))
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))


def test_probe_lr_zero_keeps_initial_head():
    x, y = separable(60)
    tr, _, te = split(x, y, 40)
    cfg = DownstreamConfig(epochs=3, batch_size=8, lr=0.0)
    res = probe_train(tr, None, te, "ppa", cfg)
    from ecgsoup.aggregate import _build

    head, agg = _build(6, 3, 2, "ppa", cfg)
    for (n, p), (_, q) in zip(res.head.named_parameters(), head.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    # batch-norm running statistics are buffers, not parameters; they still track the data
    assert not np.array_equal(res.head.norm.running_mean, head.norm.running_mean)


def test_probe_is_deterministic():
    x, y = separable(80)
    tr, va, te = split(x, y, 50, 10)
    cfg = DownstreamConfig(epochs=5, batch_size=16, lr=1e-2)
    a = probe_train(tr, va, te, "pma", cfg)
    b = probe_train(tr, va, te, "pma", cfg)
    assert a.losses == b.losses and a.test_metrics == b.test_metrics
    assert np.array_equal(a.gate_weights, b.gate_weights)
    assert np.allclose(a.gate_weights.sum(1), 1.0, atol=1e-9)


def test_ppa_and_frozen_uniform_pma_give_identical_metrics():
    x, y = separable(90)
    tr, va, te = split(x, y, 60, 10)
    cfg = DownstreamConfig(epochs=8, batch_size=16, lr=1e-2)
    a = probe_train(tr, va, te, "ppa", cfg)
    from ecgsoup.aggregate import _build

    head, agg = _build(6, 3, 2, "pma", cfg)
    agg.gate.freeze_uniform()
    b = probe_train(tr, va, te, "pma", cfg, head=head, aggregator=agg)
    assert a.test_metrics == b.test_metrics
    assert np.max(np.abs(a.test_scores - b.test_scores)) <= 1e-12


def test_fold_leak_is_a_hard_error():
    x, y = separable(20)
    tr = (ids("r", 10), x[:10], y[:10])
    te = (["r3"] + ids("t", 9), x[10:], y[10:])
    with pytest.raises(FoldLeakError):
        probe_train(tr, None, te, "ppa", DownstreamConfig(epochs=1))


def test_layer_sweep_peaks_at_planted_layer(tmp_path):
    x, y = separable(160, depth=4, informative=2)
    tr, va, te = split(x, y, 100, 20)
    rows = layerwise_probe_sweep(tr, va, te, DownstreamConfig(epochs=40, batch_size=32, lr=1e-2),
                                 out_csv=tmp_path / "sweep.csv")
    assert [r["layer"] for r in rows] == [1, 2, 3, 4]
    aucs = [r["macro_auc"] for r in rows]
    assert int(np.argmax(aucs)) == 2
    for r in rows:
        assert all(0.0 <= r[m] <= 1.0 for m in r if m != "layer")
    with open(tmp_path / "sweep.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0][0] == "layer" and len(table) == 5


def test_layer_sweep_depth_two_gives_two_rows():
    x, y = separable(40, depth=2)
    tr, _, te = split(x, y, 30)
    assert len(layerwise_probe_sweep(tr, None, te, DownstreamConfig(epochs=2))) == 2


def _signals(n, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (n, 1))
    t = np.linspace(0, 1, 40)
    freq = np.where(y[:, 0] == 1, 8.0, 3.0)
    sig = np.sin(2 * np.pi * freq[:, None, None] * t[None, None, :]) + 0.1 * rng.standard_normal((n, 2, 40))
    return sig, y


def test_probe_freezes_encoder():
    enc = VitEncoder(VIT, np.random.default_rng(0))
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    sig, y = _signals(24)
    probe_train((ids("a", 24), compute_summaries(enc, sig), y), agg="pma", config=DownstreamConfig(epochs=3, batch_size=8))
    for k, v in enc.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_finetune_with_zero_encoder_lr_matches_probe():
    enc = VitEncoder(VIT, np.random.default_rng(0))
    sig, y = _signals(30)
    cfg = DownstreamConfig(mode="finetune", epochs=3, batch_size=8, lr=1e-2, encoder_lr_scale=0.0)
    tr = (ids("a", 20), sig[:20], y[:20])
    te = (ids("b", 10), sig[20:], y[20:])
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    probe = probe_train((tr[0], compute_summaries(enc, tr[1]), tr[2]), None,
                        (te[0], compute_summaries(enc, te[1]), te[2]), "ppa", cfg)
    ft = finetune_train(enc, tr, None, te, "ppa", cfg)
    for k, v in enc.state_dict().items():
        assert np.array_equal(v, before[k]), k
    assert np.allclose(ft.losses, probe.losses, rtol=1e-12)
    assert np.allclose(ft.test_scores, probe.test_scores, atol=1e-12)


def test_finetune_updates_encoder():
    enc = VitEncoder(VIT, np.random.default_rng(0))
    sig, y = _signals(16)
    before = enc.state_dict()["blocks.0.attn.wq"].copy()
    res = finetune_train(enc, (ids("a", 16), sig, y), agg="pma",
                         config=DownstreamConfig(mode="finetune", epochs=2, batch_size=8, warmup_epochs=0))
    assert not np.array_equal(enc.state_dict()["blocks.0.attn.wq"], before)
    assert res.encoder is enc and np.all(np.isfinite(res.losses))


def test_aggregator_single_layer_selection():
    s = np.random.default_rng(0).standard_normal((2, 3, 4))
    agg = Aggregator(AggregationMode.parse("layer:2", 3), 4, 3, np.random.default_rng(0))
    assert np.array_equal(agg(s).data, s[:, 1])


def test_activation_cache_round_trip(tmp_path):
    s = np.random.default_rng(0).standard_normal((3, 2, 5)).astype(np.float32)
    write_activation_cache(tmp_path / "a.act", ["x", "y", "z"], s, {"task": "t"})
    rid, back, meta = read_activation_cache(tmp_path / "a.act")
    assert rid == ["x", "y", "z"] and meta["task"] == "t"
    assert back.dtype == s.dtype and back.tobytes() == s.tobytes()
    with pytest.raises(InputError):
        write_activation_cache(tmp_path / "b.act", ["x"], s)


def test_downstream_config_defaults_and_validation():
    assert DownstreamConfig().schedule == "constant" and DownstreamConfig().warmup_epochs == 0
    ft = DownstreamConfig(mode="finetune")
    assert ft.schedule == "cosine" and ft.warmup_epochs == 5
    with pytest.raises(ConfigError):
        DownstreamConfig(mode="zero_shot")
    with pytest.raises(ConfigError):
        DownstreamConfig.from_dict({"momentum": 0.9})
    assert DownstreamConfig.from_dict(ft.to_dict()) == ft


def test_last_resolves_once_depth_is_known():
    lazy = AggregationMode.parse("last")
    assert lazy.kind == "last"
    assert AggregationMode.parse(lazy, 4) == AggregationMode.parse("layer:4", 4)
    with pytest.raises(ConfigError):
        lazy.check(4)
