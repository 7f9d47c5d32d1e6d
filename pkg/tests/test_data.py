import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_metrics

from ecgsoup.backbone import LEAD_NAMES
from ecgsoup.data import (
    METRIC_NAMES,
    EcgRecord,
    SyntheticSpec,
    binary_auc,
    evaluate,
    ingest_csv,
    kfold_split,
    preprocess,
    read_dataset,
    synth_generate,
    write_dataset,
)
from ecgsoup.data.folds import check_disjoint
from ecgsoup.data.preprocess import fix_length, resample_linear, znormalize
from ecgsoup.data.synth import ClassTemplate, render_beats
from ecgsoup.errors import ConfigError, FoldLeakError, InputError

# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def test_resample_500hz_to_100hz():
    raw = np.random.default_rng(0).standard_normal((12, 5000))
    out = preprocess(raw, 500)
    assert out.shape == (12, 1000)
    t = np.arange(5000) / 500
    lin = np.tile(t, (1, 1))
    assert np.allclose(resample_linear(lin, 500, 100)[0], np.arange(1000) / 100)


def test_short_record_is_zero_padded_before_normalisation():
    raw = np.random.default_rng(0).standard_normal((12, 700)) + 3.0
    padded = fix_length(resample_linear(raw, 100), 1000)
    assert np.array_equal(padded[:, 700:], np.zeros((12, 300)))
    out = preprocess(raw, 100)
    assert out.shape == (12, 1000)
    assert np.allclose(out.mean(axis=1), 0, atol=1e-12) and np.allclose(out.std(axis=1), 1)
    # the pad value sits below the (positive) lead mean
    assert np.all(out[:, 700:] < 0)


def test_constant_lead_becomes_zero_with_warning(caplog):
    raw = np.ones((12, 1000))
    with caplog.at_level("WARNING"):
        out = preprocess(raw, 100)
    assert np.array_equal(out, np.zeros((12, 1000)))
    assert "constant" in caplog.text


def test_preprocess_is_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = preprocess(rng.standard_normal((12, 1000)) * 5 + 2, 100)
        assert np.array_equal(preprocess(x, 100), x)
        assert np.array_equal(znormalize(x), x)


def test_preprocess_rejects_bad_input():
    with pytest.raises(InputError):
        preprocess(np.zeros(100), 100)
    with pytest.raises(InputError):
        preprocess(np.full((12, 100), np.nan), 100)
    with pytest.raises(InputError):
        resample_linear(np.zeros((1, 10)), 0)


# ---------------------------------------------------------------------------
# records and ingestion
# ---------------------------------------------------------------------------


def test_dataset_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    recs = [EcgRecord(f"r{i}", rng.standard_normal((12, 1000)).astype(np.float32), [i % 2, 1]) for i in range(3)]
    write_dataset(tmp_path, recs, "t", ["a", "b"])
    ds = read_dataset(tmp_path)
    assert ds.ids == ["r0", "r1", "r2"]
    for i, r in enumerate(recs):
        assert ds.signals[i].tobytes() == r.signal.tobytes()
    raw = (tmp_path / "r1.ecg").read_bytes()
    assert raw == recs[1].signal.astype("<f4").tobytes()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["version"] == "ecgsoup-data-v1" and manifest["leads"] == list(LEAD_NAMES)
    sub = ds.subset(["r2", "r0"])
    assert sub.ids == ["r2", "r0"] and np.array_equal(sub.labels, [[0, 1], [0, 1]])


def test_dataset_errors(tmp_path):
    with pytest.raises(InputError):
        EcgRecord("bad id", np.zeros((12, 10)), [0])
    recs = [EcgRecord("a", np.zeros((12, 10)), [0]), EcgRecord("a", np.zeros((12, 10)), [1])]
    with pytest.raises(InputError):
        write_dataset(tmp_path, recs, "t", ["x"])
    write_dataset(tmp_path / "ok", [EcgRecord("a", np.zeros((12, 10)), [0])], "t", ["x"])
    (tmp_path / "ok" / "a.ecg").write_bytes(b"\0" * 8)
    with pytest.raises(InputError):
        read_dataset(tmp_path / "ok")
    (tmp_path / "ok" / "manifest.json").write_text("{")
    with pytest.raises(InputError):
        read_dataset(tmp_path / "ok")


def test_csv_ingestion_reorders_columns(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((1000, 12))
    order = list(reversed(LEAD_NAMES))
    lines = [",".join(order)] + [",".join(repr(float(v)) for v in row[::-1]) for row in data]
    (tmp_path / "rec1.csv").write_text("\n".join(lines) + "\n")
    ingest_csv([tmp_path / "rec1.csv"], 100, {"rec1": [1]}, ["x"], tmp_path / "out")
    ds = read_dataset(tmp_path / "out")
    assert np.allclose(ds.signals[0], preprocess(data.T, 100).astype(np.float32))
    (tmp_path / "bad.csv").write_text("I,II\n1,2\n")
    with pytest.raises(InputError):
        ingest_csv([tmp_path / "bad.csv"], 100, {"bad": [0]}, ["x"], tmp_path / "out2")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def test_synth_count_zero(tmp_path):
    assert synth_generate(SyntheticSpec(), 0, tmp_path) is not None
    assert json.loads((tmp_path / "manifest.json").read_text())["records"] == []


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_is_byte_deterministic(tmp_path):
    synth_generate(SyntheticSpec(seed=3), 6, tmp_path / "a")
    synth_generate(SyntheticSpec(seed=3), 6, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def _beat_rate(sig, fs=100.0):
    """Dominant frequency (bpm) of lead II via the autocorrelation peak."""
    x = sig[1] - sig[1].mean()
    ac = np.correlate(x, x, "full")[len(x) - 1 :]
    lo, hi = int(fs * 60 / 200), int(fs * 60 / 30)
    lag = lo + int(np.argmax(ac[lo:hi]))
    return 60.0 * fs / lag


def test_rate_disjoint_classes_are_separable_by_rate():
    recs = synth_generate(SyntheticSpec(seed=0), 60)
    rates = np.array([_beat_rate(r.signal) for r in recs])
    y = np.array([r.labels[1] for r in recs])
    assert binary_auc(rates, y) >= 0.99


def test_synth_leads_share_one_source():
    spec = SyntheticSpec(noise=0.0, baseline_wander=0.0)
    raw = render_beats(np.random.default_rng(0), spec.classes[0], spec)
    # twelve projections of a 3-D dipole: rank at most 3
    s = np.linalg.svd(raw, compute_uv=False)
    assert s[3] / s[0] < 1e-10
    # Einthoven: II = I + III
    assert np.allclose(raw[1], raw[0] + raw[2], atol=1e-12)


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(classes=[ClassTemplate("a", (60, 80)), ClassTemplate("b", (82, 100))])
    SyntheticSpec(classes=[ClassTemplate("a", (60, 80)), ClassTemplate("b", (82, 100), amplitude_scale=1.5)])
    with pytest.raises(ConfigError):
        SyntheticSpec(classes=[])
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"nois": 0.1})
    spec = SyntheticSpec.from_dict({"classes": [{"name": "x", "rate_range": [40, 50], "waves": {"R": {"amplitude": 2.0}}}]})
    assert spec.classes[0].waves["R"].amplitude == 2.0
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"classes": [{"name": "x", "waves": {"U": {}}}]})


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def test_ten_folds_of_ten():
    split = kfold_split([f"r{i}" for i in range(100)], 10, seed=0)
    assert [len(f) for f in split.folds] == [10] * 10


def test_uneven_folds():
    split = kfold_split([f"r{i}" for i in range(103)], 10, seed=1)
    assert sorted(len(f) for f in split.folds) == [10] * 7 + [11] * 3


@pytest.mark.parametrize("seed", range(5))
def test_fold_partition_property(seed):
    ids = [f"r{i}" for i in range(57)]
    split = kfold_split(ids, 10, seed)
    flat = [i for f in split.folds for i in f]
    assert sorted(flat) == sorted(ids)
    for t in range(10):
        tr, va, te = split.designate(t)
        assert sorted(tr + va + te) == sorted(ids)
        check_disjoint(train=tr, val=va, test=te)


def test_fold_errors():
    with pytest.raises(InputError):
        kfold_split(["a", "b"], 10)
    with pytest.raises(InputError):
        kfold_split(["a", "a", "b"], 2)
    with pytest.raises(FoldLeakError):
        check_disjoint(train=["a", "b"], test=["b"])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_perfect_and_anti_perfect_predictions():
    y = np.random.default_rng(0).integers(0, 2, (30, 4))
    y[0] = [0, 1, 0, 1]
    y[1] = [1, 0, 1, 0]
    m = evaluate(y.astype(float), y)
    assert all(m[k] == 1.0 for k in METRIC_NAMES)
    anti = evaluate(1.0 - y, y)
    assert anti["macro_auc"] == 0.0 and anti["instance_acc"] == 0.0


def test_metrics_match_brute_force_exactly():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.integers(0, 2, (50, 4))
        s = np.round(rng.random((50, 4)), rng.choice([1, 2, 6]))
        got = evaluate(s, y)
        ref = brute_metrics(s, y)
        for k in METRIC_NAMES:
            assert got[k] == ref[k] or (math.isnan(got[k]) and math.isnan(ref[k])), k


def test_degenerate_label_is_skipped_with_warning(caplog):
    y = np.array([[1, 0], [1, 1], [1, 0], [1, 1]])
    s = np.array([[0.9, 0.2], [0.8, 0.7], [0.6, 0.4], [0.7, 0.9]])
    with caplog.at_level("WARNING"):
        m = evaluate(s, y)
    assert m["macro_auc"] == 1.0
    assert "single class" in caplog.text


def test_metric_input_errors():
    with pytest.raises(InputError):
        evaluate(np.array([[1.2]]), np.array([[1]]))
    with pytest.raises(InputError):
        evaluate(np.array([[0.2]]), np.array([[2]]))
    with pytest.raises(InputError):
        evaluate(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_auc_is_invariant_to_monotone_transforms(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (20, 3))
    s = rng.random((20, 3))
    cubed = (2 * s - 1) ** 3 * 0.5 + 0.5
    a, b = evaluate(s, y), evaluate(cubed, y)
    for k in ("macro_auc", "sample_auc"):
        assert a[k] == b[k] or (math.isnan(a[k]) and math.isnan(b[k]))
