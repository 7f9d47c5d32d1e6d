import itertools
import math

import numpy as np
import pytest
from oracles import brute_diameter, brute_dobrushin, entropy_mp, random_stochastic

from ecgsoup.backbone import LayerActivations, TokenLayout, VitConfig, VitEncoder
from ecgsoup.diagnostics import (
    aae,
    attention_entropy,
    avg_cosine,
    contraction_chain,
    cosine_map,
    diameter,
    dobrushin,
    entropy_profile,
    lead_mean_cosine,
    lemma1_gap,
    model_contraction,
    write_csv,
    write_map_csv,
)
from ecgsoup.errors import InputError, UsageError


def test_diameter_cases():
    assert diameter(np.ones((4, 3))) == 0.0
    assert diameter(np.eye(2)) == pytest.approx(math.sqrt(2), abs=1e-15)
    h = np.random.default_rng(0).standard_normal((10, 4))
    assert diameter(h) == pytest.approx(brute_diameter(h), abs=1e-12)
    with pytest.raises(InputError):
        diameter(np.ones((1, 3)))


def test_dobrushin_cases():
    assert dobrushin(np.full((4, 4), 0.25)) == pytest.approx(0.0, abs=1e-15)
    assert dobrushin(np.eye(2)) == 1.0
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = random_stochastic(rng, 8, sparsity=0.3)
        assert dobrushin(a) == pytest.approx(brute_dobrushin(a), abs=1e-12)
    with pytest.raises(InputError):
        dobrushin(np.array([[0.5, 0.6], [0.5, 0.5]]))


def test_lemma1_trivial_cases():
    rng = np.random.default_rng(0)
    a = random_stochastic(rng, 5)
    b = rng.standard_normal((5, 3))
    lhs, rhs = lemma1_gap(a, b, 2, 2)
    assert lhs == 0.0 and lhs <= rhs
    same = np.tile(random_stochastic(rng, 1, 5), (5, 1))
    lhs, rhs = lemma1_gap(same, b, 0, 3)
    assert lhs == pytest.approx(0.0, abs=1e-15) and rhs == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InputError):
        lemma1_gap(a, b[:4], 0, 1)


def test_lemma1_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n, d = rng.integers(2, 9), rng.integers(1, 7)
        a = random_stochastic(rng, n, sparsity=rng.choice([0.0, 0.5]))
        b = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
        i, j = rng.integers(0, n, 2)
        lhs, rhs = lemma1_gap(a, b, i, j)
        assert lhs <= rhs + 1e-9


def test_contraction_single_uniform_layer_collapses():
    h = np.random.default_rng(0).standard_normal((6, 3))
    rep = contraction_chain([np.full((6, 6), 1 / 6)], h)
    assert rep.diameters[1] == pytest.approx(0.0, abs=1e-12)
    assert rep.satisfied == [True]


def test_contraction_identity_is_tight():
    h = np.random.default_rng(0).standard_normal((5, 2))
    rep = contraction_chain([np.eye(5)] * 3, h)
    assert rep.diameters == [rep.diameters[0]] * 4
    assert rep.delta_max == [1.0, 1.0, 1.0]
    assert rep.product_bound == [rep.diameters[0]] * 3
    assert all(rep.satisfied)


def test_contraction_random_chains():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = rng.integers(2, 8)
        depth = rng.integers(1, 7)
        rep = contraction_chain([random_stochastic(rng, n) for _ in range(depth)], rng.standard_normal((n, 3)))
        assert all(rep.satisfied)
        for l in range(depth):
            assert rep.diameters[l + 1] <= rep.product_bound[l] + 1e-9
    with pytest.raises(InputError):
        contraction_chain([np.eye(3)], np.ones((4, 2)))


def _acts(seed=0, depth=2):
    cfg = VitConfig.tiny(leads=3, signal_length=40, patch_length=10, depth=depth)
    enc = VitEncoder(cfg, np.random.default_rng(seed))
    emb = enc.embed_tokens(np.random.default_rng(seed + 1).standard_normal((2, 3, 4, 10)))
    sig = np.random.default_rng(seed + 1).standard_normal((2, 3, 4, 10)).reshape(2, 3, 40)
    _, acts = enc.forward_signals(sig, capture=True)
    return enc, emb, acts


def test_model_contraction_shapes_and_ranges():
    enc, emb, acts = _acts(depth=3)
    rep = model_contraction(acts, emb, sample=1)
    assert len(rep.diameters) == 4 and len(rep.deltas) == 3
    assert all(len(d) == enc.config.heads for d in rep.deltas)
    assert all(0.0 <= d <= 1.0 for row in rep.deltas for d in row)
    assert rep.satisfied is None
    assert [r["layer"] for r in rep.rows()] == [1, 2, 3]


def test_cosine_trivial_cases():
    assert lead_mean_cosine(np.tile([1.0, 2.0, -1.0], (4, 1))) == pytest.approx(1.0, abs=1e-12)
    assert lead_mean_cosine(np.eye(2)) == 0.0
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 4))
    brute = [float(x[i] @ x[j] / np.linalg.norm(x[i]) / np.linalg.norm(x[j]))
             for i, j in itertools.combinations(range(6), 2)]
    assert lead_mean_cosine(x) == pytest.approx(np.mean(brute), abs=1e-12)


def test_zero_norm_rows_count_as_zero(caplog):
    x = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    with caplog.at_level("WARNING"):
        assert lead_mean_cosine(x) == pytest.approx(1.0 / 3.0)
    assert "zero-norm" in caplog.text


def test_avg_cosine_is_within_lead():
    layout = TokenLayout.full(2, 3)
    h = np.zeros((1, 10, 2))
    h[0, 1:4] = [1.0, 0.0]  # lead 0: identical tokens
    h[0, 6:9] = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]  # lead 1
    prof = avg_cosine(LayerActivations([h], [], layout))
    assert prof.per_lead[0, 0] == pytest.approx(1.0)
    assert prof.per_lead[0, 1] == pytest.approx(1.0 / 3.0)
    assert prof.mean[0] == pytest.approx(2.0 / 3.0)
    assert {"layer", "lead", "mean_cos", "std_cos"} == set(prof.rows()[0])


def test_cosine_map_properties():
    _, _, acts = _acts()
    layout = acts.layout
    q, t = layout.patch_token(0, 1), layout.patch_token(2, 3)
    m = cosine_map(acts, 2, q).values
    assert m[0, 1] == 1.0
    assert np.all((m >= -1) & (m <= 1))
    back = cosine_map(acts, 2, t).values
    assert m[2, 3] == pytest.approx(back[0, 1], abs=1e-12)
    h = acts.hidden_arrays()[1][0]
    direct = h[t] @ h[q] / np.linalg.norm(h[t]) / np.linalg.norm(h[q])
    assert m[2, 3] == pytest.approx(direct, abs=1e-12)
    with pytest.raises(UsageError):
        cosine_map(acts, 1, 0)
    with pytest.raises(UsageError):
        cosine_map(acts, 3, q)


def test_cosine_map_orthogonal_query():
    layout = TokenLayout.full(1, 3)
    h = np.zeros((1, 5, 3))
    h[0, 1] = [1.0, 0, 0]
    h[0, 2] = [0, 2.0, 0]
    h[0, 3] = [0, 0, -1.0]
    m = cosine_map(LayerActivations([h], [], layout), 1, 1).values
    assert np.array_equal(m, [[1.0, 0.0, 0.0]])


def test_entropy_cases():
    uniform = np.full((2, 5, 5), 0.2)
    assert aae(uniform) == pytest.approx(1.0, abs=1e-12)
    assert aae(np.stack([np.eye(4)] * 3)) == 0.0
    rng = np.random.default_rng(0)
    a = np.stack([random_stochastic(rng, 6, sparsity=0.4) for _ in range(3)])
    assert aae(a) == pytest.approx(entropy_mp(a), abs=1e-12)
    assert attention_entropy(a).shape == (3,)
    with pytest.raises(InputError):
        aae(np.ones((1, 1, 1)))


def test_entropy_profile_of_untrained_model():
    _, _, acts = _acts(depth=3)
    prof = entropy_profile(acts)
    assert prof.per_head.shape == (3, 2)
    assert np.all((prof.per_head >= 0) & (prof.per_head <= 1))
    assert prof.per_layer[0] >= 0.99


def test_csv_writers(tmp_path):
    write_csv(tmp_path / "e.csv", ["layer", "head", "aae"], [{"layer": 1, "head": 0, "aae": np.float64(0.5)}])
    assert (tmp_path / "e.csv").read_text() == "layer,head,aae\n1,0,0.5\n"
    write_map_csv(tmp_path / "m.csv", np.array([[0.25, 1.0]]), ["V2"])
    assert (tmp_path / "m.csv").read_text() == "lead,0,1\nV2,0.25,1.0\n"
