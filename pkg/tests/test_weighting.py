import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import silhouette_score

from bwuda.networks import init_model
from bwuda.weighting import (
    EmbeddingConfig,
    EngineeringWeights,
    GeometryWeights,
    WeightingError,
    combine,
    disagreement,
    embed_geometry,
    engineering_weights,
    geometry_weights,
    min_max_scale,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_min_max_examples():
    assert min_max_scale([2, 4, 6]).tolist() == [0.0, 0.5, 1.0]
    assert min_max_scale([5, 5, 5]).tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(WeightingError):
        min_max_scale([1.0, np.nan])
    with pytest.raises(WeightingError):
        min_max_scale([])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_min_max_range_and_order(v):
    s = min_max_scale(v)
    assert np.all((s >= 0) & (s <= 1))
    if np.ptp(v) > 0:
        assert s.min() == 0.0 and s.max() == 1.0
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(s[order]) >= 0)
    else:
        assert np.all(s == 1.0)


def test_geometry_weights_hand_example():
    src = np.array([[1.0, 0.0], [0.0, 2.0], [-4.0, 0.0]])
    w = geometry_weights(src, np.zeros((1, 2))).values
    assert np.allclose(w, [1.0, 1.0 / 3.0, 0.0], atol=1e-7)


def test_geometry_weights_degenerate_and_errors():
    assert geometry_weights(np.ones((4, 2)), np.zeros((2, 2))).values.tolist() == [1.0] * 4
    with pytest.raises(WeightingError):
        geometry_weights(np.ones((4, 2)), np.zeros((0, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_geometry_weights_bounded_monotone_and_equivariant(n, seed):
    gen = np.random.default_rng(seed)
    src, tgt = gen.normal(size=(n, 2)) * 5, gen.normal(size=(7, 2))
    w = geometry_weights(src, tgt).values
    assert np.all((w >= 0) & (w <= 1))
    d = np.linalg.norm(src - tgt.mean(0), axis=1)
    i, j = np.argsort(d)[0], np.argsort(d)[-1]
    for a in range(n):
        for b in range(n):
            if d[a] < d[b]:
                assert w[a] >= w[b]
    assert w[i] == 1.0 and w[j] == 0.0 or np.ptp(d) == 0
    perm = gen.permutation(n)
    assert np.array_equal(geometry_weights(src[perm], tgt).values, w[perm])


def test_combine_examples_and_errors():
    g = GeometryWeights(np.array([0.0, 1.0]), 0)
    e = EngineeringWeights(np.array([1.0, 0.0]), 0)
    assert combine(g, e, 0.5, 0.5).values.tolist() == [0.5, 0.5]
    assert np.array_equal(combine(g, e, 1.0, 0.0).values, e.values)
    with pytest.raises(WeightingError):
        combine(g, e, 0.0, 0.0)
    with pytest.raises(WeightingError):
        combine(g, EngineeringWeights(np.ones(3), 0), 1, 1)
    with pytest.raises(WeightingError):
        combine(g, e, -1.0, 2.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(0, 10), st.floats(0, 10), st.integers(0, 2**31 - 1))
def test_combine_is_exact_and_bounded(n, a, b, seed):
    if a + b == 0:
        return
    gen = np.random.default_rng(seed)
    g, e = gen.random(n), gen.random(n)
    w = combine(GeometryWeights(g, 0), EngineeringWeights(e, 0), a, b).values
    for i in range(n):
        assert w[i] == a * e[i] + b * g[i]
    assert np.all((w >= 0) & (w <= a + b))


def _voxels(n, p, seed):
    return (np.random.default_rng(seed).random((n, 16, 16, 16)) < p).astype(np.uint8)


def test_engineering_weights_degenerate_when_heads_agree():
    m = init_model(seed=0)
    m.hhat.load_state_dict(m.h.state_dict())
    v, mass = _voxels(6, 0.3, 0), np.linspace(500, 550, 6)
    w = engineering_weights(m, v, mass)
    assert w.values.tolist() == [1.0] * 6
    assert np.all(w.disagreement == 0)


def test_engineering_weights_hand_case_and_batching():
    m = init_model(seed=0)
    import torch

    with torch.no_grad():
        for head, bias in ((m.h, [1.0, 0, 0, 0]), (m.hhat, [0.0, 0, 0, 0])):
            for p in head.parameters():
                p.zero_()
            head.fc2.bias.copy_(torch.tensor(bias))
    assert disagreement(m, _voxels(1, 0.3, 1), np.array([520.0])).tolist() == [0.25]
    m2 = init_model(seed=3)
    v, mass = _voxels(20, 0.35, 2), np.linspace(498, 558, 20)
    a = engineering_weights(m2, v, mass, batch_size=8)
    b = engineering_weights(m2, v, mass, batch_size=64)
    assert np.allclose(a.disagreement, b.disagreement, rtol=1e-5, atol=1e-9)
    assert np.all((a.values >= 0) & (a.values <= 1))
    assert a.values.max() == 1.0 and a.values.min() == 0.0
    order = np.argsort(a.disagreement)
    assert np.all(np.diff(a.values[order]) >= 0)


def test_joint_embedding_shapes_determinism_and_clusters():
    gen = np.random.default_rng(0)
    a = (gen.random((40, 16, 16, 16)) < 0.15).astype(np.uint8)
    b = (gen.random((40, 16, 16, 16)) < 0.15).astype(np.uint8)
    b[:, :8] = 1  # a second, well separated family
    src = np.concatenate([a[:30], b[:30]])
    tgt = np.concatenate([a[30:], b[30:]])
    cfg = EmbeddingConfig(perplexity=10, seed=4)
    s1, t1 = embed_geometry(src, tgt, cfg)
    s2, t2 = embed_geometry(src, tgt, cfg)
    assert s1.shape == (60, 2) and t1.shape == (20, 2)
    assert np.array_equal(s1, s2) and np.array_equal(t1, t2)
    codes = np.concatenate([s1, t1])
    labels = np.r_[np.zeros(30), np.ones(30), np.zeros(10), np.ones(10)]
    assert silhouette_score(codes, labels) > 0.5


def test_embedding_rejects_too_few_points_and_bad_configs():
    with pytest.raises(WeightingError):
        embed_geometry(_voxels(10, 0.3, 0), _voxels(5, 0.3, 1), EmbeddingConfig(perplexity=30))
    with pytest.raises(WeightingError):
        EmbeddingConfig(output_dim=3)
    with pytest.raises(WeightingError):
        EmbeddingConfig(perplexity=0)
