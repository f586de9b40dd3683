import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flyt.exceptions import InvalidInputError
from flyt.model import (DownstreamSet, ExampleRecord, Pool, ReferenceParams, ScoringParams, encode_batch,
                        score_batch)


def straight_line_tower(layers, x):
    h = x
    for i, (w, b) in enumerate(layers):
        h = np.array([[sum(w[o, j] * row[j] for j in range(w.shape[1])) + b[o] for o in range(w.shape[0])]
                      for row in h])
        if i < len(layers) - 1:
            h = np.tanh(h)
    return np.array([row / math.sqrt(sum(c * c for c in row)) for row in h])


def test_identity_affine_constant_input():
    b = np.array([3.0, 4.0])
    theta = ReferenceParams([(np.eye(2), b)], [(np.eye(2), b)])
    u, v = encode_batch(theta, Pool(("a",), np.zeros((1, 2)), np.zeros((1, 2))))
    np.testing.assert_allclose(u[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(v[0], [0.6, 0.8], atol=1e-15)


def test_encoder_matches_straight_line(rng):
    theta = ReferenceParams.init(5, 3, seed=11)
    theta = theta.with_vector(theta.to_vector() + 0.1 * rng.standard_normal(theta.size))
    pool = Pool(("a", "b", "c"), rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    u, v = encode_batch(theta, pool)
    np.testing.assert_allclose(u, straight_line_tower(theta.image_layers, pool.image), atol=1e-12)
    np.testing.assert_allclose(v, straight_line_tower(theta.text_layers, pool.text), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_unit_norm_embeddings(b, layers, seed):
    r = np.random.default_rng(seed)
    theta = ReferenceParams.init(4, 3, n_layers=layers, seed=seed)
    u, v = encode_batch(theta, Pool(tuple(map(str, range(b))), r.standard_normal((b, 4)), r.standard_normal((b, 4))))
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


def test_encode_accepts_records_and_rejects_width(rng):
    theta = ReferenceParams.init(4, 2, seed=0)
    recs = [ExampleRecord("x", rng.standard_normal(4), rng.standard_normal(4))]
    u, _ = encode_batch(theta, recs)
    assert u.shape == (1, 2)
    with pytest.raises(InvalidInputError):
        encode_batch(theta, Pool(("x",), np.zeros((1, 3)), np.zeros((1, 3))))


def test_linear_score_examples():
    p = ScoringParams.linear(["a", "b"], weights=[1.0, 2.0], bias=0.5)
    assert score_batch(p, [[0.1, 0.2]])[0] == pytest.approx(1.0, abs=1e-15)
    q = ScoringParams.linear(["a", "b"], bias=-1.5)
    assert np.all(score_batch(q, np.random.default_rng(0).standard_normal((7, 2))) == -1.5)
    r = ScoringParams.linear(["a"], means=[2.0], stds=[2.0], weights=[1.0])
    assert score_batch(r, [[4.0]])[0] == 1.0


def test_score_column_order_enforced():
    p = ScoringParams.linear(["a", "b"], weights=[1.0, 2.0])
    assert score_batch(p, [[1.0, 0.0]], columns=["a", "b"])[0] == 1.0
    with pytest.raises(InvalidInputError):
        score_batch(p, [[1.0, 0.0]], columns=["b", "a"])
    with pytest.raises(InvalidInputError):
        score_batch(p, [[1.0, 0.0, 3.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1), st.sampled_from(["linear", "gated_mlp"]))
def test_score_permutation_equivariant_and_pure(b, seed, kind):
    r = np.random.default_rng(seed)
    names = ["a", "b", "c"]
    if kind == "linear":
        p = ScoringParams.linear(names, weights=r.standard_normal(3), bias=r.standard_normal())
    else:
        p = ScoringParams.gated_mlp(names, seed=seed % 1000)
    x = r.standard_normal((b, 3))
    perm = r.permutation(b)
    s = score_batch(p, x)
    np.testing.assert_array_equal(score_batch(p, x), s)
    np.testing.assert_allclose(score_batch(p, x[perm]), s[perm], rtol=0, atol=1e-13)


def test_gated_mlp_formula(rng):
    p = ScoringParams.gated_mlp(["a", "b"], means=[1.0, -1.0], stds=[2.0, 0.5], hidden=3, seed=4)
    x = rng.standard_normal((4, 2))
    z = (x - p.input_means) / p.input_stds
    w = p.weights
    gate = 1 / (1 + np.exp(-(z @ w["gate_weight"].T + w["gate_bias"])))
    expected = (gate * (z @ w["up_weight"].T + w["up_bias"])) @ w["out_weight"] + p.bias
    np.testing.assert_allclose(score_batch(p, x), expected, atol=1e-13)


def test_flat_round_trip(rng):
    for params in (ReferenceParams.init(3, 2, seed=1), ScoringParams.gated_mlp(["a", "b"], seed=2),
                   ScoringParams.linear(["a"])):
        vec = rng.standard_normal(params.size)
        again = params.with_vector(vec)
        np.testing.assert_array_equal(again.to_vector(), vec)
        assert sum(s.stop - s.start for s in again.block_slices().values()) == params.size


def test_reference_split_orders_blocks():
    theta = ReferenceParams.init(3, 2, seed=0)
    img, txt, lt = theta.split(theta.tensor())
    assert len(img) == 2 and len(txt) == 2
    assert float(lt) == pytest.approx(math.log(1 / 0.07))
    np.testing.assert_array_equal(img[0][0].numpy(), theta.image_layers[0][0])
    assert isinstance(lt, torch.Tensor)


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        ExampleRecord("a", np.array([1.0, 2.0]), np.array([1.0]))
    with pytest.raises(InvalidInputError):
        Pool(("a", "a"), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        ScoringParams.linear(["a"], stds=[0.0])
    with pytest.raises(InvalidInputError):
        DownstreamSet(np.zeros((2, 2)), np.array([0, 5]), (np.zeros((1, 2)), np.zeros((1, 2))))


def test_templates_deterministic_with_one_per_class():
    ds = DownstreamSet(np.zeros((2, 2)), np.array([0, 1]), (np.ones((1, 2)), 2 * np.ones((1, 2))))
    a = ds.sample_templates(np.random.default_rng(0))
    b = ds.sample_templates(np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, [[1, 1], [2, 2]])
