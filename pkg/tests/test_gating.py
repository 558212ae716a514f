import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moec import numerics as nx
from moec.gating import (
    MASK_VALUE,
    RouterParams,
    RoutingBatch,
    combine_outputs,
    gate_values,
    routing_scores,
    top_k_select,
)
from moec.numerics import ContractError, DimensionError, Tape, Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def plain_router(emb):
    return RouterParams(Tensor(emb, requires_grad=True))


def cosine_router(emb, proj, temperature=1.0):
    return RouterParams(
        Tensor(emb, requires_grad=True),
        Tensor(proj, requires_grad=True),
        Tensor([[math.log(temperature)]], requires_grad=True),
        normalize=True,
    )


def test_plain_scores():
    s = routing_scores(RoutingBatch(Tensor([[1, 0]])), plain_router([[1, 0], [0, 1]]), [True, True])
    np.testing.assert_array_equal(s.values, [[1, 0]])


def test_normalized_score_is_cosine():
    router = cosine_router([[1, 0], [0, 1]], np.eye(2))
    s = routing_scores(RoutingBatch(Tensor([[2, 0]])), router, [True, True])
    assert s.values[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert s.values[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_scores_match_per_token_loop():
    rng = np.random.default_rng(0)
    h, e = rng.normal(size=(7, 5)), rng.normal(size=(4, 5))
    s = routing_scores(RoutingBatch(Tensor(h)), plain_router(e), np.ones(4, bool)).values
    for t in range(7):
        for i in range(4):
            assert abs(s[t, i] - sum(h[t, k] * e[i, k] for k in range(5))) < 1e-12


def test_normalized_scores_match_loop():
    rng = np.random.default_rng(1)
    h, e, P = rng.normal(size=(5, 6)), rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    s = routing_scores(RoutingBatch(Tensor(h)), cosine_router(e, P, 0.5), np.ones(3, bool)).values
    for t in range(5):
        z = h[t] @ P
        for i in range(3):
            cos = z @ e[i] / (np.linalg.norm(z) * np.linalg.norm(e[i]))
            assert abs(s[t, i] - cos / 0.5) < 1e-9


def test_masked_scores_carry_sentinel():
    s = routing_scores(RoutingBatch(Tensor([[1, 2]])), plain_router([[1, 0], [0, 1]]), [True, False])
    assert s.values[0, 1] < MASK_VALUE / 2


def test_dimension_errors():
    with pytest.raises(DimensionError):
        routing_scores(RoutingBatch(Tensor([[1, 2, 3]])), plain_router([[1, 0]]), [True])
    with pytest.raises(DimensionError):
        routing_scores(RoutingBatch(Tensor([[1, 2]])), plain_router([[1, 0]]), [True, True])


def test_softmax_uniform():
    np.testing.assert_allclose(gate_values(Tensor([[0, 0, 0, 0]])).values, [[0.25] * 4])


def test_softmax_two_experts():
    e = math.e
    np.testing.assert_allclose(
        gate_values(Tensor([[1, 0]])).values, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12
    )
    np.testing.assert_allclose(gate_values(Tensor([[1, 0]])).values, [[0.7311, 0.2689]], atol=1e-4)


def test_sigmoid_zero():
    assert gate_values(Tensor([[0.0]]), "sigmoid").item() == 0.5


def test_sigmoid_masked_is_zero():
    g = gate_values(Tensor([[0.3, MASK_VALUE]]), "sigmoid", [True, False]).values
    assert g[0, 1] == 0.0 and 0 < g[0, 0] < 1


def test_all_masked_is_an_error():
    with pytest.raises(ContractError):
        gate_values(Tensor([[MASK_VALUE, MASK_VALUE]]))


def test_top1_tie_lowest_index():
    assert top_k_select(np.array([[0.1, 0.4, 0.4, 0.1]]), 1).tolist() == [[1]]


def test_top2():
    assert sorted(top_k_select(np.array([[0.7, 0.2, 0.1]]), 2)[0].tolist()) == [0, 1]


def test_top_k_too_many():
    with pytest.raises(ContractError):
        top_k_select(np.array([[0.5, 0.5, 0.0]]), 2, mask=[True, False, False])


def test_top_k_matches_full_sort():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a = rng.random((1, 6)).round(1)  # rounding forces ties
        k = int(rng.integers(1, 7))
        got = top_k_select(a, k)[0].tolist()
        oracle = sorted(range(6), key=lambda i: (-a[0, i], i))[:k]
        assert got == oracle


def test_combine_saturated_gate():
    out = combine_outputs({(0, 2): Tensor([[1.0, -3.0]])}, Tensor([[0, 0, 1.0]]), np.array([[2]]))
    np.testing.assert_array_equal(out.values, [[1.0, -3.0]])


def test_combine_scales_by_gate():
    out = combine_outputs({(0, 0): Tensor([[1.0, 2.0]])}, Tensor([[0.6, 0.4]]), np.array([[0]]))
    np.testing.assert_allclose(out.values, [[0.6, 1.2]], atol=1e-15)


def test_combine_two_experts_matches_hand_sum():
    rng = np.random.default_rng(4)
    gates = rng.random((3, 4))
    sel = np.array([[0, 2], [1, 3], [3, 0]])
    outs = {(t, int(i)): Tensor(rng.normal(size=(1, 5))) for t in range(3) for i in sel[t]}
    y = combine_outputs(outs, Tensor(gates), sel).values
    for t in range(3):
        i, j = sel[t]
        expect = gates[t, i] * outs[(t, i)].values[0] + gates[t, j] * outs[(t, j)].values[0]
        np.testing.assert_allclose(y[t], expect, atol=1e-12)


def test_combine_missing_output():
    with pytest.raises(ContractError):
        combine_outputs({}, Tensor([[1.0]]), np.array([[0]]))


masks = arrays(bool, 5).filter(lambda m: m.any())


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), masks)
def test_softmax_rows_sum_to_one_over_candidates(s, mask):
    scores = s + np.where(mask, 0.0, MASK_VALUE)
    g = gate_values(Tensor(scores), mask=mask).values
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(g[:, ~mask] == 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), st.floats(-50, 50, width=64))
def test_softmax_shift_invariance(s, c):
    a = gate_values(Tensor(s)).values
    b = gate_values(Tensor(s + c)).values
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    assert (top_k_select(a, 1) == top_k_select(b, 1)).all()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), masks)
def test_masked_expert_never_selected_nor_gets_gradient(h, mask):
    rng = np.random.default_rng(0)
    router = plain_router(rng.normal(size=(5, 3)))
    leaf = router.expert_embeddings
    with Tape() as tape:
        g = gate_values(routing_scores(RoutingBatch(Tensor(h)), router, mask), mask=mask)
        root = nx.sum(nx.mul(g, Tensor(rng.normal(size=g.shape))))
    assert mask[top_k_select(g, 1, mask)].all()
    grad = nx.backward(tape, root)[leaf]
    assert np.all(grad[~mask] == 0.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0.1, 5, width=64)), st.floats(0.01, 100))
def test_normalized_scores_ignore_token_scale(h, lam):
    rng = np.random.default_rng(5)
    router = cosine_router(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), 0.7)
    keep = np.ones(3, bool)
    a = routing_scores(RoutingBatch(Tensor(h)), router, keep).values
    b = routing_scores(RoutingBatch(Tensor(h * lam)), router, keep).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_router_init_defaults():
    r = RouterParams.init(np.random.default_rng(0), 8, 16)
    assert r.normalize and r.projection.shape == (16, 8) and r.temperature == 1.0
    assert r.expert_embeddings.shape == (8, 8)
