import math

import numpy as np
import pytest

from moec import numerics as nx
from moec.dispatch import OVERFLOW
from moec.dropout import ExpertMask
from moec.gating import RouterParams, RoutingBatch
from moec.gradcheck import run_all
from moec.losses import ClusterConfig
from moec.model import (
    MoELayer,
    build_model,
    load_checkpoint,
    moe_forward,
    save_checkpoint,
    task_loss,
)
from moec.numerics import DimensionError, Tensor


def small_layer(seed=0, n=4, m=2, cf=2.0, d=5, f=6):
    return MoELayer.init(np.random.default_rng(seed), d, f, ClusterConfig(n, m),
                         routing_dim=3, capacity_factor=cf)


def per_token_oracle(x, layer, gates, assignment):
    """Run each routed token through its own expert, one at a time."""
    out = x.copy()
    for t, i in enumerate(assignment):
        if i == OVERFLOW:
            continue
        e = layer.experts[i]
        h = np.maximum(x[t] @ e.w1.values + e.b1.values[0], 0)
        out[t] += gates[t, i] * (h @ e.w2.values + e.b2.values[0])
    return out


def test_dense_matches_per_token_dispatch():
    layer = small_layer(cf=1.0)
    x = np.random.default_rng(1).normal(size=(12, 5))
    out, gate, res, _ = moe_forward(RoutingBatch(Tensor(x)), layer)
    np.testing.assert_allclose(out.values, per_token_oracle(x, layer, gate.gates.values, res.assignment),
                               atol=1e-12)


def test_single_expert_is_dense_ffn():
    layer = small_layer(n=1, m=1)
    x = np.random.default_rng(2).normal(size=(7, 5))
    out, gate, res, _ = moe_forward(RoutingBatch(Tensor(x)), layer)
    assert res.overflow == 0 and np.all(gate.gates.values == 1.0)
    np.testing.assert_allclose(out.values, x + layer.experts[0](Tensor(x)).values, atol=1e-12)


def test_overflowed_tokens_pass_through():
    layer = small_layer(cf=0.25)
    x = np.random.default_rng(3).normal(size=(16, 5))
    out, _, res, _ = moe_forward(RoutingBatch(Tensor(x)), layer)
    over = res.assignment == OVERFLOW
    assert over.sum() >= 12  # capacity 1 per expert
    np.testing.assert_array_equal(out.values[over], x[over])


def test_masking_equals_removal():
    layer = small_layer(seed=4, cf=4.0)
    x = np.random.default_rng(5).normal(size=(6, 5))
    drop = 2
    keep = np.ones(4, bool)
    keep[drop] = False
    out, gate, res, _ = moe_forward(RoutingBatch(Tensor(x)), layer, ExpertMask(keep, level="cluster"))

    r = layer.router
    rest = [i for i in range(4) if i != drop]
    reduced = MoELayer(
        RouterParams(Tensor(r.expert_embeddings.values[rest]), r.projection, r.log_temperature,
                     normalize=True),
        [layer.experts[i] for i in rest],
        ClusterConfig(3, 1),
        capacity_factor=4.0,
    )
    out2, gate2, res2, _ = moe_forward(RoutingBatch(Tensor(x)), reduced)
    assert res.overflow == res2.overflow == 0
    np.testing.assert_allclose(out.values, out2.values, atol=1e-12)
    np.testing.assert_allclose(gate.gates.values[:, rest], gate2.gates.values, atol=1e-12)
    assert [rest[i] for i in res2.assignment] == res.assignment.tolist()


def test_mask_ignored_at_inference():
    layer = small_layer(seed=6)
    x = Tensor(np.random.default_rng(6).normal(size=(4, 5)))
    keep = np.array([True, False, True, False])
    a, *_ = moe_forward(RoutingBatch(x), layer, ExpertMask(keep, level="cluster"), train=False)
    b, *_ = moe_forward(RoutingBatch(x), layer, None, train=False)
    np.testing.assert_array_equal(a.values, b.values)


def test_hidden_dim_mismatch():
    with pytest.raises(DimensionError):
        moe_forward(RoutingBatch(Tensor(np.ones((2, 3)))), small_layer())


def test_task_losses():
    assert task_loss(Tensor([[0.0, 0.0]]), [0], "classification").item() == pytest.approx(math.log(2), abs=1e-15)
    assert task_loss(Tensor([[1.5, -2.0]]), [[1.5, -2.0]]).item() == 0.0
    assert task_loss(Tensor([[1.0, 3.0]]), [[0.0, 0.0]]).item() == 5.0


def test_nll_matches_log_softmax():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(5, 3)) * 30
    y = rng.integers(0, 3, 5)
    expect = -np.mean([z[t, y[t]] - math.log(sum(math.exp(v) for v in z[t])) for t in range(5)])
    assert task_loss(Tensor(z), y, "classification").item() == pytest.approx(expect, rel=1e-12)


def test_end_to_end_gradients():
    (rep,) = [r for r in run_all(points=8, seed=3) if r.name == "end_to_end"]
    assert rep.ok, rep


def test_gradcheck_catches_injected_fault():
    bad = {r.name: r for r in run_all(points=6, seed=0, fault="clustering")}
    assert not bad["clustering_mu0"].ok and not bad["clustering_mu1"].ok
    assert bad["balance"].ok


def test_backward_reaches_every_parameter():
    model = build_model(np.random.default_rng(8), 5, 6, 2, ClusterConfig(4, 2), routing_dim=3)
    x = Tensor(np.random.default_rng(9).normal(size=(32, 5)))
    with nx.Tape() as tape:
        pred, *_ = model.forward(x)
        loss = task_loss(pred, np.zeros((32, 2)))
    grads = nx.backward(tape, loss)
    for name, t in model.parameters().items():
        assert t in grads, name


def test_checkpoint_round_trip(tmp_path):
    model = build_model(np.random.default_rng(10), 5, 6, 2, ClusterConfig(4, 2))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    state = model.state()
    assert sorted(loaded) == sorted(state)
    for k in state:
        assert loaded[k].shape == state[k].shape
        assert np.array_equal(loaded[k], state[k])  # bit-exact
    other = build_model(np.random.default_rng(11), 5, 6, 2, ClusterConfig(4, 2))
    other.set_parameters(loaded)
    x = Tensor(np.ones((3, 5)))
    assert np.array_equal(other.forward(x, train=False)[0].values, model.forward(x, train=False)[0].values)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
