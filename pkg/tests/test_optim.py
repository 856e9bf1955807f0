import math
from collections import OrderedDict

import numpy as np
import pytest

from cogtraj.exceptions import NonFiniteError, ParameterError, ShapeError
from cogtraj.network import build_network, profile
from cogtraj.optim import (RmsPropState, TrainPlan, batch_order, clip_global_norm, rmsprop_step,
                           smooth_l1, train)

from oracles import naive_rmsprop, naive_smooth_l1


def test_smooth_l1_examples():
    assert smooth_l1(np.ones(3), np.ones(3)) == (0.0, pytest.approx(np.zeros(3)))
    loss, grad = smooth_l1(np.array([0.5]), np.array([0.0]))
    assert loss == 0.125 and grad.tolist() == [0.5]
    loss, grad = smooth_l1(np.array([2.0]), np.array([0.0]))
    assert loss == 1.5 and grad.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(10))
def test_smooth_l1_matches_naive(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(0, 2, (2, 2, 5)), rng.normal(0, 2, (2, 2, 5))
    beta = rng.uniform(0.1, 3)
    loss, grad = smooth_l1(pred, target, beta)
    ref_loss, ref_grad = naive_smooth_l1(pred, target, beta)
    assert abs(loss - ref_loss) <= 1e-12
    np.testing.assert_allclose(grad.ravel(), ref_grad, rtol=0, atol=1e-12)


def test_smooth_l1_errors():
    with pytest.raises(ShapeError):
        smooth_l1(np.zeros(3), np.zeros(4))
    with pytest.raises(ParameterError):
        smooth_l1(np.zeros(3), np.zeros(3), beta=0)


def test_rmsprop_scalar_example():
    params = {"t": np.array([1.0])}
    state = RmsPropState(lr=0.1, rho=0.9, eps=0.0)
    rmsprop_step(params, {"t": np.array([1.0])}, state)
    assert state.cache["t"][0] == pytest.approx(0.1, abs=1e-15)
    assert params["t"][0] == pytest.approx(1 - 0.1 / math.sqrt(0.1), abs=1e-12)
    assert round(params["t"][0], 6) == 0.683772


def test_rmsprop_zero_gradient_decays_cache():
    params = {"t": np.array([2.0, -1.0])}
    state = RmsPropState(lr=0.1, rho=0.9, eps=1e-8)
    state.cache["t"] = np.array([0.5, 0.25])
    rmsprop_step(params, {"t": np.zeros(2)}, state)
    assert params["t"].tolist() == [2.0, -1.0]
    np.testing.assert_allclose(state.cache["t"], [0.45, 0.225], rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_rmsprop_matches_recursion(seed):
    rng = np.random.default_rng(seed)
    lr, rho, eps = rng.uniform(1e-3, 0.5), rng.uniform(0.5, 0.999), rng.uniform(0, 1e-3)
    gs = rng.standard_normal(6)
    params = {"t": np.array([0.3])}
    state = RmsPropState(lr, rho, eps)
    trace = naive_rmsprop(0.3, gs, lr, rho, eps)
    for g, (theta, cache) in zip(gs, trace):
        rmsprop_step(params, {"t": np.array([g])}, state)
        assert abs(params["t"][0] - theta) <= 1e-12
        assert abs(state.cache["t"][0] - cache) <= 1e-12
    assert state.step == 6


def test_rmsprop_rejects_non_finite():
    state = RmsPropState()
    params = OrderedDict(a=np.zeros(2), b=np.zeros(2))
    rmsprop_step(params, {"a": np.ones(2), "b": np.ones(2)}, state)
    with pytest.raises(NonFiniteError, match=r"b at step 2"):
        rmsprop_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)


def test_rmsprop_settings_validated():
    with pytest.raises(ParameterError):
        RmsPropState(rho=1.0)
    with pytest.raises(ParameterError):
        RmsPropState(lr=-1)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)


def test_batch_order_covers_everything():
    plan = TrainPlan(batch_size=3)
    batches = batch_order(10, plan, np.random.default_rng(0))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def _tiny_data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, 1, 8, 8, 8)), rng.choice(np.arange(0, 37, 6), n).astype(float),
            rng.uniform(0, 1, (n, 13)))


def test_zero_epochs_is_a_no_op():
    net = build_network(profile("tiny"), 0)
    before = net.copy()
    vols, months, y = _tiny_data()
    out, history = train(net, vols, months, y, TrainPlan(batch_size=2, epochs=0))
    assert history == []
    assert all(np.array_equal(out.params[k], before.params[k]) for k in before.params)


def test_training_is_deterministic():
    vols, months, y = _tiny_data()
    cfg = profile("tiny", dropout_p=0.3)
    runs = []
    for _ in range(2):
        net, hist = train(build_network(cfg, 1), vols, months, y,
                          TrainPlan(batch_size=2, epochs=3, seed=5), RmsPropState(lr=1e-3))
        runs.append((net, hist))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in runs[0][0].params)
    _, other = train(build_network(cfg, 1), vols, months, y,
                     TrainPlan(batch_size=2, epochs=3, seed=6), RmsPropState(lr=1e-3))
    assert other != runs[0][1]


def test_training_reduces_loss_and_reports_epochs():
    vols, months, y = _tiny_data()
    seen = []
    _, hist = train(build_network(profile("tiny"), 0), vols, months, y,
                    TrainPlan(batch_size=3, epochs=20), RmsPropState(lr=1e-3),
                    callbacks=[seen.append])
    assert len(hist) == 20 and hist[-1] < hist[0]
    assert [s["epoch"] for s in seen] == list(range(20))
    assert set(seen[0]) >= {"epoch", "loss", "wall_time", "seed"}


def test_training_errors():
    vols, months, y = _tiny_data(4)
    net = build_network(profile("tiny"), 0)
    with pytest.raises(ParameterError):
        train(net, vols, months, y, TrainPlan(batch_size=5, epochs=1))
    with pytest.raises(ShapeError):
        train(net, vols, months[:3], y, TrainPlan(batch_size=2, epochs=1))
    with pytest.raises(NonFiniteError, match="epoch 0, batch 0"):
        bad = y.copy()
        bad[0, 0] = np.inf
        train(net, vols, months, bad, TrainPlan(batch_size=2, epochs=1, shuffle=False))
