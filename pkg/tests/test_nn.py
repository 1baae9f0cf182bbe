import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmap import nn
from crossmap.errors import BatchSizeError, CacheError, DeterminismError, NumericError, ShapeError


def single_layer(W, b, activation="relu", bn=False):
    W = np.asarray(W, dtype=float)
    norm = None
    if bn:
        d = W.shape[1]
        norm = nn.BatchNorm(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))
    return nn.Mlp([nn.Layer(W, np.asarray(b, dtype=float), activation, norm)])


def test_identity_relu():
    out, _ = nn.mlp_forward(single_layer(np.eye(2), [0, 0]), [[-1.0, 2.0]], "infer")
    assert np.array_equal(out, [[0.0, 2.0]])


def test_zero_weights_zero_output(rng):
    mlp = nn.init_mlp([3, 5, 2], rng, batch_norm=False)
    for layer in mlp.layers:
        layer.W[...] = 0.0
    out, _ = nn.mlp_forward(mlp, rng.standard_normal((4, 3)), "infer")
    assert np.array_equal(out, np.zeros((4, 2)))


def test_batchnorm_train_normalizes(rng):
    mlp = single_layer(np.eye(3), [0, 0, 0], "identity", bn=True)
    x = rng.normal(loc=[5, -2, 0.1], scale=[3, 0.5, 10], size=(64, 3))
    out, _ = nn.mlp_forward(mlp, x, "train")
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
    var = x.var(axis=0)
    assert np.allclose(out.var(axis=0), var / (var + nn.BN_EPS), atol=1e-12)


def test_batchnorm_running_stats_update(rng):
    mlp = single_layer(np.eye(2), [0, 0], "identity", bn=True)
    x = rng.standard_normal((10, 2))
    nn.mlp_forward(mlp, x, "train")
    bn = mlp.layers[0].bn
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))


def test_batchnorm_infer_is_pure(rng):
    mlp = nn.init_mlp([4, 6, 3], rng)
    nn.mlp_forward(mlp, rng.standard_normal((8, 4)), "train")
    x = rng.standard_normal((5, 4))
    before = copy.deepcopy(mlp)
    a, _ = nn.mlp_forward(mlp, x, "infer")
    b, _ = nn.mlp_forward(mlp, x, "infer")
    assert np.array_equal(a, b)
    assert np.array_equal(mlp.layers[0].bn.running_mean, before.layers[0].bn.running_mean)
    # row-by-row evaluation matches the batch
    rows = np.vstack([nn.mlp_forward(mlp, x[i:i + 1], "infer")[0] for i in range(5)])
    assert np.allclose(rows, a, atol=1e-12)


def test_forward_errors(rng):
    mlp = nn.init_mlp([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        nn.mlp_forward(mlp, np.zeros((2, 4)))
    with pytest.raises(BatchSizeError):
        nn.mlp_forward(mlp, np.zeros((1, 3)), "train")
    nn.mlp_forward(mlp, np.zeros((1, 3)), "infer")


def test_linear_backward(rng):
    W = rng.standard_normal((3, 2))
    mlp = single_layer(W, [0, 0], "identity")
    x = rng.standard_normal((4, 3))
    out, cache = nn.mlp_forward(mlp, x, "train")
    (dW, db), dx = nn.mlp_backward(cache, np.ones_like(out))
    assert np.allclose(dW, sum(np.outer(row, np.ones(2)) for row in x))
    assert np.allclose(db, [4, 4])
    assert np.allclose(dx, np.ones((4, 2)) @ W.T)


def _mlp_closure(mlp, x, target):
    def closure():
        out, cache = nn.mlp_forward(mlp, x, "train")
        resid = out - target
        grads, _ = nn.mlp_backward(cache, resid)
        return 0.5 * float(np.sum(resid ** 2)), grads
    return closure


@pytest.mark.parametrize("bn, tol", [(False, 1e-6), (True, 1e-5)])
def test_gradient_check_mlp(rng, bn, tol):
    mlp = nn.init_mlp([3, 4, 2], rng, batch_norm=bn)
    x, target = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    assert nn.grad_check(_mlp_closure(mlp, x, target), mlp) < tol


def test_gradient_check_input_gradient(rng):
    mlp = nn.init_mlp([3, 4, 2], rng, batch_norm=True)
    x = rng.standard_normal((5, 3))

    def closure():
        out, cache = nn.mlp_forward(mlp, x, "train")
        _, dx = nn.mlp_backward(cache, np.cos(out))
        return float(np.sum(np.sin(out))), [dx]

    assert nn.grad_check(closure, [x]) < 1e-6


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)

    def closure():
        loss, grad = nn.softmax_cross_entropy(logits, labels)
        return loss, [grad]

    assert nn.grad_check(closure, [logits]) < 1e-8
    loss, _ = nn.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
    assert np.isclose(loss, np.log(4))


def test_backward_cache_errors(rng):
    mlp = nn.init_mlp([3, 4, 2], rng)
    x = rng.standard_normal((4, 3))
    _, cache = nn.mlp_forward(mlp, x, "infer")
    with pytest.raises(CacheError):
        nn.mlp_backward(cache, np.zeros((4, 2)))
    _, cache = nn.mlp_forward(mlp, x, "train")
    state = nn.AdadeltaState.create(mlp.arrays())
    nn.adadelta_step(state, mlp, [np.ones_like(a) for a in mlp.arrays()])
    with pytest.raises(CacheError):
        nn.mlp_backward(cache, np.zeros((4, 2)))


def test_adadelta_zero_gradient():
    p = np.array([1.0, -2.0])
    state = nn.AdadeltaState([np.array([0.4, 0.2])], [np.array([0.1, 0.3])])
    nn.adadelta_step(state, [p], [np.zeros(2)])
    assert np.array_equal(p, [1.0, -2.0])
    assert np.allclose(state.sq_grad[0], 0.95 * np.array([0.4, 0.2]))
    assert np.allclose(state.sq_delta[0], 0.95 * np.array([0.1, 0.3]))


def test_adadelta_first_step_value():
    p = np.array([0.0])
    state = nn.AdadeltaState.create([p], lr=1.0, rho=0.95, eps=1e-6)
    nn.adadelta_step(state, [p], [np.array([1.0])])
    # -sqrt(1e-6) / sqrt(0.05 + 1e-6)
    assert np.isclose(p[0], -0.004472091, atol=1e-9)


def test_adadelta_zero_lr(rng):
    p = rng.standard_normal(5)
    before = p.copy()
    state = nn.AdadeltaState.create([p], lr=0.0)
    for _ in range(3):
        nn.adadelta_step(state, [p], [rng.standard_normal(5)])
    assert np.array_equal(p, before)


def test_adadelta_rejects_non_finite():
    p = np.array([1.0, 2.0])
    state = nn.AdadeltaState.create([p])
    with pytest.raises(NumericError):
        nn.adadelta_step(state, [p], [np.array([np.nan, 1.0])])
    assert np.array_equal(p, [1.0, 2.0])
    assert np.array_equal(state.sq_grad[0], [0, 0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32), lr=st.floats(0.0, 2.0), rho=st.floats(0.5, 0.99),
       steps=st.integers(1, 6))
def test_adadelta_literal_recurrences(seed, lr, rho, steps):
    r = np.random.default_rng(seed)
    p = r.standard_normal(4)
    state = nn.AdadeltaState.create([p], lr=lr, rho=rho, eps=1e-6)
    eg, ed, x = [0.0] * 4, [0.0] * 4, list(p)
    for _ in range(steps):
        g = r.standard_normal(4) * 10.0 ** r.uniform(-3, 3)
        nn.adadelta_step(state, [p], [g])
        for i in range(4):
            eg[i] = rho * eg[i] + (1 - rho) * g[i] ** 2
            delta = -lr * (ed[i] + 1e-6) ** 0.5 / (eg[i] + 1e-6) ** 0.5 * g[i]
            ed[i] = rho * ed[i] + (1 - rho) * delta ** 2
            x[i] += delta
        assert np.allclose(p, x, rtol=1e-12, atol=1e-15)
        assert np.allclose(state.sq_grad[0], eg, rtol=1e-12)
        assert np.allclose(state.sq_delta[0], ed, rtol=1e-12, atol=1e-300)
        assert np.all(state.sq_grad[0] >= 0) and np.all(state.sq_delta[0] >= 0)
        assert np.all(np.isfinite(p))


def test_lr_schedule_second_epoch():
    state = nn.AdadeltaState.create([], lr=0.125, gamma=0.99)
    nn.lr_schedule(state)
    assert np.isclose(state.lr, 0.12375, rtol=0, atol=1e-15)
    assert state.epoch == 2


def test_lr_schedule_constant_and_closed_form():
    state = nn.AdadeltaState.create([], lr=0.3, gamma=1.0)
    for _ in range(5):
        nn.lr_schedule(state)
    assert state.lr == 0.3
    state = nn.AdadeltaState.create([], lr=0.125, gamma=0.99)
    for _ in range(9):
        nn.lr_schedule(state)
    assert state.epoch == 10
    assert np.isclose(state.lr, 0.125 * 0.99 ** 9, rtol=1e-14)


def test_grad_check_quadratic():
    p = np.array([3.0, -4.0])
    assert nn.grad_check(lambda: (0.5 * float(p @ p), [p.copy()]), [p]) < 1e-9


def test_grad_check_detects_wrong_gradient():
    p = np.array([3.0, -4.0])
    assert nn.grad_check(lambda: (0.5 * float(p @ p), [2 * p]), [p]) > 0.5


def test_grad_check_non_deterministic_closure():
    p = np.array([1.0])
    r = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        nn.grad_check(lambda: (float(p[0] * r.standard_normal()), [p.copy()]), [p])


def test_training_reduces_loss(rng):
    mlp = nn.init_mlp([2, 16, 1], rng)
    x = rng.standard_normal((64, 2))
    y = np.sin(x[:, :1]) + x[:, 1:] ** 2
    state = nn.AdadeltaState.create(mlp.arrays(), lr=1.0)
    losses = []
    for _ in range(200):
        out, cache = nn.mlp_forward(mlp, x, "train")
        losses.append(float(np.mean((out - y) ** 2)))
        grads, _ = nn.mlp_backward(cache, 2 * (out - y) / len(x))
        nn.adadelta_step(state, mlp, grads)
    assert losses[-1] < 0.2 * losses[0]
    assert all(np.all(np.isfinite(a)) for a in mlp.arrays())


def test_checkpoint_round_trip(tmp_path, rng):
    mlp = nn.init_mlp([3, 5, 2], rng)
    nn.mlp_forward(mlp, rng.standard_normal((6, 3)), "train")
    state = nn.AdadeltaState.create(mlp.arrays(), lr=0.2)
    nn.adadelta_step(state, mlp, [rng.standard_normal(a.shape) for a in mlp.arrays()])
    nn.lr_schedule(state)
    nn.save_mlp(tmp_path / "m.npz", mlp, state)
    mlp2, state2 = nn.load_mlp(tmp_path / "m.npz")
    a1, m1 = nn.mlp_to_dict(mlp)
    a2, m2 = nn.mlp_to_dict(mlp2)
    assert m1 == m2 and a1.keys() == a2.keys()
    assert all(np.array_equal(a1[k], a2[k]) for k in a1)
    for a, b in zip(state.sq_grad + state.sq_delta, state2.sq_grad + state2.sq_delta):
        assert np.array_equal(a, b)
    assert (state2.lr, state2.epoch) == (state.lr, state.epoch)
    x = rng.standard_normal((4, 3))
    assert np.array_equal(nn.mlp_forward(mlp, x, "infer")[0], nn.mlp_forward(mlp2, x, "infer")[0])
