import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goodood.numcore import (Mlp, ShapeError, SgdMomentum, chain_rngs, derive_seed, load_mlp,
                             make_rng, mlp_backward, mlp_forward, mlp_input_grad, mlp_param_grad,
                             save_mlp, standard_normal)

from conftest import fd_grad, random_mlp, rel_err


def naive_forward(net, x):
    out = []
    for row in x:
        h = list(row)
        for W, b, act in zip(net.weights, net.biases, net.activations):
            z = [sum(h[i] * W[i, j] for i in range(len(h))) + b[j] for j in range(W.shape[1])]
            h = [max(v, 0.0) if act == "relu" else np.tanh(v) if act == "tanh" else v for v in z]
        out.append(h)
    return np.array(out)


def test_identity_and_relu_layers():
    ident = Mlp([np.eye(2)], [np.zeros(2)], ["identity"])
    assert np.array_equal(mlp_forward(ident, np.array([[1.0, 2.0]]))[1], [[1.0, 2.0]])
    relu = Mlp([np.eye(2), np.eye(2)], [np.zeros(2)] * 2, ["relu", "identity"])
    assert np.array_equal(mlp_forward(relu, np.array([[-1.0, 2.0]]))[1], [[0.0, 2.0]])


def test_forward_matches_naive(rng):
    net = random_mlp(rng, (2, 3, 1), ("relu", "identity"))
    x = rng.standard_normal((7, 2))
    assert np.max(np.abs(mlp_forward(net, x)[1] - naive_forward(net, x))) < 1e-12


def test_final_layer_must_be_identity(rng):
    with pytest.raises(ValueError):
        Mlp.init([2, 3], ["relu"], rng)


def test_input_dim_mismatch(rng):
    net = random_mlp(rng)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros((2, 5)))


def test_linear_param_and_input_grad():
    net = Mlp([np.array([[2.0]])], [np.zeros(1)], ["identity"])
    cache, _ = mlp_forward(net, np.array([[1.0]]))
    (dw, db), = mlp_param_grad(net, cache, np.array([[1.0]]))
    assert dw[0, 0] == 1.0 and db[0] == 1.0
    assert mlp_input_grad(net, cache, np.array([[1.0]]))[0, 0] == 2.0


def test_zero_upstream_zero_grads(rng):
    net = random_mlp(rng)
    cache, out = mlp_forward(net, rng.standard_normal((4, 3)))
    grads, gx = mlp_backward(net, cache, np.zeros_like(out))
    assert all(not dw.any() and not db.any() for dw, db in grads)
    assert not gx.any()


def test_dead_relu_zero_input_grad():
    net = Mlp([np.eye(2), np.ones((2, 1))], [np.full(2, -5.0), np.zeros(1)], ["relu", "identity"])
    cache, _ = mlp_forward(net, np.array([[0.3, -0.2]]))
    assert not mlp_input_grad(net, cache, np.ones((1, 1))).any()


def _kink_free(net, x, h):
    c0, _ = mlp_forward(net, x)
    cp, _ = mlp_forward(net, x + h)
    cm, _ = mlp_forward(net, x - h)
    return all(np.all(np.sign(a) == np.sign(b)) and np.all(np.sign(a) == np.sign(c))
               for a, b, c in zip(c0.preacts, cp.preacts, cm.preacts))


def test_param_grads_match_fd():
    for seed in range(10):
        rng = make_rng(seed)
        net = random_mlp(rng, (3, 6, 5, 2), ("tanh", "tanh", "identity"))
        x = rng.standard_normal((4, 3))
        up = rng.standard_normal((4, 2))
        cache, _ = mlp_forward(net, x)
        grads = mlp_param_grad(net, cache, up)
        for li in range(len(net.weights)):
            for arr, g in ((net.weights[li], grads[li][0]), (net.biases[li], grads[li][1])):
                orig = arr.copy()

                def f(v):
                    arr[...] = v
                    return float(np.sum(up * mlp_forward(net, x)[1]))
                num = fd_grad(f, orig)
                arr[...] = orig
                assert rel_err(g, num) < 1e-4


def test_input_grads_match_fd_relu():
    checked = 0
    for seed in range(40):
        rng = make_rng(seed)
        net = random_mlp(rng, (2, 8, 8, 3), ("relu", "relu", "identity"))
        x = rng.standard_normal((1, 2))
        if not _kink_free(net, x, 1e-5):
            continue
        up = rng.standard_normal((1, 3))
        cache, _ = mlp_forward(net, x)
        g = mlp_input_grad(net, cache, up)
        num = fd_grad(lambda v: float(np.sum(up * mlp_forward(net, v)[1])), x)
        assert rel_err(g, num) < 1e-4
        checked += 1
    assert checked >= 20


def test_backward_from_inner_layer(rng):
    net = random_mlp(rng, (2, 6, 4, 3), ("tanh", "tanh", "identity"))
    x = rng.standard_normal((3, 2))
    up = rng.standard_normal((3, 4))
    cache, _ = mlp_forward(net, x)
    g = mlp_input_grad(net, cache, up, from_layer=1)
    num = fd_grad(lambda v: float(np.sum(up * mlp_forward(net, v)[0].outputs[1])), x)
    assert rel_err(g, num) < 1e-6


def test_sgd_examples():
    p = [np.array([5.0])]
    opt = SgdMomentum(p, lr=1.0, momentum=0.0)
    opt.step(p, [np.array([0.25])])
    assert p[0][0] == 4.75
    p = [np.array([0.0])]
    opt = SgdMomentum(p, lr=1.0, momentum=0.9)
    for _ in range(2):
        opt.step(p, [np.array([1.0])])
    assert abs(p[0][0] + 2.9) < 1e-15
    p = [np.array([3.0, -1.0])]
    SgdMomentum(p, lr=0.1, momentum=0.9).step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [3.0, -1.0])


def test_sgd_plain_descent_equivalence(rng):
    p1 = [rng.standard_normal(3)]
    p2 = [p1[0].copy()]
    opt = SgdMomentum(p1, lr=0.05, momentum=0.0, weight_decay=0.0)
    for _ in range(5):
        g = rng.standard_normal(3)
        opt.step(p1, [g])
        p2[0] = p2[0] - 0.05 * g
    assert np.array_equal(p1[0], p2[0])


def test_sgd_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ShapeError):
        SgdMomentum(p, 0.1).step(p, [np.zeros(3)])


def test_json_round_trip_exact(tmp_path, rng):
    net = random_mlp(rng)
    save_mlp(net, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc) >= {"dims", "activations", "weights", "biases"}
    back = load_mlp(tmp_path / "m.json")
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)
    x = rng.standard_normal((5, 3))
    assert np.array_equal(net(x), back(x))


def test_rng_determinism():
    a = make_rng(7).standard_normal(5)
    b = make_rng(7).standard_normal(5)
    assert np.array_equal(a, b)
    assert derive_seed(1, "x") == derive_seed(1, "x") != derive_seed(1, "y")


def test_per_row_generators_batch_independent():
    full = standard_normal(chain_rngs(3, "c", 0, 6), 6, 2)
    part = standard_normal(chain_rngs(3, "c", 2, 3), 3, 2)
    assert np.array_equal(full[2:5], part)
    with pytest.raises(ShapeError):
        standard_normal(chain_rngs(3, "c", 0, 2), 3, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 5))
def test_forward_deterministic(seed, batch):
    rng = make_rng(seed)
    net = random_mlp(rng)
    x = rng.standard_normal((batch, 3))
    assert np.array_equal(net(x), net.copy()(x))
