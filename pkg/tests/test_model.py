import math

import numpy as np
import pytest

from dgt import autodiff as ad
from dgt.autodiff import Tape
from dgt.ingest import MANY_TO_MANY, MANY_TO_ONE
from dgt.model import (
    LAMBDA_INIT, ModelConfig, additive_prior_attention, causal_mask, forward, graph_attention_heads,
    init_dgt, init_gru, init_params, lambda_value, predict,
)

from oracles import dgt_forward_loops, gru_forward_loops, plain_attention, softmax_rows

N, L, D, H = 3, 8, 8, 2


def _config(**kw):
    base = dict(arch="dgt", n_stocks=N, window_len=L, d=D, heads=H, layers=1, use_spatial=True)
    base.update(kw)
    return ModelConfig(**base)


def _graphs(rng, heads=H, n=N):
    a = rng.uniform(-1, 1, size=(heads, n, n))
    return (a + a.transpose(0, 2, 1)) / 2


def _randomize_lambda(params, rng):
    for name in params:
        if "lambda_" in name:
            params.tensors[name] = rng.normal(0, 0.5, size=params[name].shape)


def _set_lambda(params, **vectors):
    for name, value in vectors.items():
        params.tensors[f"graph.0.lambda_{name}"] = np.asarray(value, dtype=float)


def test_lambda_is_exactly_the_init_constant_for_zero_vectors():
    params = init_dgt(_config(), seed=3)
    zero = np.zeros((H, D // H))
    _set_lambda(params, q1=zero, k1=zero, q2=zero, k2=zero)
    lam = lambda_value(params.bind(Tape()), params.config).value
    assert lam.tolist() == [LAMBDA_INIT] * H == [0.2, 0.2]


@pytest.mark.parametrize("seed", range(5))
def test_initial_lambda_is_exactly_the_init_constant(seed):
    params = init_dgt(_config(layers=2), seed=seed)
    assert np.any(params["graph.0.lambda_q1"] != 0)
    lam = [lambda_value(params.bind(Tape()), params.config, layer).value for layer in (0, 1)]
    assert all(v.tolist() == [0.2] * H for v in lam)


def test_lambda_by_hand():
    params = init_dgt(_config(), seed=0)
    zero = np.zeros((H, D // H))
    q1, k1, q2, k2 = zero.copy(), zero.copy(), zero.copy(), zero.copy()
    q1[0, 0] = k1[0, 0] = 1.0
    q2[1, 1], k2[1, 1] = 2.0, 0.5
    _set_lambda(params, q1=q1, k1=k1, q2=q2, k2=k2)
    lam = lambda_value(params.bind(Tape()), params.config).value
    np.testing.assert_allclose(lam, [math.e - 1 + 0.2, 1 - math.e + 0.2], rtol=1e-15)
    q1[0, 0], k1[0, 0] = math.log(2.0), 1.0
    _set_lambda(params, q1=q1, k1=k1, q2=zero, k2=zero)
    assert lambda_value(params.bind(Tape()), params.config).value[0] == pytest.approx(1.2, abs=1e-15)


def test_lambda_receives_gradient_from_the_loss():
    rng = np.random.default_rng(2)
    params = init_dgt(_config(), seed=2)
    tape = Tape()
    p = params.bind(tape)
    pred = forward(tape.constant(rng.normal(size=(1, N, L))), _graphs(rng), p, params.config)
    tape.backward(ad.mse(pred, tape.constant(rng.normal(size=(1, N, L)))))
    for name in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
        assert np.abs(p[f"graph.0.{name}"].grad).max() > 0


@pytest.mark.parametrize("seed", range(3))
def test_all_ones_graph_with_tied_splits_is_scaled_plain_attention(seed):
    rng = np.random.default_rng(seed)
    cfg = _config()
    params = init_dgt(cfg, seed=seed)
    _randomize_lambda(params, rng)
    dh = cfg.head_dim
    for name in ("graph.0.wq", "graph.0.wk"):
        w = params.tensors[name]
        w[..., dh:] = w[..., :dh]
    x = rng.normal(size=(N, D))
    tape = Tape()
    heads, lam = graph_attention_heads(tape.constant(x), np.ones((H, N, N)), params.bind(tape), cfg)
    for h in range(H):
        want = (1 - lam.value[h]) * plain_attention(
            x, params["graph.0.wq"][h][:, :dh], params["graph.0.wk"][h][:, :dh], params["graph.0.wv"][h])
        np.testing.assert_allclose(heads.value[h], want, rtol=0, atol=1e-12)


def test_graph_heads_match_loop_formula():
    rng = np.random.default_rng(7)
    cfg = _config()
    params = init_dgt(cfg, seed=1)
    _randomize_lambda(params, rng)
    x, adj = rng.normal(size=(N, D)), _graphs(rng)
    tape = Tape()
    heads, lam = graph_attention_heads(tape.constant(x), adj, params.bind(tape), cfg)
    dh = cfg.head_dim
    for h in range(H):
        q, k, v = x @ params["graph.0.wq"][h], x @ params["graph.0.wk"][h], x @ params["graph.0.wv"][h]
        s1 = softmax_rows(q[:, :dh] @ k[:, :dh].T / math.sqrt(dh))
        s2 = softmax_rows(q[:, dh:] @ k[:, dh:].T / math.sqrt(dh))
        np.testing.assert_allclose(heads.value[h], (s1 * adj[h] - lam.value[h] * s2) @ v, atol=1e-12)


@pytest.mark.parametrize("use_spatial", [True, False])
def test_dgt_forward_matches_loop_oracle(use_spatial):
    rng = np.random.default_rng(11)
    cfg = _config(use_spatial=use_spatial)
    params = init_dgt(cfg, seed=2)
    if use_spatial:
        _randomize_lambda(params, rng)
    prices = rng.normal(size=(2, N, L))
    adj = _graphs(rng) if use_spatial else None
    got = predict(params, prices, adj, mode=MANY_TO_MANY)
    want = dgt_forward_loops(params.tensors, prices, adj, H)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_gru_forward_matches_loop_oracle():
    rng = np.random.default_rng(12)
    params = init_gru(_config(arch="gru"), seed=4)
    for name in params:
        if name.startswith("gru.b"):
            params.tensors[name] = rng.normal(0, 0.3, size=params[name].shape)
    prices = rng.normal(size=(2, N, L))
    np.testing.assert_allclose(predict(params, prices, mode=MANY_TO_MANY), gru_forward_loops(params.tensors, prices),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("arch,use_spatial", [("dgt", True), ("dgt", False), ("gru", False)])
def test_output_at_step_t_ignores_later_days(arch, use_spatial):
    rng = np.random.default_rng(5)
    cfg = _config(arch=arch, use_spatial=use_spatial)
    params = init_params(cfg, seed=5)
    adj = _graphs(rng) if use_spatial else None
    prices = rng.normal(size=(N, L))
    base = predict(params, prices, adj, mode=MANY_TO_MANY)
    for _ in range(5):
        t = int(rng.integers(0, L - 1))
        bumped = prices.copy()
        bumped[:, t + 1:] += rng.normal(size=(N, L - t - 1))
        out = predict(params, bumped, adj, mode=MANY_TO_MANY)
        assert out[:, : t + 1].tobytes() == base[:, : t + 1].tobytes()
        assert not np.array_equal(out[:, t + 1:], base[:, t + 1:])


@pytest.mark.parametrize("arch,use_spatial", [("dgt", True), ("dgt", False), ("gru", False)])
def test_many_to_one_is_last_step_of_many_to_many(arch, use_spatial):
    rng = np.random.default_rng(6)
    cfg = _config(arch=arch, use_spatial=use_spatial)
    params = init_params(cfg, seed=6)
    adj = _graphs(rng) if use_spatial else None
    prices = rng.normal(size=(4, N, L))
    full = predict(params, prices, adj, mode=MANY_TO_MANY)
    last = predict(params, prices, adj, mode=MANY_TO_ONE)
    assert last.shape == (4, N)
    assert last.tobytes() == np.ascontiguousarray(full[..., -1]).tobytes()


def test_batched_graphs_equal_per_window_graphs():
    rng = np.random.default_rng(8)
    params = init_dgt(_config(), seed=8)
    prices = rng.normal(size=(3, N, L))
    stack = np.stack([_graphs(rng) for _ in range(3)])
    batched = predict(params, prices, stack, mode=MANY_TO_MANY)
    for b in range(3):
        np.testing.assert_allclose(batched[b], predict(params, prices[b], stack[b], mode=MANY_TO_MANY), atol=1e-13)


def test_spatial_stage_mixes_stocks_and_plain_model_does_not():
    rng = np.random.default_rng(9)
    prices = rng.normal(size=(N, L))
    bumped = prices.copy()
    bumped[0] += 1.0
    for use_spatial, mixes in ((True, True), (False, False)):
        params = init_dgt(_config(use_spatial=use_spatial), seed=9)
        adj = _graphs(rng) if use_spatial else None
        a = predict(params, prices, adj, mode=MANY_TO_MANY)
        b = predict(params, bumped, adj, mode=MANY_TO_MANY)
        assert (not np.array_equal(a[1:], b[1:])) == mixes


def test_init_is_deterministic_and_layout():
    a, b = init_dgt(_config(), seed=1), init_dgt(_config(), seed=1)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["head.w"], init_dgt(_config(), seed=2)["head.w"])
    assert a["graph.0.wq"].shape == (H, D, 2 * (D // H))
    assert a["graph.0.wv"].shape == (H, D, D // H)
    assert not any(k.startswith("graph") for k in init_dgt(_config(use_spatial=False)))
    assert init_dgt(_config(layers=2)).tensors.keys() >= {"temporal.1.wq", "graph.1.wo"}


def test_causal_mask():
    m = causal_mask(3)
    assert m.tolist() == [[0, -np.inf, -np.inf], [0, 0, -np.inf], [0, 0, 0]]
    with pytest.raises(ValueError):
        causal_mask(0)


def test_config_and_shape_errors():
    with pytest.raises(ValueError):
        ModelConfig(d=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(arch="lstm")
    with pytest.raises(ValueError):
        ModelConfig(layers=0)
    params = init_dgt(_config(), seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(ad.ShapeError):
        predict(params, rng.normal(size=(N + 1, L)), _graphs(rng, n=N + 1))
    with pytest.raises(ad.ShapeError):
        predict(params, rng.normal(size=(N, L - 1)), _graphs(rng))
    with pytest.raises(ValueError, match="adjacency"):
        predict(params, rng.normal(size=(N, L)), None)
    with pytest.raises(ValueError, match="heads"):
        predict(params, rng.normal(size=(N, L)), _graphs(rng, heads=H + 1))
    with pytest.raises(ValueError, match="mode"):
        predict(params, rng.normal(size=(N, L)), _graphs(rng), mode="sideways")


def test_additive_prior_attention():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 6))
    wq, wk, wv = (rng.normal(size=(6, 3)) for _ in range(3))
    tape = Tape()
    c = tape.constant
    zero = additive_prior_attention(c(x), np.zeros((4, 4)), c(wq), c(wk), c(wv), c(np.array(1.0))).value
    np.testing.assert_allclose(zero, plain_attention(x, wq, wk, wv), atol=1e-12)
    # a huge bias on one key makes every row attend to that key alone
    delta = np.zeros((4, 4))
    delta[:, 2] = 1.0
    focused = additive_prior_attention(c(x), delta, c(wq), c(wk), c(wv), c(np.array(1e3))).value
    np.testing.assert_allclose(focused, np.tile(x[2] @ wv, (4, 1)), atol=1e-9)
    with pytest.raises(ad.ShapeError):
        additive_prior_attention(c(x), np.zeros((3, 3)), c(wq), c(wk), c(wv), c(np.array(1.0)))
