import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qfuse import tensor as tn
from qfuse.errors import ConfigError
from qfuse.moe import (
    Expert,
    MoEConfig,
    MoEHead,
    Router,
    RouterDecision,
    RoutingStats,
    load_balance_loss,
    route,
    routing_stats,
)
from qfuse.tensor import Parameter, Tensor


def fixed_router(logits_bias):
    """Router with zero weights whose logits are exactly ``logits_bias``."""
    e = len(logits_bias)
    return Router(Parameter(np.zeros((3, e)), "w"), Parameter(np.array(logits_bias, dtype=float), "b"))


def head(d_in=6, e=4, k=2, hidden=5, classes=3, seed=0):
    cfg = MoEConfig(num_experts=e, top_k=k, expert_hidden=hidden, num_classes=classes)
    return MoEHead(d_in, cfg, np.random.default_rng(seed)), cfg


def expert_arrays(h):
    return [tuple(p.data for p in ex.parameters()) for ex in h.experts]


# -- route ---------------------------------------------------------------------


def test_route_two_of_four():
    d = route(np.ones((1, 3)), fixed_router([1.0, 3.0, 2.0, 0.0]), MoEConfig(4, 2, 2, 2))
    assert d.selected.tolist() == [[1, 2]]
    np.testing.assert_allclose(d.weights.data, [[0.7310585786300049, 0.2689414213699951]], rtol=0, atol=1e-12)


def test_route_top_one_weight_is_one():
    d = route(np.ones((2, 3)), fixed_router([0.5, -1.0, 4.0]), MoEConfig(3, 1, 2, 2))
    assert d.selected[:, 0].tolist() == [2, 2]
    assert np.all(d.weights.data == 1.0)


def test_route_equal_logits_full_selection():
    d = route(np.ones((1, 3)), fixed_router([0.0] * 4), MoEConfig(4, 4, 2, 2))
    assert d.selected.tolist() == [[0, 1, 2, 3]]
    np.testing.assert_allclose(d.weights.data, 0.25, rtol=0, atol=1e-15)


def test_ties_go_to_lower_index():
    d = route(np.ones((1, 3)), fixed_router([1.0, 2.0, 2.0, 2.0]), MoEConfig(4, 2, 2, 2))
    assert d.selected.tolist() == [[1, 2]]


def test_full_softmax_weights_option():
    cfg = MoEConfig(4, 2, 2, 2, renormalize=False)
    d = route(np.ones((1, 3)), fixed_router([1.0, 3.0, 2.0, 0.0]), cfg)
    e = np.exp([1.0, 3.0, 2.0, 0.0])
    np.testing.assert_allclose(d.weights.data, [e[[1, 2]] / e.sum()], rtol=0, atol=1e-15)


def test_top_k_above_experts_is_config_error():
    with pytest.raises(ConfigError):
        route(np.ones((1, 3)), fixed_router([0.0] * 3), MoEConfig(3, 4, 2, 2))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_route_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 6))
    router = Router(Parameter(rng.standard_normal((6, 7)), "w"), Parameter(rng.standard_normal(7), "b"))
    d = route(x, router, MoEConfig(7, 3, 2, 2))
    for i in range(5):
        sel, w, logits = oracles.route(x[i], router.w.data, router.b.data, 3)
        assert d.selected[i].tolist() == sel
        np.testing.assert_allclose(d.weights.data[i], w, rtol=0, atol=1e-12)
        np.testing.assert_allclose(d.gate_logits.data[i], logits, rtol=0, atol=1e-12)


# -- moe_forward ---------------------------------------------------------------


def test_top_one_equals_selected_expert():
    h, cfg = head(k=1)
    x = np.random.default_rng(1).standard_normal((6, 6))
    logits, d = h(x)
    for i in range(6):
        single = h.experts[d.selected[i, 0]](Tensor(x[i : i + 1])).data
        np.testing.assert_allclose(logits.data[i : i + 1], single, rtol=0, atol=1e-15)


def test_identical_experts_give_that_expert():
    h, cfg = head(e=5, k=3)
    for ex in h.experts[1:]:
        for p, q in zip(ex.parameters(), h.experts[0].parameters()):
            p.data = q.data.copy()
    x = np.random.default_rng(2).standard_normal((4, 6))
    np.testing.assert_allclose(h(x)[0].data, h.experts[0](Tensor(x)).data, rtol=0, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_dense_equivalence_at_full_top_k(seed):
    h, cfg = head(e=4, k=4, seed=seed)
    x = np.random.default_rng(seed).standard_normal((3, 6))
    logits, d = h(x)
    e = np.exp(d.gate_logits.data - d.gate_logits.data.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    for i in range(3):
        dense = oracles.moe_dense(x[i], expert_arrays(h), range(4), soft[i])
        np.testing.assert_allclose(logits.data[i], dense, rtol=0, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_moe_forward_matches_oracle(seed):
    h, cfg = head(e=6, k=2, seed=seed)
    x = np.random.default_rng(seed + 1).standard_normal((4, 6))
    logits, d = h(x)
    for i in range(4):
        ref = oracles.moe_dense(x[i], expert_arrays(h), d.selected[i], d.weights.data[i])
        np.testing.assert_allclose(logits.data[i], ref, rtol=0, atol=1e-12)


def test_exactly_k_experts_receive_gradient():
    h, cfg = head(e=8, k=2, seed=3)
    x = np.random.default_rng(3).standard_normal((1, 6))
    logits, d = h(x)
    tn.backward(tn.sum(logits * logits))
    def has_grad(ex):
        return any(p.grad is not None and np.any(p.grad) for p in ex.parameters())

    touched = [i for i, ex in enumerate(h.experts) if has_grad(ex)]
    assert touched == sorted(d.selected[0].tolist())


def test_moe_gradients_match_finite_differences():
    h, cfg = head(e=4, k=2, seed=4)
    x = np.random.default_rng(4).standard_normal((3, 6))
    w = np.random.default_rng(5).standard_normal((3, 3))
    # routing fixed by the current parameters; central differences stay on one side of every tie
    def loss():
        return tn.sum(h(x)[0] * w)

    tn.backward(loss())
    for p in h.parameters():
        if p.grad is None:
            continue
        numeric = oracles.central_difference(lambda: float(loss().data), p.data)
        assert oracles.max_rel_error(p.grad, numeric) <= 1e-4, p.name


# -- load balance --------------------------------------------------------------


def stats_from_logits(logits, k=1):
    logits = Tensor(np.asarray(logits, dtype=float))
    sel = np.argsort(-logits.data, axis=-1, kind="stable")[:, :k]
    return routing_stats(RouterDecision(logits, sel, Tensor(np.ones(sel.shape))))


def test_uniform_routing_gives_exactly_one():
    e = 4
    logits = np.full((e, e), -5.0)
    np.fill_diagonal(logits, 5.0)
    s = stats_from_logits(logits)  # one sample per expert, p uniform by symmetry
    np.testing.assert_array_equal(s.f, np.full(e, 0.25))
    assert load_balance_loss(RoutingStats(np.full(e, 0.25), Tensor(np.full(e, 0.25)))).item() == 1.0


def test_collapsed_routing_gives_exactly_e():
    e = 4
    onehot = np.eye(e)[0]
    s = RoutingStats(onehot, Tensor(onehot))
    assert load_balance_loss(s).item() == float(e)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 9))
def test_load_balance_matches_oracle_and_bounds(seed, e, b):
    logits = 3 * np.random.default_rng(seed).standard_normal((b, e))
    s = stats_from_logits(logits)
    value = load_balance_loss(s).item()
    ref, f, p = oracles.load_balance(logits.tolist(), e)
    assert abs(value - ref) <= 1e-12
    np.testing.assert_allclose(s.f, f, rtol=0, atol=1e-15)
    assert 0 <= value <= e + 1e-12
    shifted = load_balance_loss(stats_from_logits(logits + 17.5)).item()
    assert abs(shifted - value) <= 1e-12


def test_routing_stats_come_from_top_one():
    s = stats_from_logits([[0.0, 2.0, 1.0], [3.0, 0.0, 0.0]], k=2)
    np.testing.assert_array_equal(s.f, [0.5, 0.5, 0.0])


def test_load_balance_gradient_flows_to_router():
    rng = np.random.default_rng(6)
    router = Router(Parameter(rng.standard_normal((3, 4)), "w"), Parameter(np.zeros(4), "b"))
    x = rng.standard_normal((5, 3))
    cfg = MoEConfig(4, 2, 2, 2)

    def loss():
        return load_balance_loss(routing_stats(route(x, router, cfg)))

    tn.backward(loss())
    numeric = oracles.central_difference(lambda: float(loss().data), router.w.data)
    assert oracles.max_rel_error(router.w.grad, numeric) <= 1e-4


def test_expert_shapes():
    ex = Expert.init(6, 5, 3, np.random.default_rng(0), "e")
    assert ex(Tensor(np.ones((2, 6)))).shape == (2, 3)
    assert ex.num_parameters == 6 * 5 + 5 + 5 * 3 + 3
