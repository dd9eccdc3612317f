import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qfuse import tensor as tn
from qfuse.errors import ConfigError, ContractError
from qfuse.losses import (
    TAU_MAX,
    TAU_MIN,
    ContrastiveBatch,
    LossBreakdown,
    clamp_temperature,
    cross_entropy,
    info_nce,
    pool_tokens,
    total_loss,
)
from qfuse.tensor import Parameter, Tensor


def test_uniform_logits_give_log_classes():
    assert cross_entropy(np.zeros((3, 5)), [0, 4, 2]).item() == pytest.approx(math.log(5), abs=1e-15)


def test_confident_correct_logits_near_zero():
    logits = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 100.0]])
    assert cross_entropy(logits, [0, 2]).item() < 1e-40


def test_bad_labels():
    with pytest.raises(ContractError):
        cross_entropy(np.zeros((2, 3)), [0, 3])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    b, c = rng.integers(1, 7), rng.integers(2, 7)
    logits = 4 * rng.standard_normal((b, c))
    labels = rng.integers(0, c, b)
    assert abs(cross_entropy(logits, labels).item() - oracles.cross_entropy(logits.tolist(), labels)) <= 1e-12


def test_info_nce_identical_directions_give_log_batch():
    emb = np.ones((4, 3))
    assert info_nce(ContrastiveBatch(emb, emb.copy(), 0.07)).item() == pytest.approx(math.log(4), abs=1e-12)


def test_info_nce_orthonormal_low_temperature():
    emb = np.eye(4)
    assert info_nce(ContrastiveBatch(emb, emb.copy(), TAU_MIN)).item() < 1e-6


def test_info_nce_row_scale_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    ref = info_nce(ContrastiveBatch(a, b, 0.2)).item()
    assert info_nce(ContrastiveBatch(7 * a, b, 0.2)).item() == pytest.approx(ref, abs=1e-12)


def test_info_nce_symmetric_in_modalities():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    x = info_nce(ContrastiveBatch(a, b, 0.1)).item()
    assert info_nce(ContrastiveBatch(b, a, 0.1)).item() == pytest.approx(x, abs=1e-12)


def test_info_nce_needs_two_pairs():
    with pytest.raises(ContractError):
        info_nce(ContrastiveBatch(np.ones((1, 3)), np.ones((1, 3))))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_info_nce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    b, d = rng.integers(2, 6), rng.integers(1, 5)
    a, t = rng.standard_normal((b, d)), rng.standard_normal((b, d))
    tau = rng.uniform(TAU_MIN, TAU_MAX)
    got = info_nce(ContrastiveBatch(a, t, tau)).item()
    assert abs(got - oracles.info_nce(a.tolist(), t.tolist(), tau)) <= 1e-12


def test_temperature_clamp():
    tau = Parameter(np.array(5.0), "tau")
    assert clamp_temperature(tau).item() == TAU_MAX
    tau.data = np.array(1e-4)
    assert clamp_temperature(tau).item() == TAU_MIN


def test_pooling():
    x = np.arange(12.0).reshape(1, 3, 4)
    np.testing.assert_array_equal(pool_tokens(x).data, [[4.0, 5.0, 6.0, 7.0]])
    np.testing.assert_array_equal(pool_tokens(x, "max").data, [[8.0, 9.0, 10.0, 11.0]])
    with pytest.raises(ConfigError):
        pool_tokens(x, "median")


def test_total_loss_examples():
    assert total_loss(LossBreakdown(3.0, 6.0, 9.0)).item() == pytest.approx(6.0, abs=1e-15)
    assert total_loss(LossBreakdown(3.0, 6.0, 9.0, 0.5, 0.0, 0.5)).item() == 6.0
    assert total_loss(LossBreakdown(3.0, 6.0, 9.0, 1.0, 0.0, 0.0)).item() == 3.0
    with pytest.raises(ConfigError):
        total_loss(LossBreakdown(1.0, 1.0, 1.0, 1.0, -0.1, 0.0))


def test_zero_weight_removes_dependence():
    emb = Parameter(np.random.default_rng(3).standard_normal((3, 2)), "emb")
    con = info_nce(ContrastiveBatch(emb, Tensor(np.ones((3, 2)))))
    total = total_loss(LossBreakdown(Tensor(np.array(1.0)), con, Tensor(np.array(2.0)), 1, 0, 1))
    assert total.item() == 3.0 and not total.requires_grad


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    logits = Parameter(rng.standard_normal((4, 3)), "logits")
    img = Parameter(rng.standard_normal((4, 5)), "img")
    txt = Parameter(rng.standard_normal((4, 5)), "txt")
    tau = Parameter(np.array(0.3), "tau")
    labels = [0, 2, 1, 1]

    def loss():
        ce = cross_entropy(logits, labels)
        con = info_nce(ContrastiveBatch(img, txt, clamp_temperature(tau)))
        return total_loss(LossBreakdown(ce, con, Tensor(np.array(0.0))))

    tn.backward(loss())
    for p in (logits, img, txt, tau):
        numeric = oracles.central_difference(lambda: float(loss().data), p.data)
        assert oracles.max_rel_error(p.grad, numeric) <= 1e-4, p.name
