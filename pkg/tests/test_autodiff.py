import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases as gc
from cagul_lab import autodiff as ad
from cagul_lab.autodiff import ContractError, NumericError, ShapeError, Tensor

seeds = st.integers(min_value=0, max_value=2**31 - 1)


# -- gradient properties -----------------------------------------------------

@pytest.mark.parametrize("name", sorted(gc.KERNELS))
@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_kernel_gradients_match_finite_differences(name, seed):
    assert gc.check(gc.KERNELS[name], seed) < gc.TOL


@pytest.mark.parametrize("name", sorted(gc.OBJECTIVES))
@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_objective_gradients_match_finite_differences(name, seed):
    assert gc.check(gc.OBJECTIVES[name], seed) < gc.TOL


def test_grad_check_catches_a_wrong_backward():
    a = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

    def wrong():
        out = ad.exp(a)
        out._backward = lambda g: (2 * g * out.data,)
        return ad.sum_(out)
    assert ad.grad_check(wrong, [a]) > 0.5


def test_grad_check_restores_parameters_and_dtype():
    a = Tensor(np.arange(4.0), requires_grad=True)
    before = a.data.copy()
    ad.grad_check(lambda: ad.sum_(ad.mul(a, a)), [a])
    assert a.data.dtype == np.float32
    np.testing.assert_array_equal(a.data, before)


def test_grad_check_rejects_nondeterministic_programs():
    a = Tensor(np.ones(3), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        ad.grad_check(lambda: ad.sum_(ad.mul(a, Tensor(rng.normal(size=3)))), [a])


# -- forward oracles ----------------------------------------------------------

def test_softmax_rows_sum_to_one_and_handle_large_logits():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
    p = ad.softmax(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0], atol=1e-6)


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-5)


def test_layer_norm_standardizes_rows():
    x = Tensor(np.random.default_rng(2).normal(3, 5, (4, 16)))
    y = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    loss = ad.cross_entropy(Tensor(np.zeros((3, 8))), np.array([0, 4, 7]))
    assert float(loss.data) == pytest.approx(np.log(8), rel=1e-6)


def test_weighted_cross_entropy_is_weighted_sum():
    logits = Tensor(np.random.default_rng(3).normal(size=(3, 5)))
    t = np.array([1, 2, 3])
    per = -ad.log_softmax(logits).data[np.arange(3), t]
    w = np.array([0.5, 0.0, 2.0])
    assert float(ad.cross_entropy(logits, t, w).data) == pytest.approx(float((w * per).sum()), rel=1e-5)


def test_cross_entropy_rejects_negative_weights():
    with pytest.raises(ContractError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([1.0, -1.0]))


def test_bce_on_confident_correct_predictions_is_small():
    loss = ad.bce(Tensor(np.array([0.999, 0.001])), np.array([1, 0]))
    assert float(loss.data) < 2e-3


def test_where_copies_values_bit_exactly():
    a = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
    b = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    mask = np.zeros((3, 4), dtype=bool)
    mask[1] = True
    out = ad.where(mask, a, b).data
    assert out[1].tobytes() == a.data[1].tobytes()
    assert out[[0, 2]].tobytes() == b.data[[0, 2]].tobytes()


def test_take_accumulates_gradient_for_repeated_indices():
    a = Tensor(np.arange(5.0), requires_grad=True)
    ad.backward(ad.sum_(ad.take(a, np.array([1, 1, 3]), 0)))
    np.testing.assert_array_equal(a.grad, [0, 2, 0, 1, 0])


# -- contracts ----------------------------------------------------------------

def test_shape_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_non_finite_output_raises_numeric_error():
    with pytest.raises(NumericError):
        ad.exp(Tensor(np.array([1e6])))


def test_backward_requires_scalar_loss():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.scale(a, 2.0))


def test_backward_accumulates_into_leaves_and_skips_constants():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = Tensor(np.array([3.0, 4.0]))
    loss = ad.sum_(ad.mul(a, c))
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(a.grad, [6.0, 8.0])
    assert c.grad is None


def test_graph_not_recorded_without_trainable_inputs():
    out = ad.mul(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert not out.requires_grad and out._parents == ()


def test_build_record_is_topological():
    a = Tensor(np.ones(2), requires_grad=True)
    b = ad.scale(a, 2.0)
    c = ad.mul(b, b)
    loss = ad.sum_(c)
    order = ad.build_record(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)] < pos[id(loss)]


# -- optimizers -----------------------------------------------------------------

def test_sgd_step_moves_against_gradient():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    ad.sgd_step([p], [np.array([0.5, -0.5])], lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, -0.95])


def test_optimizer_rejects_misaligned_grads():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        ad.sgd_step([p], [np.ones(3)], lr=0.1)
    with pytest.raises(ContractError):
        ad.sgd_step([p], [], lr=0.1)


def test_adam_first_step_has_size_lr_and_skips_frozen():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    frozen = Tensor(np.array([5.0]))
    opt = ad.Adam([p, frozen], lr=0.01)
    opt.step([np.array([3.0, -0.2]), np.array([1.0])])
    np.testing.assert_allclose(p.data, [0.99, 2.01], atol=1e-6)
    assert frozen.data[0] == 5.0


def test_adam_minimizes_a_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ad.backward(ad.sum_(ad.mul(p, p)))
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_clip_grad_norm_bounds_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0], dtype=np.float32), np.array([4.0], dtype=np.float32)
    assert ad.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0, rel=1e-4)


def test_linear_decay_reaches_zero():
    assert ad.linear_decay(1.0, 0, 10) == 1.0
    assert ad.linear_decay(1.0, 5, 10) == 0.5
    assert ad.linear_decay(1.0, 12, 10) == 0.0


def test_precision_context_switches_default_dtype():
    with ad.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
