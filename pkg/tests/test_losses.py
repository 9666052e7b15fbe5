"""Penalty terms against explicit-loop oracles; gradient flow and freezing."""

import numpy as np
import pytest

from olier import (
    ContractError,
    LoraFactors,
    LossWeights,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    nlora_sparsity,
    olier_orth_loss,
    olora_loss,
    olora_orth_matrix,
    relative_error,
    total_loss,
)


def factors(rng, out=2, in_=3, r=1, scale=0.3, trainable=False):
    return LoraFactors(B=Tensor(rng.normal(0, scale, size=(out, r)), requires_grad=trainable),
                       A=Tensor(rng.normal(0, scale, size=(r, in_)), requires_grad=trainable))


def zero_factors(out=2, in_=3, r=1):
    return LoraFactors(B=Tensor(np.zeros((out, r))), A=Tensor(np.zeros((r, in_))))


# -- full-subspace orthogonality ----------------------------------------------

def test_olier_orth_zero_deltas_all_ones_product():
    # exp(0) is the 2x3 all-ones matrix J; ||J J^T||_F = 6
    loss = olier_orth_loss(zero_factors(), [zero_factors()], order=2)
    assert loss.item() == pytest.approx(6.0, abs=1e-12)


def test_olier_orth_empty_previous():
    rng = np.random.default_rng(30)
    assert olier_orth_loss(factors(rng), [], order=2).item() == 0.0


def test_olier_orth_matches_first_order_loop_oracle():
    rng = np.random.default_rng(31)
    current = factors(rng, out=3, in_=4, r=2)
    previous = [factors(rng, out=3, in_=4, r=2) for _ in range(3)]
    loss = olier_orth_loss(current, previous, order=1)

    expected = 0.0
    cur_img = np.ones((3, 4)) + current.B.data @ current.A.data
    for f in previous:
        prev_img = np.ones((3, 4)) + f.B.data @ f.A.data
        prod = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(4):
                    prod[i, j] += prev_img[i, k] * cur_img[j, k]
        expected += np.sqrt(np.sum(prod * prod))
    assert abs(loss.item() - expected) < 1e-10


def test_olier_orth_symmetric_in_pair_roles():
    rng = np.random.default_rng(32)
    f1, f2 = factors(rng, out=4, in_=5, r=2), factors(rng, out=4, in_=5, r=2)
    a = olier_orth_loss(f1, [f2], order=2).item()
    b = olier_orth_loss(f2, [f1], order=2).item()
    assert abs(a - b) < 1e-12


def test_olier_orth_gradient_current_only():
    rng = np.random.default_rng(33)
    current = factors(rng, out=3, in_=4, r=2, trainable=True)
    previous = [factors(rng, out=3, in_=4, r=2, trainable=True) for _ in range(2)]
    grads = backward(olier_orth_loss(current, previous, order=2))
    assert current.B in grads and current.A in grads
    for f in previous:
        assert f.B not in grads and f.A not in grads

    def loss_of_a(t):
        probe = LoraFactors(B=Tensor(current.B.data), A=t)
        return olier_orth_loss(probe, previous, order=2)

    fd = finite_diff_grad(loss_of_a, Tensor(current.A.data))
    assert relative_error(grads[current.A], fd) < 1e-4


def test_olier_orth_shape_mismatch():
    rng = np.random.default_rng(34)
    with pytest.raises(ShapeError):
        olier_orth_loss(factors(rng, out=2, in_=3), [factors(rng, out=3, in_=3)], order=1)


# -- total loss ---------------------------------------------------------------

def test_total_loss_zero_weights_bit_for_bit():
    task = Tensor(np.asarray(1.2345678901234567))
    out = total_loss(task, Tensor(np.asarray(9.9)), Tensor(np.asarray(3.3)), LossWeights(0.0, 0.0))
    assert out is task


def test_total_loss_arithmetic():
    out = total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), Tensor(np.asarray(0.0)),
                     LossWeights(0.5, 0.0))
    assert out.item() == 2.0


def test_total_loss_gradient_through_all_terms():
    rng = np.random.default_rng(35)
    x = Tensor(rng.uniform(-1, 1, size=(2, 2)), requires_grad=True)
    w = LossWeights(0.7, 0.3)

    def composite(t):
        from olier import frobenius_norm, l1_norm, sum_entries, hadamard

        return total_loss(sum_entries(hadamard(t, t)), frobenius_norm(t), l1_norm(t), w)

    ad = backward(composite(x))[x]
    fd = finite_diff_grad(composite, Tensor(x.data))
    assert relative_error(ad, fd) < 1e-4


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(-0.1, 0.0)
    with pytest.raises(ContractError):
        LossWeights(0.0, -1.0)


# -- low-rank-subspace baseline -----------------------------------------------

def test_olora_orth_matrix_values():
    assert olora_orth_matrix(Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]])).data[0, 0] == 0.0
    b = Tensor([[1.0], [0.0]])
    assert olora_orth_matrix(b, b).data[0, 0] == 1.0


def test_olora_orth_matrix_matches_loop_oracle():
    rng = np.random.default_rng(36)
    b_i = Tensor(rng.normal(size=(5, 2)))
    b_t = Tensor(rng.normal(size=(5, 3)))
    out = olora_orth_matrix(b_i, b_t).data
    expected = np.zeros((2, 3))
    for j in range(2):
        for k in range(3):
            for d in range(5):
                expected[j, k] += b_i.data[d, j] * b_t.data[d, k]
    assert np.max(np.abs(out - expected)) < 1e-12


def test_olora_orth_matrix_row_mismatch():
    with pytest.raises(ShapeError):
        olora_orth_matrix(Tensor(np.zeros((4, 2))), Tensor(np.zeros((5, 2))))


def test_olora_loss_orthogonal_and_empty():
    assert olora_loss(Tensor([[0.0], [1.0]]), [Tensor([[1.0], [0.0]])]).item() == 0.0
    assert olora_loss(Tensor([[1.0], [0.0]]), []).item() == 0.0


def test_olora_loss_matches_loop_oracle():
    rng = np.random.default_rng(37)
    current = Tensor(rng.normal(size=(6, 2)))
    previous = [Tensor(rng.normal(size=(6, 3))) for _ in range(2)]
    expected = 0.0
    for b_i in previous:
        o = b_i.data.T @ current.data
        for j in range(o.shape[0]):
            for k in range(o.shape[1]):
                expected += o[j, k] ** 2
    assert abs(olora_loss(current, previous).item() - expected) < 1e-10


def test_olora_loss_gradient_current_only():
    rng = np.random.default_rng(38)
    current = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    previous = [Tensor(rng.normal(size=(5, 2)), requires_grad=True)]
    grads = backward(olora_loss(current, previous))
    assert current in grads and previous[0] not in grads
    fd = finite_diff_grad(lambda t: olora_loss(t, previous), Tensor(current.data))
    assert relative_error(grads[current], fd) < 1e-4


# -- sparsity baseline ----------------------------------------------------------

def test_nlora_sparsity_values():
    assert nlora_sparsity(zero_factors()).item() == 0.0
    f = LoraFactors(B=Tensor([[1.0]]), A=Tensor([[1.0, -2.0]]))
    assert nlora_sparsity(f).item() == 3.0


def test_nlora_sparsity_matches_loop_oracle():
    import math

    rng = np.random.default_rng(39)
    f = factors(rng, out=4, in_=6, r=2)
    dw = f.B.data @ f.A.data
    expected = math.fsum(abs(v) for v in dw.reshape(-1))
    assert nlora_sparsity(f).item() == pytest.approx(expected, rel=1e-15)


def test_nlora_sparsity_gradient():
    rng = np.random.default_rng(40)
    f = factors(rng, out=3, in_=4, r=2, trainable=True)
    grads = backward(nlora_sparsity(f))

    def loss_of_b(t):
        return nlora_sparsity(LoraFactors(B=t, A=Tensor(f.A.data)))

    fd = finite_diff_grad(loss_of_b, Tensor(f.B.data))
    assert relative_error(grads[f.B], fd) < 1e-4


# -- shared properties ----------------------------------------------------------

def test_all_penalties_nonnegative():
    rng = np.random.default_rng(41)
    for _ in range(20):
        current = factors(rng, out=3, in_=4, r=2, scale=1.0)
        previous = [factors(rng, out=3, in_=4, r=2, scale=1.0)]
        assert olier_orth_loss(current, previous, order=2).item() >= 0.0
        assert olora_loss(current.B, [f.B for f in previous]).item() >= 0.0
        assert nlora_sparsity(current).item() >= 0.0
