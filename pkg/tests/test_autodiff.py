import math

import numpy as np
import pytest

from brainage import autodiff as ad
from brainage.autodiff import Adam, DimensionError, DomainError, NonFiniteError, Tape, Tensor
from brainage.errors import ConfigError, ContractError

from conftest import assert_grads_match


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(eye, m).data, m.data)


def test_matmul_direct():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert_grads_match(lambda: ad.sum_all(ad.matmul(a, b)), {"a": a, "b": b}, rng,
                       rel_tol=1e-6, max_coords=20)


def test_add_and_scalar_broadcast():
    assert ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    out = ad.add(Tensor([1.0, 2.0]), Tensor(5.0))
    assert out.data.tolist() == [6.0, 7.0]
    with pytest.raises(DimensionError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_scalar_broadcast_gradient_reduces(rng):
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    c = Tensor(2.0, requires_grad=True)
    assert_grads_match(lambda: ad.sum_all(ad.mul(a, c)), {"a": a, "c": c}, rng, rel_tol=1e-6)


def test_gelu_fixed_point_and_values():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    x = 0.7
    expected = 0.5 * x * (1 + math.erf(x / math.sqrt(2)))
    assert abs(ad.gelu(Tensor([x])).data[0] - expected) < 1e-15


def test_exp_backward_grad_equals_output(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        tape.backward(ad.sum_all(y))
    np.testing.assert_allclose(x.grad, y.data, rtol=1e-12)
    assert_grads_match(lambda: ad.sum_all(ad.exp(x)), {"x": x}, rng)


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))


@pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.absolute, ad.softmax, ad.log_softmax])
def test_unary_ops_match_finite_differences(op, rng):
    x = Tensor(rng.normal(size=(2, 7)) * 2.0, requires_grad=True)
    w = Tensor(rng.normal(size=(2, 7)))
    assert_grads_match(lambda: ad.sum_all(ad.mul(op(x), w)), {"x": x}, rng, max_coords=14)


def test_softmax_uniform_row():
    out = ad.softmax(Tensor([[0.0] * 6]))
    np.testing.assert_allclose(out.data, np.full((1, 6), 1 / 6), rtol=1e-15)


def test_softmax_stabilized_against_overflow():
    out = ad.softmax(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    assert abs(out.data[0, 0] - 1.0) < 1e-12


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    x = rng.normal(size=(40, 6)) * 5.0
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    shifted = ad.softmax(Tensor(x + 123.456)).data
    np.testing.assert_allclose(out, shifted, atol=1e-12)


def test_layernorm_constant_row_zeros():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = ad.layernorm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layernorm_two_point_row():
    gain = Tensor(np.ones(2))
    bias = Tensor(np.zeros(2))
    out = ad.layernorm(Tensor([[1.0, 3.0]]), gain, bias)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)  # eps effect


def test_layernorm_backward(rng):
    x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    gain = Tensor(rng.normal(size=8), requires_grad=True)
    bias = Tensor(rng.normal(size=8), requires_grad=True)
    weights = Tensor(rng.normal(size=(3, 8)))
    assert_grads_match(lambda: ad.sum_all(ad.mul(ad.layernorm(x, gain, bias), weights)),
                       {"x": x, "gain": gain, "bias": bias}, rng, max_coords=16)


def test_structural_ops_backward(rng):
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=6), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 6)))

    def loss():
        y = ad.add_bias(x, b)
        y = ad.take_rows(y, [0, 2, 2, 4, 1])
        y = ad.concat_cols([ad.slice_cols(y, 0, 3), ad.slice_cols(y, 3, 6)])
        return ad.sum_all(ad.mul(y, w))

    assert_grads_match(loss, {"x": x, "b": b}, rng, max_coords=16)


def test_tile_concat_transpose_reshape_backward(rng):
    t = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    u = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)))

    def loss():
        stacked = ad.concat_rows([ad.tile_rows(t, 3), u])
        return ad.sum_all(ad.reshape(ad.transpose(ad.matmul(stacked, w)), (25,)))

    assert_grads_match(loss, {"t": t, "u": u}, rng)


def test_backward_sum_gives_ones():
    w = Tensor(np.array([3.0, -1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_elementwise_square():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.mul(w, w)))
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(w, w)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_repeated_backward_accumulates():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, w))
        tape.backward(loss)
        tape.backward(loss)
    assert w.grad.tolist() == [4.0, 8.0]


def test_two_layer_mlp_gradcheck(rng):
    w1 = Tensor(rng.normal(size=(6, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=8) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    x = Tensor(rng.normal(size=(4, 6)))

    def loss():
        h = ad.gelu(ad.add_bias(ad.matmul(x, w1), b1))
        out = ad.add_bias(ad.matmul(h, w2), b2)
        return ad.mean_all(ad.mul(out, out))

    assert_grads_match(loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2}, rng, max_coords=1000)


def test_no_silent_nan():
    big = Tensor([[800.0]])
    with pytest.raises(NonFiniteError):
        ad.exp(big)
    prev = ad.set_validation(False)
    try:
        out = ad.exp(big)
        assert np.isinf(out.data[0, 0])
    finally:
        ad.set_validation(prev)


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_leaves_parameter():
    p = Tensor(np.array([1.5]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.zeros(1)
    opt.step()
    assert p.data.tolist() == [1.5]


def test_adam_first_step_size():
    # bias-corrected first step with g=1 moves by ~lr
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.ones(1)
    opt.step()
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_hand_computed_two_steps():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=lr, betas=(b1, b2), eps=eps)
    m = v = 0.0
    ref = 1.0
    for t in (1, 2):
        g = 2.0 * ref  # gradient of ref^2
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - ref) < 1e-12


def test_adam_deterministic_across_runs():
    def run():
        rng = np.random.default_rng(7)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-2)
        for _ in range(2):
            with Tape() as tape:
                tape.backward(ad.sum_all(ad.mul(p, p)))
            opt.step()
            opt.zero_grad()
        return p.data.tobytes()

    assert run() == run()


def test_adam_rejects_nonpositive_lr():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ConfigError):
        Adam({"p": p}, lr=0.0)
    with pytest.raises(ConfigError):
        Adam({"p": p}, lr=-1e-3)
