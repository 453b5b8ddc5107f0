"""Engine tests: every primitive against central finite differences, the
traversal semantics (fan-out accumulation, determinism) and Adam."""

import numpy as np
import pytest
import scipy.sparse as sp

from meshdvae import autodiff as ad


RNG = np.random.default_rng(42)


def fd_check(forward, params, tol=1e-6):
    worst = ad.gradcheck(forward, params)
    assert worst < tol, f"finite-difference mismatch: {worst:.3g}"


# -- primitives ----------------------------------------------------------------


def test_add_mul_broadcast_fd():
    a = ad.parameter(RNG.standard_normal((3, 4)))
    b = ad.parameter(RNG.standard_normal((1, 4)))

    def forward():
        return ((a + b) * (a * 0.5 - 2.0)).sum()

    fd_check(forward, [a, b])


def test_div_pow_fd():
    a = ad.parameter(RNG.uniform(0.5, 2.0, size=(5,)))
    b = ad.parameter(RNG.uniform(0.5, 2.0, size=(5,)))

    def forward():
        return ((a / b) + a ** 3).sum()

    fd_check(forward, [a, b])


def test_exp_log_fd():
    a = ad.parameter(RNG.uniform(0.5, 1.5, size=(4, 2)))

    def forward():
        return (ad.exp(a) + ad.log(a)).mean()

    fd_check(forward, [a])


def test_relu_fd_away_from_kink():
    data = RNG.standard_normal((6, 3))
    data[np.abs(data) < 0.1] = 0.5  # keep clear of the nondifferentiable point
    a = ad.parameter(data)

    def forward():
        return ad.relu(a).sum()

    fd_check(forward, [a])


def test_matmul_fd_2d_and_batched():
    a = ad.parameter(RNG.standard_normal((2, 3, 4)))
    w = ad.parameter(RNG.standard_normal((4, 5)))

    def forward():
        return ad.matmul(a, w).sum()

    fd_check(forward, [a, w])


def test_matmul_batched_weight_grad_matches_loop():
    a = ad.parameter(RNG.standard_normal((3, 5, 4)))
    w = ad.parameter(RNG.standard_normal((4, 2)))
    out = ad.matmul(a, w)
    ad.backward((out * out).sum())
    expected = np.zeros_like(w.data)
    g = 2.0 * out.data
    for k in range(3):
        expected += a.data[k].T @ g[k]
    np.testing.assert_allclose(w.grad, expected, rtol=1e-12)


def test_spmm_fd():
    m = sp.random(6, 5, density=0.5, random_state=3, format="csr")
    x = ad.parameter(RNG.standard_normal((2, 5, 3)))

    def forward():
        return ad.spmm(m, x).sum()

    fd_check(forward, [x])


def test_spmm_equals_dense():
    m = sp.random(7, 4, density=0.6, random_state=1, format="csr")
    x = ad.constant(RNG.standard_normal((4, 2)))
    out = ad.spmm(m, x)
    np.testing.assert_allclose(out.data, m.toarray() @ x.data, rtol=1e-13)


def test_reshape_concat_take_fd():
    a = ad.parameter(RNG.standard_normal((4, 6)))
    b = ad.parameter(RNG.standard_normal((4, 2)))

    def forward():
        c = ad.concatenate([a, b], axis=-1)
        return (c.reshape(2, 16)[0] ** 2).sum()

    fd_check(forward, [a, b])


def test_softmax_log_softmax_fd():
    a = ad.parameter(RNG.standard_normal((3, 4)))
    t = RNG.standard_normal((3, 4))

    def forward():
        return (ad.softmax(a) * t).sum() + (ad.log_softmax(a) * t).mean()

    fd_check(forward, [a])


def test_softmax_rows_sum_to_one():
    a = ad.constant(RNG.standard_normal((5, 7)) * 10)
    p = ad.softmax(a).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()


def test_reductions_fd():
    a = ad.parameter(RNG.standard_normal((3, 4, 2)))

    def forward():
        return (a.sum(axis=-1).mean(axis=0) * a.mean(axis=(1, 2))[:, None]).sum()

    fd_check(forward, [a])


# -- traversal semantics ----------------------------------------------------------


def test_fanout_accumulates_by_addition():
    a = ad.parameter(np.array([2.0]))
    loss = (a * a + a * 3.0).sum()  # d/da = 2a + 3 = 7
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, [7.0])


def test_gradient_of_sum_is_ones():
    a = ad.parameter(RNG.standard_normal((4, 3)))
    ad.backward(a.sum())
    np.testing.assert_allclose(a.grad, np.ones((4, 3)))


def test_backward_rejects_nonscalar():
    a = ad.parameter(np.ones(3))
    with pytest.raises(ad.AutodiffError, match="scalar"):
        ad.backward(a * 2.0)


def test_backward_rejects_nonfinite_loss():
    a = ad.parameter(np.array([np.inf]))
    with pytest.raises(ad.AutodiffError):
        ad.backward(a.sum())


def test_nan_gradient_names_the_primitive():
    a = ad.parameter(np.array([0.0]))
    loss = ad.log(a).sum()  # -inf value is caught at the loss already
    with pytest.raises(ad.AutodiffError):
        ad.backward(loss)
    b = ad.parameter(np.array([1e-320]))
    loss = ad.log(b).sum()  # finite loss, infinite gradient 1/x
    with pytest.raises(ad.AutodiffError, match="log"):
        ad.backward(loss)


def test_repeated_backward_same_gradients():
    a = ad.parameter(RNG.standard_normal((3, 3)))

    def build():
        return (ad.exp(a * 0.1) * a).sum()

    ad.backward(build())
    first = a.grad.copy()
    ad.backward(build())
    np.testing.assert_array_equal(a.grad, first)


def test_constants_are_not_differentiated():
    a = ad.parameter(np.ones(2))
    c = ad.constant(np.ones(2))
    ad.backward((a * c).sum())
    assert c.grad is None


def test_backward_param_map_uses_names():
    a = ad.parameter(np.ones(2), name="weights")
    grads = ad.backward((a * 2.0).sum(), params=[a])
    np.testing.assert_allclose(grads["weights"], [2.0, 2.0])


# -- Adam --------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr_signwise():
    # With bias correction, step 1 moves each coordinate by ~lr * sign(g).
    p = ad.parameter(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, -0.1, 2.0])
    state = ad.AdamState()
    ad.adam_step([p], [g], state, lr=0.001)
    expected = np.array([1.0, -2.0, 3.0]) - 0.001 * g / (np.abs(g) + 1e-8 / np.sqrt(1 - 0.999))
    np.testing.assert_allclose(p.data, expected, atol=1e-9)


def test_adam_converges_on_quadratic():
    p = ad.parameter(np.array([5.0, -3.0]))
    opt = ad.Adam([p])
    for _ in range(4000):
        ad.backward((p * p).sum())
        opt.step(0.05)
    assert np.abs(p.data).max() < 1e-3


def test_adam_shape_mismatch_raises():
    p = ad.parameter(np.ones(3))
    with pytest.raises(ad.AutodiffError, match="shape"):
        ad.adam_step([p], [np.ones(2)], ad.AdamState(), lr=0.1)


def test_adam_rejects_nonpositive_lr():
    p = ad.parameter(np.ones(1))
    with pytest.raises(ad.AutodiffError):
        ad.adam_step([p], [np.ones(1)], ad.AdamState(), lr=0.0)


# -- gradcheck self-test -------------------------------------------------------------


def test_gradcheck_catches_a_wrong_gradient():
    a = ad.parameter(np.array([1.3]))

    def forward():
        # power() with a deliberately broken local gradient.
        out = ad.power(a, 2.0)
        broken = ad.Tensor(out.data, _parents=(a,), _vjp=lambda g: (g * 3.0,),
                           op="broken")
        return broken.sum()

    assert ad.gradcheck(forward, [a]) > 0.1
