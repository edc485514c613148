"""Gradient checks against central differences, tape mechanics, Adam, Xavier."""

import numpy as np
import pytest
import scipy.sparse as sp

import resdiag.autodiff as ad
from resdiag.errors import NumericsError

from helpers import check_gradients, numeric_gradients, relative_error


def _rand(rng, rows=5, cols=7, lo=None, hi=None):
    if lo is None:
        return ad.Tensor(rng.standard_normal((rows, cols)), requires_grad=True)
    return ad.Tensor(rng.uniform(lo, hi, size=(rows, cols)), requires_grad=True)


def _weighted_sum(out, weights):
    """Reduce a matrix output to a scalar with fixed random weights."""
    return ad.total_sum(ad.elementwise_mul(out, weights))


@pytest.mark.parametrize("seed", range(5))
def test_binary_op_gradients(seed):
    rng = np.random.default_rng(seed)
    w = ad.constant(rng.standard_normal((5, 7)))
    a = _rand(rng)
    b = _rand(rng)
    check_gradients(lambda: _weighted_sum(ad.add(a, b), w), [a, b])
    check_gradients(lambda: _weighted_sum(ad.sub(a, b), w), [a, b])
    check_gradients(lambda: _weighted_sum(ad.elementwise_mul(a, b), w), [a, b])
    check_gradients(lambda: ad.total_sum(ad.row_dot(a, b)), [a, b])

    denom = _rand(rng, lo=0.5, hi=2.0)
    check_gradients(lambda: _weighted_sum(ad.elementwise_div(a, denom), w), [a, denom])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, 5, 7)
    b = _rand(rng, 7, 4)
    w = ad.constant(rng.standard_normal((5, 4)))
    check_gradients(lambda: _weighted_sum(ad.matmul(a, b), w), [a, b])


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_nonlinearity_gradients(seed):
    rng = np.random.default_rng(seed)
    w = ad.constant(rng.standard_normal((5, 7)))
    x = _rand(rng)
    check_gradients(lambda: _weighted_sum(ad.sigmoid(x), w), [x])
    check_gradients(lambda: _weighted_sum(ad.tanh(x), w), [x])
    check_gradients(lambda: _weighted_sum(ad.exp(x), w), [x])
    check_gradients(lambda: _weighted_sum(ad.affine(x, -2.5, 0.75), w), [x])

    pos = _rand(rng, lo=0.5, hi=2.0)
    check_gradients(lambda: _weighted_sum(ad.log(pos), w), [pos])
    check_gradients(lambda: _weighted_sum(ad.sqrt(pos), w), [pos])

    # keep inputs away from the kink / clip boundaries where the
    # finite-difference stencil straddles a non-smooth point
    raw = rng.standard_normal((5, 7))
    raw[np.abs(raw) < 1e-2] = 0.5
    kinked = ad.Tensor(raw, requires_grad=True)
    check_gradients(lambda: _weighted_sum(ad.leaky_relu(kinked, 0.1), w), [kinked])

    raw = rng.standard_normal((5, 7))
    raw[np.abs(np.abs(raw) - 1.0) < 1e-2] = 0.0
    clipped = ad.Tensor(raw, requires_grad=True)
    check_gradients(lambda: _weighted_sum(ad.clamp(clipped, -1.0, 1.0), w), [clipped])


@pytest.mark.parametrize("seed", range(5))
def test_structural_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng)
    bias = ad.Tensor(rng.standard_normal((1, 7)), requires_grad=True)
    col = ad.Tensor(rng.standard_normal((5, 1)), requires_grad=True)
    w = ad.constant(rng.standard_normal((5, 7)))
    check_gradients(lambda: _weighted_sum(ad.add_bias(x, bias), w), [x, bias])
    check_gradients(lambda: _weighted_sum(ad.add_colvec(x, col), w), [x, col])
    check_gradients(lambda: _weighted_sum(ad.mul_colvec(x, col), w), [x, col])
    check_gradients(lambda: ad.mean(x), [x])
    check_gradients(lambda: ad.total_sum(x), [x])

    # repeated indices exercise gradient accumulation in the scatter
    idx = rng.integers(0, 5, size=9)
    wg = ad.constant(rng.standard_normal((9, 7)))
    check_gradients(lambda: _weighted_sum(ad.gather_rows(x, idx), wg), [x])

    parts = [_rand(rng, r, 4) for r in (2, 3, 1)]
    wc = ad.constant(rng.standard_normal((6, 4)))
    check_gradients(lambda: _weighted_sum(ad.concat_rows(parts), wc), parts)


@pytest.mark.parametrize("seed", range(5))
def test_spmm_gradient_matches_dense(seed):
    rng = np.random.default_rng(seed)
    a = sp.random(6, 5, density=0.4, random_state=np.random.RandomState(seed), format="csr")
    x = _rand(rng, 5, 7)
    w = ad.constant(rng.standard_normal((6, 7)))
    check_gradients(lambda: _weighted_sum(ad.spmm(a, x), w), [x])

    # same loss through a dense matmul must give the same gradient
    x.zero_grad()
    with ad.Tape() as tape:
        loss = _weighted_sum(ad.spmm(a, x), w)
    tape.backward(loss)
    sparse_grad = x.grad.copy()
    x.zero_grad()
    dense = ad.constant(a.toarray())
    with ad.Tape() as tape:
        loss = _weighted_sum(ad.matmul(dense, x), w)
    tape.backward(loss)
    np.testing.assert_allclose(sparse_grad, x.grad, rtol=0, atol=1e-12)


def test_spmm_flop_accounting():
    rng = np.random.default_rng(0)
    a = sp.random(8, 6, density=0.5, random_state=np.random.RandomState(1), format="csr")
    x = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.spmm(a, x)
        loss = ad.total_sum(out)
    assert tape.spmm_multiply_adds == a.nnz * 4
    tape.backward(loss)
    assert tape.spmm_multiply_adds == 2 * a.nnz * 4


@pytest.mark.parametrize("seed", range(5))
def test_composite_pipeline_gradient(seed):
    """Conv-like chain: sigmoid(A @ X @ W + b) reduced to a scalar."""
    rng = np.random.default_rng(seed)
    a = sp.random(10, 10, density=0.3, random_state=np.random.RandomState(seed), format="csr")
    x = _rand(rng, 10, 3)
    w1 = _rand(rng, 3, 3)
    bias = ad.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    w2 = _rand(rng, 3, 1)

    def loss_fn():
        h = ad.tanh(ad.add_bias(ad.matmul(ad.spmm(a, x), w1), bias))
        return ad.mean(ad.sigmoid(ad.matmul(h, w2)))

    check_gradients(loss_fn, [x, w1, bias, w2], tol=1e-5)


def test_tensor_shapes_and_item():
    assert ad.Tensor(3.0).shape == (1, 1)
    assert ad.Tensor([1.0, 2.0, 3.0]).shape == (3, 1)
    assert ad.Tensor(np.ones((2, 3))).shape == (2, 3)
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((2, 2, 2)))
    assert ad.Tensor(7.5).item() == 7.5
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((2, 2))).item()


def test_shape_mismatches_raise():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        ad.add(a, b)
    with pytest.raises(ValueError):
        ad.matmul(a, ad.Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError):
        ad.add_bias(a, ad.Tensor(np.ones((1, 2))))
    with pytest.raises(IndexError):
        ad.gather_rows(a, np.array([0, 2]))


def test_tape_single_use_and_grad_accumulation():
    x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.add(x, x)  # x used twice: gradient must accumulate to 2
        loss = ad.total_sum(y)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[2.0, 2.0]])
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_ops_outside_tape_do_not_record():
    x = ad.Tensor([[1.0]], requires_grad=True)
    y = ad.sigmoid(x)
    assert y.requires_grad
    with ad.Tape() as tape:
        pass
    assert len(tape) == 0
    # constants never create tape entries even inside a tape
    with ad.Tape() as tape:
        ad.add(ad.constant([[1.0]]), ad.constant([[2.0]]))
    assert len(tape) == 0


def test_requires_grad_propagates():
    c = ad.constant([[1.0, 2.0]])
    p = ad.Tensor([[3.0, 4.0]], requires_grad=True)
    assert not ad.add(c, c).requires_grad
    assert ad.add(c, p).requires_grad


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sigmoid(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_finite_check_mode():
    ad.set_finite_checks(True)
    try:
        bad = ad.Tensor([[-1.0]], requires_grad=True)
        with np.errstate(invalid="ignore"), pytest.raises(NumericsError):
            ad.log(bad)
    finally:
        ad.set_finite_checks(False)


def test_saturated_sigmoid_is_stable():
    x = ad.Tensor([[1e6, -1e6]], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.total_sum(ad.sigmoid(x))
    assert np.isfinite(loss.item())
    tape.backward(loss)
    assert np.isfinite(x.grad).all()


def test_adam_first_step_magnitude():
    # unit-scale gradient: the very first update moves by almost exactly lr
    p = ad.Tensor([[0.0, 0.0]], requires_grad=True)
    p.grad = np.array([[1.0, -1.0]])
    opt = ad.Adam([p], learning_rate=4e-3)
    opt.step()
    np.testing.assert_allclose(np.abs(p.value), 4e-3, rtol=0, atol=1e-9)
    assert p.grad is None


def test_adam_missing_gradient_raises():
    p = ad.Tensor([[0.0]], requires_grad=True)
    opt = ad.Adam([p], learning_rate=1e-2)
    with pytest.raises(RuntimeError):
        opt.step()


@pytest.mark.parametrize("seed", range(3))
def test_adam_matches_scalar_reference(seed):
    """Trajectory on a random quadratic vs an independent loop-based Adam."""
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((3, 2))
    start = rng.standard_normal((3, 2))

    p = ad.Tensor(start.copy(), requires_grad=True)
    opt = ad.Adam([p], learning_rate=0.05)
    for _ in range(30):
        with ad.Tape() as tape:
            diff = ad.sub(p, ad.constant(target))
            loss = ad.total_sum(ad.elementwise_mul(diff, diff))
        tape.backward(loss)
        opt.step()

    # reference: scalar Adam over each coordinate, gradients by hand
    ref = start.copy().ravel()
    tgt = target.ravel()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 31):
        g = 2.0 * (ref - tgt)
        for i in range(ref.size):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i]
            mhat = m[i] / (1 - 0.9**t)
            vhat = v[i] / (1 - 0.999**t)
            ref[i] -= 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.value.ravel(), ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("rows,cols", [(10, 20), (100, 3), (1, 1)])
def test_xavier_bounds(rows, cols):
    rng = np.random.default_rng(42)
    t = ad.xavier_init(rows, cols, rng)
    bound = np.sqrt(6.0 / (rows + cols))
    assert t.requires_grad
    assert t.value.shape == (rows, cols)
    assert np.abs(t.value).max() <= bound


def test_xavier_is_roughly_uniform():
    rng = np.random.default_rng(7)
    t = ad.xavier_init(200, 200, rng)
    bound = np.sqrt(6.0 / 400)
    # mean of U(-b, b) is 0 with sd b/sqrt(3n); allow 5 sigma
    n = t.value.size
    assert abs(t.value.mean()) < 5 * bound / np.sqrt(3 * n)
    with pytest.raises(ValueError):
        ad.xavier_init(0, 3, rng)


def test_numeric_gradient_helper_self_check():
    """The oracle itself on a function with a known closed-form gradient."""
    x = ad.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    grads = numeric_gradients(lambda: float((x.value**3).sum()), [x])
    np.testing.assert_allclose(grads[0], 3 * x.value**2, rtol=1e-7)
    assert relative_error(grads[0], 3 * x.value**2) < 1e-7
