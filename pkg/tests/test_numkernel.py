import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedbayes.numkernel import (
    DimensionError,
    NumericError,
    SeedPath,
    affine,
    derive_rng,
    finite_diff_grad,
    softmax_xent,
    softplus,
    softplus_deriv,
    softplus_inv,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_affine_identity():
    np.testing.assert_array_equal(affine([[1, 0], [0, 1]], [0, 0], [3, 4]), [3, 4])


def test_affine_zero_weights_pass_bias():
    np.testing.assert_array_equal(affine([[0, 0]], [5], [1, 2]), [5])


def test_affine_hand_multiply():
    # [[1,2],[3,4]] @ [1,1] = [3,7]; + [1,1]
    np.testing.assert_array_equal(affine([[1, 2], [3, 4]], [1, 1], [1, 1]), [4, 8])


def test_affine_batched_rows_match_single():
    rng = np.random.default_rng(0)
    W, b, X = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
    out = affine(W, b, X)
    for i in range(5):
        np.testing.assert_allclose(out[i], affine(W, b, X[i]), rtol=1e-14)


def test_affine_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2,\)"):
        affine(np.zeros((2, 3)), np.zeros(2), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), finite, finite)
def test_affine_is_linear(seed, a, c):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x, y = rng.normal(size=4), rng.normal(size=4)
    lhs = affine(W, b, a * x + c * y)
    rhs = a * affine(W, np.zeros(3), x) + c * affine(W, np.zeros(3), y) + b
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_xent_symmetric_logits():
    loss, grad = softmax_xent(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)


def test_xent_saturated_correct():
    loss, grad = softmax_xent(np.array([100.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(grad, [0.0, 0.0], atol=1e-10)


def test_xent_matches_high_precision_and_finite_differences():
    z = np.array([1.0, 2.0, 3.0])
    loss, grad = softmax_xent(z, 2)
    # mpmath, 40 digits
    assert loss == pytest.approx(0.407605964444380304482919904545, rel=1e-14)
    fd = finite_diff_grad(lambda v: softmax_xent(v, 2)[0], z, 1e-5)
    np.testing.assert_allclose(grad, fd, rtol=1e-4)


def test_xent_label_out_of_range():
    with pytest.raises(IndexError):
        softmax_xent(np.zeros(3), 3)
    with pytest.raises(IndexError):
        softmax_xent(np.zeros(3), -1)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-700, 700)), st.data())
def test_xent_grad_sums_to_zero(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    loss, grad = softmax_xent(z, label)
    assert math.isfinite(loss) and loss >= 0
    assert abs(grad.sum()) <= 1e-12


def test_softplus_symmetric_point():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert softplus_deriv(0.0) == 0.5


def test_softplus_linear_asymptote():
    assert softplus(50.0) == 50.0
    assert softplus(1000.0) == 1000.0
    assert softplus_deriv(1000.0) == 1.0


def test_softplus_high_precision_reference():
    # mpmath, 40 digits: log1p(e^-3) and logistic(-3)
    assert softplus(-3.0) == pytest.approx(0.048587351573742058758925919854, rel=1e-14)
    assert softplus_deriv(-3.0) == pytest.approx(0.047425873177566780878848151772, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_softplus_deriv_matches_fd_and_inverse_roundtrips(x):
    fd = finite_diff_grad(lambda v: softplus(v[0]), np.array([x]), 1e-5)[0]
    assert softplus_deriv(x) == pytest.approx(fd, rel=1e-4, abs=1e-10)
    assert 0 < softplus_deriv(x) < 1
    y = softplus(x)
    if y > 1e-12:
        assert softplus_inv(y) == pytest.approx(x, rel=1e-8, abs=1e-8)


def test_fd_quadratic():
    g = finite_diff_grad(lambda v: float(np.sum(v**2)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)


def test_fd_constant_is_zero():
    np.testing.assert_array_equal(finite_diff_grad(lambda v: 3.0, np.ones(4), 1e-5), np.zeros(4))


def test_fd_non_finite_names_coordinate():
    f = lambda v: float("inf") if v[1] > 1.0 else 0.0
    with pytest.raises(NumericError, match="coordinate 1"):
        finite_diff_grad(f, np.array([0.0, 1.0]), 1e-3)


def test_fd_rejects_non_positive_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.zeros(1), 0.0)


def test_rng_same_path_identical():
    a = derive_rng(SeedPath(42, (1, 1, 3))).normal(1000)
    b = derive_rng(SeedPath(42, (1, 1, 3))).normal(1000)
    assert a.tobytes() == b.tobytes()


def test_rng_distinct_clients_differ():
    a = derive_rng(SeedPath(42, (1, 1))).normal(1000)
    b = derive_rng(SeedPath(42, (1, 2))).normal(1000)
    assert not np.array_equal(a, b)
    # no shared prefix either
    assert a[0] != b[0]


def test_rng_child_equals_explicit_path():
    a = derive_rng(SeedPath(5).child(2, 3)).uniform(10)
    b = derive_rng(SeedPath(5, (2, 3))).uniform(10)
    assert a.tobytes() == b.tobytes()


def test_rng_dirichlet_on_simplex():
    q = derive_rng(SeedPath(3, (9,))).dirichlet([0.1] * 5)
    assert abs(q.sum() - 1.0) <= 1e-12
    assert np.all(q >= 0)


def test_rng_streams_independent_of_thread_schedule():
    from concurrent.futures import ThreadPoolExecutor

    paths = [SeedPath(11, (k, n, 2)) for k in range(4) for n in range(5)]
    seq = [derive_rng(p).normal(200).tobytes() for p in paths]
    with ThreadPoolExecutor(4) as pool:
        par = list(pool.map(lambda p: derive_rng(p).normal(200).tobytes(), reversed(paths)))
    assert seq == par[::-1]


def test_seedpath_validation():
    with pytest.raises(ValueError):
        SeedPath(-1)
    with pytest.raises(ValueError):
        SeedPath(2**64)
    with pytest.raises(ValueError):
        SeedPath(0, (-1,))
