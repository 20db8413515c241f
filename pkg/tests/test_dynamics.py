import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnsvs.dynamics import (
    Window,
    WindowSet,
    apply_windows,
    apply_windows_transpose,
    build_window_matrix,
    default_windows,
    precision_band,
    static_windows,
)

from oracles import dense_w


def test_constant_sequence_has_zero_dynamics():
    o = apply_windows(np.full((7, 2), 3.0))
    assert np.allclose(o[:, :2], 3.0)
    assert np.allclose(o[:, 2:], 0.0)


def test_ramp_interior_delta():
    c = np.arange(6.0)[:, None]
    o = apply_windows(c)
    assert np.allclose(o[1:-1, 1], 1.0)
    assert np.allclose(o[1:-1, 2], 0.0)
    # edge replication halves the first and last deltas
    assert o[0, 1] == pytest.approx(0.5)
    assert o[-1, 1] == pytest.approx(0.5)


def test_single_frame():
    o = apply_windows(np.array([[2.0, -1.0]]))
    assert np.allclose(o, [[2.0, -1.0, 0.0, 0.0, 0.0, 0.0]])


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        apply_windows(np.zeros((0, 3)))


def test_window_set_requires_static_first():
    with pytest.raises(ValueError):
        WindowSet((Window((-0.5, 0.0, 0.5)),))
    with pytest.raises(ValueError):
        Window((1.0, 2.0))


@pytest.mark.parametrize("T,D", [(1, 1), (2, 3), (5, 2), (9, 1)])
def test_window_matrix_matches_dense_oracle(T, D):
    W = build_window_matrix(T, D)
    assert np.array_equal(W.dense(), dense_w(T, D))


def test_static_windows_identity():
    W = build_window_matrix(4, 2, static_windows())
    assert np.array_equal(W.dense(), np.eye(8))


def test_bandwidth():
    assert build_window_matrix(10, 1).bandwidth == 1
    assert build_window_matrix(10, 3).bandwidth == 3


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 12), D=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_apply_matches_matrix_product(T, D, seed):
    c = np.random.default_rng(seed).standard_normal((T, D))
    W = build_window_matrix(T, D)
    assert np.allclose(apply_windows(c).ravel(), W @ c.ravel(), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 12), D=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_transpose_is_adjoint(T, D, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((T, D))
    g = rng.standard_normal((T, 3 * D))
    assert np.dot(apply_windows(c).ravel(), g.ravel()) == pytest.approx(
        np.dot(c.ravel(), apply_windows_transpose(g).ravel()), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 10), D=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_precision_band_matches_dense(T, D, seed):
    lam = np.random.default_rng(seed).uniform(0.1, 3.0, (T, 3 * D))
    ab = precision_band(lam)
    W = dense_w(T, D)
    A = W.T @ (lam.ravel()[:, None] * W)
    for d in range(D):
        Ad = A[d::D, d::D]
        for k in range(ab.shape[0]):
            for i in range(T - k):
                assert ab[k, i, d] == pytest.approx(Ad[i + k, i], abs=1e-10)
        # nothing outside the band
        assert np.allclose(np.tril(Ad, -ab.shape[0]), 0.0)


def test_default_windows_shape():
    ws = default_windows()
    assert len(ws) == 3 and ws.halfwidth == 1
