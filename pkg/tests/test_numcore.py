import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clbench import numcore
from clbench.errors import ConfigError, NumericError, StructuralError
from clbench.numcore import Rng

from oracles import adamw_scalar

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_axpy_examples():
    assert numcore.axpy(0.0, [7, 9], [1, 2]).tolist() == [1, 2]
    assert numcore.axpy(1.0, [1, 1], [0, 0]).tolist() == [1, 1]
    assert numcore.axpy(2.0, [1, -1], [3, 3]).tolist() == [5, 1]


def test_axpy_length_mismatch():
    with pytest.raises(StructuralError):
        numcore.axpy(1.0, [1, 2], [1])


def test_weighted_mean_examples():
    v = np.array([0.3, -2.0])
    assert np.array_equal(numcore.weighted_mean([v, v], [0.25, 0.75]), v)
    assert numcore.weighted_mean([[0, 0], [2, 4]], [0.5, 0.5]).tolist() == [1, 2]
    assert numcore.weighted_mean([[1], [2], [3]], [0.2, 0.3, 0.5])[0] == pytest.approx(2.3, abs=1e-15)


def test_weighted_mean_rejects_bad_weights():
    with pytest.raises(ConfigError):
        numcore.weighted_mean([[1.0], [2.0]], [0.5, 0.6])
    with pytest.raises(ConfigError):
        numcore.weighted_mean([[1.0], [2.0]], [1.5, -0.5])
    with pytest.raises(StructuralError):
        numcore.weighted_mean([[1.0], [2.0, 3.0]], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 8), st.randoms(use_true_random=False))
def test_weighted_mean_permutation_equivariant(m, n, rnd):
    g = np.random.default_rng(rnd.randint(0, 2**32 - 1))
    vecs = g.normal(size=(m, n)) * 10
    w = g.random(m)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    perm = g.permutation(m)
    a = numcore.weighted_mean(list(vecs), list(w))
    b = numcore.weighted_mean(list(vecs[perm]), list(w[perm]))
    assert np.max(np.abs(a - b)) <= 1e-12


def test_sgd_examples():
    _, p = numcore.optimizer_step(numcore.sgd(0.1), [1.0], [10.0])
    assert p.tolist() == [0.0]
    params = np.array([1.5, -2.0])
    _, p = numcore.optimizer_step(numcore.sgd(0.3), params, np.zeros(2))
    assert np.array_equal(p, params)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6), st.sampled_from(["sgd", "adamw"]))
def test_zero_gradient_is_identity_without_decay(values, kind):
    params = np.array(values)
    state = numcore.sgd(0.1) if kind == "sgd" else numcore.adamw(0.1, weight_decay=0.0)
    for _ in range(3):
        state, out = numcore.optimizer_step(state, params, np.zeros_like(params))
        assert np.array_equal(out, params)


@settings(max_examples=50, deadline=None)
@given(finite, st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12),
       st.floats(1e-4, 0.5), st.floats(0.0, 0.1))
def test_adamw_matches_scalar_reference(theta0, grads, lr, wd):
    ref = adamw_scalar(theta0, grads, lr, wd=wd)
    state = numcore.adamw(lr, weight_decay=wd)
    params = np.array([theta0])
    for g, expected in zip(grads, ref):
        state, params = numcore.optimizer_step(state, params, np.array([g]))
        assert params[0] == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert state.step == len(grads)


def test_adamw_first_step_value():
    # first bias-corrected step moves by lr * g / (|g| + eps), here ~lr
    state, p = numcore.optimizer_step(numcore.adamw(0.01, weight_decay=0.0), [1.0], [4.0])
    assert p[0] == pytest.approx(1.0 - 0.01 * 4.0 / (4.0 + 1e-8), abs=1e-15)


def test_adamw_decay_is_decoupled():
    # with zero gradient the only change is the multiplicative decay
    _, p = numcore.optimizer_step(numcore.adamw(0.1, weight_decay=0.5), [2.0], [0.0])
    assert p[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_non_finite_gradient_names_index():
    with pytest.raises(NumericError, match="index 2"):
        numcore.optimizer_step(numcore.sgd(0.1), np.zeros(4), [0.0, 1.0, np.nan, np.inf])


def test_finite_diff_examples():
    g = numcore.finite_diff_grad(lambda t: float(np.sum(t ** 2)), [3.0], 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-6)
    assert np.array_equal(numcore.finite_diff_grad(lambda t: 4.0, [1.0, 2.0]), np.zeros(2))
    with pytest.raises(NumericError):
        numcore.finite_diff_grad(lambda t: float("nan"), [1.0])
    with pytest.raises(ConfigError):
        numcore.finite_diff_grad(lambda t: 0.0, [1.0], h=0.0)


def test_rng_streams_replay_and_differ():
    a = Rng(5, 9).generator().random(8)
    b = Rng(5, 9).generator().random(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, Rng(5, 10).generator().random(8))
    assert not np.array_equal(a, Rng(6, 9).generator().random(8))
    c1, c2 = Rng(1).child("client", "N01"), Rng(1).child("client", "N02")
    assert c1 != c2 and c1 == Rng(1).child("client", "N01")


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ConfigError):
        Rng(-1)
    with pytest.raises(ConfigError):
        Rng(2 ** 64)


def test_checksum_changes_with_one_bit():
    p = np.linspace(0, 1, 50)
    q = p.copy()
    q[7] = np.nextafter(q[7], 2.0)
    assert numcore.checksum(p) == numcore.checksum(p.copy())
    assert numcore.checksum(p) != numcore.checksum(q)
