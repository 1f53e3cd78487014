import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbadapt import he

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_roundtrip_exact_without_noise(key, rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(he.decrypt(key, he.encrypt(key, x)), x)


def test_roundtrip_within_noise_tolerance(rng):
    k = he.keygen("bob", he.EncryptionParams(noise_tolerance=1e-3), seed=2)
    x = rng.normal(size=(50, 50))
    err = np.abs(he.decrypt(k, he.encrypt(k, x)) - x)
    assert err.max() <= 1e-3
    assert err.max() > 0


def test_ct_multiply_costs_one_level_plain_multiply_none(key):
    c = he.encrypt(key, np.ones(3))
    assert (c * c).depth_used == 1
    assert (c * 2.0).depth_used == 0
    assert ((c * c) * c).depth_used == 2
    assert (c + c * c).depth_used == 1


def test_plain_multiply_depth_flag():
    k = he.keygen("carol", he.EncryptionParams(noise_tolerance=0.0, plain_mul_depth=1))
    c = he.encrypt(k, np.ones((2, 2)))
    assert (c * 3.0).depth_used == 1
    assert (c @ np.eye(2)).depth_used == 1


def test_depth_budget_enforced():
    k = he.keygen("dave", he.EncryptionParams(max_depth=2, noise_tolerance=0.0))
    c = he.encrypt(k, np.ones(2))
    c2 = c * c
    c3 = c2 * c2
    with pytest.raises(he.DepthBudgetExceeded):
        c3 * c


def test_keys_cannot_mix(key):
    other = he.keygen("eve", key.params)
    a = he.encrypt(key, np.ones(2))
    b = he.encrypt(other, np.ones(2))
    with pytest.raises(he.KeyMismatchError):
        a + b
    with pytest.raises(he.KeyMismatchError):
        he.decrypt(other, a)


def test_shape_mismatch(key):
    a = he.encrypt(key, np.ones((2, 3)))
    with pytest.raises(he.ShapeMismatchError):
        a + he.encrypt(key, np.ones((4, 5)))
    with pytest.raises(he.ShapeMismatchError):
        a @ np.ones((2, 2))


def test_non_finite_rejected(key):
    with pytest.raises(he.NonFiniteInputError):
        he.encrypt(key, np.array([1.0, np.nan]))


def test_no_ciphertext_division(key):
    a = he.encrypt(key, np.ones(2))
    with pytest.raises(TypeError):
        a / a
    np.testing.assert_allclose(he.decrypt(key, a / 4.0), 0.25)


def test_ndarray_on_left_dispatches_to_ciphertext(key):
    a = he.encrypt(key, np.ones(3))
    out = np.arange(3.0) + a
    assert isinstance(out, he.Ciphertext)
    np.testing.assert_array_equal(he.decrypt(key, out), np.arange(3.0) + 1)


def test_bytes_follow_expansion_ratio(key):
    c = he.encrypt(key, np.zeros((10, 10), dtype=np.float32))
    assert c.plain_bytes == 400
    assert c.nbytes == math.ceil(2.79 * 400)
    assert he.expanded_bytes(100, 2.0) == 200


def test_level_free_data_movement(key, rng):
    x = rng.normal(size=(2, 3, 4))
    c = he.encrypt(key, x) * he.encrypt(key, np.ones_like(x))
    for op, ref in [
        (lambda t: t.sum(axis=-1), x.sum(axis=-1)),
        (lambda t: t.mean(axis=1), x.mean(axis=1)),
        (lambda t: t.reshape(6, 4), x.reshape(6, 4)),
        (lambda t: t.swapaxes(0, 2), x.swapaxes(0, 2)),
        (lambda t: t.take([1, 0], axis=0), x[[1, 0]]),
    ]:
        out = op(c)
        assert out.depth_used == 1
        np.testing.assert_allclose(he.decrypt(key, out), ref)


def test_count_ops(key):
    c = he.encrypt(key, np.ones(2))
    with he.count_ops() as ops:
        (c * c + 1.0).sum()
    assert ops["mul"] == 1 and ops["add_plain"] == 1 and ops["sum"] == 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_homomorphism(a, b):
    k = he.keygen("h", he.EncryptionParams(noise_tolerance=0.0), seed=0)
    ea, eb = he.encrypt(k, a), he.encrypt(k, b)
    np.testing.assert_array_equal(he.decrypt(k, ea + eb), a + b)
    np.testing.assert_array_equal(he.decrypt(k, ea * eb), a * b)
    np.testing.assert_array_equal(he.decrypt(k, ea - eb), a - b)


def test_params_validation():
    with pytest.raises(ValueError):
        he.EncryptionParams(max_depth=0)
    with pytest.raises(ValueError):
        he.EncryptionParams(expansion_ratio=0.5)
    with pytest.raises(ValueError):
        he.EncryptionParams(noise_tolerance=-1.0)
