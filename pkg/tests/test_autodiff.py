import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from boxmil import autodiff as ad
from boxmil.gradsuite import OPS, run_check
from boxmil.validation import ContractError, EvaluationError


def test_square_gradient():
    tape = ad.Tape()
    x = tape.var(np.array(3.0))
    grads = ad.backward(tape, x * x)
    assert grads[x] == pytest.approx(6.0)


def test_log_sigmoid_at_zero():
    val, g = ad.grad(lambda v: ad.log(ad.sigmoid(v)), 0.0)
    assert val == pytest.approx(np.log(0.5))
    assert g == pytest.approx(0.5)


def test_sigmoid_is_stable_for_large_inputs():
    tape = ad.Tape()
    x = tape.var(np.array([-800.0, 0.0, 800.0]))
    y = ad.sigmoid(x)
    assert np.all(np.isfinite(y.value))
    assert y.value[0] == 0.0 and y.value[2] == 1.0


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    z = tape.var(np.ones(2))
    grads = ad.backward(tape, ad.vsum(x * 2.0))
    np.testing.assert_array_equal(grads[z], np.zeros(2))
    np.testing.assert_array_equal(grads[x], np.full(3, 2.0))


def test_backward_needs_scalar_root():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(tape, x * 2.0)


def test_root_from_other_tape_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    t1.var(np.ones(2))
    y = ad.vsum(t2.var(np.ones(2)))
    with pytest.raises(ContractError):
        ad.backward(t1, y)


def test_mixing_tapes_rejected():
    a = ad.Tape().var(np.ones(2))
    b = ad.Tape().var(np.ones(2))
    with pytest.raises(ContractError):
        a + b


def test_gradcheck_flags_non_finite():
    with pytest.raises(EvaluationError), np.errstate(invalid="ignore"):
        ad.gradcheck(lambda v: ad.vsum(ad.log(v)), np.array([-1.0, 1.0]))


def test_fan_out_accumulates():
    # y = x*x + 3x uses x three times
    val, g = ad.grad(lambda v: ad.vsum(v * v + v * 3.0), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [5.0, -1.0])


def test_float32_forward_accumulates_float64():
    tape = ad.Tape()
    x = tape.var(np.full(4, 0.1, dtype=np.float32))
    grads = ad.backward(tape, ad.vsum(x * x))
    assert grads[x].dtype == np.float64


def test_max_sends_gradient_to_first_maximiser():
    _, g = ad.grad(lambda v: ad.vmax(v), np.array([1.0, 3.0, 3.0, 2.0]))
    np.testing.assert_array_equal(g, [0, 1, 0, 0])


def test_masked_max_ignores_masked_entries():
    tape = ad.Tape()
    x = tape.var(np.array([[5.0, 1.0, 2.0]]))
    m = ad.vmax(x, where=np.array([[False, True, True]]))
    assert m.item() == 2.0
    with pytest.raises(ContractError):
        ad.vmax(x, where=np.zeros((1, 3), bool))


def test_relu_and_clip_values():
    tape = ad.Tape()
    x = tape.var(np.array([-2.0, 0.5, 3.0]))
    np.testing.assert_array_equal(ad.relu(x).value, [0.0, 0.5, 3.0])
    np.testing.assert_array_equal(ad.clip(x, 0.0, 1.0).value, [0.0, 0.5, 1.0])


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    tape = ad.Tape()
    y = ad.conv2d(tape.const(x), tape.const(w), None, stride=1, pad=1).value
    ref = np.zeros((2, 7, 6, 4))
    for n in range(2):
        for o in range(4):
            for c in range(3):
                ref[n, :, :, o] += ndimage.correlate(x[n, :, :, c], w[o, c], mode="constant")
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_conv2d_stride_two_subsamples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 8, 8, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    tape = ad.Tape()
    full = ad.conv2d(tape.const(x), tape.const(w), stride=1).value
    half = ad.conv2d(tape.const(x), tape.const(w), stride=2).value
    np.testing.assert_allclose(half, full[:, ::2, ::2], atol=1e-12)


def test_upsample_and_concat_shapes():
    tape = ad.Tape()
    x = tape.var(np.arange(8.0).reshape(1, 2, 2, 2))
    up = ad.upsample2(x)
    assert up.shape == (1, 4, 4, 2)
    assert ad.concat([up, up], axis=-1).shape == (1, 4, 4, 4)
    grads = ad.backward(tape, ad.vsum(up))
    np.testing.assert_array_equal(grads[x], np.full((1, 2, 2, 2), 4.0))


def test_sample_is_bilinear_gather():
    tape = ad.Tape()
    src = tape.var(np.array([[0.0, 1.0], [2.0, 3.0]]))
    # centre of the 2 x 2 grid
    out = ad.sample(src, np.array([[0, 1, 2, 3]]), np.array([[0.25, 0.25, 0.25, 0.25]]))
    assert out.value[0] == pytest.approx(1.5)
    grads = ad.backward(tape, ad.vsum(out))
    np.testing.assert_allclose(grads[src], np.full((2, 2), 0.25))


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradcheck_registry(op):
    assert run_check(op, 0) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_elementwise_chain_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 3))

    def f(v):
        p = ad.sigmoid(v)
        return ad.vsum(ad.log(p) * p ** 2.0 + ad.exp(v * 0.3) / (1.0 + p))

    assert ad.gradcheck(f, x) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_the_output(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=5)

    def f(v):
        return ad.vsum(ad.sigmoid(v) * v)

    def g(v):
        return ad.vsum(ad.exp(v * 0.5))

    _, gf = ad.grad(f, x)
    _, gg = ad.grad(g, x)
    _, gh = ad.grad(lambda v: f(v) * a + g(v) * b, x)
    np.testing.assert_allclose(gh, a * gf + b * gg, atol=1e-12)


def test_backward_is_deterministic():
    x = np.random.default_rng(3).normal(size=(2, 6, 6, 2))
    w = np.random.default_rng(4).normal(size=(3, 2, 3, 3))

    def run():
        tape = ad.Tape()
        xv, wv = tape.var(x), tape.var(w)
        y = ad.vsum(ad.relu(ad.conv2d(xv, wv)) ** 2.0)
        g = ad.backward(tape, y)
        return g[xv], g[wv]

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
