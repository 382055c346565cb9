import io

import numpy as np
import pytest

from boxmil import autodiff as ad
from boxmil.model import (CHECKPOINT_MAGIC, NetParams, forward, forward_logits, init_params,
                          load_checkpoint, predict, save_checkpoint)
from boxmil.validation import ContractError, FormatError


def test_output_shape_matches_input():
    p = init_params(0, (4, 4, 4), n_classes=3)
    out = predict(p, np.random.default_rng(0).random((2, 16, 12)))
    assert out.shape == (2, 16, 12, 3)
    assert np.all((out > 0) & (out < 1))


def test_zero_weights_predict_one_half():
    p = init_params(0, (4, 4, 4))
    zero = NetParams({k: np.zeros_like(v) for k, v in p.arrays.items()}, p.channels, p.n_classes)
    np.testing.assert_array_equal(predict(zero, np.random.default_rng(1).random((1, 8, 8))), 0.5)


def test_init_variance_is_he():
    p = init_params(3, (8, 16, 32))
    w = p.arrays["dec2.w"]
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert w.var() == pytest.approx(2.0 / fan_in, rel=0.1)
    assert np.all(p.arrays["dec2.b"] == 0)


def test_init_is_seeded():
    a, b = init_params(5).flatten(), init_params(5).flatten()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, init_params(6).flatten())


def test_image_size_must_be_divisible_by_four():
    with pytest.raises(ContractError):
        predict(init_params(0, (4, 4, 4)), np.zeros((1, 10, 8)))


def test_channels_validation():
    with pytest.raises(ContractError):
        init_params(0, (4, 4))


def test_end_to_end_gradcheck():
    p = init_params(1, (4, 4, 4))
    names = p.names()
    images = np.random.default_rng(2).random((2, 8, 8))
    target = np.random.default_rng(3).random((2, 8, 8, 1))
    rng = np.random.default_rng(4)
    flat0 = p.flatten() + rng.normal(scale=0.05, size=p.size)  # move biases off zero

    def f(v):
        tape = v.tape
        leaves, i = {}, 0
        for k in names:
            n = p.arrays[k].size
            leaves[k] = ad.reshape(ad.sample(v, np.arange(i, i + n)[:, None], np.ones((n, 1))),
                                   p.arrays[k].shape)
            i += n
        pred, _ = forward(p, images, tape, leaves)
        return ad.vsum((pred - target) ** 2.0)

    coords = rng.choice(p.size, size=60, replace=False)
    assert ad.gradcheck(f, flat0, coords=coords) < 1e-5


def test_float32_forward_close_to_float64():
    p = init_params(0, (4, 8, 8))
    x = np.random.default_rng(0).random((2, 16, 16))
    a = predict(p, x)
    b = predict(p.astype(np.float32), x)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_logits_on_given_tape():
    tape = ad.Tape()
    p = init_params(0, (4, 4, 4))
    logits, leaves = forward_logits(p, np.zeros((1, 8, 8)), tape)
    assert logits.tape is tape
    assert set(leaves) == set(p.arrays)


def test_checkpoint_round_trip():
    p = init_params(2, (4, 8, 8), n_classes=2)
    buf = io.BytesIO()
    save_checkpoint(p, buf)
    data = buf.getvalue()
    assert data.startswith(CHECKPOINT_MAGIC)
    q = load_checkpoint(io.BytesIO(data))
    assert q.channels == (4, 8, 8) and q.n_classes == 2
    for k in p.arrays:
        np.testing.assert_array_equal(q.arrays[k], p.arrays[k].astype(np.float32))
    # a second save is byte-identical
    buf2 = io.BytesIO()
    save_checkpoint(q, buf2)
    assert buf2.getvalue() == data


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    p = init_params(0, (4, 4, 4))
    buf = io.BytesIO()
    save_checkpoint(p, buf)
    path.write_bytes(buf.getvalue()[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(path)


@pytest.mark.parametrize("level", [0.0, 0.3, 1.0])
def test_constant_image_gives_constant_interior(level):
    p = init_params(0, (4, 8, 8))
    out = predict(p, np.full((1, 64, 64), level))[0]
    # padding effects reach at most 16 px into the image
    inner = out[16:48, 16:48]
    assert np.all(inner == inner[0, 0])


def test_shift_by_multiple_of_four_shifts_output():
    p = init_params(1, (4, 8, 8))
    img = np.random.default_rng(0).random((64, 72))
    a = predict(p, img[None, :, :64])[0]
    b = predict(p, img[None, :, 8:])[0]
    np.testing.assert_allclose(a[16:48, 24:48], b[16:48, 16:40], atol=1e-12)
