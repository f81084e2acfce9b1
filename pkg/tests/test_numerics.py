import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nvconv.numerics import (
    CheckpointError, NumericError, ParamStore, Tape, ad, adam_step, backward,
    check_gradients, clip_grad_norm, finite_diff_grad, load_checkpoint, matmul,
    relu6, save_checkpoint, sigmoid,
)


# ---------------------------------------------------------------- pure ops

@pytest.mark.parametrize("x, expected", [(-1.0, 0.0), (3.0, 3.0), (7.5, 6.0)])
def test_relu6_examples(x, expected):
    assert relu6([x])[0] == expected


def test_relu6_rejects_nonfinite():
    with pytest.raises(NumericError):
        relu6([np.nan])


def test_sigmoid_examples():
    assert sigmoid([0.0])[0] == 0.5
    assert abs(sigmoid([50.0])[0] - 1.0) < 1e-15
    assert sigmoid([1.0])[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert np.all(np.isfinite(sigmoid([-800.0, 800.0])))


@given(arrays(np.float64, 7, elements=st.floats(-30, 30)))
def test_sigmoid_range(x):
    y = sigmoid(x)
    assert np.all((y >= 0) & (y <= 1))
    assert np.all(y[np.abs(x) < 30] > 0)


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])
    with pytest.raises(NumericError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


# ---------------------------------------------------------------- backward

def _store(**blocks):
    s = ParamStore()
    for k, v in blocks.items():
        s.add(k, v)
    return s


def test_backward_sum_is_ones():
    s = _store(p=np.arange(6.0).reshape(2, 3))
    tape = Tape()
    backward(tape, ad.sum(tape.param(s, "p")))
    np.testing.assert_array_equal(s.grad("p"), np.ones((2, 3)))


def test_backward_half_square_norm():
    p = np.array([1.5, -2.0, 0.25])
    s = _store(p=p)
    tape = Tape()
    backward(tape, 0.5 * ad.sum(ad.square(tape.param(s, "p"))))
    np.testing.assert_array_equal(s.grad("p"), p)


def test_backward_accumulates_until_zeroed():
    s = _store(p=np.ones(3))
    tape = Tape()
    loss = ad.sum(tape.param(s, "p"))
    backward(tape, loss)
    backward(tape, loss)
    np.testing.assert_array_equal(s.grad("p"), 2 * np.ones(3))
    s.zero_grad()
    np.testing.assert_array_equal(s.grad("p"), np.zeros(3))


def test_backward_rejects_non_scalar():
    s = _store(p=np.ones(3))
    tape = Tape()
    with pytest.raises(NumericError, match="scalar"):
        backward(tape, tape.param(s, "p") * 2.0)


def test_unused_parameter_gets_exact_zero():
    s = _store(a=np.ones(3), b=np.full(2, 7.0))
    tape = Tape()
    tape.param(s, "b")
    backward(tape, ad.sum(ad.square(tape.param(s, "a"))))
    assert np.all(s.grad("b") == 0.0)


def _two_layer(rng):
    s = ParamStore()
    s.add_uniform("W1", (4, 6), 1.0, rng)
    s.add_uniform("b1", (6,), 1.0, rng)
    s.add_uniform("W2", (6, 3), 1.0, rng)
    s.add_uniform("b2", (3,), 1.0, rng)
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 3))

    def loss_fn(tape):
        h = ad.relu6(ad.matmul(x, tape.param(s, "W1")) + tape.param(s, "b1"))
        h = ad.sigmoid(h)
        out = ad.matmul(h, tape.param(s, "W2")) + tape.param(s, "b2")
        return ad.mean(ad.square(out - y))

    return s, loss_fn


def test_backward_matches_finite_differences_two_layer():
    rng = np.random.default_rng(0)
    s, loss_fn = _two_layer(rng)
    report = check_gradients(loss_fn, s, 40, rng)
    assert len(report.coords) == 40
    assert report.max_rel_err < 1e-4


def test_finite_diff_grad_full_matches_backward():
    rng = np.random.default_rng(1)
    s, loss_fn = _two_layer(rng)
    fd = finite_diff_grad(lambda _: loss_fn(Tape()), s)
    tape = Tape()
    backward(tape, loss_fn(tape))
    for name in s:
        np.testing.assert_allclose(s.grad(name), fd[name], rtol=1e-4, atol=1e-8)


def test_finite_diff_examples():
    s = _store(x=[1.0])
    g = finite_diff_grad(lambda st: ad.sum(ad.square(st["x"])), s)
    assert g["x"][0] == pytest.approx(2.0, abs=1e-6)
    s = _store(x=[3.0])
    g = finite_diff_grad(lambda st: ad.sum(ad.relu6(st["x"])), s)
    assert g["x"][0] == pytest.approx(1.0, abs=1e-6)


def test_finite_diff_rejects_nonfinite():
    s = _store(x=[1.0])
    with pytest.raises(NumericError):
        finite_diff_grad(lambda st: st["x"][0] * np.inf, s)


@pytest.mark.parametrize("op", [
    ad.sigmoid, ad.relu6, ad.relu, ad.leaky_relu, ad.absolute, ad.square, ad.exp,
    ad.log_sigmoid, lambda v: ad.sqrt(ad.square(v) + 1.0), lambda v: ad.log(ad.square(v) + 1.0),
])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(2)
    s = _store(x=rng.uniform(-3, 8, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    report = check_gradients(lambda t: ad.sum(op(t.param(s, "x")) * w), s, 12, rng)
    assert report.max_rel_err < 1e-4


def test_structural_op_gradients():
    rng = np.random.default_rng(3)
    s = _store(a=rng.normal(size=(2, 3)), b=rng.normal(size=(2, 3)), k=rng.normal(size=(2, 1, 3, 3)))
    img = rng.normal(size=(2, 1, 6, 6))

    def loss_fn(t):
        a, b = t.param(s, "a"), t.param(s, "b")
        c = ad.concat([a, b], axis=1)
        st_ = ad.stack([a, b], axis=0)
        m = ad.amax(c * 1.3, axis=1)
        r = ad.reshape(ad.transpose(st_, (1, 0, 2)), (2, 6))
        conv = ad.conv2d(img, t.param(s, "k"), stride=2)
        return (ad.sum(m) + ad.sum(r[:, 1:4] * 0.7) + ad.mean(ad.square(conv))
                + ad.sum(ad.div(a, ad.square(b) + 1.0)) + ad.sum(c[..., ::2]))

    report = check_gradients(loss_fn, s, 30, rng)
    assert report.max_rel_err < 1e-4


def test_fancy_index_gradient_accumulates_repeats():
    s = _store(e=np.arange(8.0).reshape(4, 2))
    tape = Tape()
    rows = tape.param(s, "e")[np.array([1, 1, 3])]
    backward(tape, ad.sum(rows))
    np.testing.assert_array_equal(s.grad("e"), [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_operands_from_different_tapes_rejected():
    s = _store(a=[1.0])
    with pytest.raises(NumericError):
        Tape().param(s, "a") + Tape().param(s, "a")


def test_plain_arrays_do_not_record():
    out = ad.sum(ad.square(np.array([1.0, 2.0])))
    assert not isinstance(out, ad.Var) and float(out) == 5.0


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_is_noop():
    s = _store(p=np.array([0.3, -1.2]))
    before = s["p"].copy()
    adam_step(s, lr=0.1)
    np.testing.assert_array_equal(s["p"], before)


def test_adam_first_step_magnitude_is_lr():
    lr = 0.01
    s = _store(p=np.zeros(4))
    s.grad("p")[...] = [3.0, -0.5, 1e-3, -20.0]
    adam_step(s, lr=lr)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(np.abs(s["p"]), lr, atol=1e-6)
    assert np.all(s.grad("p") == 0.0)
    assert s.param("p").step == 1


def test_adam_accepts_small_lr_and_rejects_nonpositive():
    s = _store(p=np.ones(2))
    s.grad("p")[...] = 1.0
    adam_step(s, lr=0.0001)
    with pytest.raises(NumericError):
        adam_step(s, lr=0.0)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(4)
    s = _store(p=rng.normal(size=3))
    p = s["p"].copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        s.grad("p")[...] = g
        adam_step(s, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(s["p"], p, rtol=1e-12)


def test_adam_subset_leaves_others_untouched():
    s = _store(a=np.ones(2), b=np.ones(2))
    s.grad("a")[...] = 1.0
    s.grad("b")[...] = 1.0
    adam_step(s, lr=0.1, names=["a"])
    np.testing.assert_array_equal(s["b"], np.ones(2))
    assert s.param("b").step == 0
    assert np.all(s.grad("b") == 0)


def test_clip_grad_norm():
    s = _store(a=np.zeros(2), b=np.zeros(1))
    s.grad("a")[...] = [3.0, 0.0]
    s.grad("b")[...] = [4.0]
    assert clip_grad_norm(s, 1.0) == pytest.approx(5.0)
    assert s.grad_norm() == pytest.approx(1.0)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    blocks = {"listen.enc.layer0.W_i": rng.normal(size=(4, 7)), "scalar": np.array(3.5),
              "v": rng.normal(size=5) * 1e300, "ünï": np.array([-0.0, 1e-310])}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, blocks)
    back = load_checkpoint(path)
    assert list(back) == list(blocks)
    for k in blocks:
        assert back[k].shape == blocks[k].shape
        assert back[k].tobytes() == np.asarray(blocks[k]).tobytes()
    save_checkpoint(tmp_path / "m2.ckpt", back)
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"ab": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:5] == b"NVSQ1"
    assert raw[5:13] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[13:17] == (2).to_bytes(4, "little") and raw[17:19] == b"ab"
    assert raw[19:23] == (1).to_bytes(4, "little") and raw[23:27] == (2).to_bytes(4, "little")
    assert len(raw) == 27 + 16


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.ones(1)})
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX1" + raw[5:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    raw[5] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_store_checksum_tracks_values():
    s = _store(a=np.ones(2))
    c0 = s.checksum()
    s["a"][0] = 2.0
    assert s.checksum() != c0


def test_determinism_same_seed():
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    s1, f1 = _two_layer(r1)
    s2, f2 = _two_layer(r2)
    t1, t2 = Tape(), Tape()
    backward(t1, f1(t1))
    backward(t2, f2(t2))
    for n in s1:
        assert s1.grad(n).tobytes() == s2.grad(n).tobytes()
