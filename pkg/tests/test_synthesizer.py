import math

import numpy as np
import pytest

import oracles
from nvconv import features as F
from nvconv.features import NATIVE_MAX, NATIVE_MIN, NormStats, au_index
from nvconv.numerics import ParamStore, Tape, adam_step, check_gradients
from nvconv.synthesizer import render as R
from nvconv.synthesizer.gan import (
    gan_losses, gan_losses_from_logits, prepare_sequences, rollout, train_synth, _terms,
)
from nvconv.synthesizer.networks import (
    Discriminator, Generator, PerceptualFeatures, SynthConfig, build_networks,
)

STATS = NormStats(NATIVE_MIN.copy(), NATIVE_MAX.copy())


def _frame(**aus):
    p = np.zeros(20)
    for k, v in aus.items():
        p[au_index(k) if k.startswith("AU") else 17 + "xyz".index(k[-1])] = v
    return p


# ---------------------------------------------------------------- conditioning image

def test_conditioning_extremes_and_readback():
    img = R.conditioning_image(NATIVE_MIN, STATS)
    assert img.shape == (32, 32) and not img.any()
    img = R.conditioning_image(NATIVE_MAX, STATS)
    block = img[12:20, 11:21]
    assert np.all(block == 1.0) and img.sum() == 80
    p = np.random.default_rng(0).uniform(NATIVE_MIN, NATIVE_MAX)
    z = R.read_conditioning(R.conditioning_image(p, STATS))
    np.testing.assert_array_equal(z, STATS.normalize(p))


def test_conditioning_layout_row_major():
    p = NATIVE_MIN.copy()
    p[6] = NATIVE_MAX[6]  # feature 6 -> grid row 1, column 1
    img = R.conditioning_image(p, STATS)
    assert np.argwhere(img == 1.0).tolist() == [[14, 13], [14, 14], [15, 13], [15, 14]]


def test_conditioning_batch_matches_single_and_errors():
    rng = np.random.default_rng(1)
    frames = rng.uniform(NATIVE_MIN, NATIVE_MAX, (3, 20))
    batch = R.conditioning_batch(frames, STATS, 16)
    for k in range(3):
        np.testing.assert_array_equal(batch[k], R.conditioning_image(frames[k], STATS, 16))
    with pytest.raises(ValueError):
        R.conditioning_image(frames[0], STATS, 6)
    with pytest.raises(ValueError):
        R.conditioning_image(np.full(20, np.nan), STATS)


# ---------------------------------------------------------------- renderer

def test_render_range_and_determinism():
    p = np.random.default_rng(2).uniform(NATIVE_MIN, NATIVE_MAX)
    a, flag = R.render_face(p)
    b, _ = R.render_face(p)
    assert not flag and a.shape == (32, 32)
    assert a.min() >= 0 and a.max() <= 1 and np.array_equal(a, b)


def test_neutral_face_is_mirror_symmetric():
    for res in (32, 64):
        img, _ = R.render_face(np.zeros(20), res)
        assert np.array_equal(img, img[:, ::-1])
    img, _ = R.render_face(_frame(AU12=2.0, AU04=1.0, AU25=3.0))
    assert np.array_equal(img, img[:, ::-1])


def test_blink_closes_eyes():
    rows = slice(12, 16)  # eye band: v in [-3.5, -0.5] around centre row 16
    open_img, _ = R.render_face(_frame())
    shut, _ = R.render_face(_frame(AU45=5.0))
    head_only = R.HEAD * R._head_coverage(16.0, 16.0, 0.0, 32)
    eye_cols = np.r_[18:21]
    assert np.any(open_img[rows, eye_cols] > head_only[rows, eye_cols])
    np.testing.assert_array_equal(shut[rows, eye_cols], head_only[rows, eye_cols])


def test_mouth_opening_reaches_maximum():
    C = R.COEF
    p = _frame(AU25=5.0, AU26=5.0)
    rects = R._geometry(p)
    upper, lower = rects[-2], rects[-1]
    opening = lower[2] - upper[3]
    assert opening == pytest.approx(C["llip_top0"] - C["ulip_bottom0"] + 5 * (C["ulip_au25"] + C["llip_au26"]))
    est, _ = R.extract_aupose(R.render_face(p)[0])
    assert est[au_index("AU25")] == pytest.approx(5.0, abs=0.05)
    assert est[au_index("AU26")] == pytest.approx(5.0, abs=0.05)


def test_out_of_range_is_clamped_and_flagged():
    p = _frame(AU12=7.0)
    img, flag = R.render_face(p)
    assert flag
    np.testing.assert_array_equal(img, R.render_face(_frame(AU12=5.0))[0])


def test_render_extract_roundtrip_random():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(NATIVE_MIN, NATIVE_MAX)
        est, mask = R.extract_aupose(R.render_face(p)[0])
        assert mask.sum() == 11 and np.all(np.isnan(est[~mask]))
        worst = max(worst, np.abs(est - p)[mask].max())
    assert worst <= 0.05


def test_roundtrip_at_64():
    p = np.random.default_rng(4).uniform(NATIVE_MIN, NATIVE_MAX)
    est, mask = R.extract_aupose(R.render_face(p, 64)[0])
    assert np.abs(est - p)[mask].max() <= 0.05


def test_extract_tolerates_symmetric_pixel_noise():
    # zero-mean noise should cancel in the signed coverage sums
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(100):
        p = rng.uniform(NATIVE_MIN, NATIVE_MAX)
        est, mask = R.extract_aupose(R.render_face(p)[0] + rng.normal(0, 0.01, (32, 32)))
        errs.append(np.abs(est - p)[mask])
    assert np.mean(errs) < 0.2


def test_extract_blank_image_fails():
    with pytest.raises(R.StructureNotFound):
        R.extract_aupose(np.zeros((32, 32)))
    with pytest.raises(ValueError):
        R.extract_aupose(np.zeros((32, 30)))


def test_pose_moves_and_tilts_head():
    base = R.render_face(_frame())[0]
    right = R.render_face(_frame(Ry=0.8))[0]
    cols = np.arange(32) + 0.5
    shift = (right.sum(axis=0) @ cols / right.sum()) - (base.sum(axis=0) @ cols / base.sum())
    assert shift > 0.5
    est, _ = R.extract_aupose(R.render_face(_frame(Rz=1.2))[0])
    assert est[19] == pytest.approx(1.2, abs=0.05)


# ---------------------------------------------------------------- files

def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(5).uniform(0, 1, (12, 10))
    R.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n10 12\n255\n") and len(raw) == 13 + 120
    back = R.read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    R.write_pgm(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == raw
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        R.read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(raw[:-5])
    with pytest.raises(ValueError):
        R.read_pgm(tmp_path / "d.pgm")


def test_frame_directory(tmp_path):
    imgs = np.random.default_rng(6).uniform(0, 1, (3, 8, 8))
    R.write_frames(tmp_path / "out", imgs, fps=25)
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["frame_00000.pgm", "frame_00001.pgm", "frame_00002.pgm", "index.txt", "renderer_spec.txt"]
    back, fps = R.read_frames(tmp_path / "out")
    assert fps == 25 and back.shape == (3, 8, 8)
    coef_text = (tmp_path / "out" / "renderer_spec.txt").read_text()
    assert "brow_lift = 0.12" in coef_text and "invertible = AU01" in coef_text


# ---------------------------------------------------------------- networks

CFG8 = SynthConfig(res=8, g_widths=(6,), d_widths=(5,))


def _zero(store, names):
    for n in names:
        store.set(n, np.zeros_like(store[n]))


def test_zero_weight_networks():
    store, G, D = build_networks(CFG8)
    _zero(store, store.names())
    x = np.random.default_rng(0).uniform(0, 1, (2, 8, 8))
    np.testing.assert_array_equal(G(x, x), 0.5)
    np.testing.assert_array_equal(D(x, x, x, x), 0.5)


def test_networks_deterministic_and_in_range():
    store, G, D = build_networks(CFG8, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    x, p = rng.uniform(0, 1, (2, 3, 8, 8))
    out = G(x, p)
    assert out.shape == (3, 8, 8) and np.all((out > 0) & (out < 1))
    np.testing.assert_array_equal(out, G(x, p))
    s = D(x, p, x, out)
    assert s.shape == (3,) and np.all((s > 0) & (s < 1))


def test_resolution_mismatch():
    _, G, D = build_networks(CFG8)
    with pytest.raises(ValueError):
        G(np.zeros((8, 8)), np.zeros((6, 6)))
    with pytest.raises(ValueError):
        D(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((4, 4)))


def test_synth_config_validation():
    for bad in (dict(res=31), dict(lr=0), dict(steps=0), dict(w_l1=-1), dict(g_widths=())):
        with pytest.raises(ValueError):
            SynthConfig(**bad)
    assert SynthConfig().lr == 2e-4 and (SynthConfig().w_adv, SynthConfig().w_l1, SynthConfig().w_perc) == (1, 1, 1)


def test_generator_and_discriminator_gradients():
    rng = np.random.default_rng(3)
    store, G, D = build_networks(CFG8, rng)
    X, Y, P = rng.uniform(0, 1, (3, 2, 3, 8, 8))
    feats = PerceptualFeatures(1)

    # previous frames are given, so the check covers G, D and every loss term;
    # the training rollout deliberately detaches them
    def loss(tape):
        fake = G(X, P, tape)
        terms = _terms(D, X, Y, fake, CFG8, feats, tape)
        return terms.total

    report = check_gradients(loss, store, 120, rng)
    assert len(report.coords) >= 100
    assert report.max_rel_err < 1e-4


# ---------------------------------------------------------------- losses

def test_gan_loss_worked_examples():
    real = np.random.default_rng(4).uniform(0, 1, (3, 8, 8))
    t = gan_losses(np.full(3, 0.5), np.full(3, 0.5), real, real, CFG8)
    assert float(t.l_gan) == pytest.approx(2 * math.log(0.5), abs=1e-12)
    assert float(t.l_gan) == pytest.approx(-1.3863, abs=1e-4)
    assert float(t.l1) == 0.0 and float(t.perc) == 0.0
    near = gan_losses(np.full(3, 1 - 1e-9), np.full(3, 1e-9), real, real, CFG8)
    assert -1e-8 < float(near.l_gan) < 0


def test_gan_losses_reject_bad_probabilities():
    img = np.zeros((1, 8, 8))
    with pytest.raises(ValueError):
        gan_losses(np.array([1.0]), np.array([0.5]), img, img, CFG8)
    with pytest.raises(ValueError):
        gan_losses(np.array([0.5]), np.array([0.0]), img, img, CFG8)


def test_gan_losses_match_hand_expansion():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = rng.integers(1, 5)
        d_real, d_fake = rng.uniform(0.01, 0.99, (2, n))
        fake, real = rng.uniform(0, 1, (2, n, 8, 8))
        t = gan_losses(d_real, d_fake, fake, real, CFG8)
        l_gan, l1 = oracles.gan_terms(d_real.tolist(), d_fake.tolist(), fake.tolist(), real.tolist())
        assert float(t.l_gan) == pytest.approx(l_gan, abs=1e-12)
        assert float(t.l1) == pytest.approx(l1, abs=1e-12)
        assert float(t.total) == pytest.approx(l_gan + l1 + float(t.perc), abs=1e-12)
        assert float(t.d_loss) == pytest.approx(-l_gan, abs=1e-12)
        g_adv = -np.mean(np.log(d_fake))
        assert float(t.g_loss) == pytest.approx(g_adv + l1 + float(t.perc), abs=1e-12)


def test_logit_form_agrees():
    rng = np.random.default_rng(6)
    zr, zf = rng.normal(0, 2, (2, 4))
    fake, real = rng.uniform(0, 1, (2, 4, 8, 8))
    sig = lambda z: 1 / (1 + np.exp(-z))
    a = gan_losses(sig(zr), sig(zf), fake, real, CFG8)
    b = gan_losses_from_logits(zr, zf, fake, real, CFG8)
    for k in ("l_gan", "l1", "perc", "total", "g_loss", "d_loss"):
        assert float(getattr(a, k)) == pytest.approx(float(getattr(b, k)), abs=1e-12)


def test_perceptual_distance():
    f = PerceptualFeatures(3)
    rng = np.random.default_rng(7)
    a, b = rng.uniform(0, 1, (2, 2, 16, 16))
    assert float(f.distance(a, a)) == 0.0
    assert float(f.distance(a, b)) > 0
    f1, f2 = f(a)
    assert f1.shape == (2, 4, 8, 8) and f2.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(PerceptualFeatures(3).w1, f.w1)


def test_discriminator_step_descends():
    rng = np.random.default_rng(8)
    store, G, D = build_networks(CFG8, rng)
    X, Y = rng.uniform(0, 1, (2, 3, 4, 8, 8))
    fake = rollout(G, X)
    feats = PerceptualFeatures(1)
    before = float(_terms(D, X, Y, fake, CFG8, feats).d_loss)
    tape = Tape()
    tape.backward(_terms(D, X, Y, fake, CFG8, feats, tape).d_loss)
    adam_step(store, 1e-5, names=D.names())
    after = float(_terms(D, X, Y, fake, CFG8, feats).d_loss)
    assert after <= before


# ---------------------------------------------------------------- training

def _seqs(n=6, length=4):
    convs = [F.synth_conversation(s, length * 3) for s in range(n)]
    seqs = [w for c in convs for w in F.window(c.speaker, length, length)]
    return seqs, F.train_stats(convs)


def test_prepare_sequences_validation():
    seqs, stats = _seqs(2)
    X, Y = prepare_sequences(seqs, stats, 16)
    assert X.shape == Y.shape == (6, 4, 16, 16)
    with pytest.raises(ValueError):
        prepare_sequences([], stats, 16)
    with pytest.raises(ValueError):
        prepare_sequences([np.zeros((1, 20))], stats, 16)


def test_rollout_feeds_previous_output():
    store, G, _ = build_networks(CFG8, np.random.default_rng(9))
    X = np.random.default_rng(10).uniform(0, 1, (2, 3, 8, 8))
    out = rollout(G, X)
    np.testing.assert_array_equal(out[:, 0], G(X[:, 0], np.zeros((2, 8, 8))))
    np.testing.assert_array_equal(out[:, 2], G(X[:, 2], out[:, 1]))


def test_train_synth_deterministic():
    seqs, stats = _seqs()
    cfg = SynthConfig(res=16, g_widths=(8,), d_widths=(8,), steps=6, eval_every=2, batch=2)
    a = train_synth(seqs, stats, cfg)
    b = train_synth(seqs, stats, cfg)
    assert a.history.rows == b.history.rows and len(a.history.rows) == 3
    assert a.store.checksum() == b.store.checksum()
    with pytest.raises(ValueError):
        train_synth([], stats, cfg)
