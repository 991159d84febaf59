import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirm.envs import (BadMagic, CountMismatch, TruncatedFile, base_dataset, binarize_labels, colorize, load_env,
                       load_idx, make_colored_env, pc_schedule, read_idx, save_env, synth_sem,
                       synthetic_pattern_fallback, write_idx)
from cirm.oracles import ols_solve


def label_bytes(values, magic=0x00000801):
    return struct.pack(">II", magic, len(values)) + bytes(values)


def test_idx_label_fixture(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(label_bytes([1, 7, 0]))
    assert read_idx(p).tolist() == [1, 7, 0]


def test_idx_empty_payload(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(label_bytes([]))
    assert read_idx(p).shape == (0,)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(label_bytes([1], magic=0))
    with pytest.raises(BadMagic):
        read_idx(p)


def test_idx_truncated_and_count_mismatch(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(label_bytes([1, 2, 3])[:-1])
    with pytest.raises(TruncatedFile):
        read_idx(p)
    imgs, labs = tmp_path / "i", tmp_path / "l"
    write_idx(imgs, np.zeros((2, 28, 28)))
    labs.write_bytes(label_bytes([1, 2, 3]))
    with pytest.raises(CountMismatch):
        load_idx(imgs, labs)


def test_idx_roundtrip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", images)
    with gzip.open(tmp_path / "l.gz", "wb") as fh:
        fh.write(label_bytes(labels.tolist()))
    x, y = load_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "l.gz")
    assert np.array_equal(x, images / 255.0)
    assert y.tolist() == [3, 1, 4, 1]
    assert x.min() >= 0 and x.max() <= 1


def test_idx_header_is_big_endian(tmp_path):
    write_idx(tmp_path / "f", np.zeros((2, 3, 5), dtype=np.uint8))
    raw = (tmp_path / "f").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">III", raw[4:16]) == (2, 3, 5)


def test_fallback_is_deterministic_and_balanced():
    a, la = synthetic_pattern_fallback(50, seed=3)
    b, lb = synthetic_pattern_fallback(50, seed=3)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    _, l10 = synthetic_pattern_fallback(10, seed=0)
    assert sorted(l10.tolist()) == list(range(10))
    assert a.shape == (50, 28, 28) and a.min() >= 0 and a.max() <= 1


def test_binarize_rules():
    assert binarize_labels(np.arange(10)).tolist() == [0, 1] * 5
    # letters a..e -> a, c, e map to 0
    assert binarize_labels(np.array([1, 2, 3, 4, 5]), "emnist_letters").tolist() == [0, 1, 0, 1, 0]
    with pytest.raises(ValueError):
        binarize_labels(np.arange(3), "nope")


def small_base(n=200, seed=0):
    return synthetic_pattern_fallback(n, seed=seed)


def test_no_noise_color_is_label():
    images, classes = small_base()
    env = make_colored_env(images, classes, 0.0, 0.0, "b01", n=100, seed=1)
    assert np.array_equal(env.color, env.labels)


def test_empirical_flip_rates():
    n = 30_000
    images = np.zeros((n, 2, 2))
    classes = np.zeros(n, dtype=int)  # preliminary label 0 everywhere
    env = make_colored_env(images, classes, 0.25, 0.1, "b01", n=n, seed=5)
    assert abs(env.labels.mean() - 0.25) < 0.01
    assert abs(np.mean(env.color != env.labels) - 0.1) < 0.01


def test_b01_b11_keep_grayscale_content():
    images, classes = small_base(50)
    a = make_colored_env(images, classes, 0.25, 0.2, "b01", n=50, seed=2)
    b = make_colored_env(images, classes, 0.25, 0.2, "b11", n=50, seed=2)
    fa = a.features.reshape(50, 2, 28, 28)
    fb = b.features.reshape(50, 2, 28, 28)
    fg = fa.max(axis=1) >= 0.1  # foreground strokes
    assert np.allclose(fa.max(axis=1)[fg], fb.max(axis=1)[fg])
    assert np.all(fb.max(axis=1)[~fg] == 1.0)  # b11 paints the background
    assert fa.min() >= 0 and fa.max() <= 1 and fb.min() >= 0 and fb.max() <= 1


def test_colorize_red_green():
    img = np.full((2, 2, 2), 0.5)
    out = colorize(img, np.array([0, 1]), "b01")
    assert np.all(out[0, 1] == 0.5) and np.all(out[0, 0] == 0)
    assert np.all(out[1, 0] == 0.5) and np.all(out[1, 1] == 0)


def test_colored_env_errors_and_shape():
    images, classes = small_base(20)
    with pytest.raises(ValueError):
        make_colored_env(images, classes, 0.25, 0.1, n=21)
    with pytest.raises(ValueError):
        make_colored_env(images, classes, 1.5, 0.1)
    env = make_colored_env(images, classes, 0.25, 0.1, n=20)
    assert env.features.shape == (20, 2 * 28 * 28)
    assert set(np.unique(env.labels)) <= {0, 1}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_colored_env_is_pure_function_of_seed(seed, pf, pc):
    images, classes = small_base(30)
    a = make_colored_env(images, classes, pf, pc, "b11", n=25, seed=seed)
    b = make_colored_env(images, classes, pf, pc, "b11", n=25, seed=seed)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_pc_schedule():
    assert pc_schedule(2) == [0.2, 0.1]
    s = pc_schedule(6)
    assert len(s) == 6 and s[0] == 0.2 and s[-1] == pytest.approx(0.1)


# -- SEM -----------------------------------------------------------------------------

def test_sem_noise_free_link():
    env = synth_sem(100, 1e-8, seed=0, noise_free_y=True)
    assert env.features.shape == (100, 8) and env.labels.shape == (100, 4)
    assert np.array_equal(env.labels, env.features[:, :4])


def test_sem_invariant_regressor_is_identity_on_x1():
    env = synth_sem(5000, 0.1, seed=1)
    W = np.vstack([np.eye(4), np.zeros((4, 4))])
    resid = env.labels - env.features @ W
    assert abs(resid.std() - 0.1) < 0.01


def test_pooled_ols_has_nonzero_x2_block():
    envs = [synth_sem(2000, s, seed=i) for i, s in enumerate((0.1, 1.5))]
    X = np.vstack([e.features for e in envs])
    Y = np.vstack([e.labels for e in envs])
    W = ols_solve(X, Y)
    assert np.linalg.norm(W[4:]) > 0.3
    # spurious pull grows with the noise of y given x1
    W_big = ols_solve(synth_sem(4000, 3.0, seed=9).features, synth_sem(4000, 3.0, seed=9).labels)
    assert np.abs(np.diag(W_big[4:])).mean() > 0.8


def test_sem_errors():
    with pytest.raises(ValueError):
        synth_sem(10, 0.0)
    with pytest.raises(ValueError):
        synth_sem(0, 1.0)


def test_env_cache_roundtrip(tmp_path):
    images, classes = small_base(20)
    env = make_colored_env(images, classes, 0.25, 0.1, n=10, seed=4)
    save_env(env, tmp_path, "e")
    back = load_env(tmp_path, "e")
    assert np.array_equal(back.features, env.features) and back.meta == env.meta


def test_test_and_consumed_envs_refuse_training():
    images, classes = small_base(20)
    env = make_colored_env(images, classes, 0.25, 0.9, n=10)
    env.is_test = True
    with pytest.raises(PermissionError):
        env.training_arrays()
    env.is_test, env.consumed = False, True
    with pytest.raises(PermissionError):
        env.training_arrays()


def test_base_dataset_falls_back_without_files(tmp_path):
    x, y, src = base_dataset(tmp_path, 20, seed=0)
    assert src == "fallback" and len(x) == 20
    write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 28, 28)))
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(label_bytes([0, 1, 2]))
    x, y, src = base_dataset(tmp_path, 20, seed=0)
    assert src == "idx" and len(x) == 3


def test_fallback_glyphs_are_learnable():
    from cirm import autodiff as ad
    from cirm.autodiff import grad
    from cirm.methods.common import minibatches
    from cirm.nets import forward, init_mlp, predict_logits
    from cirm.params import Adam

    x, y = synthetic_pattern_fallback(6000, seed=0)
    xt, yt = synthetic_pattern_fallback(1000, seed=1)
    x, xt = x.reshape(len(x), -1), xt.reshape(len(xt), -1)
    rng = np.random.default_rng(0)
    ps = init_mlp(784, (100,), 10, rng)
    opt = Adam(1e-3)
    for _ in range(12):
        for idx in minibatches(len(x), 64, rng):
            lv = ps.leaves()
            loss = ad.softmax_cross_entropy(forward(lv, x[idx]), y[idx])
            gs = grad(loss, [lv[k] for k in ps.names()])
            opt.step(ps, {k: g.data for k, g in zip(ps.names(), gs)})
    assert np.mean(predict_logits(ps, xt).argmax(axis=1) == yt) > 0.9
