import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from signglyph.datapipe import (
    LABEL_SPACES,
    AugmentPolicy,
    AugmentParams,
    DatasetManifest,
    ImageCache,
    ManifestEntry,
    Sample,
    apply_augment,
    augment,
    epoch_seed,
    load_image,
    make_batches,
    pad_and_resize,
    pad_to_square,
    prepare_manifest,
    read_manifest,
    resize_bilinear,
    sample_augment_params,
    save_png,
    subtract_background,
    write_manifest,
)
from signglyph.errors import (
    ConfigError,
    CorruptImageError,
    ImageNotFoundError,
    ManifestError,
    ShapeError,
    UnsupportedFormatError,
)

FIXTURE_2X2 = np.array([[[255, 0, 0], [0, 255, 0]],
                        [[0, 0, 255], [17, 128, 254]]], dtype=np.uint8)


# decoding ---------------------------------------------------------------------

def test_png_golden_fixture(tmp_path):
    p = tmp_path / "px.png"
    Image.fromarray(FIXTURE_2X2, "RGB").save(p)
    out = load_image(p)
    assert out.dtype == np.uint8 and out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out, FIXTURE_2X2)


def test_grayscale_expands_to_three_channels(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.array([[0, 77], [200, 255]], dtype=np.uint8), "L").save(p)
    out = load_image(p)
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out[..., 0], [[0, 77], [200, 255]])
    assert (out[..., 0] == out[..., 1]).all() and (out[..., 1] == out[..., 2]).all()


def test_truncated_png_is_corrupt(tmp_path):
    p = tmp_path / "full.png"
    Image.fromarray(np.full((64, 64, 3), 90, np.uint8)).save(p)
    q = tmp_path / "cut.png"
    q.write_bytes(p.read_bytes()[:40])
    with pytest.raises(CorruptImageError, match="cut.png"):
        load_image(q)


def test_missing_and_unsupported(tmp_path):
    with pytest.raises(ImageNotFoundError, match="nope.png"):
        load_image(tmp_path / "nope.png")
    p = tmp_path / "x.gif"
    Image.fromarray(FIXTURE_2X2).save(p, format="GIF")
    with pytest.raises(UnsupportedFormatError, match="x.gif"):
        load_image(p)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image at all")
    with pytest.raises(CorruptImageError):
        load_image(junk)


def test_jpeg_matches_reference_decoder(tmp_path):
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(0)
    base = rng.integers(0, 256, (3, 4, 3)).astype(np.uint8)
    img = np.kron(base, np.ones((16, 16, 1), np.uint8))
    p = tmp_path / "a.jpg"
    Image.fromarray(img).save(p, format="JPEG", quality=90)
    ours = load_image(p).astype(int)
    ref = cv2.imdecode(np.frombuffer(p.read_bytes(), np.uint8), cv2.IMREAD_COLOR)[..., ::-1].astype(int)
    assert ours.shape == ref.shape
    assert np.abs(ours - ref).max() <= 2


def test_save_png_round_trip(tmp_path):
    p = tmp_path / "sub" / "o.png"
    save_png(FIXTURE_2X2, p)
    np.testing.assert_array_equal(load_image(p), FIXTURE_2X2)


# background subtraction -------------------------------------------------------

def test_identical_frames_black_out():
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    for t in (0, 30, 255):
        assert not subtract_background(img, img, t).any()


def test_threshold_extremes():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (6, 6, 3)).astype(np.uint8)
    img[0, 0] = 0
    bg = rng.integers(0, 256, (6, 6, 3)).astype(np.uint8)
    assert not subtract_background(img, bg, 255).any()
    out = subtract_background(img, np.zeros_like(img), 0)
    np.testing.assert_array_equal(out, img)


def test_hand_computed_mask():
    bg = np.full((4, 4, 3), 100, np.uint8)
    # max-channel |diff| per pixel, laid out row by row
    diffs = [[0, 29, 30, 31],
             [-29, -30, -31, 155],
             [5, 45, -100, 30],
             [31, 1, -1, 29]]
    channel = [[0, 1, 2, 0], [1, 2, 0, 1], [2, 0, 1, 2], [0, 1, 2, 0]]
    img = bg.copy().astype(int)
    for i in range(4):
        for j in range(4):
            img[i, j, channel[i][j]] += diffs[i][j]
            # a smaller difference on another channel must not matter
            img[i, j, (channel[i][j] + 1) % 3] += 3
    img = img.astype(np.uint8)
    kept = [[0, 0, 0, 1],
            [0, 0, 1, 1],
            [0, 1, 1, 0],
            [1, 0, 0, 0]]
    out = subtract_background(img, bg, 30)
    for i in range(4):
        for j in range(4):
            if kept[i][j]:
                np.testing.assert_array_equal(out[i, j], img[i, j])
            else:
                np.testing.assert_array_equal(out[i, j], [0, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 255))
def test_background_subtraction_idempotent(seed, t):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (5, 5, 3)).astype(np.uint8)
    bg = rng.integers(0, 256, (5, 5, 3)).astype(np.uint8)
    once = subtract_background(img, bg, t)
    np.testing.assert_array_equal(subtract_background(once, bg, t), once)


def test_background_errors():
    with pytest.raises(ShapeError):
        subtract_background(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(ConfigError):
        subtract_background(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2, 3), np.uint8), 256)


# pad and resize ---------------------------------------------------------------

def test_target_size_is_pure_scaling():
    img = np.random.default_rng(3).integers(0, 256, (200, 200, 3)).astype(np.uint8)
    out = pad_and_resize(img)
    assert out.shape == (3, 200, 200) and out.dtype == np.float32
    np.testing.assert_array_equal(out, (img.astype(np.float32) / 255).transpose(2, 0, 1))


def test_double_size_halves():
    img = np.random.default_rng(4).integers(0, 256, (400, 400, 3)).astype(np.uint8)
    out = pad_and_resize(img)
    assert out.shape == (3, 200, 200)
    # half-pixel centres make a 2x downsample an exact 2x2 box average
    box = img.astype(np.float64).reshape(200, 2, 200, 2, 3).mean(axis=(1, 3)) / 255
    np.testing.assert_allclose(out, box.transpose(2, 0, 1), atol=1e-6)


def test_non_square_padding():
    img = np.full((100, 150, 3), 255, np.uint8)
    sq = pad_to_square(img)
    assert sq.shape == (150, 150, 3)
    assert not sq[:25].any() and not sq[125:].any() and sq[25:125].min() == 255
    out = pad_and_resize(img)
    for corner in (out[:, 0, 0], out[:, 0, -1], out[:, -1, 0], out[:, -1, -1]):
        assert not corner.any()
    assert out[:, 100, 100].min() == 1.0


def test_odd_padding_goes_bottom_right():
    sq = pad_to_square(np.ones((2, 5, 1)))
    assert sq[:, :, 0].tolist() == [[0] * 5, [1] * 5, [1] * 5, [0] * 5, [0] * 5]
    sq = pad_to_square(np.ones((4, 1, 1)))
    assert sq[:, :, 0].tolist()[0] == [0, 1, 0, 0]


def test_resize_constant_stays_constant():
    arr = np.full((7, 13, 3), 0.3, np.float32)
    np.testing.assert_allclose(resize_bilinear(arr, 20, 5), 0.3, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**31))
def test_pad_and_resize_geometry_and_range(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3)).astype(np.uint8)
    out = pad_and_resize(img, side=24)
    assert out.shape == (3, 24, 24)
    assert out.min() >= 0 and out.max() <= 1


# augmentation -----------------------------------------------------------------

def random_sample(seed=5, side=32):
    return Sample(np.random.default_rng(seed).random((3, side, side)).astype(np.float32), 3, "x.png")


def test_disabled_policy_is_identity():
    s = random_sample()
    out = augment(s, AugmentPolicy(enabled=False), np.random.default_rng(0))
    assert out.pixels.tobytes() == s.pixels.tobytes() and out.label == 3


def test_pure_flip_is_involution():
    s = random_sample()
    pol = AugmentPolicy(max_rotation_deg=0, max_translate_frac=0, hflip_prob=1.0)
    rng = np.random.default_rng(0)
    once = augment(s, pol, rng)
    np.testing.assert_array_equal(once.pixels, s.pixels[:, :, ::-1])
    twice = augment(once, pol, rng)
    assert twice.pixels.tobytes() == s.pixels.tobytes()


def test_sampled_parameters_within_bounds():
    pol = AugmentPolicy()
    rng = np.random.default_rng(0)
    draws = [sample_augment_params(pol, rng, 200) for _ in range(10_000)]
    assert max(abs(d.angle_deg) for d in draws) <= 20
    assert max(max(abs(d.dx), abs(d.dy)) for d in draws) <= 40
    rate = sum(d.flip for d in draws) / len(draws)
    assert 0.48 <= rate <= 0.52
    # the bounds are actually explored
    assert max(abs(d.angle_deg) for d in draws) > 19.5
    assert max(abs(d.dx) for d in draws) > 39


def test_integer_shift_moves_pixels():
    x = np.zeros((1, 9, 9), np.float32)
    x[0, 4, 4] = 1
    out = apply_augment(x, AugmentParams(0.0, 2.0, -1.0, False))
    assert out[0, 3, 6] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)


def test_quarter_turn_is_counter_clockwise():
    x = np.zeros((1, 5, 5), np.float32)
    x[0, 2, 4] = 1  # right of centre
    out = apply_augment(x, AugmentParams(90.0, 0.0, 0.0, False))
    # counter-clockwise on screen moves it to above the centre
    assert out[0, 0, 2] == pytest.approx(1.0, abs=1e-6)


def test_out_of_frame_is_black():
    x = np.ones((3, 10, 10), np.float32)
    out = apply_augment(x, AugmentParams(0.0, 4.0, 0.0, False))
    assert not out[:, :, :4].any()
    assert out[:, :, 4:].min() == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_preserves_label_geometry_range(seed):
    s = random_sample(seed % 1000, side=24)
    out = augment(s, AugmentPolicy(), np.random.default_rng(seed))
    assert out.label == s.label and out.pixels.shape == s.pixels.shape
    assert out.pixels.dtype == np.float32
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_policy_validation():
    for bad in (dict(max_rotation_deg=-1), dict(max_translate_frac=1.0), dict(hflip_prob=1.5)):
        with pytest.raises(ConfigError):
            AugmentPolicy(**bad).validate()


# manifests --------------------------------------------------------------------

def touch_tree(root, classes, per_class, side=4):
    px = np.zeros((side, side, 3), np.uint8)
    for c in classes:
        for k in range(per_class):
            px[0, 0, 0] = k
            save_png(px, root / c / f"{k:03d}.png")


def test_35_classes_of_25_split_counts(tmp_path):
    labels = LABEL_SPACES["letters"] + LABEL_SPACES["digits"]
    assert len(labels) == 35
    touch_tree(tmp_path, labels, 25, side=1)
    man = prepare_manifest(tmp_path, labels, 0.5, seed=0)
    assert len(man.entries) == 875
    for c in man.counts().values():
        assert c == {"train": 13, "val": 12}


def test_split_determinism(tmp_path):
    touch_tree(tmp_path, ["a", "b"], 10)
    m1 = prepare_manifest(tmp_path, seed=7)
    m2 = prepare_manifest(tmp_path, seed=7)
    m3 = prepare_manifest(tmp_path, seed=8)
    assert m1.entries == m2.entries
    assert m1.entries != m3.entries
    assert m1.counts() == m3.counts()


def test_zero_val_fraction_then_fit_refuses(tmp_path):
    touch_tree(tmp_path, ["a", "b"], 3)
    man = prepare_manifest(tmp_path, val_fraction=0.0)
    assert {e.split for e in man.entries} == {"train"}
    with pytest.raises(ConfigError, match="no val"):
        man.check_trainable()


def test_unknown_dirs_warn_and_empty_class_errors(tmp_path):
    touch_tree(tmp_path, ["a", "b", "extra"], 2)
    man = prepare_manifest(tmp_path, ["a", "b"])
    assert len(man.warnings) == 1 and "extra" in man.warnings[0]
    (tmp_path / "c").mkdir()
    with pytest.raises(ConfigError, match="'c'"):
        prepare_manifest(tmp_path, ["a", "c"])
    with pytest.raises(ImageNotFoundError):
        prepare_manifest(tmp_path / "missing")


def test_manifest_round_trip_and_format(tmp_path):
    touch_tree(tmp_path, ["x", "y"], 3)
    man = prepare_manifest(tmp_path)
    write_manifest(man, tmp_path / "m.tsv")
    raw = (tmp_path / "m.tsv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "#signglyph-manifest v1"
    assert lines[1] == "labels: x,y"
    assert lines[2].count("\t") == 2
    back = read_manifest(tmp_path / "m.tsv")
    assert back.labels == man.labels and back.entries == man.entries
    assert back.resolve(back.entries[0]).is_file()


def test_manifest_validation(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest(("a",), [ManifestEntry("p", "b", "train")])
    with pytest.raises(ManifestError):
        DatasetManifest(("a",), [ManifestEntry("p", "a", "test")])
    with pytest.raises(ManifestError):
        DatasetManifest(("a",), [ManifestEntry("p", "a", "train"), ManifestEntry("p", "a", "val")])
    p = tmp_path / "bad.tsv"
    p.write_text("#signglyph-manifest v1\nlabels: a\nonly\tone\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(p)
    p.write_text("hello\n")
    with pytest.raises(ManifestError, match=":1:"):
        read_manifest(p)


def test_label_spaces():
    assert len(LABEL_SPACES["letters"]) == 26
    assert LABEL_SPACES["digits"] == tuple("123456789")
    assert LABEL_SPACES["digits0"] == tuple("0123456789")


# batching ---------------------------------------------------------------------

@pytest.fixture
def small_manifest(tmp_path):
    rng = np.random.default_rng(9)
    for c in ("a", "b"):
        for k in range(5):
            save_png(rng.integers(0, 256, (12, 12, 3)).astype(np.uint8), tmp_path / c / f"{k}.png")
    man = prepare_manifest(tmp_path, val_fraction=0.4)
    return man


def test_partial_final_batch(small_manifest):
    man = small_manifest
    for e in man.entries:
        e.split = "train"
    sizes = [len(b.labels) for b in make_batches(man, "train", 4, seed=1, side=12)]
    assert sizes == [4, 4, 2]


def test_validation_batches_never_change(small_manifest):
    pol = AugmentPolicy()
    a = list(make_batches(small_manifest, "val", 3, seed=1, policy=pol, side=12))
    b = list(make_batches(small_manifest, "val", 3, seed=2, policy=pol, side=12))
    assert [x.paths for x in a] == [x.paths for x in b]
    assert all(x.x.tobytes() == y.x.tobytes() for x, y in zip(a, b))
    direct = np.stack([pad_and_resize(load_image(small_manifest.resolve(e)), 12)
                       for e in small_manifest.split("val")])
    np.testing.assert_array_equal(np.concatenate([x.x for x in a]), direct)


def test_epoch_covers_split_once(small_manifest):
    for e in range(3):
        batches = list(make_batches(small_manifest, "train", 4, seed=epoch_seed(0, e),
                                    policy=AugmentPolicy(), side=12, loader=ImageCache()))
        seen = Counter(p for b in batches for p in b.paths)
        expect = Counter(str(small_manifest.resolve(x)) for x in small_manifest.split("train"))
        assert seen == expect
        labels = Counter(int(l) for b in batches for l in b.labels)
        assert sum(labels.values()) == 6


def test_batches_deterministic_under_seed(small_manifest):
    pol = AugmentPolicy()
    a = list(make_batches(small_manifest, "train", 4, seed=5, policy=pol, side=12))
    b = list(make_batches(small_manifest, "train", 4, seed=5, policy=pol, side=12))
    c = list(make_batches(small_manifest, "train", 4, seed=6, policy=pol, side=12))
    assert all(x.x.tobytes() == y.x.tobytes() and x.paths == y.paths for x, y in zip(a, b))
    assert any(x.x.tobytes() != y.x.tobytes() for x, y in zip(a, c))


def test_unreadable_image_fails_fast(small_manifest):
    victim = small_manifest.resolve(small_manifest.split("train")[0])
    victim.write_bytes(b"garbage")
    with pytest.raises(CorruptImageError, match=victim.name):
        list(make_batches(small_manifest, "train", 2, side=12))


def test_batch_errors(small_manifest):
    with pytest.raises(ConfigError):
        next(make_batches(small_manifest, "train", 0))
    for e in small_manifest.entries:
        e.split = "train"
    with pytest.raises(ConfigError):
        next(make_batches(small_manifest, "val", 2))


def test_epoch_seeds_differ():
    seeds = {epoch_seed(0, e) for e in range(50)}
    assert len(seeds) == 50
    assert epoch_seed(3, 1) == epoch_seed(3, 1) != epoch_seed(4, 1)
