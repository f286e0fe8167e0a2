import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from ferformer.config import Config
from ferformer.data import Dataset, DatasetManifest, Sample, augment, decode_image, grayscale, hflip, load_split, \
    random_erase, sample_rng, synth_generate, synth_splits, write_synthetic
from ferformer.errors import IngestionError


def _write_root(tmp_path, rows, size=112):
    DatasetManifest(("happy", "sad")).write(tmp_path)
    split = tmp_path / "train"
    split.mkdir()
    lines = ["id,filename,class_name"]
    for i, cname in enumerate(rows):
        pix = np.full((size, size, 3), 40 * i, dtype=np.uint8)
        Image.fromarray(pix).save(split / f"{i}.png")
        lines.append(f"s{i},{i}.png,{cname}")
    (split / "labels.csv").write_text("\n".join(lines) + "\n")


def test_folder_loads_in_row_order(tmp_path):
    _write_root(tmp_path, ["sad", "happy", "sad"])
    ds = load_split(tmp_path, "train")
    assert ds.images.shape == (3, 3, 112, 112)
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.ids == ["s0", "s1", "s2"]
    np.testing.assert_allclose(ds.images[1], 40 / 255, rtol=1e-6)


def test_unknown_class_names_the_row(tmp_path):
    _write_root(tmp_path, ["happy", "joyful"])
    with pytest.raises(IngestionError, match=r"row 3 \(s1\).*joyful"):
        load_split(tmp_path, "train")


def test_missing_manifest(tmp_path):
    with pytest.raises(IngestionError):
        load_split(tmp_path, "train")


def test_large_image_is_resized(tmp_path):
    Image.fromarray(np.zeros((224, 224, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    assert decode_image(tmp_path / "a.png").shape == (3, 112, 112)


def test_jpeg_rejected(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "a.jpg")
    with pytest.raises(ValueError):
        decode_image(tmp_path / "a.jpg")


images = st.integers(0, 2 ** 31 - 1).map(lambda s: np.random.default_rng(s).random((3, 16, 16), dtype=np.float32))


@given(images)
def test_grayscale_channels_equal_and_idempotent(img):
    g = grayscale(img)
    assert np.array_equal(g[0], g[1]) and np.array_equal(g[1], g[2])
    np.testing.assert_allclose(grayscale(g), g, atol=1e-6)


@given(images)
def test_flip_is_involution(img):
    np.testing.assert_array_equal(hflip(hflip(img)), img)


@given(images, st.integers(0, 1000))
def test_erase_area_bounds(img, seed):
    out = random_erase(img, np.random.default_rng(seed), 0.02, 0.2)
    changed = np.any(out != img, axis=0).sum()
    # rounding each side adds at most half a row and half a column
    assert changed <= 0.2 * 256 + 0.5 * (16 + 16) + 0.25
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_augment_keeps_label_and_is_reproducible():
    img = np.random.default_rng(0).random((3, 16, 16), dtype=np.float32)
    s = Sample(img, 3, "x")
    a = augment(s, sample_rng(1, 2, "x"))
    b = augment(s, sample_rng(1, 2, "x"))
    assert a.label == 3 and a.id == "x"
    np.testing.assert_array_equal(a.image, b.image)


def test_augment_off_is_identity():
    img = np.random.default_rng(0).random((3, 16, 16), dtype=np.float32)
    cfg = Config(p_grayscale=0, p_flip=0, p_erase=0)
    np.testing.assert_array_equal(augment(Sample(img, 0, "a"), sample_rng(0, 0, "a"), cfg).image, img)


def test_sample_streams_differ_by_id_and_epoch():
    a, b, c = (sample_rng(0, e, i).random() for e, i in [(0, "a"), (0, "b"), (1, "a")])
    assert len({a, b, c}) == 3


def test_synthetic_is_deterministic_and_balanced():
    a = synth_generate(7, 8, 7, 0.1, 0.3)
    b = synth_generate(7, 8, 7, 0.1, 0.3)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [8] * 7
    assert len(set(a.ids)) == 56
    assert not np.array_equal(a.images, synth_generate(8, 8, 7, 0.1, 0.3).images)


def test_synthetic_classes_are_distinct():
    ds = synth_generate(0, 1, 7)
    flat = ds.images.reshape(7, -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    assert d[~np.eye(7, dtype=bool)].min() > 1.0


def test_test_split_is_clean_and_disjoint():
    cfg = Config(per_class=4, test_per_class=3, ambiguity_rate=1.0, noise_level=0.0)
    train, test = synth_splits(cfg, 0)
    assert len(test) == 21 and not set(train.ids) & set(test.ids)
    # no ambiguity and no noise: every test image is its class pattern
    for k in range(7):
        rows = test.images[test.labels == k]
        np.testing.assert_array_equal(rows[0], rows[-1])


def test_written_synthetic_round_trips(tmp_path):
    cfg = Config(per_class=2, test_per_class=1, num_classes=3)
    write_synthetic(tmp_path, cfg)
    ds = load_split(tmp_path, "train")
    ref, _ = synth_splits(cfg)
    assert ds.ids == ref.ids and ds.labels.tolist() == ref.labels.tolist()
    assert np.max(np.abs(ds.images - ref.images)) <= 0.5 / 255 + 1e-6
