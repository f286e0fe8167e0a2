import numpy as np
import pytest

from ferformer import tensor as T
from ferformer.config import RAFDB_CLASSES
from ferformer.errors import ConfigError, InputError, VocabularyError
from ferformer.gradcheck import grad_check
from ferformer.tensor import Tensor
from ferformer.text import TextEncoder, Vocabulary, build_labels


def make_encoder(classes=RAFDB_CLASSES, seed=0, **kw):
    with T.precision("f64"):
        return TextEncoder(Vocabulary.for_classes(classes), 16, np.random.default_rng(seed), dim=16, heads=2, **kw)


def test_template_strings():
    assert build_labels(["angry"], "passive").texts == ("an angry expression is shown in the image",)
    assert build_labels(["happy"], "active").texts == ("this is a face image of happy",)
    assert build_labels(["sad"], "phrase").texts == ("a face image of sad",)
    assert build_labels(["fear"], "word").texts == ("fear",)
    assert build_labels(["fear"], "none").texts == ()


@pytest.mark.parametrize("names", [[], ["happy", "happy"]])
def test_bad_class_lists(names):
    with pytest.raises(ConfigError):
        build_labels(names, "phrase")


def test_active_sentence_tokenizes_to_seven_ids():
    vocab = Vocabulary.for_classes(RAFDB_CLASSES)
    ids = vocab.tokenize("this is a face image of happy")
    assert len(ids) == 7 + 2
    assert ids[0] == vocab.index["<bos>"] and ids[-1] == vocab.index["<eos>"]
    assert len(set(ids[1:-1])) == 7


def test_unknown_word_is_rejected():
    with pytest.raises(VocabularyError, match="joyful"):
        Vocabulary.for_classes(RAFDB_CLASSES).tokenize("a face image of joyful")


def test_features_are_unit_norm():
    enc = make_encoder()
    for mode in ("word", "phrase", "active", "passive"):
        with T.precision("f64"):
            feats = enc(build_labels(RAFDB_CLASSES, mode)).T.data
        assert feats.shape == (7, 16)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)


def test_changing_one_label_changes_one_row():
    names = list(RAFDB_CLASSES)
    alt = names[:3] + ["sad"] + names[3:]  # vocabulary covers both sets
    enc = make_encoder(alt)
    with T.precision("f64"):
        a = enc(build_labels(names, "phrase")).T.data
        swapped = list(names)
        swapped[4], swapped[0] = swapped[0], "happy"
        b = enc([f"a face image of {n}" for n in swapped]).T.data
    changed = np.where(np.abs(a - b).max(axis=1) > 1e-12)[0]
    assert list(changed) == [0, 4]


def test_lengths_are_grouped_consistently():
    enc = make_encoder()
    with T.precision("f64"):
        mixed = enc(["happy", "a face image of sad"]).T.data
        single = enc(["a face image of sad"]).T.data
    np.testing.assert_allclose(mixed[1], single[0], atol=1e-14)


def test_too_long_sequence_rejected():
    enc = make_encoder(max_len=4)
    with pytest.raises(InputError):
        enc(["a face image of sad"])


def test_text_gradient():
    enc = make_encoder()
    w = Tensor(np.random.default_rng(3).standard_normal((7, 16)))
    labels = build_labels(RAFDB_CLASSES, "passive")

    def f(*_):
        return T.tsum(T.mul(enc(labels).T, w))

    with T.precision("f64"):
        rep = grad_check(f, enc.parameters(), max_coords=6)
    assert rep.max_rel_err < 1e-4
