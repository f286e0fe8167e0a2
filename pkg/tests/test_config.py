import pytest
from hypothesis import given
from hypothesis import strategies as st

from ferformer.config import Config, load_config, parse_lines
from ferformer.errors import ConfigError


def test_defaults():
    cfg = Config()
    assert (cfg.embed_dim, cfg.depth, cfg.batch_size, cfg.lr0, cfg.epochs) == (256, 16, 16, 1e-4, 90)
    assert cfg.patch_sizes == (2, 4, 6, 12) and cfg.hdss


@pytest.mark.parametrize("change", [dict(lr0=0.0), dict(batch_size=0), dict(patch_sizes=(5,)),
                                    dict(text_mode="haiku"), dict(head="both"), dict(heads=3),
                                    dict(precision="f16")])
def test_invalid_configs(change):
    with pytest.raises(ConfigError):
        Config(**change).validate()


@given(st.integers(1, 64), st.floats(1e-6, 1.0), st.booleans(), st.sampled_from(["word", "phrase", "none"]),
       st.sets(st.sampled_from([1, 2, 3, 4, 6, 12]), min_size=1))
def test_lines_round_trip(bs, lr, aug, mode, scales):
    cfg = Config(batch_size=bs, lr0=lr, augment=aug, text_mode=mode, patch_sizes=tuple(sorted(scales)))
    assert parse_lines(cfg.to_lines())[0] == cfg


def test_unknown_key_strict_and_lenient():
    with pytest.raises(ConfigError):
        parse_lines(["depht=3"])
    cfg, extra = parse_lines(["depth=3", "note=x"], strict=False)
    assert cfg.depth == 3 and extra == {"note": "x"}


def test_bad_value():
    with pytest.raises(ConfigError):
        parse_lines(["depth=deep"])


def test_load_file(tmp_path):
    (tmp_path / "c.txt").write_text("# tiny\nembed_dim = 32\npatch_sizes=6,12\n")
    cfg = load_config(tmp_path / "c.txt")
    assert cfg.embed_dim == 32 and cfg.patch_sizes == (6, 12)


def test_diff_lists_changed_fields():
    assert Config().diff(Config(depth=2)) == {"depth": (16, 2)}
