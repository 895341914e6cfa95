import pytest

from zssbir import config as runcfg
from zssbir.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = runcfg.load()
    path = tmp_path / "run.cfg"
    path.write_text(runcfg.dump(cfg))
    again = runcfg.load(path)
    assert runcfg.dump(again) == runcfg.dump(cfg)
    assert runcfg.fingerprint(again) == runcfg.fingerprint(cfg)


def test_file_parsing_and_override_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 4   # trailing\nks = 5, 50\nencoder_widths = 16,8\nvariant = no-iaf\n")
    cfg = runcfg.load(path, {"epochs": "7"})
    assert cfg.epochs == 7 and cfg.ks == (5, 50) and cfg.encoder_widths == (16, 8)
    assert runcfg.model_config(cfg).T == 0
    assert cfg.explicit == {"epochs", "ks", "encoder_widths", "variant"}


def test_unknown_and_duplicate_keys_listed_together(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("bogus = 1\nepochs = 2\nepochs = 3\nnot a pair\n")
    with pytest.raises(ConfigError) as info:
        runcfg.load(path)
    msg = str(info.value)
    assert "bogus" in msg and "duplicate" in msg and ":4:" in msg


def test_validation_is_exhaustive():
    with pytest.raises(ConfigError) as info:
        runcfg.load(None, {"epochs": "-1", "batch_size": "0", "c": "0", "variant": "nope"})
    msg = str(info.value)
    for word in ("epochs", "batch_size", "c ", "variant"):
        assert word in msg


def test_bad_value_types():
    with pytest.raises(ConfigError):
        runcfg.load(None, {"epochs": "three"})
    with pytest.raises(ConfigError):
        runcfg.load(None, {"plots": "maybe"})


def test_synthetic_width_must_match_model():
    with pytest.raises(ConfigError, match="synthetic data width"):
        runcfg.load(None, {"synth_dim": "16"})
    cfg = runcfg.load(None, {"synth_dim": "16", "feature_dim": "16", "attr_dim": "16"})
    assert runcfg.synth_spec(cfg).dim == 16


def test_fingerprint_ignores_output_keys_only():
    a = runcfg.load(None, {"out": "x", "workers": "3", "plots": "false"})
    b = runcfg.load()
    assert runcfg.fingerprint(a) == runcfg.fingerprint(b)
    assert runcfg.fingerprint(runcfg.load(None, {"c": "3"})) != runcfg.fingerprint(b)


def test_non_desk_preset_fills_unset_keys():
    cfg = runcfg.load(None, {"preset": "gradcheck", "data": "x/manifest.txt"})
    mcfg = runcfg.model_config(cfg)
    assert (mcfg.feature_dim, mcfg.attr_dim, mcfg.latent_dim) == (16, 8, 4)
    cfg = runcfg.load(None, {"preset": "gradcheck", "latent_dim": "2", "data": "x/manifest.txt"})
    assert runcfg.model_config(cfg).latent_dim == 2


def test_checkpoint_record_omits_output_location():
    rec = runcfg.checkpoint_record(runcfg.load(None, {"out": "somewhere", "epochs": "3"}))
    assert "somewhere" not in rec["run_config"]
    assert rec["explicit"] == ["epochs"]
