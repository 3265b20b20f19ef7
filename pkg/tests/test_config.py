import pytest
import yaml

from alignlab import config, data, nn, training
from alignlab.errors import ConfigError


def test_defaults_resolve_and_validate():
    cfg = config.load_config(None)
    assert cfg["stages"]["schedule"] == "staged"
    assert cfg["stages"]["epochs"] == [1, 2, 2]
    assert cfg["data"]["vocab"] == data.DEFAULT_VOCAB


def test_paper_hparams_strips_toy_overlay():
    cfg = config.load_config(None, paper_hparams=True)
    o = cfg["optim"]
    assert o["lr_peak"] == 5.0e-5
    assert o["betas"] == [0.9, 0.99]
    assert o["eps"] == 1.0e-6
    assert o["weight_decay"] == 0.01
    assert o["warmup_steps"] == 2000
    assert o["clip_value"] == 5.0
    assert o["accum_steps"] == 14
    assert o["lr_restart_per_stage"] is True


def test_toy_overlay_touches_only_optim():
    toy = config.load_config(None)
    ref = config.load_config(None, paper_hparams=True)
    assert toy["optim"] != ref["optim"]
    for key in ("model", "data", "stages", "eval", "seed"):
        assert toy[key] == ref[key]


def test_unknown_keys_error_with_dotted_path():
    with pytest.raises(ConfigError, match="optim.lr"):
        config.load_config(None, overrides={"optim": {"lr": 1e-3}})
    with pytest.raises(ConfigError, match="modle"):
        config.load_config(None, overrides={"modle": {}})


def test_scalar_cannot_become_mapping():
    with pytest.raises(ConfigError, match="expects a mapping"):
        config.load_config(None, overrides={"optim": 3})


def test_file_overrides_toy_and_cli_overrides_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("optim:\n  lr_peak: 0.5\nseed: 3\n")
    cfg = config.load_config(p)
    assert cfg["optim"]["lr_peak"] == 0.5
    assert cfg["seed"] == 3
    cfg = config.load_config(p, overrides={"seed": 9})
    assert cfg["seed"] == 9
    assert cfg["optim"]["lr_peak"] == 0.5


def test_missing_or_malformed_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config.load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim: [unclosed\n")
    with pytest.raises(ConfigError):
        config.load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError, match="mapping at top level"):
        config.load_config(scalar)


def test_echo_round_trips(tmp_path):
    cfg = config.load_config(None, overrides={"seed": 5})
    out = tmp_path / "echo.yaml"
    config.echo_config(cfg, out)
    again = yaml.safe_load(out.read_text())
    assert again == cfg
    # And the echo itself resolves cleanly as a config file.
    assert config.load_config(out) == cfg


def test_validation_rejects_bad_values():
    with pytest.raises(ConfigError, match="schedule"):
        config.load_config(None, overrides={"stages": {"schedule": "fast"}})
    with pytest.raises(ConfigError, match="epochs"):
        config.load_config(None, overrides={"stages": {"epochs": [0, 1, 1]}})
    with pytest.raises(ConfigError, match="test_sets"):
        config.load_config(None,
                           overrides={"eval": {"test_sets": ["test-weird"]}})
    with pytest.raises(ConfigError, match="test_sets"):
        config.load_config(None, overrides={"eval": {"test_sets": []}})


def test_model_chars_cover_prompt_and_template():
    cfg = config.load_config(None, overrides={
        "model": {"prompt": "GO:", "lm": {"chat_template": {"prefix": "<",
                                                            "suffix": ">"}}}})
    chars = config.model_chars(cfg)
    assert chars == sorted(set(chars))
    for c in "GO:<>":
        assert c in chars
    for c in data.DEFAULT_VOCAB:
        assert c in chars


def test_build_schedule_shapes():
    cfg = config.load_config(None)
    staged = config.build_schedule(cfg)
    assert [s.epochs for s in staged] == [1, 2, 2]
    alt = config.build_schedule(cfg, "all-unfrozen")
    assert len(alt) == 1 and alt[0].epochs == 5
    with pytest.raises(ConfigError):
        config.build_schedule(cfg, "mixed")
    bad = config.load_config(None)
    bad["stages"]["epochs"] = [1, 2]
    with pytest.raises(ConfigError, match="3 epoch counts"):
        config.build_schedule(bad)


def test_build_warm_start_mirrors_data_shape():
    cfg = config.load_config(None, overrides={
        "data": {"min_words": 2, "max_words": 3, "min_word_len": 1,
                 "max_word_len": 2}})
    warm = config.build_warm_start(cfg)
    assert isinstance(warm, training.WarmStart)
    assert (warm.min_words, warm.max_words) == (2, 3)
    assert (warm.min_word_len, warm.max_word_len) == (1, 2)
    off = config.load_config(None, overrides={
        "model": {"lm": {"warm_start": {"steps": 0}}}})
    assert config.build_warm_start(off) is None


def test_build_model_matches_config_dimensions():
    cfg = config.load_config(None, overrides={
        "model": {"lm": {"embed_dim": 32}, "projector": {"kind": "qformer"}}})
    model = config.build_model(cfg)
    assert isinstance(model, nn.PipelineModel)
    assert model.lm.cfg.embed_dim == 32
    assert isinstance(model.projector, nn.QformerProjector)


def test_build_batcher_pads_to_subsampling():
    cfg = config.load_config(None, overrides={
        "model": {"encoder": {"subsampling_factor": 3}}})
    assert config.build_batcher(cfg).pad_multiple == 3


def test_spec_for_split_perturbations():
    cfg = config.load_config(None)
    clean = config.spec_for_split(cfg, "test-clean")
    noisy = config.spec_for_split(cfg, "test-noisy")
    accent = config.spec_for_split(cfg, "test-accent")
    assert clean.perturbation.kind == "none"
    assert noisy.perturbation.kind == "noise"
    assert noisy.perturbation.sigma == cfg["data"]["noisy_sigma"]
    assert accent.perturbation.kind == "accent"


def test_punctuation_set_default_and_custom():
    cfg = config.load_config(None)
    assert "!" in config.punctuation_set(cfg)
    cfg = config.load_config(None, overrides={"eval": {"punctuation": ".,"}})
    assert config.punctuation_set(cfg) == ".,"
