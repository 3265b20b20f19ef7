"""Run configuration: a strict YAML schema with documented defaults.

Defaults carry the reference optimizer values (lr 5e-5, warmup 2000,
accumulation 14, ...). The CLI layers a small "toy recipe" on top so default
runs finish in minutes on a CPU; --paper-hparams strips that layer. Every
unknown key is an error, and the fully-resolved config is echoed into the
run directory.
"""

from __future__ import annotations

import copy

import yaml

from . import data, nn, training
from .errors import ConfigError

SCHEMA = {
    "seed": 0,
    "model": {
        "encoder": {
            "variant": "supervised-analog",
            "out_dim": None,
            "n_layers": 2,
            "n_heads": 4,
            "subsampling_factor": 4,
        },
        "projector": {
            "kind": "transformer",
            "n_layers": None,
            "n_heads": 4,
            "window_length": 1,
            "n_queries": 1,
        },
        "lm": {
            "embed_dim": 64,
            "n_layers": 2,
            "n_heads": 4,
            "chat_template": {"prefix": "", "suffix": ""},
            # Text-only pretraining of the decoder body on the task format
            # (random strings, never corpus transcripts) before stage 1 —
            # the stand-in for starting from a pretrained LLM. The body is
            # trained here once and stays frozen through all stages.
            "warm_start": {
                "steps": 6000,
                "lr": 1.0e-2,
                "batch_size": 8,
                "warmup_steps": 30,
                "noise_std": 0.4,
            },
        },
        "lora": {"rank": 8, "alpha": 32.0},
        "prompt": "transcribe:",
        "order": ["speech", "prompt", "transcript"],
    },
    "stages": {
        "schedule": "staged",          # staged | all-unfrozen
        "epochs": [1, 2, 2],
    },
    "optim": {
        "lr_peak": 5.0e-5,
        "betas": [0.9, 0.99],
        "eps": 1.0e-6,
        "weight_decay": 0.01,
        "warmup_steps": 2000,
        "clip_value": 5.0,
        "accum_steps": 14,
        "lr_restart_per_stage": True,
    },
    "data": {
        "vocab": data.DEFAULT_VOCAB,
        "frames_per_char": 4,
        "d_feat": 16,
        "noise_std": 0.05,
        "train_size": 200,
        "test_size": 30,
        "weights": [6, 6, 6, 9],
        "min_words": 1,
        "max_words": 2,
        "min_word_len": 2,
        "max_word_len": 4,
        "noisy_sigma": 0.5,
        "accent_strength": 0.35,
        "batch_cap": 450,
        "manifest_dir": None,          # null -> synthesize in memory
    },
    "eval": {
        "test_sets": ["test-clean", "test-noisy", "test-accent"],
        "punctuation": None,           # null -> all ASCII punctuation
        "max_new_tokens": 32,
    },
}

# Overrides that make default runs desk-sized; removed by --paper-hparams.
TOY_RECIPE = {
    "optim": {
        "lr_peak": 3.0e-3,
        "warmup_steps": 50,
        "accum_steps": 1,
        "lr_restart_per_stage": False,
    },
}

SCHEDULE_NAMES = ("staged", "all-unfrozen")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key]:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} expects a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, paper_hparams: bool = False,
                overrides: dict | None = None) -> dict:
    """Resolve schema defaults -> toy recipe -> config file -> overrides."""
    cfg = copy.deepcopy(SCHEMA)
    if not paper_hparams:
        cfg = _merge(cfg, TOY_RECIPE)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["stages"]["schedule"] not in SCHEDULE_NAMES:
        raise ConfigError(
            f"stages.schedule must be one of {SCHEDULE_NAMES}, "
            f"got {cfg['stages']['schedule']!r}")
    epochs = cfg["stages"]["epochs"]
    if not epochs or any(int(e) < 1 for e in epochs):
        raise ConfigError("stages.epochs must be positive integers")
    sets = cfg["eval"]["test_sets"]
    unknown = set(sets) - set(data.SPLITS[1:])
    if unknown:
        raise ConfigError(f"unknown eval test_sets {sorted(unknown)}")
    if not sets:
        raise ConfigError("eval.test_sets must not be empty")


def echo_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg, f, sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def model_chars(cfg: dict) -> list[str]:
    """LM vocabulary: synthesis chars plus whatever the prompt/template need."""
    tpl = cfg["model"]["lm"]["chat_template"]
    chars = set(cfg["data"]["vocab"]) | set(cfg["model"]["prompt"])
    chars |= set(tpl["prefix"]) | set(tpl["suffix"])
    return sorted(chars)


def build_synth_spec(cfg: dict) -> data.SynthSpec:
    d = cfg["data"]
    return data.SynthSpec(vocab=d["vocab"],
                          frames_per_char=int(d["frames_per_char"]),
                          d_feat=int(d["d_feat"]),
                          noise_std=float(d["noise_std"]),
                          seed=int(cfg["seed"]))


def spec_for_split(cfg: dict, split: str) -> data.SynthSpec:
    d = cfg["data"]
    return data.spec_for_split(build_synth_spec(cfg), split,
                               noisy_sigma=float(d["noisy_sigma"]),
                               accent_strength=float(d["accent_strength"]))


def build_model(cfg: dict) -> nn.PipelineModel:
    m = cfg["model"]
    enc = nn.EncoderConfig(
        variant=m["encoder"]["variant"],
        out_dim=m["encoder"]["out_dim"],
        n_layers=int(m["encoder"]["n_layers"]),
        n_heads=int(m["encoder"]["n_heads"]),
        subsampling_factor=int(m["encoder"]["subsampling_factor"]))
    proj = nn.ProjectorConfig(
        kind=m["projector"]["kind"],
        n_layers=(None if m["projector"]["n_layers"] is None
                  else int(m["projector"]["n_layers"])),
        n_heads=int(m["projector"]["n_heads"]),
        window_length=int(m["projector"]["window_length"]),
        n_queries=int(m["projector"]["n_queries"]))
    tpl = m["lm"]["chat_template"]
    template = None
    if tpl["prefix"] or tpl["suffix"]:
        template = nn.ChatTemplate(prefix=tpl["prefix"], suffix=tpl["suffix"])
    lm = nn.DecoderLmConfig(chars=model_chars(cfg),
                            embed_dim=int(m["lm"]["embed_dim"]),
                            n_layers=int(m["lm"]["n_layers"]),
                            n_heads=int(m["lm"]["n_heads"]),
                            chat_template=template)
    lora = nn.LoraConfig(rank=int(m["lora"]["rank"]),
                         alpha=float(m["lora"]["alpha"]))
    return nn.PipelineModel(enc, proj, lm, lora,
                            d_feat=int(cfg["data"]["d_feat"]),
                            seed=int(cfg["seed"]))


def build_settings(cfg: dict) -> training.OptimSettings:
    o = cfg["optim"]
    return training.OptimSettings(
        lr_peak=float(o["lr_peak"]),
        betas=tuple(float(b) for b in o["betas"]),
        eps=float(o["eps"]),
        weight_decay=float(o["weight_decay"]),
        warmup_steps=int(o["warmup_steps"]),
        clip_value=float(o["clip_value"]),
        accum_steps=int(o["accum_steps"]),
        lr_restart_per_stage=bool(o["lr_restart_per_stage"]))


def build_warm_start(cfg: dict) -> training.WarmStart | None:
    """Body pretraining settings; word shape mirrors the corpus generator."""
    w = cfg["model"]["lm"]["warm_start"]
    if int(w["steps"]) == 0:
        return None
    d = cfg["data"]
    return training.WarmStart(
        steps=int(w["steps"]), lr=float(w["lr"]),
        batch_size=int(w["batch_size"]),
        warmup_steps=int(w["warmup_steps"]),
        noise_std=float(w["noise_std"]),
        min_words=int(d["min_words"]), max_words=int(d["max_words"]),
        min_word_len=int(d["min_word_len"]),
        max_word_len=int(d["max_word_len"]))


def build_schedule(cfg: dict, name: str | None = None) -> list[training.Stage]:
    name = name or cfg["stages"]["schedule"]
    epochs = [int(e) for e in cfg["stages"]["epochs"]]
    if name == "staged":
        if len(epochs) != 3:
            raise ConfigError(
                f"staged schedule needs 3 epoch counts, got {epochs}")
        return training.default_schedule(tuple(epochs))
    if name == "all-unfrozen":
        return training.all_unfrozen_schedule(sum(epochs))
    raise ConfigError(f"unknown schedule {name!r}")


def build_batcher(cfg: dict) -> data.DynamicBatcher:
    d = cfg["data"]
    return data.DynamicBatcher(cap=int(d["batch_cap"]),
                               frames_per_char=int(d["frames_per_char"]),
                               d_feat=int(d["d_feat"]),
                               pad_multiple=int(
                                   cfg["model"]["encoder"]["subsampling_factor"]))


def build_manifests(cfg: dict) -> dict[str, list[data.ManifestEntry]]:
    d = cfg["data"]
    return data.build_manifests(
        build_synth_spec(cfg),
        {"train": int(d["train_size"]), "test": int(d["test_size"])},
        weights=tuple(int(w) for w in d["weights"]),
        min_words=int(d["min_words"]), max_words=int(d["max_words"]),
        min_word_len=int(d["min_word_len"]),
        max_word_len=int(d["max_word_len"]))


def punctuation_set(cfg: dict) -> str:
    p = cfg["eval"]["punctuation"]
    import string
    return string.punctuation if p is None else str(p)
