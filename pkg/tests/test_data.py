import logging
import math

import numpy as np
import pytest

from alignlab import data
from alignlab.errors import ConfigError, DataError


def small_spec(**kw):
    kw.setdefault("vocab", "abcd ")
    kw.setdefault("frames_per_char", 4)
    kw.setdefault("d_feat", 16)
    kw.setdefault("seed", 0)
    return data.SynthSpec(**kw)


# --- spec validation and codebook ---------------------------------------------


def test_spec_field_validation():
    with pytest.raises(ConfigError):
        small_spec(frames_per_char=0)
    with pytest.raises(ConfigError):
        small_spec(noise_std=-0.1)
    with pytest.raises(ConfigError):
        small_spec(vocab="aab")
    with pytest.raises(ConfigError):
        data.SynthSpec(vocab="ab", frames_per_char=1, d_feat=1)  # 2 chars, dim 1


def test_spec_separability_guard():
    # min codebook distance is sqrt(2*dim) ~ 11.31; 4*0.4*8 = 12.8 breaks it
    with pytest.raises(ConfigError, match="noise_std"):
        small_spec(noise_std=0.4)
    small_spec(noise_std=0.3)  # still fine


def test_codebook_geometry():
    spec = small_spec()
    protos = data.codebook(spec)
    dim = spec.dim
    mat = np.stack([protos[c] for c in spec.vocab])
    norms = np.linalg.norm(mat, axis=1)
    assert np.allclose(norms, math.sqrt(dim), atol=1e-9)  # unit RMS rows
    for i in range(len(mat)):
        for j in range(i + 1, len(mat)):
            d = np.linalg.norm(mat[i] - mat[j])
            assert d == pytest.approx(math.sqrt(2 * dim), abs=1e-9)


def test_codebook_deterministic():
    a = data.codebook(small_spec())
    b = data.codebook(small_spec())
    for c in "abcd ":
        assert a[c].tobytes() == b[c].tobytes()


# --- synthesis ------------------------------------------------------------------


def test_synth_length_law():
    spec = small_spec()
    s = data.synth_utterance(spec, "abc", seed=1)
    assert s.feats.shape == (3 * spec.frames_per_char, spec.d_feat)
    assert s.transcript == "abc"


def test_synth_noiseless_ignores_seed():
    spec = small_spec(noise_std=0.0)
    a = data.synth_utterance(spec, "ab", seed=1)
    b = data.synth_utterance(spec, "ab", seed=2)
    assert np.array_equal(a.feats, b.feats)


def test_synth_same_seed_bit_identical():
    spec = small_spec()
    a = data.synth_utterance(spec, "dcba", seed=77)
    b = data.synth_utterance(spec, "dcba", seed=77)
    assert a.feats.tobytes() == b.feats.tobytes()


def test_synth_different_seeds_differ():
    spec = small_spec()
    a = data.synth_utterance(spec, "ab", seed=1)
    b = data.synth_utterance(spec, "ab", seed=2)
    assert not np.array_equal(a.feats, b.feats)


def test_synth_blocks_match_prototypes():
    spec = small_spec(noise_std=0.01)
    protos = data.codebook(spec)
    s = data.synth_utterance(spec, "ca", seed=5)
    fpc = spec.frames_per_char
    for i, c in enumerate("ca"):
        block = s.feats[i * fpc:(i + 1) * fpc].reshape(-1)
        assert np.abs(block - protos[c]).max() < 0.1


def test_synth_rejects_oov_and_empty():
    spec = small_spec()
    with pytest.raises(DataError, match="'z'"):
        data.synth_utterance(spec, "az", seed=0)
    with pytest.raises(DataError):
        data.synth_utterance(spec, "", seed=0)


# --- perturbations --------------------------------------------------------------


def test_noise_perturbation_changes_features():
    clean = small_spec()
    noisy = data.spec_for_split(clean, "test-noisy", noisy_sigma=0.5)
    a = data.synth_utterance(clean, "ab", seed=3)
    b = data.synth_utterance(noisy, "ab", seed=3)
    delta = np.linalg.norm(a.feats - b.feats)
    assert delta > 0
    # deviation should scale like sigma * sqrt(n)
    assert delta == pytest.approx(0.5 * math.sqrt(a.feats.size), rel=0.35)


def test_accent_perturbation_is_exact_fixed_warp():
    clean = small_spec()
    accent = data.spec_for_split(clean, "test-accent", accent_strength=0.35)
    w = data.accent_warp(accent)
    a = data.synth_utterance(clean, "abcd", seed=9)
    b = data.synth_utterance(accent, "abcd", seed=9)
    assert b.feats.tobytes() == (a.feats @ w.T).tobytes()
    assert abs(np.linalg.det(w)) > 1e-6  # invertible
    assert data.accent_warp(accent).tobytes() == w.tobytes()  # same matrix always


def test_clean_split_matches_train_conditions():
    spec = small_spec()
    clean = data.spec_for_split(spec, "test-clean")
    assert clean.noise_std == spec.noise_std
    assert clean.perturbation.kind == "none"
    train = data.spec_for_split(spec, "train")
    assert train == clean
    with pytest.raises(ConfigError):
        data.spec_for_split(spec, "dev")


def test_perturbation_validation():
    with pytest.raises(ConfigError):
        data.Perturbation("noise", sigma=0.0)
    with pytest.raises(ConfigError):
        data.Perturbation("accent", strength=1.5)
    with pytest.raises(ConfigError):
        data.Perturbation("reverb")


# --- manifests -------------------------------------------------------------------


def test_build_manifests_structure_and_hygiene():
    spec = data.SynthSpec(seed=4)
    m = data.build_manifests(spec, {"train": 40, "test": 10})
    assert set(m) == set(data.SPLITS)
    assert len(m["train"]) == 40 and all(len(m[s]) == 10 for s in data.SPLITS[1:])
    train_texts = {e.transcript for e in m["train"]}
    test_texts = {e.transcript for e in m["test-clean"]}
    assert not train_texts & test_texts  # disjoint pools
    all_ids = [e.utt_id for ms in m.values() for e in ms]
    assert len(all_ids) == len(set(all_ids))
    # matched test conditions: same transcripts and generation seeds
    for s in ("test-noisy", "test-accent"):
        assert [(e.transcript, e.seed) for e in m[s]] == \
               [(e.transcript, e.seed) for e in m["test-clean"]]


def test_build_manifests_weight_cycle():
    spec = data.SynthSpec(seed=4)
    m = data.build_manifests(spec, {"train": 8, "test": 2}, weights=(1, 1, 1, 3))
    got = [e.weight for e in m["train"]]
    assert got == [1, 1, 1, 3, 1, 1, 1, 3]
    assert all(e.weight == 1 for e in m["test-clean"])


def test_build_manifests_validation():
    spec = data.SynthSpec(seed=0)
    with pytest.raises(ConfigError):
        data.build_manifests(spec, {"train": 0, "test": 5})
    with pytest.raises(ConfigError):
        data.build_manifests(spec, {"train": 5})
    with pytest.raises(ConfigError):
        data.build_manifests(spec, {"train": 5, "test": 5}, weights=(0,))


def test_build_manifests_capacity_error():
    spec = data.SynthSpec(vocab="ab ", seed=0)
    with pytest.raises(ConfigError, match="too small"):
        data.build_manifests(spec, {"train": 50, "test": 10},
                             min_words=1, max_words=1,
                             min_word_len=1, max_word_len=1)


def test_manifest_round_trip(tmp_path):
    spec = data.SynthSpec(seed=1)
    entries = data.build_manifests(spec, {"train": 6, "test": 2})["train"]
    path = tmp_path / "train.tsv"
    data.write_manifest(path, entries)
    assert data.read_manifest(path) == entries


def test_manifest_read_validation(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("u1\thello\t3\n")
    with pytest.raises(DataError, match="5 columns"):
        data.read_manifest(path)
    path.write_text("u1\thello\tx\t1\ttrain\n")
    with pytest.raises(DataError, match="integer"):
        data.read_manifest(path)
    path.write_text("u1\thello\t3\t0\ttrain\n")
    with pytest.raises(DataError, match="weight"):
        data.read_manifest(path)
    path.write_text("u1\ta\t3\t1\ttrain\nu1\tb\t4\t1\ttrain\n")
    with pytest.raises(DataError, match="duplicate"):
        data.read_manifest(path)


# --- batching --------------------------------------------------------------------


def test_greedy_pack_oracle():
    assert data.greedy_pack([4, 4, 3], cap=10) == [[0, 1], [2]]
    assert data.greedy_pack([12], cap=10) == [[0]]          # oversize singleton
    assert data.greedy_pack([4, 12, 3], cap=10) == [[0], [1], [2]]
    assert data.greedy_pack([5, 5, 5], cap=10) == [[0, 1], [2]]
    assert data.greedy_pack([], cap=10) == []


def test_pack_batches_cap_and_conservation(caplog):
    b = data.DynamicBatcher(cap=256, frames_per_char=4, d_feat=16)
    entries = [data.ManifestEntry(f"u{i}", "ab", i, w, "train")
               for i, w in enumerate([1, 3, 1, 2])]
    batches = data.pack_batches(b, entries, epoch_seed=5)
    flat = [e.utt_id for batch in batches for e in batch]
    assert len(flat) == 1 + 3 + 1 + 2
    assert sorted(flat) == sorted(["u0"] + ["u1"] * 3 + ["u2"] + ["u3"] * 2)
    for batch in batches:
        assert sum(b.sample_points(e) for e in batch) <= b.cap


def test_pack_batches_deterministic_per_seed():
    b = data.DynamicBatcher(cap=512)
    entries = [data.ManifestEntry(f"u{i}", "abc", i, 1, "train")
               for i in range(20)]
    one = data.pack_batches(b, entries, epoch_seed=[3, 1, 0])
    two = data.pack_batches(b, entries, epoch_seed=[3, 1, 0])
    other = data.pack_batches(b, entries, epoch_seed=[3, 2, 0])
    as_ids = lambda bs: [[e.utt_id for e in batch] for batch in bs]
    assert as_ids(one) == as_ids(two)
    assert as_ids(one) != as_ids(other)


def test_pack_batches_oversize_warns(caplog):
    b = data.DynamicBatcher(cap=100, frames_per_char=4, d_feat=16)
    entries = [data.ManifestEntry("big", "abcdefgh", 0, 1, "train")]
    with caplog.at_level(logging.WARNING, logger="alignlab.data"):
        batches = data.pack_batches(b, entries, epoch_seed=0)
    assert batches == [[entries[0]]]
    assert any("exceeds batch cap" in r.message for r in caplog.records)


def test_pack_batches_empty_manifest():
    with pytest.raises(ConfigError):
        data.pack_batches(data.DynamicBatcher(), [], epoch_seed=0)


def test_pack_batches_random_manifold_properties():
    rng = np.random.default_rng(0)
    for trial in range(100):
        cap = int(rng.integers(64, 2048))
        b = data.DynamicBatcher(cap=cap, frames_per_char=4, d_feat=16)
        n = int(rng.integers(1, 40))
        entries = [
            data.ManifestEntry(f"u{i}", "a" * int(rng.integers(1, 12)),
                               i, int(rng.integers(1, 4)), "train")
            for i in range(n)
        ]
        batches = data.pack_batches(b, entries, epoch_seed=trial)
        assert sum(len(batch) for batch in batches) == \
               sum(e.weight for e in entries)
        for batch in batches:
            total = sum(b.sample_points(e) for e in batch)
            if total > cap:
                assert len(batch) == 1  # documented oversize singleton


def test_sample_points_accounts_for_padding():
    b = data.DynamicBatcher(cap=4000, frames_per_char=4, d_feat=16,
                            pad_multiple=3)
    e = data.ManifestEntry("u", "abc", 0, 1, "train")   # 12 frames -> pad 12
    assert b.sample_points(e) == 12 * 16
    e2 = data.ManifestEntry("u", "abcd", 0, 1, "train")  # 16 frames -> pad 18
    assert b.sample_points(e2) == 18 * 16


# --- feature dump ----------------------------------------------------------------


def test_feature_dump_round_trip(tmp_path):
    feats = np.random.default_rng(0).standard_normal((9, 5))
    path = tmp_path / "utt.feat"
    data.write_features(path, feats)
    back = data.read_features(path)
    assert back.tobytes() == feats.tobytes()


def test_feature_dump_rejects_foreign(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"nope")
    with pytest.raises(DataError):
        data.read_features(path)
