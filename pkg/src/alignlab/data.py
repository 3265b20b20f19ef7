"""Deterministic synthetic speech corpus plus manifest and batching tools.

Each character owns a fixed prototype feature block drawn from an orthogonal
random codebook, so utterance features are separable by construction and a
converged model can reach near-zero CER. Two perturbed evaluation conditions
exist: additive-noise features and a fixed invertible channel warp.
"""

from __future__ import annotations

import functools
import logging
import math
import string
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DEFAULT_VOCAB = string.ascii_lowercase + string.digits + " "
SPLITS = ("train", "test-clean", "test-noisy", "test-accent")


@dataclass(frozen=True)
class Perturbation:
    kind: str = "none"           # none | noise | accent
    sigma: float = 0.0           # extra additive noise std (noise kind)
    strength: float = 0.35       # channel-warp mixing factor (accent kind)

    def __post_init__(self):
        if self.kind not in ("none", "noise", "accent"):
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "noise" and self.sigma <= 0:
            raise ConfigError("noise perturbation needs sigma > 0")
        if self.kind == "accent" and not 0 < self.strength < 1:
            raise ConfigError("accent strength must lie in (0, 1)")


@dataclass(frozen=True)
class SynthSpec:
    vocab: str = DEFAULT_VOCAB
    frames_per_char: int = 4
    d_feat: int = 16
    noise_std: float = 0.05
    perturbation: Perturbation = Perturbation()
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_char < 1:
            raise ConfigError("frames_per_char must be >= 1")
        if self.d_feat < 1:
            raise ConfigError("d_feat must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not self.vocab or len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocab must be non-empty with unique characters")
        dim = self.frames_per_char * self.d_feat
        if len(self.vocab) > dim:
            raise ConfigError(
                f"vocab of {len(self.vocab)} chars needs prototype dim >= vocab "
                f"size, got frames_per_char*d_feat = {dim}")
        # Separability: prototypes must stay distinguishable under the
        # generation noise, otherwise clean CER has no reason to approach 0.
        dists = _codebook_min_distance(self.vocab, self.frames_per_char,
                                       self.d_feat, self.seed)
        if dists < 4.0 * self.noise_std * math.sqrt(dim):
            raise ConfigError(
                f"noise_std {self.noise_std} too large: codebook min distance "
                f"{dists:.3f} < 4*noise_std*sqrt(dim) = "
                f"{4 * self.noise_std * math.sqrt(dim):.3f}")

    @property
    def dim(self) -> int:
        return self.frames_per_char * self.d_feat


@functools.lru_cache(maxsize=16)
def _codebook(vocab: str, frames_per_char: int, d_feat: int, seed: int):
    """Per-char prototype rows: orthogonal directions scaled to unit RMS."""
    dim = frames_per_char * d_feat
    rng = np.random.default_rng([seed, 0xC0DE])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    protos = q[:, :len(vocab)].T * math.sqrt(dim)
    protos.flags.writeable = False
    return {c: protos[i] for i, c in enumerate(vocab)}


def _codebook_min_distance(vocab, frames_per_char, d_feat, seed) -> float:
    protos = _codebook(vocab, frames_per_char, d_feat, seed)
    mat = np.stack(list(protos.values()))
    if len(mat) == 1:
        return math.inf
    d2 = ((mat[:, None, :] - mat[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return math.sqrt(d2.min())


def codebook(spec: SynthSpec) -> dict[str, np.ndarray]:
    return _codebook(spec.vocab, spec.frames_per_char, spec.d_feat, spec.seed)


@functools.lru_cache(maxsize=16)
def _accent_warp(d_feat: int, strength: float, seed: int) -> np.ndarray:
    """Fixed invertible channel mix: W = (1-s)*I + s*Q with Q orthogonal."""
    rng = np.random.default_rng([seed, 0xACCE])
    q, _ = np.linalg.qr(rng.standard_normal((d_feat, d_feat)))
    w = (1.0 - strength) * np.eye(d_feat) + strength * q
    if abs(np.linalg.det(w)) < 1e-9:
        raise ConfigError("accent warp is numerically singular; change seed")
    w.flags.writeable = False
    return w


def accent_warp(spec: SynthSpec) -> np.ndarray:
    return _accent_warp(spec.d_feat, spec.perturbation.strength, spec.seed)


@dataclass
class Sample:
    feats: np.ndarray
    transcript: str
    utt_id: str = ""


def synth_utterance(spec: SynthSpec, transcript: str, seed: int,
                    variant: tuple = ()) -> Sample:
    """Features for one utterance: per-char prototype blocks plus seeded noise.

    variant selects an alternative noise draw around the same prototypes
    (training-time variety); the empty default is the canonical utterance
    that decode and score see.
    """
    protos = codebook(spec)
    for c in transcript:
        if c not in protos:
            raise DataError(f"character {c!r} is not in the synthesis vocab")
    if not transcript:
        raise DataError("cannot synthesize an empty transcript")
    fpc, d = spec.frames_per_char, spec.d_feat
    feats = np.empty((len(transcript) * fpc, d))
    for i, c in enumerate(transcript):
        feats[i * fpc:(i + 1) * fpc] = protos[c].reshape(fpc, d)
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, int(seed),
                                     *(int(v) for v in variant)])
        feats = feats + spec.noise_std * rng.standard_normal(feats.shape)
    pert = spec.perturbation
    if pert.kind == "noise":
        prng = np.random.default_rng([spec.seed, int(seed), 0x7E57])
        feats = feats + pert.sigma * prng.standard_normal(feats.shape)
    elif pert.kind == "accent":
        feats = feats @ accent_warp(spec).T
    return Sample(feats=feats, transcript=transcript)


def spec_for_split(spec: SynthSpec, split: str, noisy_sigma: float = 0.5,
                   accent_strength: float = 0.35) -> SynthSpec:
    """The per-split generation spec: train and clean test share conditions."""
    if split in ("train", "test-clean"):
        return replace(spec, perturbation=Perturbation())
    if split == "test-noisy":
        return replace(spec, perturbation=Perturbation("noise", sigma=noisy_sigma))
    if split == "test-accent":
        return replace(spec,
                       perturbation=Perturbation("accent",
                                                 strength=accent_strength))
    raise ConfigError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    utt_id: str
    transcript: str
    seed: int
    weight: int
    split: str


def _sample_transcripts(rng, n: int, chars: str, taken: set,
                        min_words: int, max_words: int,
                        min_len: int, max_len: int) -> list[str]:
    pool = [c for c in chars if c != " "]
    out = []
    misses = 0
    limit = max(1000, 50 * n)
    while len(out) < n:
        words = []
        for _ in range(int(rng.integers(min_words, max_words + 1))):
            length = int(rng.integers(min_len, max_len + 1))
            words.append("".join(pool[int(i)] for i in
                                 rng.integers(0, len(pool), size=length)))
        text = " ".join(words)
        if text in taken:
            misses += 1
            if misses > limit:
                raise ConfigError(
                    "vocabulary too small to draw the requested number of "
                    "distinct transcripts")
            continue
        taken.add(text)
        out.append(text)
    return out


def build_manifests(spec: SynthSpec, sizes: dict, weights=(1, 1, 1, 3),
                    min_words: int = 1, max_words: int = 2,
                    min_word_len: int = 2, max_word_len: int = 4,
                    ) -> dict[str, list[ManifestEntry]]:
    """Train manifest plus three matched test manifests.

    The three test splits reuse the same (transcript, generation seed) pairs,
    so clean/noisy/accent scores differ only by the acoustic condition.
    Train transcripts are disjoint from every test transcript. The weight
    cycle marks a slice of training data for replication within each epoch.
    """
    for key in ("train", "test"):
        if key not in sizes or int(sizes[key]) < 1:
            raise ConfigError(f"sizes must include a positive {key!r} count")
    weights = tuple(int(w) for w in weights)
    if not weights or any(w < 1 for w in weights):
        raise ConfigError("weights must be positive integers")
    n_train, n_test = int(sizes["train"]), int(sizes["test"])

    rng = np.random.default_rng([spec.seed, 0x3A11])
    taken: set[str] = set()
    train_texts = _sample_transcripts(rng, n_train, spec.vocab, taken,
                                      min_words, max_words,
                                      min_word_len, max_word_len)
    test_texts = _sample_transcripts(rng, n_test, spec.vocab, taken,
                                     min_words, max_words,
                                     min_word_len, max_word_len)
    train_seeds = rng.integers(0, 2 ** 31, size=n_train)
    test_seeds = rng.integers(0, 2 ** 31, size=n_test)

    manifests: dict[str, list[ManifestEntry]] = {}
    manifests["train"] = [
        ManifestEntry(f"train-{i:04d}", t, int(train_seeds[i]),
                      weights[i % len(weights)], "train")
        for i, t in enumerate(train_texts)
    ]
    for split in ("test-clean", "test-noisy", "test-accent"):
        manifests[split] = [
            ManifestEntry(f"{split}-{i:04d}", t, int(test_seeds[i]), 1, split)
            for i, t in enumerate(test_texts)
        ]
    return manifests


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.utt_id}\t{e.transcript}\t{e.seed}\t{e.weight}\t{e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 columns, "
                                f"got {len(cols)}")
            utt_id, transcript, seed, weight, split = cols
            try:
                seed_i, weight_i = int(seed), int(weight)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: seed and weight must be integers")
            if weight_i < 1:
                raise DataError(f"{path}:{lineno}: weight must be >= 1")
            if utt_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate utt_id {utt_id}")
            seen.add(utt_id)
            entries.append(ManifestEntry(utt_id, transcript, seed_i,
                                         weight_i, split))
    return entries


# ---------------------------------------------------------------------------
# Dynamic batching
# ---------------------------------------------------------------------------


@dataclass
class DynamicBatcher:
    """Greedy first-fit packer keyed on per-utterance sample points.

    Sample points = padded frame count times feature dim; pad_multiple lets
    the cost account for the encoder's subsampling padding.
    """
    cap: int = 4000
    frames_per_char: int = 4
    d_feat: int = 16
    pad_multiple: int = 1

    def __post_init__(self):
        if self.cap < 1:
            raise ConfigError("batch cap must be >= 1")
        if self.pad_multiple < 1:
            raise ConfigError("pad_multiple must be >= 1")

    def sample_points(self, entry: ManifestEntry) -> int:
        frames = len(entry.transcript) * self.frames_per_char
        padded = math.ceil(frames / self.pad_multiple) * self.pad_multiple
        return padded * self.d_feat


def greedy_pack(costs, cap) -> list[list[int]]:
    """Pack indices in order; close a batch when the next cost would overflow."""
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_cost = 0
    for i, c in enumerate(costs):
        if c > cap:
            if cur:
                batches.append(cur)
                cur, cur_cost = [], 0
            batches.append([i])
            continue
        if cur and cur_cost + c > cap:
            batches.append(cur)
            cur, cur_cost = [], 0
        cur.append(i)
        cur_cost += c
    if cur:
        batches.append(cur)
    return batches


def pack_batches(batcher: DynamicBatcher, entries, epoch_seed
                 ) -> list[list[ManifestEntry]]:
    """Weight-replicate, shuffle by epoch_seed, then greedily pack."""
    entries = list(entries)
    if not entries:
        raise ConfigError("cannot pack an empty manifest")
    expanded = [e for e in entries for _ in range(e.weight)]
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(expanded))
    ordered = [expanded[i] for i in order]
    costs = [batcher.sample_points(e) for e in ordered]
    for e, c in zip(ordered, costs):
        if c > batcher.cap:
            log.warning("utterance %s (%d sample points) exceeds batch cap %d; "
                        "emitting it alone", e.utt_id, c, batcher.cap)
    idx_batches = greedy_pack(costs, batcher.cap)
    return [[ordered[i] for i in batch] for batch in idx_batches]


# ---------------------------------------------------------------------------
# Feature dump (flat binary, for inspection)
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"ALABFEAT"


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise DataError(f"feature dump expects a 2-d array, got {feats.shape}")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(np.array(feats.shape, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(len(_FEAT_MAGIC)) != _FEAT_MAGIC:
            raise DataError(f"{path} is not a feature dump")
        rows, cols = np.frombuffer(f.read(8), dtype="<u4")
        data = np.frombuffer(f.read(8 * int(rows) * int(cols)), dtype="<f8")
    return data.reshape(int(rows), int(cols)).copy()
