"""Model components: toy speech encoders, both projector kinds, the
dimension bridge, a small decoder-only character LM, and LoRA adapters.

Every component keeps its parameters in an ordered registry so the full
pipeline can be partitioned into named parameter groups (encoder,
projector, bridge, lora, lm_body) and serialized bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError, TokenizerError

ENCODER_VARIANTS = ("supervised-analog", "ssl-analog")
_VARIANT_OUT_DIM = {"supervised-analog": 40, "ssl-analog": 32}
_PROJECTOR_DEFAULT_LAYERS = {"transformer": 4, "qformer": 2}

# MLP widths chosen so both projector kinds land within a few permille of
# each other in trainable parameter count at any width.
_TRANSFORMER_MLP_FACTOR = 4
_QFORMER_MLP_FACTOR = 8


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    variant: str = "supervised-analog"
    out_dim: int | None = None
    n_layers: int = 2
    n_heads: int = 4
    subsampling_factor: int = 4

    def __post_init__(self):
        if self.variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.out_dim is None:
            self.out_dim = _VARIANT_OUT_DIM[self.variant]
        if self.out_dim % self.n_heads != 0:
            raise ConfigError(
                f"encoder out_dim {self.out_dim} not divisible by n_heads {self.n_heads}")
        if self.subsampling_factor < 1:
            raise ConfigError("subsampling_factor must be >= 1")


@dataclass
class ProjectorConfig:
    kind: str = "transformer"
    n_layers: int | None = None
    n_heads: int = 4
    window_length: int = 1   # qformer only
    n_queries: int = 1       # qformer only

    def __post_init__(self):
        if self.kind not in _PROJECTOR_DEFAULT_LAYERS:
            raise ConfigError(f"unknown projector kind {self.kind!r}")
        if self.n_layers is None:
            self.n_layers = _PROJECTOR_DEFAULT_LAYERS[self.kind]
        if self.kind == "qformer" and (self.window_length < 1 or self.n_queries < 1):
            raise ConfigError("qformer window_length and n_queries must be >= 1")


@dataclass
class ChatTemplate:
    prefix: str = ""
    suffix: str = ""

    def apply(self, text: str) -> str:
        return self.prefix + text + self.suffix

    def token_overhead(self) -> int:
        return len(self.prefix) + len(self.suffix)


@dataclass
class DecoderLmConfig:
    chars: Sequence[str] = ()
    embed_dim: int = 48
    n_layers: int = 2
    n_heads: int = 4
    chat_template: ChatTemplate | None = None

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"lm embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0

    def __post_init__(self):
        if self.rank <= 0 or self.alpha <= 0:
            raise ConfigError(
                f"lora rank and alpha must be positive, got r={self.rank} alpha={self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


# ---------------------------------------------------------------------------
# Parameter registry
# ---------------------------------------------------------------------------


class Module:
    """Tiny parameter container; children and params keep insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self._no_decay: set[str] = set()

    def param(self, name: str, array: np.ndarray, no_decay: bool = False) -> Tensor:
        t = Tensor(array)
        self._params[name] = t
        if no_decay:
            self._no_decay.add(name)
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, c in self._children.items():
            yield from c.named_parameters(prefix + cname + ".")

    def no_decay_names(self, prefix: str = "") -> set[str]:
        out = {prefix + n for n in self._no_decay}
        for cname, c in self._children.items():
            out |= c.no_decay_names(prefix + cname + ".")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())


def _linear_init(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)


def _residual_scale(n_residual_writes: int) -> float:
    """Keeps the summed variance of a stack's residual writes near one."""
    return 1.0 / math.sqrt(max(1, n_residual_writes))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, w_scale: float = 1.0):
        super().__init__()
        self.w = self.param("w", w_scale * _linear_init(rng, d_in, d_out))
        self.b = self.param("b", np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim), no_decay=True)
        self.bias = self.param("bias", np.zeros(dim), no_decay=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


class LoraAdapter(Module):
    """Low-rank delta for one frozen weight matrix.

    B starts at zero so a fresh adapter is an exact no-op; the effective
    update is (alpha / rank) * B @ A in the column convention, applied here
    as x @ A.T @ B.T on row-major activations.
    """

    def __init__(self, rng, target: str, d_in: int, d_out: int, cfg: LoraConfig):
        super().__init__()
        self.target = target
        self.cfg = cfg
        self.a = self.param("a", 0.02 * rng.standard_normal((cfg.rank, d_in)))
        self.b = self.param("b", np.zeros((d_out, cfg.rank)))

    @property
    def scaling(self) -> float:
        return self.cfg.scaling


def lora_forward(adapter: LoraAdapter | None, base_weight: Tensor, x: Tensor) -> Tensor:
    """x @ W plus the scaled low-rank correction; W itself gets no gradient."""
    base = ad.matmul(x, base_weight)
    if adapter is None:
        return base
    delta = ad.matmul(ad.matmul(x, ad.transpose(adapter.a)), ad.transpose(adapter.b))
    return ad.add(base, ad.scale(delta, adapter.scaling))


# ---------------------------------------------------------------------------
# Attention and blocks
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, n_heads: int, out_scale: float = 1.0):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim, self.n_heads = dim, n_heads
        self.head_dim = dim // n_heads
        self.wq = self.param("wq", _linear_init(rng, dim, dim))
        self.bq = self.param("bq", np.zeros(dim))
        self.wk = self.param("wk", _linear_init(rng, dim, dim))
        self.bk = self.param("bk", np.zeros(dim))
        self.wv = self.param("wv", _linear_init(rng, dim, dim))
        self.bv = self.param("bv", np.zeros(dim))
        self.wo = self.param("wo", out_scale * _linear_init(rng, dim, dim))
        self.bo = self.param("bo", np.zeros(dim))
        # Filled in only for LM blocks wrapped with LoRA.
        self.adapter_q: LoraAdapter | None = None
        self.adapter_v: LoraAdapter | None = None

    def forward(self, x_q: Tensor, x_kv: Tensor, causal: bool) -> Tensor:
        q = ad.add(lora_forward(self.adapter_q, self.wq, x_q), self.bq)
        k = ad.add(ad.matmul(x_kv, self.wk), self.bk)
        v = ad.add(lora_forward(self.adapter_v, self.wv, x_kv), self.bv)
        inv = 1.0 / math.sqrt(self.head_dim)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
            if causal:
                scores = ad.apply_causal_mask(scores)
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        ctx = ad.concat_cols(heads)
        return ad.add(ad.matmul(ctx, self.wo), self.bo)


class Mlp(Module):
    def __init__(self, rng, dim: int, factor: int, out_scale: float = 1.0):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, dim, factor * dim))
        self.fc2 = self.child("fc2", Linear(rng, factor * dim, dim,
                                            w_scale=out_scale))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(ad.gelu(self.fc1.forward(x)))


class TransformerBlock(Module):
    """Pre-LN self-attention block: x += attn(ln(x)); x += mlp(ln(x)).

    out_scale shrinks the residual-writing projections so a freshly
    initialized stack stays close to the identity; deep random blocks
    otherwise scramble content and stall early training.
    """

    def __init__(self, rng, dim: int, n_heads: int, mlp_factor: int,
                 causal: bool, out_scale: float = 1.0):
        super().__init__()
        self.causal = causal
        self.ln1 = self.child("ln1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(rng, dim, n_heads,
                                                          out_scale))
        self.ln2 = self.child("ln2", LayerNorm(dim))
        self.mlp = self.child("mlp", Mlp(rng, dim, mlp_factor, out_scale))

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1.forward(x)
        x = ad.add(x, self.attn.forward(h, h, self.causal))
        x = ad.add(x, self.mlp.forward(self.ln2.forward(x)))
        return x


class QformerBlock(Module):
    """Query self-attention, cross-attention onto window frames, then MLP."""

    def __init__(self, rng, dim: int, n_heads: int, out_scale: float = 1.0):
        super().__init__()
        self.ln_sa = self.child("ln_sa", LayerNorm(dim))
        self.self_attn = self.child("self_attn",
                                    MultiHeadAttention(rng, dim, n_heads,
                                                       out_scale))
        self.ln_ca = self.child("ln_ca", LayerNorm(dim))
        self.cross_attn = self.child("cross_attn",
                                     MultiHeadAttention(rng, dim, n_heads,
                                                        out_scale))
        self.ln_mlp = self.child("ln_mlp", LayerNorm(dim))
        self.mlp = self.child("mlp", Mlp(rng, dim, _QFORMER_MLP_FACTOR,
                                         out_scale))

    def forward(self, queries: Tensor, frames: Tensor) -> Tensor:
        h = self.ln_sa.forward(queries)
        queries = ad.add(queries, self.self_attn.forward(h, h, causal=False))
        h = self.ln_ca.forward(queries)
        queries = ad.add(queries, self.cross_attn.forward(h, frames, causal=False))
        queries = ad.add(queries, self.mlp.forward(self.ln_mlp.forward(queries)))
        return queries


# ---------------------------------------------------------------------------
# Speech encoder
# ---------------------------------------------------------------------------


class ToyEncoder(Module):
    """Frame-stacking subsampler followed by bidirectional transformer blocks."""

    def __init__(self, rng, cfg: EncoderConfig, d_feat: int):
        super().__init__()
        self.cfg = cfg
        self.d_feat = d_feat
        self.proj = self.child("proj", Linear(rng, cfg.subsampling_factor * d_feat,
                                              cfg.out_dim))
        scale = _residual_scale(2 * cfg.n_layers)
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(rng, cfg.out_dim, cfg.n_heads,
                                                     _TRANSFORMER_MLP_FACTOR,
                                                     causal=False,
                                                     out_scale=scale))
            for i in range(cfg.n_layers)
        ]
        self.ln_out = self.child("ln_out", LayerNorm(cfg.out_dim))

    def output_length(self, t_s: int) -> int:
        return math.ceil(t_s / self.cfg.subsampling_factor)

    def encode(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.d_feat:
            raise ShapeError(
                f"expected frames of dim {self.d_feat}, got shape {feats.shape}")
        t_s = feats.shape[0]
        if t_s == 0:
            raise DataError("cannot encode an empty utterance")
        f = self.cfg.subsampling_factor
        t_e = self.output_length(t_s)
        padded = np.zeros((t_e * f, self.d_feat))
        padded[:t_s] = feats
        stacked = padded.reshape(t_e, f * self.d_feat)  # input data, not on tape
        x = self.proj.forward(ad.as_tensor(stacked))
        x = ad.add(x, ad.sinusoid_rows(t_e, self.cfg.out_dim))
        for block in self.blocks:
            x = block.forward(x)
        return self.ln_out.forward(x)


# ---------------------------------------------------------------------------
# Projectors
# ---------------------------------------------------------------------------


class TransformerProjector(Module):
    def __init__(self, rng, cfg: ProjectorConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        scale = _residual_scale(2 * cfg.n_layers)
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(rng, dim, cfg.n_heads,
                                                     _TRANSFORMER_MLP_FACTOR,
                                                     causal=False,
                                                     out_scale=scale))
            for i in range(cfg.n_layers)
        ]

    def output_length(self, t_e: int) -> int:
        return t_e

    def project(self, h_s: Tensor) -> Tensor:
        if h_s.data.shape[0] == 0:
            raise ShapeError("projector input is empty")
        x = h_s
        for block in self.blocks:
            x = block.forward(x)
        return x


class QformerProjector(Module):
    """Trainable queries cross-attend to encoder frames window by window."""

    def __init__(self, rng, cfg: ProjectorConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        self.queries = self.param("queries",
                                  rng.standard_normal((cfg.n_queries, dim)),
                                  no_decay=True)
        scale = _residual_scale(3 * cfg.n_layers)
        self.blocks = [
            self.child(f"block{i}", QformerBlock(rng, dim, cfg.n_heads,
                                                 out_scale=scale))
            for i in range(cfg.n_layers)
        ]

    def output_length(self, t_e: int) -> int:
        return math.ceil(t_e / self.cfg.window_length) * self.cfg.n_queries

    def project(self, h_s: Tensor) -> Tensor:
        t_e = h_s.data.shape[0]
        if t_e == 0:
            raise ShapeError("projector input is empty")
        w = self.cfg.window_length
        outputs = []
        for start in range(0, t_e, w):
            frames = ad.slice_rows(h_s, start, min(start + w, t_e))
            q = self.queries
            for block in self.blocks:
                q = block.forward(q, frames)
            outputs.append(q)
        return ad.concat_rows(outputs)


def build_projector(rng, cfg: ProjectorConfig, dim: int):
    if cfg.kind == "transformer":
        return TransformerProjector(rng, cfg, dim)
    return QformerProjector(rng, cfg, dim)


# ---------------------------------------------------------------------------
# Bridge
# ---------------------------------------------------------------------------


class Bridge(Module):
    """Affine map from projector output dim to the LM embedding dim."""

    def __init__(self, rng, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = self.param("w", _linear_init(rng, in_dim, out_dim))
        self.b = self.param("b", np.zeros(out_dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_dim:
            raise ConfigError(
                f"bridge expects encoder dim {self.in_dim} but got {x.data.shape[1]} "
                f"(LM embed dim is {self.out_dim})")
        return ad.add(ad.matmul(x, self.w), self.b)


# ---------------------------------------------------------------------------
# Tokenizer and decoder LM
# ---------------------------------------------------------------------------

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class CharTokenizer:
    """Character-level tokenizer with pad/bos/eos specials at ids 0..2."""

    def __init__(self, chars: Sequence[str]):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be unique")
        for c in chars:
            if len(c) != 1:
                raise ConfigError(f"vocabulary entry {c!r} is not a single character")
        self.specials = (PAD, BOS, EOS)
        self.chars = chars
        self._to_id = {c: i + len(self.specials) for i, c in enumerate(chars)}

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def vocab_size(self) -> int:
        return len(self.specials) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        ids = []
        for c in text:
            if c not in self._to_id:
                raise TokenizerError(f"character {c!r} is not in the vocabulary")
            ids.append(self._to_id[c])
        return ids

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        out = []
        ns = len(self.specials)
        for i in ids:
            if i < ns:
                if not skip_specials:
                    out.append(self.specials[i])
                continue
            out.append(self.chars[i - ns])
        return "".join(out)


class DecoderLm(Module):
    """Small causal transformer over characters; body is meant to stay frozen."""

    def __init__(self, rng, cfg: DecoderLmConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = CharTokenizer(cfg.chars)
        v, d = self.tok.vocab_size, cfg.embed_dim
        self.tok_emb = self.param("tok_emb", rng.standard_normal((v, d)),
                                  no_decay=True)
        scale = _residual_scale(2 * cfg.n_layers)
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(rng, d, cfg.n_heads,
                                                     _TRANSFORMER_MLP_FACTOR,
                                                     causal=True,
                                                     out_scale=scale))
            for i in range(cfg.n_layers)
        ]
        self.ln_f = self.child("ln_f", LayerNorm(d))
        self.w_out = self.param("w_out",
                                0.5 * rng.standard_normal((d, v)) / math.sqrt(d))
        self.b_out = self.param("b_out", np.zeros(v))

    def tokenize(self, text: str, use_template: bool = False) -> list[int]:
        if use_template and self.cfg.chat_template is not None:
            text = self.cfg.chat_template.apply(text)
        return self.tok.encode(text)

    def embed(self, ids: Sequence[int]) -> Tensor:
        return ad.embedding_lookup(self.tok_emb, ids)

    def tokenize_embed(self, text: str, use_template: bool = False):
        ids = self.tokenize(text, use_template=use_template)
        return ids, self.embed(ids)

    def forward(self, embeds: Tensor) -> Tensor:
        """Map an already-assembled embedding sequence [L x d] to logits [L x V]."""
        x = ad.add(embeds, ad.sinusoid_rows(embeds.data.shape[0], self.cfg.embed_dim))
        for block in self.blocks:
            x = block.forward(x)
        x = self.ln_f.forward(x)
        return ad.add(ad.matmul(x, self.w_out), self.b_out)

    def attach_lora(self, rng, cfg: LoraConfig) -> list[LoraAdapter]:
        """Wrap every block's attention q and v projections with adapters."""
        adapters = []
        d = self.cfg.embed_dim
        for i, block in enumerate(self.blocks):
            for tgt in ("q", "v"):
                adapter = LoraAdapter(rng, f"block{i}.attn.w{tgt}", d, d, cfg)
                setattr(block.attn, f"adapter_{tgt}", adapter)
                adapters.append(adapter)
        return adapters


# ---------------------------------------------------------------------------
# Assembled pipeline model
# ---------------------------------------------------------------------------

GROUPS = ("encoder", "projector", "bridge", "lora", "lm_body")
TRAINABLE_GROUPS = ("encoder", "projector", "bridge", "lora")


class PipelineModel:
    """Encoder + projector + bridge + decoder LM with named parameter groups."""

    def __init__(self, encoder_cfg: EncoderConfig, projector_cfg: ProjectorConfig,
                 lm_cfg: DecoderLmConfig, lora_cfg: LoraConfig | None,
                 d_feat: int, seed: int = 0):
        self.encoder_cfg = encoder_cfg
        self.projector_cfg = projector_cfg
        self.lm_cfg = lm_cfg
        self.lora_cfg = lora_cfg
        self.d_feat = d_feat
        self.seed = int(seed)

        # Each component draws from its own stream so swapping one (say the
        # projector kind) leaves every other component's init bit-identical —
        # comparison runs then differ only in the component under study.
        def rng(tag: int) -> np.random.Generator:
            return np.random.default_rng([int(seed), 0x414C4142, tag])

        self.encoder = ToyEncoder(rng(1), encoder_cfg, d_feat)
        self.projector = build_projector(rng(2), projector_cfg,
                                         encoder_cfg.out_dim)
        self.bridge = Bridge(rng(3), encoder_cfg.out_dim, lm_cfg.embed_dim)
        self.lm = DecoderLm(rng(4), lm_cfg)
        self.adapters = self.lm.attach_lora(rng(5), lora_cfg) if lora_cfg else []

    @property
    def tok(self) -> CharTokenizer:
        return self.lm.tok

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups = {
            "encoder": list(self.encoder.named_parameters("encoder.")),
            "projector": list(self.projector.named_parameters("projector.")),
            "bridge": list(self.bridge.named_parameters("bridge.")),
            "lora": [p for a in self.adapters
                     for p in a.named_parameters(f"lora.{a.target}.")],
            "lm_body": list(self.lm.named_parameters("lm.")),
        }
        return groups

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group, params in self.param_groups().items():
            for name, t in params:
                out[name] = t
        return out

    def no_decay_names(self) -> set[str]:
        names = self.encoder.no_decay_names("encoder.")
        names |= self.projector.no_decay_names("projector.")
        names |= self.bridge.no_decay_names("bridge.")
        names |= self.lm.no_decay_names("lm.")
        for a in self.adapters:
            names |= a.no_decay_names(f"lora.{a.target}.")
        return names

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        unknown = groups - set(TRAINABLE_GROUPS)
        if unknown:
            raise ConfigError(
                f"cannot train groups {sorted(unknown)}; "
                f"trainable groups are {TRAINABLE_GROUPS}")
        for gname, params in self.param_groups().items():
            flag = gname in groups
            for _, t in params:
                t.requires_grad = flag

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters().items() if t.requires_grad]

    def speech_embedding(self, feats: np.ndarray) -> Tensor:
        """S -> encoder -> projector -> bridge, one utterance."""
        return self.bridge.forward(self.projector.project(self.encoder.encode(feats)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ALABCKPT"
CKPT_FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    config: dict | None = None, meta: dict | None = None) -> None:
    """Write a deterministic binary checkpoint (identical inputs -> identical bytes)."""
    names = sorted(arrays)
    header = {
        "format_version": CKPT_FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config, meta, arrays)."""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise DataError(f"{path} is not an alignlab checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != CKPT_FORMAT_VERSION:
            raise DataError(
                f"unsupported checkpoint format {header['format_version']}")
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["config"], header["meta"], arrays


def model_state(model: PipelineModel) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in model.named_parameters().items()}


def load_model_state(model: PipelineModel, arrays: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise DataError(f"checkpoint is missing parameters: {sorted(missing)[:4]} ...")
    for name, t in params.items():
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise DataError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {t.data.shape}")
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
