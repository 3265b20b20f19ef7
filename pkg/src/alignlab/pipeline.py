"""Assembles speech, prompt, and transcript embeddings into one LM sequence,
computes the masked next-token loss over the transcript continuation, and
runs greedy decoding.

Region layout is configurable but the transcript region always comes last:
only its rows (plus the closing eos) are supervised, everything earlier is
conditioning context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

DEFAULT_ORDER = ("speech", "prompt", "transcript")


@dataclass
class Regulated:
    """One assembled utterance: embeddings plus supervision targets."""
    embeds: Tensor
    targets: list[int]
    mask: list[bool]
    bounds: dict[str, tuple[int, int]]


def _check_order(order) -> tuple[str, ...]:
    order = tuple(order)
    if sorted(order) != sorted(DEFAULT_ORDER):
        raise ConfigError(
            f"order must permute {DEFAULT_ORDER}, got {order}")
    if order[-1] != "transcript":
        raise ConfigError("the transcript region must come last")
    return order


def regulate(model, feats: np.ndarray, prompt: str = "",
             transcript: str | None = None,
             order=DEFAULT_ORDER) -> Regulated:
    """Build the full embedding sequence for one utterance.

    With a transcript, the returned targets/mask supervise exactly the
    transcript tokens plus one closing eos; pass transcript=None to get the
    decoding prefix (no transcript rows, no eos).
    """
    order = _check_order(order)
    lm = model.lm
    e_s = model.speech_embedding(feats)

    prompt_ids = [lm.tok.bos_id] + lm.tokenize(prompt, use_template=True)
    e_p = lm.embed(prompt_ids)

    regions: dict[str, tuple[Tensor, list[int | None]]] = {
        "speech": (e_s, [None] * e_s.data.shape[0]),
        "prompt": (e_p, list(prompt_ids)),
    }

    if transcript is not None:
        t_ids = lm.tokenize(transcript) + [lm.tok.eos_id]
        regions["transcript"] = (lm.embed(t_ids), list(t_ids))
        active = order
    else:
        active = order[:-1]

    parts, row_tokens, bounds = [], [], {}
    pos = 0
    for name in active:
        emb, toks = regions[name]
        n = emb.data.shape[0]
        parts.append(emb)
        row_tokens.extend(toks)
        bounds[name] = (pos, pos + n)
        pos += n

    embeds = ad.concat_rows(parts)
    L = pos

    targets = [0] * L
    mask = [False] * L
    if transcript is not None:
        t_lo, t_hi = bounds["transcript"]
        for i in range(t_lo - 1, t_hi - 1):
            targets[i] = row_tokens[i + 1]
            mask[i] = True
    return Regulated(embeds, targets, mask, bounds)


def forward_loss(model, items, prompt: str = "", order=DEFAULT_ORDER,
                 reduction: str = "mean"):
    """Masked cross entropy pooled over a batch of (feats, transcript) pairs.

    Returns (loss, supervised_count). Utterances are processed one by one
    and pooled as sum / count, so duplicating every batch element leaves the
    mean loss bit-identical.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    if not items:
        raise ConfigError("forward_loss needs at least one utterance")
    total = None
    count = 0
    for feats, transcript in items:
        reg = regulate(model, feats, prompt, transcript, order)
        logits = model.lm.forward(reg.embeds)
        ce = ad.cross_entropy_masked(logits, reg.targets, reg.mask,
                                     reduction="sum")
        total = ce if total is None else ad.add(total, ce)
        count += sum(reg.mask)
    if reduction == "sum":
        return total, count
    return ad.div_scalar(total, float(count)), count


def greedy_decode(model, feats: np.ndarray, prompt: str = "",
                  order=DEFAULT_ORDER, max_new_tokens: int = 32) -> str:
    """Argmax decoding until eos or the token budget runs out."""
    if max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be >= 1")
    lm = model.lm
    with ad.no_grad():
        reg = regulate(model, feats, prompt, transcript=None, order=order)
        embeds = reg.embeds
        out_ids: list[int] = []
        for _ in range(max_new_tokens):
            logits = lm.forward(embeds)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == lm.tok.eos_id:
                break
            out_ids.append(next_id)
            embeds = ad.concat_rows([embeds, lm.embed([next_id])])
    return lm.tok.decode(out_ids)


# ---------------------------------------------------------------------------
# Decode files: one "utt_id<TAB>hypothesis" line per utterance
# ---------------------------------------------------------------------------


def write_decode_file(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyp in pairs:
            if "\t" in utt_id or "\n" in utt_id:
                raise DataError(f"utt_id {utt_id!r} contains tab or newline")
            if "\t" in hyp or "\n" in hyp:
                raise DataError(
                    f"hypothesis for {utt_id} contains tab or newline")
            f.write(f"{utt_id}\t{hyp}\n")


def read_decode_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: missing tab separator")
            utt_id, hyp = line.split("\t", 1)
            if utt_id in out:
                raise DataError(f"{path}:{lineno}: duplicate utt_id {utt_id}")
            out[utt_id] = hyp
    return out
