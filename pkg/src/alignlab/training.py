"""Staged training: AdamW with warmup/inverse-sqrt decay, element-wise
gradient clipping, gradient accumulation, per-stage freezing, per-epoch
checkpoints, and deterministic resume.

Stages train disjoint parameter groups in sequence (projector+bridge, then
encoder, then LoRA); the LM body never trains. An "all-unfrozen" single-stage
variant exists for the schedule comparison.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import nn
from . import pipeline
from .errors import ConfigError, ContractError, DataError

log = logging.getLogger(__name__)

ALL_UNFROZEN_GROUPS = ("encoder", "projector", "bridge", "lora")
LOG_HEADER = "# step\tstage\tlr\tloss\tgrad_norm_preclip\twall_time"


@dataclass
class OptimSettings:
    lr_peak: float = 5.0e-5
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1.0e-6
    weight_decay: float = 0.01
    warmup_steps: int = 2000
    clip_value: float = 5.0
    accum_steps: int = 14
    lr_restart_per_stage: bool = True

    def __post_init__(self):
        positive = {"lr_peak": self.lr_peak, "eps": self.eps,
                    "weight_decay": self.weight_decay,
                    "warmup_steps": self.warmup_steps,
                    "clip_value": self.clip_value,
                    "accum_steps": self.accum_steps}
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in (0,1), got {self.betas}")


@dataclass
class Stage:
    groups: tuple[str, ...]
    epochs: int

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if not self.groups:
            raise ConfigError("a stage needs at least one trainable group")
        bad = set(self.groups) - set(nn.TRAINABLE_GROUPS)
        if bad:
            raise ConfigError(
                f"stage groups {sorted(bad)} are not trainable "
                f"(allowed: {nn.TRAINABLE_GROUPS})")
        if self.epochs < 1:
            raise ConfigError("stage epochs must be >= 1")


def default_schedule(epochs=(1, 2, 2)) -> list[Stage]:
    return [Stage(("projector", "bridge"), epochs[0]),
            Stage(("encoder",), epochs[1]),
            Stage(("lora",), epochs[2])]


def all_unfrozen_schedule(epochs: int) -> list[Stage]:
    return [Stage(ALL_UNFROZEN_GROUPS, epochs)]


def validate_schedule(stages) -> list[Stage]:
    stages = list(stages)
    if not stages:
        raise ConfigError("schedule needs at least one stage")
    return stages


# ---------------------------------------------------------------------------
# Scheduler / clipping / optimizer
# ---------------------------------------------------------------------------


def lr_at(settings: OptimSettings, step: int) -> float:
    """Warmup then inverse-sqrt decay; peak exactly at step == warmup_steps."""
    if step < 1:
        raise ContractError(f"lr_at expects step >= 1, got {step}")
    w = settings.warmup_steps
    return settings.lr_peak * min(step / w, math.sqrt(w / step))


def clip_gradients(params, clip_value: float) -> None:
    """Element-wise clamp of every gradient into [-clip_value, clip_value]."""
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, -clip_value, clip_value, out=p.grad)


def average_and_clip(named_params, n_micro: int, clip_value: float) -> float:
    """Divide accumulated grads by the window size, clamp, return the
    pre-clip global L2 norm."""
    sq = 0.0
    for _, p in named_params:
        if p.grad is None:
            raise ContractError("parameter missing gradient before update")
        p.grad /= float(n_micro)
        sq += float((p.grad ** 2).sum())
    clip_gradients([p for _, p in named_params], clip_value)
    return math.sqrt(sq)


class AdamW:
    """Decoupled-weight-decay Adam over named parameters."""

    def __init__(self, named_params, settings: OptimSettings,
                 no_decay=frozenset()):
        self.params = list(named_params)
        self.settings = settings
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        s = self.settings
        b1, b2 = s.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise ContractError(f"parameter {name} has no gradient")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + s.eps)
            if name not in self.no_decay:
                update = update + s.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            mk, vk = f"optim.m.{name}", f"optim.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise DataError(f"checkpoint is missing optimizer moments "
                                f"for {name}")
            self.m[name] = np.ascontiguousarray(arrays[mk])
            self.v[name] = np.ascontiguousarray(arrays[vk])
        self.t = int(t)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# LM-body warm start
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarmStart:
    """Text-only pretraining of the decoder body before any alignment stage.

    The body sees the task format with fresh random strings — the text
    stands where speech embeddings will go — so it arrives at stage 1 as a
    competent (then permanently frozen) reader, standing in for a pretrained
    LLM. Strings are drawn per step, never from the train/test manifests.
    """
    steps: int = 400
    lr: float = 1.0e-2
    batch_size: int = 8
    warmup_steps: int = 30
    noise_std: float = 0.0
    min_words: int = 1
    max_words: int = 2
    min_word_len: int = 2
    max_word_len: int = 4

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("warm start steps must be >= 0")
        if self.steps and (self.lr <= 0 or self.batch_size < 1
                           or self.warmup_steps < 1):
            raise ConfigError("warm start lr/batch_size/warmup must be positive")
        if self.noise_std < 0:
            raise ConfigError("warm start noise_std must be >= 0")
        if not (1 <= self.min_words <= self.max_words
                and 1 <= self.min_word_len <= self.max_word_len):
            raise ConfigError("warm start word-shape bounds are inverted")


def _random_text(rng, vocab: str, warm: WarmStart) -> str:
    chars = [c for c in vocab if not c.isspace()]
    words = []
    for _ in range(int(rng.integers(warm.min_words, warm.max_words + 1))):
        n = int(rng.integers(warm.min_word_len, warm.max_word_len + 1))
        words.append("".join(rng.choice(chars, size=n)))
    return " ".join(words)


def text_copy_loss(lm, texts, prompt: str = "",
                   order=pipeline.DEFAULT_ORDER,
                   noise_std: float = 0.0, noise_rng=None):
    """Next-char loss over the transcript region of [text, prompt, text]
    sequences — the token-space mirror of the speech task layout.

    noise_std jitters the first-copy embeddings so the learned read-off
    circuit tolerates inputs that only approximate token embeddings — the
    regime it will face once real projector outputs stand in that region.
    """
    order = tuple(order)
    total, count = None, 0
    for s in texts:
        regions = {
            "speech": lm.tokenize(s),
            "prompt": [lm.tok.bos_id] + lm.tokenize(prompt,
                                                    use_template=True),
            "transcript": lm.tokenize(s) + [lm.tok.eos_id],
        }
        ids: list[int] = []
        bounds = {}
        for name in order:
            bounds[name] = (len(ids), len(ids) + len(regions[name]))
            ids.extend(regions[name])
        targets = [0] * len(ids)
        mask = [False] * len(ids)
        t_lo, t_hi = bounds["transcript"]
        for i in range(t_lo - 1, t_hi - 1):
            targets[i] = ids[i + 1]
            mask[i] = True
        embeds = lm.embed(ids)
        if noise_std > 0.0:
            jitter = np.zeros(embeds.data.shape)
            s_lo, s_hi = bounds["speech"]
            jitter[s_lo:s_hi] = noise_rng.normal(
                0.0, noise_std, size=(s_hi - s_lo, embeds.data.shape[1]))
            embeds = ad.add(embeds, ad.as_tensor(jitter))
        logits = lm.forward(embeds)
        ce = ad.cross_entropy_masked(logits, targets, mask, reduction="sum")
        total = ce if total is None else ad.add(total, ce)
        count += sum(mask)
    return ad.div_scalar(total, float(count))


# Within one process, matched-seed comparison arms start from bit-identical
# bodies and would redo the exact same pretraining; memoize on the full
# input (pre-warm body bytes included, so a modified body never hits).
_WARM_CACHE: dict = {}


def warm_start_lm_body(model: nn.PipelineModel, warm: WarmStart | None,
                       prompt: str = "", order=pipeline.DEFAULT_ORDER,
                       vocab: str = data_mod.DEFAULT_VOCAB,
                       seed: int = 0) -> float:
    """Train only the lm_body group on the text copy task, then refreeze.

    Returns the last batch loss (nan when disabled). Deterministic in seed.
    """
    if warm is None or warm.steps == 0:
        return math.nan
    named = model.param_groups()["lm_body"]
    digest = hashlib.sha256()
    for name, t in named:
        digest.update(name.encode())
        digest.update(t.data.tobytes())
    key = (digest.hexdigest(), warm, prompt, tuple(order), vocab, int(seed))
    if key in _WARM_CACHE:
        arrays, last = _WARM_CACHE[key]
        for name, t in named:
            np.copyto(t.data, arrays[name])
        return last
    rng = np.random.default_rng([int(seed), 0x77A12])
    for _, t in named:
        t.requires_grad = True
    opt_settings = OptimSettings(lr_peak=warm.lr,
                                 warmup_steps=warm.warmup_steps,
                                 accum_steps=1)
    opt = AdamW(named, opt_settings, no_decay=model.no_decay_names())
    last = math.nan
    for step in range(1, warm.steps + 1):
        texts = [_random_text(rng, vocab, warm)
                 for _ in range(warm.batch_size)]
        loss = text_copy_loss(model.lm, texts, prompt, order,
                              noise_std=warm.noise_std, noise_rng=rng)
        ad.backward(loss)
        ad.clear_tape()
        average_and_clip(named, 1, opt_settings.clip_value)
        opt.step(lr_at(opt_settings, step))
        ad.zero_grads([t for _, t in named])
        last = float(loss.data)
    for _, t in named:
        t.requires_grad = False
        t.grad = None
    _WARM_CACHE[key] = ({name: t.data.copy() for name, t in named}, last)
    return last


@dataclass
class TrainState:
    stage_index: int
    updates: int
    updates_total: int
    losses: list[float] = field(default_factory=list)

    @property
    def last_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


class StagedTrainer:
    """Runs a stage schedule over the synthetic corpus with one model."""

    def __init__(self, model: nn.PipelineModel, schedule, settings: OptimSettings,
                 batcher: data_mod.DynamicBatcher, synth_spec: data_mod.SynthSpec,
                 train_entries, run_dir=None, prompt: str = "transcribe:",
                 order=pipeline.DEFAULT_ORDER, seed: int = 0,
                 warm_start: WarmStart | None = None,
                 config_echo: dict | None = None):
        self.model = model
        self.schedule = validate_schedule(schedule)
        self.settings = settings
        self.batcher = batcher
        self.spec = data_mod.spec_for_split(synth_spec, "train")
        self.entries = list(train_entries)
        self.run_dir = run_dir
        self.prompt = prompt
        self.order = tuple(order)
        self.seed = int(seed)
        self.warm_start = warm_start
        self.config_echo = config_echo or {}
        self.updates_total = 0
        self.lr_base = 0
        self._t0 = time.monotonic()
        self._feat_cache: dict[str, np.ndarray] = {}
        self._log_path = (run_dir / "train.log") if run_dir else None

    # -- plumbing -----------------------------------------------------------

    def _features(self, entry: data_mod.ManifestEntry) -> np.ndarray:
        feats = self._feat_cache.get(entry.utt_id)
        if feats is None:
            sample = data_mod.synth_utterance(self.spec, entry.transcript,
                                              entry.seed)
            feats = self._feat_cache[entry.utt_id] = sample.feats
        return feats

    def _log_line(self, stage_no: int, lr: float, loss: float,
                  gnorm: float) -> None:
        if self._log_path is None:
            return
        wall = time.monotonic() - self._t0
        new = not self._log_path.exists()
        with open(self._log_path, "a", encoding="utf-8") as f:
            if new:
                f.write(LOG_HEADER + "\n")
            f.write(f"{self.updates_total}\t{stage_no}\t{lr:.6e}\t"
                    f"{loss:.6f}\t{gnorm:.6f}\t{wall:.3f}\n")

    def _checkpoint_meta(self, stage_idx: int, epoch: int, opt: AdamW) -> dict:
        return {
            "stage": stage_idx + 1,
            "epoch": epoch + 1,
            "updates_total": self.updates_total,
            "lr_base": self.lr_base,
            "adamw_t": opt.t,
            "seed": self.seed,
            "schedule": [[list(st.groups), st.epochs] for st in self.schedule],
        }

    def _save_epoch_checkpoint(self, stage_idx: int, epoch: int,
                               opt: AdamW) -> str:
        if self.run_dir is None:
            return ""
        name = f"ckpt-stage{stage_idx + 1}-epoch{epoch + 1}"
        arrays = dict(nn.model_state(self.model))
        arrays.update(opt.state_arrays())
        nn.save_checkpoint(self.run_dir / name, arrays,
                           config=self.config_echo,
                           meta=self._checkpoint_meta(stage_idx, epoch, opt))
        return name

    # -- core update path ----------------------------------------------------

    def accumulate_step(self, opt: AdamW, named_params, loss,
                        window: list[float], stage_idx: int,
                        force_flush: bool = False) -> bool:
        """Backprop one microbatch; apply an optimizer update when the
        accumulation window closes. Returns whether an update happened."""
        if loss is not None:
            ad.backward(loss)
            ad.clear_tape()
            window.append(float(loss.data))
        n = len(window)
        if n == 0:
            return False
        if n < self.settings.accum_steps and not force_flush:
            return False
        gnorm = average_and_clip(named_params, n, self.settings.clip_value)
        self.updates_total += 1
        lr = lr_at(self.settings, self.updates_total - self.lr_base)
        opt.step(lr)
        ad.zero_grads([p for _, p in named_params])
        self._log_line(stage_idx + 1, lr, sum(window) / n, gnorm)
        window.clear()
        return True

    def run_stage(self, stage_idx: int, start_epoch: int = 0,
                  optimizer: AdamW | None = None) -> TrainState:
        """Train one stage; freezes everything outside the stage's groups.

        Fresh AdamW moments per stage unless an optimizer is handed in
        (mid-stage resume). A partial accumulation window left at an epoch
        boundary is flushed as a smaller averaged update.
        """
        if not self.entries:
            raise ConfigError("training dataset is empty")
        stage = self.schedule[stage_idx]
        self.model.set_trainable(stage.groups)
        named_params = self.model.trainable_parameters()
        if optimizer is None:
            if self.settings.lr_restart_per_stage:
                self.lr_base = self.updates_total
            optimizer = AdamW(named_params, self.settings,
                              no_decay=self.model.no_decay_names())
        state = TrainState(stage_index=stage_idx, updates=0,
                           updates_total=self.updates_total)
        for epoch in range(start_epoch, stage.epochs):
            # Seed by the global epoch index so two schedules over the same
            # data stream identical batches (exact step-budget matching).
            global_epoch = sum(s.epochs for s in self.schedule[:stage_idx]) \
                + epoch
            batches = data_mod.pack_batches(
                self.batcher, self.entries,
                epoch_seed=[self.seed, 0x57A6, global_epoch])
            window: list[float] = []
            before = self.updates_total
            # Each pass over an utterance gets its own noise draw around the
            # shared prototypes — replication adds variety, not repetition —
            # keyed deterministically so reruns and resumes stay identical.
            passes: dict[str, int] = {}
            for batch in batches:
                items = []
                for e in batch:
                    k = passes[e.utt_id] = passes.get(e.utt_id, 0) + 1
                    sample = data_mod.synth_utterance(
                        self.spec, e.transcript, e.seed,
                        variant=(0xA46, global_epoch, k))
                    items.append((sample.feats, e.transcript))
                loss, _ = pipeline.forward_loss(self.model, items,
                                                self.prompt, self.order)
                self.accumulate_step(optimizer, named_params, loss, window,
                                     stage_idx)
            self.accumulate_step(optimizer, named_params, None, window,
                                 stage_idx, force_flush=True)
            state.updates += self.updates_total - before
            state.losses.append(self._epoch_loss(batches))
            self._save_epoch_checkpoint(stage_idx, epoch, optimizer)
        state.updates_total = self.updates_total
        return state

    def _epoch_loss(self, batches) -> float:
        """Post-epoch training loss over the epoch's utterances (no grad)."""
        items = [(self._features(e), e.transcript)
                 for batch in batches for e in batch]
        with ad.no_grad():
            loss, _ = pipeline.forward_loss(self.model, items, self.prompt,
                                            self.order)
        return float(loss.data)

    def run(self, start_stage: int = 0, start_epoch: int = 0,
            optimizer: AdamW | None = None,
            stop_after_stage: int | None = None) -> list[TrainState]:
        """Run stages in order; writes a final-checkpoint marker at the end."""
        # Fresh runs only: a resumed run carries the warmed body in its
        # checkpoint, so the body stays byte-identical from the first
        # checkpoint to the last.
        if start_stage == 0 and start_epoch == 0 and optimizer is None:
            loss = warm_start_lm_body(self.model, self.warm_start,
                                      self.prompt, self.order,
                                      self.spec.vocab, self.seed)
            if not math.isnan(loss):
                log.info("lm body warm start finished at loss %.4f", loss)
        states = []
        for idx in range(start_stage, len(self.schedule)):
            opt = optimizer if idx == start_stage else None
            epoch0 = start_epoch if idx == start_stage else 0
            states.append(self.run_stage(idx, start_epoch=epoch0,
                                         optimizer=opt))
            if stop_after_stage is not None and idx + 1 >= stop_after_stage:
                break
        if self.run_dir is not None and states:
            last = states[-1]
            stage = self.schedule[last.stage_index]
            name = f"ckpt-stage{last.stage_index + 1}-epoch{stage.epochs}"
            (self.run_dir / "ckpt-final").write_text(name + "\n",
                                                     encoding="utf-8")
        return states

    # -- resume ---------------------------------------------------------------

    def resume(self, ckpt_path, stop_after_stage: int | None = None
               ) -> list[TrainState]:
        """Continue a run from an epoch checkpoint, bit-identically."""
        _, meta, arrays = nn.load_checkpoint(ckpt_path)
        nn.load_model_state(self.model, arrays)
        self.updates_total = int(meta["updates_total"])
        self.lr_base = int(meta["lr_base"])
        stage_idx = int(meta["stage"]) - 1
        epochs_done = int(meta["epoch"])
        stage = self.schedule[stage_idx]
        if epochs_done < stage.epochs:
            self.model.set_trainable(stage.groups)
            opt = AdamW(self.model.trainable_parameters(), self.settings,
                        no_decay=self.model.no_decay_names())
            opt.load_state_arrays(arrays, meta["adamw_t"])
            return self.run(start_stage=stage_idx, start_epoch=epochs_done,
                            optimizer=opt, stop_after_stage=stop_after_stage)
        return self.run(start_stage=stage_idx + 1,
                        stop_after_stage=stop_after_stage)
