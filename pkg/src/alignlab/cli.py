"""Command-line workflow: prepare-data, train, decode, score, report, and
canned comparison experiments, all sharing one run-directory convention.

A run directory is the unit of provenance: it collects the resolved config
echo, training log, checkpoints, decode files, per-set counts, and reports.
Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from . import cer, data, nn, pipeline, training
from . import config as config_mod
from .errors import (ConfigError, ContractError, DataError, NumericError,
                     ReportError, ScoringError, ShapeError, TokenizerError)

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

EXPERIMENTS = ("projector-compare", "encoder-compare", "schedule-compare")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _resolve_config(args, run_dir: Path | None = None) -> dict:
    """Defaults -> toy recipe -> config file -> command-line overrides.

    With no --config, a run dir's echoed config.yaml is used when present,
    so decode/score automatically match the training-time setup.
    """
    path = getattr(args, "config", None)
    if path is None and run_dir is not None:
        echo = run_dir / "config.yaml"
        if echo.exists():
            path = echo
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "schedule", None) is not None:
        overrides["stages"] = {"schedule": args.schedule}
    return config_mod.load_config(
        path, paper_hparams=bool(getattr(args, "paper_hparams", False)),
        overrides=overrides or None)


def _require_empty(dir_path: Path, force: bool, what: str) -> None:
    if dir_path.exists() and any(dir_path.iterdir()) and not force:
        raise DataError(
            f"{what} {dir_path} is not empty; pass --force to overwrite")


def _manifests(cfg: dict) -> dict[str, list[data.ManifestEntry]]:
    """Read manifests from data.manifest_dir, or rebuild them in memory.

    The synthesis pipeline is deterministic in (config, seed), so the
    in-memory rebuild is byte-equivalent to what prepare-data writes.
    """
    mdir = cfg["data"]["manifest_dir"]
    if mdir is None:
        return config_mod.build_manifests(cfg)
    mdir = Path(mdir)
    out = {}
    for split in data.SPLITS:
        path = mdir / f"{split}.tsv"
        if not path.exists():
            raise DataError(f"manifest {path} not found; run prepare-data")
        out[split] = data.read_manifest(path)
    return out


def _final_checkpoint(run_dir: Path) -> Path:
    marker = run_dir / "ckpt-final"
    if not marker.exists():
        raise DataError(f"{marker} not found; train a model first")
    name = marker.read_text(encoding="utf-8").strip()
    ckpt = run_dir / name
    if not ckpt.exists():
        raise DataError(f"final checkpoint {ckpt} is missing")
    return ckpt


# ---------------------------------------------------------------------------
# Core actions (shared by subcommands and the canned experiments)
# ---------------------------------------------------------------------------


def run_training(cfg: dict, run_dir: Path, resume=None,
                 stop_after_stage: int | None = None) -> list:
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.echo_config(cfg, run_dir / "config.yaml")
    trainer = training.StagedTrainer(
        config_mod.build_model(cfg),
        config_mod.build_schedule(cfg),
        config_mod.build_settings(cfg),
        config_mod.build_batcher(cfg),
        config_mod.build_synth_spec(cfg),
        _manifests(cfg)["train"],
        run_dir=run_dir,
        prompt=cfg["model"]["prompt"],
        order=tuple(cfg["model"]["order"]),
        seed=int(cfg["seed"]),
        warm_start=config_mod.build_warm_start(cfg),
        config_echo=cfg)
    if resume is not None:
        return trainer.resume(resume, stop_after_stage=stop_after_stage)
    return trainer.run(stop_after_stage=stop_after_stage)


def _thread_count() -> int:
    value = os.environ.get("ALIGNLAB_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"ALIGNLAB_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise ConfigError(f"ALIGNLAB_THREADS must be >= 1, got {n}")
    return n


def run_decode(cfg: dict, run_dir: Path, checkpoint=None) -> dict[str, int]:
    model = config_mod.build_model(cfg)
    ckpt = Path(checkpoint) if checkpoint else _final_checkpoint(run_dir)
    _, _, arrays = nn.load_checkpoint(ckpt)
    nn.load_model_state(model, arrays)

    manifests = _manifests(cfg)
    dec_dir = run_dir / "decodes"
    dec_dir.mkdir(parents=True, exist_ok=True)
    prompt = cfg["model"]["prompt"]
    order = tuple(cfg["model"]["order"])
    max_new = int(cfg["eval"]["max_new_tokens"])
    n_threads = _thread_count()

    counts: dict[str, int] = {}
    # Recording is off for the whole block, so worker threads never touch
    # the (single, shared) tape.
    with ad.no_grad():
        for split in cfg["eval"]["test_sets"]:
            entries = manifests[split]
            spec = config_mod.spec_for_split(cfg, split)
            feats = [data.synth_utterance(spec, e.transcript, e.seed).feats
                     for e in entries]

            def one(f):
                return pipeline.greedy_decode(model, f, prompt, order, max_new)

            if n_threads > 1:
                with concurrent.futures.ThreadPoolExecutor(n_threads) as ex:
                    hyps = list(ex.map(one, feats))
            else:
                hyps = [one(f) for f in feats]
            pipeline.write_decode_file(
                dec_dir / f"{split}.tsv",
                [(e.utt_id, h) for e, h in zip(entries, hyps)])
            counts[split] = len(entries)
    return counts


def _write_counts(path: Path, result: cer.ScoreResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("utt_id\tsub\tins\tdel\tref_len\tcer\n")
        for utt_id, c, value in result.per_utt:
            f.write(f"{utt_id}\t{c.substitutions}\t{c.insertions}\t"
                    f"{c.deletions}\t{c.ref_len}\t{value!r}\n")


def _write_summary(path: Path, totals: dict[str, cer.AlignmentCounts]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("test_set\tsub\tins\tdel\tref_len\tcer\n")
        for split, c in totals.items():
            f.write(f"{split}\t{c.substitutions}\t{c.insertions}\t"
                    f"{c.deletions}\t{c.ref_len}\t{c.cer!r}\n")


def read_summary(path) -> dict[str, cer.AlignmentCounts]:
    totals: dict[str, cer.AlignmentCounts] = {}
    with open(path, "r", encoding="utf-8") as f:
        rows = [ln.rstrip("\n").split("\t") for ln in f if ln.strip()]
    for cols in rows[1:]:
        totals[cols[0]] = cer.AlignmentCounts(
            substitutions=int(cols[1]), insertions=int(cols[2]),
            deletions=int(cols[3]), ref_len=int(cols[4]))
    if not totals:
        raise DataError(f"{path} contains no score rows")
    return totals


def run_score(cfg: dict, run_dir: Path) -> dict[str, cer.ScoreResult]:
    manifests = _manifests(cfg)
    punct = config_mod.punctuation_set(cfg)
    scores_dir = run_dir / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, cer.ScoreResult] = {}
    for split in cfg["eval"]["test_sets"]:
        decode_path = run_dir / "decodes" / f"{split}.tsv"
        if not decode_path.exists():
            raise DataError(f"{decode_path} not found; run decode first")
        hyps = pipeline.read_decode_file(decode_path)
        result = cer.score_run(hyps, manifests[split], punct)
        _write_counts(scores_dir / f"{split}.counts.tsv", result)
        results[split] = result
    _write_summary(scores_dir / "summary.tsv",
                   {s: r.total for s, r in results.items()})
    return results


def run_pipeline(cfg: dict, run_dir: Path) -> tuple[list, dict]:
    """train + decode + score for one experiment arm."""
    states = run_training(cfg, run_dir)
    run_decode(cfg, run_dir)
    return states, run_score(cfg, run_dir)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    cfg = _resolve_config(args)
    out = args.out or cfg["data"]["manifest_dir"]
    if out is None:
        raise ConfigError(
            "no output directory: pass --out or set data.manifest_dir")
    out = Path(out)
    _require_empty(out, args.force, "output directory")
    out.mkdir(parents=True, exist_ok=True)

    manifests = config_mod.build_manifests(cfg)
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    for split in data.SPLITS:
        entries = manifests[split]
        data.write_manifest(out / f"{split}.tsv", entries)
        spec = config_mod.spec_for_split(cfg, split)
        for e in entries:
            sample = data.synth_utterance(spec, e.transcript, e.seed)
            data.write_features(feat_dir / f"{e.utt_id}.feat", sample.feats)
        print(f"{split}: {len(entries)} utterances")
    return 0


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _resolve_config(args, run_dir=run_dir if args.resume else None)
    if not args.resume:
        _require_empty(run_dir, args.force, "run directory")
    states = run_training(cfg, run_dir, resume=args.resume,
                          stop_after_stage=args.stop_after_stage)
    last = states[-1]
    print(f"completed {len(states)} stage(s), {last.updates_total} updates, "
          f"final train loss {last.last_loss:.4f}")
    print(f"final checkpoint: {_final_checkpoint(run_dir).name}")
    return 0


def cmd_decode(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _resolve_config(args, run_dir=run_dir)
    counts = run_decode(cfg, run_dir, checkpoint=args.checkpoint)
    for split, n in counts.items():
        print(f"{split}: decoded {n} utterances -> decodes/{split}.tsv")
    return 0


def cmd_score(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _resolve_config(args, run_dir=run_dir)
    results = run_score(cfg, run_dir)
    for split, r in results.items():
        c = r.total
        print(f"{split}: CER {100.0 * r.cer:.2f}% "
              f"({c.errors}/{c.ref_len}; S={c.substitutions} "
              f"I={c.insertions} D={c.deletions})")
    return 0


def cmd_report(args) -> int:
    runs: dict[str, dict[str, cer.AlignmentCounts]] = {}
    for rd in args.run_dirs:
        rd = Path(rd)
        summary = rd / "scores" / "summary.tsv"
        if not summary.exists():
            raise DataError(f"{summary} not found; run score first")
        label = rd.name or str(rd)
        if label in runs:
            raise ReportError(f"duplicate run label {label!r}")
        runs[label] = read_summary(summary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cer.emit_report(runs, out / "report.md", out / "report.tsv",
                    header_note=args.note)
    print(f"wrote {out / 'report.md'} and {out / 'report.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# Canned experiments
# ---------------------------------------------------------------------------


def _arm_config(cfg: dict, patch: dict) -> dict:
    arm = copy.deepcopy(cfg)
    for dotted, value in patch.items():
        node = arm
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    config_mod.validate_config(arm)
    return arm


def experiment_arms(name: str, cfg: dict) -> list[tuple[str, dict]]:
    """Arm label -> config. Matched seeds except where the arm IS the seed."""
    if name == "projector-compare":
        return [(kind, _arm_config(cfg, {"model.projector.kind": kind}))
                for kind in ("transformer", "qformer")]
    if name == "encoder-compare":
        return [(variant, _arm_config(cfg, {"model.encoder.variant": variant}))
                for variant in nn.ENCODER_VARIANTS]
    if name == "schedule-compare":
        arms = []
        for seed in (int(cfg["seed"]), int(cfg["seed"]) + 1,
                     int(cfg["seed"]) + 2):
            for sched in ("staged", "all-unfrozen"):
                arms.append((f"{sched}-seed{seed}",
                             _arm_config(cfg, {"stages.schedule": sched,
                                               "seed": seed})))
        return arms
    raise ConfigError(f"unknown experiment {name!r}; "
                      f"choose from {EXPERIMENTS}")


def _schedule_compare_note(arm_stats: dict[str, tuple[int, float]]) -> str:
    """Summarize staged-vs-all-unfrozen wins per seed for the report header."""
    seeds = sorted({int(label.rsplit("seed", 1)[1]) for label in arm_stats})
    parts, wins = [], 0
    for s in seeds:
        staged_updates, staged_cer = arm_stats[f"staged-seed{s}"]
        all_updates, all_cer = arm_stats[f"all-unfrozen-seed{s}"]
        won = staged_cer < all_cer
        wins += won
        parts.append(f"seed {s}: staged {100 * staged_cer:.2f}% vs "
                     f"all-unfrozen {100 * all_cer:.2f}% "
                     f"({staged_updates}/{all_updates} updates)")
    return (f"staged beats all-unfrozen on clean test in {wins}/{len(seeds)} "
            f"seeds at equal step budgets — " + "; ".join(parts))


def cmd_experiment(args) -> int:
    run_dir = Path(args.run_dir)
    _require_empty(run_dir, args.force, "run directory")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args)

    runs: dict[str, dict[str, cer.AlignmentCounts]] = {}
    arm_stats: dict[str, tuple[int, float]] = {}
    for label, arm_cfg in experiment_arms(args.name, cfg):
        print(f"[{args.name}] training arm {label} ...")
        states, results = run_pipeline(arm_cfg, run_dir / label)
        runs[label] = {s: r.total for s, r in results.items()}
        clean = results.get("test-clean")
        arm_stats[label] = (states[-1].updates_total,
                            clean.cer if clean else float("nan"))
        for split, r in results.items():
            print(f"  {split}: CER {100.0 * r.cer:.2f}%")

    note = ""
    if args.name == "schedule-compare":
        note = _schedule_compare_note(arm_stats)
    cer.emit_report(runs, run_dir / "report.md", run_dir / "report.tsv",
                    header_note=note)
    print(f"wrote {run_dir / 'report.md'}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alignlab",
        description="Desk-scale speech-to-LLM alignment laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=False, force=False, schedule=False):
        p.add_argument("--config", type=Path, default=None,
                       help="YAML config; defaults applied for missing keys")
        p.add_argument("--seed", type=int, default=None,
                       help="override config seed")
        p.add_argument("--paper-hparams", action="store_true",
                       help="use reference optimizer values instead of the "
                            "toy recipe (not desk-runnable at full data scale)")
        if run_dir:
            p.add_argument("--run-dir", type=Path, required=True,
                           help="run directory (config echo, logs, artifacts)")
        if force:
            p.add_argument("--force", action="store_true",
                           help="allow writing into a non-empty directory")
        if schedule:
            p.add_argument("--schedule",
                           choices=list(config_mod.SCHEDULE_NAMES),
                           default=None, help="override stages.schedule")

    p = sub.add_parser("prepare-data",
                       help="materialize manifests and a feature store")
    common(p, force=True)
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: data.manifest_dir)")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="run the stage schedule")
    common(p, run_dir=True, force=True, schedule=True)
    p.add_argument("--resume", type=Path, default=None, metavar="CKPT",
                   help="continue from an epoch checkpoint")
    p.add_argument("--stop-after-stage", type=int, default=None, metavar="N",
                   help="stop once stage N (1-based) completes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy-decode every test set")
    common(p, run_dir=True)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="decode this checkpoint instead of the final one")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="CER per test set from decode files")
    common(p, run_dir=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="comparison tables over scored runs")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", type=Path, default=Path("."),
                   help="directory for report.md / report.tsv (default: .)")
    p.add_argument("--note", default="", help="header note for the report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="canned comparison recipes")
    p.add_argument("name", choices=list(EXPERIMENTS))
    common(p, run_dir=True, force=True)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TokenizerError, ScoringError, ReportError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
