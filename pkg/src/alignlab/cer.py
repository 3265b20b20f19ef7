"""Character error rate: normalization, minimal-edit alignment counts,
micro-averaged per-set scoring, and comparison report emission.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass

from .errors import ReportError, ScoringError

log = logging.getLogger(__name__)

DEFAULT_PUNCTUATION = string.punctuation


@dataclass
class AlignmentCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    def __add__(self, other: "AlignmentCounts") -> "AlignmentCounts":
        return AlignmentCounts(self.substitutions + other.substitutions,
                               self.insertions + other.insertions,
                               self.deletions + other.deletions,
                               self.ref_len + other.ref_len)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def cer(self) -> float:
        if self.ref_len == 0:
            raise ScoringError("CER undefined for empty reference")
        return self.errors / self.ref_len


def normalize(text: str, punctuation: str = DEFAULT_PUNCTUATION) -> str:
    """Case-fold and drop whitespace plus the configured punctuation set."""
    return "".join(c.casefold() for c in text
                   if not c.isspace() and c not in punctuation)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with rolling rows (O(min(|a|,|b|)) memory)."""
    if len(b) < len(a):
        a, b = b, a
    prev = list(range(len(a) + 1))
    for j in range(1, len(b) + 1):
        cur = [j] + [0] * len(a)
        for i in range(1, len(a) + 1):
            cur[i] = min(prev[i - 1] + (a[i - 1] != b[j - 1]),
                         cur[i - 1] + 1,
                         prev[i] + 1)
        prev = cur
    return prev[len(a)]


def _aligned_counts(ref: str, hyp: str) -> AlignmentCounts:
    """Full DP with traceback; ties prefer substitution, then insertion,
    then deletion (affects the count split, never the total distance)."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i][j - 1] + 1,
                          d[i - 1][j] + 1)
    counts = AlignmentCounts(ref_len=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and \
                d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                counts.substitutions += 1
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            counts.insertions += 1
            j -= 1
        else:
            counts.deletions += 1
            i -= 1
    return counts


def cer(ref: str, hyp: str, punctuation: str = DEFAULT_PUNCTUATION
        ) -> tuple[AlignmentCounts, float]:
    """Alignment counts and CER between a reference and a hypothesis.

    Both sides are normalized first, unconditionally.
    """
    ref_n = normalize(ref, punctuation)
    hyp_n = normalize(hyp, punctuation)
    if not ref_n:
        raise ScoringError(f"reference {ref!r} is empty after normalization")
    counts = _aligned_counts(ref_n, hyp_n)
    return counts, counts.cer


def micro_average(counts_list) -> AlignmentCounts:
    """Pool counts so CER = sum(S+I+D) / sum(ref_len)."""
    total = AlignmentCounts()
    for c in counts_list:
        total = total + c
    return total


@dataclass
class ScoreResult:
    per_utt: list  # (utt_id, AlignmentCounts, cer) rows in manifest order
    total: AlignmentCounts

    @property
    def cer(self) -> float:
        return self.total.cer


def score_run(hyps: dict[str, str], entries,
              punctuation: str = DEFAULT_PUNCTUATION) -> ScoreResult:
    """Micro-averaged CER of a decode mapping over one manifest."""
    entries = list(entries)
    if not entries:
        raise ScoringError("cannot score against an empty manifest")
    missing = [e.utt_id for e in entries if e.utt_id not in hyps]
    if missing:
        raise ScoringError(
            f"decode output is missing {len(missing)} utterance(s): "
            f"{', '.join(missing[:5])}")
    extra = sorted(set(hyps) - {e.utt_id for e in entries})
    if extra:
        log.warning("ignoring %d hypothesis id(s) not in the manifest: %s",
                    len(extra), ", ".join(extra[:5]))
    per_utt = []
    for e in entries:
        counts, value = cer(e.transcript, hyps[e.utt_id], punctuation)
        per_utt.append((e.utt_id, counts, value))
    total = micro_average(c for _, c, _ in per_utt)
    return ScoreResult(per_utt=per_utt, total=total)


# ---------------------------------------------------------------------------
# Comparison reports
# ---------------------------------------------------------------------------


def emit_report(runs: dict[str, dict[str, AlignmentCounts]],
                md_path, tsv_path, header_note: str = "") -> None:
    """Tables of CER% per test set (rows) and run (columns).

    Markdown bolds the best value per row; the TSV carries full-precision
    values and is byte-stable for identical inputs.
    """
    if not runs:
        raise ReportError("report needs at least one run")
    labels = list(runs)
    sets = list(runs[labels[0]])
    for label in labels:
        if list(runs[label]) != sets:
            raise ReportError(
                f"run {label!r} covers test sets {list(runs[label])}, "
                f"expected {sets}")

    cells = {s: [100.0 * runs[lb][s].cer for lb in labels] for s in sets}

    md = []
    if header_note:
        md.append(f"> {header_note}")
        md.append("")
    md.append("| test set | " + " | ".join(labels) + " |")
    md.append("|" + "---|" * (len(labels) + 1))
    for s in sets:
        row = cells[s]
        best = min(row)
        rendered = [f"**{v:.2f}**" if v == best else f"{v:.2f}" for v in row]
        md.append(f"| {s} | " + " | ".join(rendered) + " |")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("\n".join(md) + "\n")

    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("test_set\t" + "\t".join(labels) + "\n")
        for s in sets:
            f.write(s + "\t" + "\t".join(repr(v) for v in cells[s]) + "\n")


def read_report_tsv(path) -> dict[str, dict[str, float]]:
    """Reload an emitted TSV as {run_label: {test_set: cer_percent}}."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise ReportError(f"{path} is empty")
    labels = lines[0].split("\t")[1:]
    out: dict[str, dict[str, float]] = {lb: {} for lb in labels}
    for ln in lines[1:]:
        cols = ln.split("\t")
        for lb, cell in zip(labels, cols[1:]):
            out[lb][cols[0]] = float(cell)
    return out
