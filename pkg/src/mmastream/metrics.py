"""Evaluation over decode records: WER, boundary coverage, streamability, latency.

Metrics consume the JSON-lines records written by the decoder, not live model
state. A record carries at least ``id``, ``tokens`` (without eos),
``n_frames``, ``total_heads``, ``boundary_log`` (per step ``frames`` [L][H],
with the sentinel ``n_frames + 1`` for heads that found no boundary) and
``beam_log`` (per step ``failures`` among the expanded candidates).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


# -- edit distance --------------------------------------------------------

def align(hyp: Sequence, ref: Sequence) -> list[tuple[int | None, int | None]]:
    """Levenshtein alignment (unit costs) as (hyp_index, ref_index) pairs; None marks a gap.

    Among equal-cost paths the backtrace prefers match/substitution, then
    deletion, then insertion.
    """
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    pairs = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            i, j = i - 1, j - 1
            pairs.append((i, j))
        elif j and d[i, j] == d[i, j - 1] + 1:
            j -= 1
            pairs.append((None, j))
        else:
            i -= 1
            pairs.append((i, None))
    return pairs[::-1]


def error_counts(hyp: Sequence, ref: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of hyp against ref."""
    s = dl = ins = 0
    for i, j in align(hyp, ref):
        if i is None:
            dl += 1
        elif j is None:
            ins += 1
        elif hyp[i] != ref[j]:
            s += 1
    return s, dl, ins


def word_error_rate(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise MetricsError("word_error_rate needs a non-empty reference")
    return 100.0 * sum(error_counts(hyp, ref)) / len(ref)


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Total errors over total reference length, in percent."""
    errors = words = 0
    for hyp, ref in pairs:
        if len(ref) == 0:
            raise MetricsError("empty reference in corpus")
        errors += sum(error_counts(hyp, ref))
        words += len(ref)
    if words == 0:
        raise MetricsError("corpus_wer on an empty corpus")
    return 100.0 * errors / words


# -- boundary statistics --------------------------------------------------

def _steps(record: dict) -> list[dict]:
    """Boundary-log entries for output steps 1..|y_hat| (the eos step is excluded)."""
    return record["boundary_log"][: len(record["tokens"])]


def boundary_counts(record: dict) -> list[float]:
    """Cumulative Q_i: boundaries found up to step i, averaged over all MA heads."""
    sentinel = record["n_frames"] + 1
    per_step = [sum(f < sentinel for row in e["frames"] for f in row) for e in _steps(record)]
    return (np.cumsum(per_step) / record["total_heads"]).tolist()


def utterance_coverage(record: dict) -> float | None:
    n = len(record["tokens"])
    if n == 0:
        log.warning("utterance %s: empty hypothesis skipped", record.get("id"))
        return None
    return 100.0 * boundary_counts(record)[-1] / n


def boundary_coverage(records: Iterable[dict]) -> float:
    """R_cov: mean over utterances of 100 * Q / |y_hat| (unclipped)."""
    vals = [c for c in map(utterance_coverage, records) if c is not None]
    if not vals:
        raise MetricsError("no utterance with a non-empty hypothesis")
    return float(np.mean(vals))


def is_streamable(record: dict) -> bool:
    """delta_n: no candidate of any beam up to step |y_hat| hit a streaming failure."""
    n = len(record["tokens"])
    return all(e["failures"] == 0 for e in record["beam_log"][:n])


def streamability(records: Iterable[dict]) -> float:
    """R_str = 100 * (number of streamable utterances) / N."""
    flags = []
    for r in records:
        if len(r["tokens"]) == 0:
            log.warning("utterance %s: empty hypothesis skipped", r.get("id"))
            continue
        flags.append(is_streamable(r))
    if not flags:
        raise MetricsError("no utterance with a non-empty hypothesis")
    return 100.0 * sum(flags) / len(flags)


def frames_streamed_fraction(record: dict) -> float:
    """Share of input frames read before the first streaming failure (1.0 if none)."""
    n = len(record["tokens"])
    for pos, e in enumerate(record["beam_log"][:n]):
        if e["failures"]:
            if pos == 0:
                return 0.0
            return min(record["boundary_log"][pos - 1].get("read", 0) / record["n_frames"], 1.0)
    return 1.0


def boundary_delays(detected: Sequence[Sequence[Sequence[int]]], hyp: Sequence, ref: Sequence,
                    true_boundaries: Sequence[int], sentinel: int | None = None) -> list[int]:
    """Per-head delays (detected - true frame) over Levenshtein-matched tokens.

    detected[i] is the [L][H] frame table of hypothesis step i; heads at the
    sentinel contribute nothing.
    """
    if len(true_boundaries) != len(ref):
        raise MetricsError("true_boundaries and reference differ in length")
    out = []
    for i, j in align(hyp, ref):
        if i is None or j is None or hyp[i] != ref[j]:
            continue
        for row in detected[i]:
            out.extend(int(f) - int(true_boundaries[j]) for f in row if sentinel is None or f != sentinel)
    return out


def latency_stats(delays: Sequence[int]) -> dict:
    if len(delays) == 0:
        return {"mean_delay": float("nan"), "max_delay": float("nan"), "n": 0}
    arr = np.asarray(delays, dtype=np.float64)
    return {"mean_delay": float(arr.mean()), "max_delay": float(arr.max()), "n": int(arr.size)}


def boundary_spread_violations(record: dict, eps_wait: int) -> int:
    """Steps/layers where the natural-plus-forced boundaries of one layer span >= eps_wait frames."""
    sentinel = record["n_frames"] + 1
    bad = 0
    for e in record["boundary_log"]:
        for row in e["frames"]:
            live = [f for f in row if f != sentinel]
            if live and max(live) - min(live) >= eps_wait:
                bad += 1
    return bad


# -- reports --------------------------------------------------------------

@dataclass
class UtteranceEval:
    id: str
    best_tokens: list
    reference: list
    wer: float
    q_table: list
    coverage: float | None
    streamable: int
    frames_streamed_fraction: float
    forced_count: int = 0


@dataclass
class EvalReport:
    wer_percent: float
    r_cov_percent: float
    r_str_percent: float
    mean_frames_streamed: float
    mean_delay: float = float("nan")
    max_delay: float = float("nan")
    utterances: list[UtteranceEval] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: v for k, v in vars(self).items() if k != "utterances"}


def evaluate(records: Sequence[dict], references: dict[str, Sequence],
             true_boundaries: dict[str, Sequence[int]] | None = None) -> EvalReport:
    """Score decode records against references keyed by utterance id.

    ``true_boundaries`` (same keys, frames on the encoder time axis) enables
    the latency statistics.
    """
    utts, delays = [], []
    for r in records:
        if r["id"] not in references:
            raise MetricsError(f"no reference for utterance {r['id']!r}")
        ref = list(references[r["id"]])
        hyp = list(r["tokens"])
        q = boundary_counts(r) if hyp else []
        utts.append(UtteranceEval(r["id"], hyp, ref, word_error_rate(hyp, ref), q,
                                  utterance_coverage(r), int(is_streamable(r)),
                                  frames_streamed_fraction(r), int(r.get("forced_count", 0))))
        if true_boundaries is not None:
            frames = [e["frames"] for e in _steps(r)]
            delays += boundary_delays(frames, hyp, ref, true_boundaries[r["id"]], r["n_frames"] + 1)
    if not utts:
        raise MetricsError("no decode records")
    lat = latency_stats(delays)
    nonempty = [u for u in utts if u.best_tokens]
    r_cov = r_str = float("nan")
    if nonempty:
        r_cov = float(np.mean([u.coverage for u in nonempty]))
        r_str = 100.0 * sum(u.streamable for u in nonempty) / len(nonempty)
    else:
        log.warning("every hypothesis is empty: coverage and streamability are undefined")
    return EvalReport(
        wer_percent=corpus_wer((u.best_tokens, u.reference) for u in utts),
        r_cov_percent=r_cov,
        r_str_percent=r_str,
        mean_frames_streamed=float(np.mean([u.frames_streamed_fraction for u in utts])),
        mean_delay=lat["mean_delay"], max_delay=lat["max_delay"], utterances=utts)


def write_report(report: EvalReport, metrics_path, utterances_path=None) -> None:
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.summary().items():
            w.writerow([k, v])
    if utterances_path is None:
        return
    with open(utterances_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "wer", "coverage", "streamable", "frames_streamed_fraction", "forced_count",
                    "hypothesis", "reference"])
        for u in report.utterances:
            w.writerow([u.id, u.wer, "" if u.coverage is None else u.coverage, u.streamable,
                        u.frames_streamed_fraction, u.forced_count,
                        " ".join(map(str, u.best_tokens)), " ".join(map(str, u.reference))])


def read_records(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MetricsError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
    return records
