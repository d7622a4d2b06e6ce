"""Evaluation: kana-normalized CER, accent correctness, leakage test.

CER is Levenshtein distance over kana-normalized character sequences
divided by normalized reference length; samples with CER > 0.5 are
excluded from aggregates. Accent correctness is an exact match of the
target word's pitch sub-pattern, read off the generated speech codes at
the oracle's mora positions — the codec makes pitch directly observable,
so no listener stands between the model and the judgment.

The leakage test asks whether tagging one word changes the accent of a
different, untagged word: it compares the base model on fully plain
input against the adapted model on the one-word-tagged input, and
bootstraps a confidence interval for the correctness difference.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataprep import EvalItem, codes_to_kana, codes_to_pitch, decode_speech_ids
from .errors import CorruptFile
from .kernels import edit_distance
from .model import ToyLM, generate
from .notation import normalize_kana
from .tokenizer import Vocabulary, encode_text

CER_EXCLUSION_THRESHOLD = 0.5
EVAL_MODES = ("plain", "kana", "tagged")
_DEFAULT_MAX_NEW = 40


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate over kana-normalized strings."""
    ref = normalize_kana(reference)
    hyp = normalize_kana(hypothesis)
    if not ref:
        return 1.0 if hyp else 0.0
    return edit_distance([ord(c) for c in ref], [ord(c) for c in hyp]) / len(ref)


@dataclass(frozen=True)
class SampleResult:
    item_id: int
    cer: float
    accent_correct: bool | None
    excluded: bool
    reason: str | None
    hypothesis_kana: str
    hypothesis_pitch: str


@dataclass(frozen=True)
class EvalReport:
    mode: str
    per_sample: tuple[SampleResult, ...]
    mean_cer: float
    accent_rate: float
    n_items: int
    n_excluded: int

    @classmethod
    def from_samples(cls, mode: str, rows) -> "EvalReport":
        rows = tuple(rows)
        mean_cer, accent_rate, n_excluded = _aggregate(rows)
        return cls(
            mode=mode,
            per_sample=rows,
            mean_cer=mean_cer,
            accent_rate=accent_rate,
            n_items=len(rows),
            n_excluded=n_excluded,
        )


def _aggregate(rows) -> tuple[float, float, int]:
    kept = [r for r in rows if not r.excluded]
    n_excluded = len(rows) - len(kept)
    mean_cer = sum(r.cer for r in kept) / len(kept) if kept else 0.0
    judged = [r for r in kept if r.accent_correct is not None]
    accent_rate = (
        sum(1 for r in judged if r.accent_correct) / len(judged)
        if judged
        else 0.0
    )
    return mean_cer, accent_rate, n_excluded


def _eval_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("UTTERTUNE_THREADS", "")
    return max(1, int(env)) if env.strip() else 1


def item_text(item: EvalItem, mode: str) -> str:
    if mode == "plain":
        return item.text_plain
    if mode == "kana":
        return item.text_kana
    if mode == "tagged":
        return item.text_tagged
    raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")


def _align_target_span(ref_ids, hyp_ids, lo, hi):
    """Locate reference morae [lo, hi) inside the hypothesis.

    Runs a minimal-edit alignment of the two mora sequences and returns the
    start of the hypothesis run matched one-to-one to the span, or None when
    any span mora was substituted, dropped, or split apart by an insertion.
    The backtrace prefers diagonal then deletion moves, so the result is
    deterministic even when several alignments tie.
    """
    n, m = len(ref_ids), len(hyp_ids)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        r = ref_ids[i - 1]
        for j in range(1, m + 1):
            row[j] = min(
                prev[j - 1] + (r != hyp_ids[j - 1]),
                prev[j] + 1,
                row[j - 1] + 1,
            )
    link: list[int | None] = [None] * n
    i, j = n, m
    while i > 0:
        if j > 0 and dist[i][j] == dist[i - 1][j - 1] + (
            ref_ids[i - 1] != hyp_ids[j - 1]
        ):
            if ref_ids[i - 1] == hyp_ids[j - 1]:
                link[i - 1] = j - 1
            i, j = i - 1, j - 1
        elif dist[i][j] == dist[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    span = link[lo:hi]
    if not span or None in span:
        return None
    if span != list(range(span[0], span[0] + (hi - lo))):
        return None
    return span[0]


def _judge_item(model, vocab, item, text, adapter, max_new) -> SampleResult:
    prompt = encode_text(text, vocab)
    budget = min(max_new, model.config.max_seq - len(prompt))
    hyp_ids = generate(model, prompt, max_new=budget, adapter=adapter)
    codes = decode_speech_ids(hyp_ids, vocab.speech_token_offset)
    hyp_kana = codes_to_kana(codes)
    hyp_pitch = codes_to_pitch(codes)
    sample_cer = cer(item.reference_kana(), hyp_kana)
    lo = item.target_mora_start
    hi = lo + item.target_mora_count
    start = _align_target_span(
        [c.mora_id for c in item.codes],
        [c.mora_id for c in codes],
        lo,
        hi,
    )
    accent_correct = (
        start is not None
        and hyp_pitch[start : start + item.target_mora_count]
        == item.target_pitch()
    )
    excluded = sample_cer > CER_EXCLUSION_THRESHOLD
    return SampleResult(
        item_id=item.item_id,
        cer=sample_cer,
        accent_correct=accent_correct,
        excluded=excluded,
        reason=f"cer>{CER_EXCLUSION_THRESHOLD}" if excluded else None,
        hypothesis_kana=hyp_kana,
        hypothesis_pitch=hyp_pitch,
    )


def evaluate_set(
    model: ToyLM,
    vocab: Vocabulary,
    items,
    mode: str,
    adapter=None,
    max_new: int = _DEFAULT_MAX_NEW,
    threads: int | None = None,
) -> EvalReport:
    """Greedy generation and scoring over one eval set.

    Accent is judged on the target word located by minimal-edit alignment of
    the hypothesis morae against the reference reading — the textual analog
    of finding the word inside a transcription. Accent counts as correct only
    when every mora of the word appears exactly and contiguously in the
    hypothesis with the target pitch pattern. Items are independent, so
    UTTERTUNE_THREADS (or the threads argument) may fan generation out
    across a thread pool without changing results.
    """
    items = tuple(items)
    texts = [item_text(item, mode) for item in items]
    n_threads = _eval_threads(threads)
    model.params64()  # build the shared float64 view before any fan-out

    def judge(pair):
        item, text = pair
        return _judge_item(model, vocab, item, text, adapter, max_new)

    if n_threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(judge, zip(items, texts)))
    else:
        rows = [judge(pair) for pair in zip(items, texts)]
    return EvalReport.from_samples(mode, rows)


# -- report serialization ------------------------------------------------------

_REPORT_MAGIC = "uttertune-evalreport v1"


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_REPORT_MAGIC + "\n")
        fh.write(f"mode\t{report.mode}\n")
        fh.write(f"n_items\t{report.n_items}\n")
        fh.write(f"n_excluded\t{report.n_excluded}\n")
        fh.write(f"mean_cer\t{report.mean_cer!r}\n")
        fh.write(f"accent_rate\t{report.accent_rate!r}\n")
        for r in report.per_sample:
            accent = "na" if r.accent_correct is None else (
                "correct" if r.accent_correct else "incorrect"
            )
            fh.write(
                "\t".join(
                    (
                        "row",
                        str(r.item_id),
                        repr(r.cer),
                        accent,
                        "excluded" if r.excluded else "kept",
                        r.reason or "-",
                        r.hypothesis_kana,
                        r.hypothesis_pitch,
                    )
                )
                + "\n"
            )


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _REPORT_MAGIC:
        raise CorruptFile(f"not an eval report: {path}")
    header: dict[str, str] = {}
    rows = []
    for line in lines[1:]:
        fields = line.split("\t")
        if fields[0] == "row":
            if len(fields) != 8:
                raise CorruptFile("malformed report row")
            accent = {"na": None, "correct": True, "incorrect": False}[fields[3]]
            rows.append(
                SampleResult(
                    item_id=int(fields[1]),
                    cer=float(fields[2]),
                    accent_correct=accent,
                    excluded=fields[4] == "excluded",
                    reason=None if fields[5] == "-" else fields[5],
                    hypothesis_kana=fields[6],
                    hypothesis_pitch=fields[7],
                )
            )
        elif len(fields) == 2:
            header[fields[0]] = fields[1]
        else:
            raise CorruptFile("malformed report header line")
    report = EvalReport(
        mode=header["mode"],
        per_sample=tuple(rows),
        mean_cer=float(header["mean_cer"]),
        accent_rate=float(header["accent_rate"]),
        n_items=int(header["n_items"]),
        n_excluded=int(header["n_excluded"]),
    )
    mean_cer, accent_rate, n_excluded = _aggregate(report.per_sample)
    if (
        mean_cer != report.mean_cer
        or accent_rate != report.accent_rate
        or n_excluded != report.n_excluded
        or len(report.per_sample) != report.n_items
    ):
        raise CorruptFile("report aggregates do not match its rows")
    return report


def format_summary(reports) -> str:
    """Aligned text table over one or more reports."""
    lines = [f"{'mode':<8} {'items':>5} {'excl':>4} {'CER':>8} {'accent':>7}"]
    for report in reports:
        lines.append(
            f"{report.mode:<8} {report.n_items:>5} {report.n_excluded:>4} "
            f"{report.mean_cer:>8.4f} {report.accent_rate:>7.3f}"
        )
    return "\n".join(lines)


# -- leakage -------------------------------------------------------------------


@dataclass(frozen=True)
class LeakageOutcome:
    item_id: int
    grapheme: str
    baseline_correct: bool
    adapted_correct: bool


@dataclass(frozen=True)
class LeakageResult:
    baseline_rate: float
    adapted_rate: float
    difference: float
    ci_low: float
    ci_high: float
    resamples: int
    outcomes: tuple[LeakageOutcome, ...]


def bootstrap_diff_ci(
    adapted, baseline, resamples: int = 10_000, seed: int = 0,
    level: float = 0.99,
) -> tuple[float, float]:
    """Paired bootstrap percentile CI for mean(adapted) - mean(baseline)."""
    a = np.asarray(adapted, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("need two equal-length non-empty vectors")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(resamples, a.size))
    diffs = a[idx].mean(axis=1) - b[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(diffs, [tail, 1.0 - tail])
    return float(lo), float(hi)


def leakage_test(
    model: ToyLM,
    vocab: Vocabulary,
    leakage_set,
    adapter,
    resamples: int = 10_000,
    seed: int = 0,
    max_new: int = _DEFAULT_MAX_NEW,
    threads: int | None = None,
) -> LeakageResult:
    """Accent correctness of the untagged word: base vs adapted model.

    The baseline route runs the bare base model on text_plain (no tags
    anywhere); the adapted route runs base+adapter on text_tagged, where
    a different word carries the tags. Gold is the majority reading, so
    a drop on the adapted side means tag processing leaked into words it
    was never asked about.
    """
    items = tuple(leakage_set)

    def correctness(use_adapter, mode):
        report = evaluate_set(
            model,
            vocab,
            items,
            mode,
            adapter=use_adapter,
            max_new=max_new,
            threads=threads,
        )
        return [bool(r.accent_correct) for r in report.per_sample]

    base_ok = correctness(None, "plain")
    adapted_ok = correctness(adapter, "tagged")
    baseline_rate = sum(base_ok) / len(items)
    adapted_rate = sum(adapted_ok) / len(items)
    ci_low, ci_high = bootstrap_diff_ci(
        adapted_ok, base_ok, resamples=resamples, seed=seed
    )
    outcomes = tuple(
        LeakageOutcome(
            item_id=item.item_id,
            grapheme=item.target_grapheme,
            baseline_correct=b,
            adapted_correct=a,
        )
        for item, b, a in zip(items, base_ok, adapted_ok)
    )
    return LeakageResult(
        baseline_rate=baseline_rate,
        adapted_rate=adapted_rate,
        difference=adapted_rate - baseline_rate,
        ci_low=ci_low,
        ci_high=ci_high,
        resamples=resamples,
        outcomes=outcomes,
    )


def save_leakage(result: LeakageResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("uttertune-leakage v1\n")
        fh.write(f"baseline_rate\t{result.baseline_rate!r}\n")
        fh.write(f"adapted_rate\t{result.adapted_rate!r}\n")
        fh.write(f"difference\t{result.difference!r}\n")
        fh.write(f"ci_low\t{result.ci_low!r}\n")
        fh.write(f"ci_high\t{result.ci_high!r}\n")
        fh.write(f"resamples\t{result.resamples}\n")
        for o in result.outcomes:
            fh.write(
                f"row\t{o.item_id}\t{o.grapheme}\t"
                f"{int(o.baseline_correct)}\t{int(o.adapted_correct)}\n"
            )


def load_leakage(path) -> LeakageResult:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "uttertune-leakage v1":
        raise CorruptFile(f"{path}: not a leakage result file")
    header: dict[str, str] = {}
    outcomes = []
    for line in lines[1:]:
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "row":
            if len(fields) != 5:
                raise CorruptFile(f"{path}: malformed row {line!r}")
            outcomes.append(
                LeakageOutcome(
                    item_id=int(fields[1]),
                    grapheme=fields[2],
                    baseline_correct=bool(int(fields[3])),
                    adapted_correct=bool(int(fields[4])),
                )
            )
        elif len(fields) == 2:
            header[fields[0]] = fields[1]
        else:
            raise CorruptFile(f"{path}: malformed line {line!r}")
    try:
        result = LeakageResult(
            baseline_rate=float(header["baseline_rate"]),
            adapted_rate=float(header["adapted_rate"]),
            difference=float(header["difference"]),
            ci_low=float(header["ci_low"]),
            ci_high=float(header["ci_high"]),
            resamples=int(header["resamples"]),
            outcomes=tuple(outcomes),
        )
    except KeyError as missing:
        raise CorruptFile(f"{path}: missing header field {missing}") from None
    if outcomes:
        baseline = sum(o.baseline_correct for o in outcomes) / len(outcomes)
        adapted = sum(o.adapted_correct for o in outcomes) / len(outcomes)
        if baseline != result.baseline_rate or adapted != result.adapted_rate:
            raise CorruptFile(f"{path}: rates do not match per-item outcomes")
    return result
