"""Entity-level micro P/R/F1 and the four-way error-taxonomy analysis.

F1 uses the exact span-and-type convention. The taxonomy rests on a
greedy one-to-one alignment in four priority tiers:

  1. exact span and type          -> Exact
  2. exact span, different type   -> TypeOnly   (type error)
  3. overlapping span, same type  -> SpanOnly   (span error)
  4. overlapping span, diff type  -> Overlap    (span error)

Ties within a tier prefer larger character overlap, then smaller start
offsets. Unmatched predictions are spurious; unmatched gold mentions are
omissions. Error rates are reported as proportions of predicted entities
(the omission rate additionally gets a gold-denominator variant in the
JSON, since the predicted-entity denominator is unusual for omissions).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .corpus import Dataset, Mention
from .errors import DatasetError


class MatchRelation(Enum):
    EXACT = "Exact"
    SPAN_ONLY = "SpanOnly"
    TYPE_ONLY = "TypeOnly"
    OVERLAP = "Overlap"


@dataclass(frozen=True)
class Alignment:
    matched: tuple[tuple[int, int, MatchRelation], ...]
    unmatched_pred: tuple[int, ...]
    unmatched_gold: tuple[int, ...]


@dataclass(frozen=True)
class ErrorBreakdown:
    span_errors: int
    type_errors: int
    spurious: int
    omissions: int
    exact_matches: int
    num_preds: int
    num_gold: int

    def rate(self, count: int) -> float | None:
        return count / self.num_preds if self.num_preds else None

    @property
    def span_error_rate(self) -> float | None:
        return self.rate(self.span_errors)

    @property
    def type_error_rate(self) -> float | None:
        return self.rate(self.type_errors)

    @property
    def spurious_rate(self) -> float | None:
        return self.rate(self.spurious)

    @property
    def omission_rate(self) -> float | None:
        return self.rate(self.omissions)

    @property
    def omission_rate_gold(self) -> float | None:
        return self.omissions / self.num_gold if self.num_gold else None

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            span_errors=self.span_errors + other.span_errors,
            type_errors=self.type_errors + other.type_errors,
            spurious=self.spurious + other.spurious,
            omissions=self.omissions + other.omissions,
            exact_matches=self.exact_matches + other.exact_matches,
            num_preds=self.num_preds + other.num_preds,
            num_gold=self.num_gold + other.num_gold,
        )


EMPTY_BREAKDOWN = ErrorBreakdown(0, 0, 0, 0, 0, 0, 0)


def _check_grounded(mentions: list[Mention], text: str, label: str) -> None:
    for m in mentions:
        if not (0 <= m.start < m.end <= len(text)) or text[m.start : m.end] != m.surface:
            raise DatasetError(f"{label} mention {m.surface!r} [{m.start},{m.end}) is not grounded")


def micro_counts(preds: list[Mention], gold: list[Mention]) -> tuple[int, int, int]:
    """(TP, FP, FN) under exact span+type matching with one-to-one
    treatment of duplicates."""
    pred_keys = Counter((m.start, m.end, m.entity_type.name) for m in preds)
    gold_keys = Counter((m.start, m.end, m.entity_type.name) for m in gold)
    tp = sum(min(n, gold_keys[k]) for k, n in pred_keys.items())
    return tp, len(preds) - tp, len(gold) - tp


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Micro P/R/F1 from pooled counts. A fully empty pool scores 1.0 by
    convention; an empty side against a non-empty one scores 0."""
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def score_micro(
    preds: list[Mention], gold: list[Mention], text: str | None = None
) -> tuple[float, float, float]:
    """Entity-level P/R/F1 for one document. When text is supplied, every
    mention must be grounded in it."""
    if text is not None:
        _check_grounded(preds, text, "predicted")
        _check_grounded(gold, text, "gold")
    tp, fp, fn = micro_counts(preds, gold)
    return prf(tp, fp, fn)


def _overlap(a: Mention, b: Mention) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def align(preds: list[Mention], gold: list[Mention]) -> Alignment:
    """Greedy one-to-one alignment in the documented tier order."""

    def tier_pairs(tier: int) -> list[tuple[int, int, int]]:
        pairs = []
        for i, p in enumerate(preds):
            for j, g in enumerate(gold):
                same_span = (p.start, p.end) == (g.start, g.end)
                same_type = p.entity_type == g.entity_type
                ov = _overlap(p, g)
                if tier == 1 and same_span and same_type:
                    pairs.append((i, j, ov))
                elif tier == 2 and same_span and not same_type:
                    pairs.append((i, j, ov))
                elif tier == 3 and not same_span and ov >= 1 and same_type:
                    pairs.append((i, j, ov))
                elif tier == 4 and not same_span and ov >= 1 and not same_type:
                    pairs.append((i, j, ov))
        return pairs

    relations = {1: MatchRelation.EXACT, 2: MatchRelation.TYPE_ONLY,
                 3: MatchRelation.SPAN_ONLY, 4: MatchRelation.OVERLAP}
    matched: list[tuple[int, int, MatchRelation]] = []
    used_pred: set[int] = set()
    used_gold: set[int] = set()
    for tier in (1, 2, 3, 4):
        candidates = sorted(
            tier_pairs(tier),
            key=lambda c: (-c[2], preds[c[0]].start, gold[c[1]].start, c[0], c[1]),
        )
        for i, j, _ in candidates:
            if i in used_pred or j in used_gold:
                continue
            used_pred.add(i)
            used_gold.add(j)
            matched.append((i, j, relations[tier]))
    return Alignment(
        matched=tuple(matched),
        unmatched_pred=tuple(i for i in range(len(preds)) if i not in used_pred),
        unmatched_gold=tuple(j for j in range(len(gold)) if j not in used_gold),
    )


def classify_errors(
    alignment: Alignment, preds: list[Mention], gold: list[Mention]
) -> ErrorBreakdown:
    """Taxonomy counts from an alignment: SpanOnly and Overlap matches are
    span errors, TypeOnly matches are type errors, leftovers are spurious
    predictions and omitted gold mentions."""
    relation_counts = Counter(rel for _, _, rel in alignment.matched)
    return ErrorBreakdown(
        span_errors=relation_counts[MatchRelation.SPAN_ONLY] + relation_counts[MatchRelation.OVERLAP],
        type_errors=relation_counts[MatchRelation.TYPE_ONLY],
        spurious=len(alignment.unmatched_pred),
        omissions=len(alignment.unmatched_gold),
        exact_matches=relation_counts[MatchRelation.EXACT],
        num_preds=len(preds),
        num_gold=len(gold),
    )


# --- reports ---------------------------------------------------------------

@dataclass(frozen=True)
class StageScores:
    precision: float
    recall: float
    f1: float
    errors: ErrorBreakdown


@dataclass(frozen=True)
class EvalReport:
    document_count: int
    failed_count: int
    initial: StageScores
    final: StageScores
    per_type_f1: dict[str, dict[str, float]]
    warning_count: int


def _stage_scores(per_doc: list[tuple[list[Mention], list[Mention]]]) -> StageScores:
    tp = fp = fn = 0
    breakdown = EMPTY_BREAKDOWN
    for preds, gold in per_doc:
        dtp, dfp, dfn = micro_counts(preds, gold)
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
        breakdown = breakdown + classify_errors(align(preds, gold), preds, gold)
    p, r, f1 = prf(tp, fp, fn)
    return StageScores(precision=p, recall=r, f1=f1, errors=breakdown)


def _per_type_f1(per_doc: list[tuple[list[Mention], list[Mention]]]) -> dict[str, float]:
    counts: dict[str, list[int]] = {}
    for preds, gold in per_doc:
        for name in {m.entity_type.name for m in preds} | {m.entity_type.name for m in gold}:
            p_t = [m for m in preds if m.entity_type.name == name]
            g_t = [m for m in gold if m.entity_type.name == name]
            tp, fp, fn = micro_counts(p_t, g_t)
            slot = counts.setdefault(name, [0, 0, 0])
            slot[0] += tp
            slot[1] += fp
            slot[2] += fn
    return {name: prf(*slot)[2] for name, slot in sorted(counts.items())}


def build_report(traces: list, dataset: Dataset) -> EvalReport:
    """Score initial and final predictions of every non-failed trace
    against the dataset's gold annotations."""
    if not traces:
        raise DatasetError("no traces")
    initial_pairs = []
    final_pairs = []
    warning_count = 0
    failed = 0
    for trace in traces:
        warning_count += len(trace.warnings)
        if trace.failed:
            failed += 1
            continue
        doc = dataset.document(trace.doc_id)  # KeyError on unknown id
        if doc.gold is None:
            raise DatasetError(f"document {trace.doc_id} has no gold annotation")
        _check_grounded(trace.initial_pred, doc.text, "initial")
        _check_grounded(trace.final_pred, doc.text, "final")
        gold = list(doc.gold)
        initial_pairs.append((list(trace.initial_pred), gold))
        final_pairs.append((list(trace.final_pred), gold))
    if not initial_pairs:
        raise DatasetError("no scoreable traces (all failed)")
    return EvalReport(
        document_count=len(traces),
        failed_count=failed,
        initial=_stage_scores(initial_pairs),
        final=_stage_scores(final_pairs),
        per_type_f1={
            "initial": _per_type_f1(initial_pairs),
            "final": _per_type_f1(final_pairs),
        },
        warning_count=warning_count,
    )


def _breakdown_to_dict(b: ErrorBreakdown) -> dict:
    return {
        "counts": {
            "exact_matches": b.exact_matches,
            "span_errors": b.span_errors,
            "type_errors": b.type_errors,
            "spurious": b.spurious,
            "omissions": b.omissions,
            "predicted": b.num_preds,
            "gold": b.num_gold,
        },
        "rates_of_predicted": {
            "span_error_rate": b.span_error_rate,
            "type_error_rate": b.type_error_rate,
            "spurious_rate": b.spurious_rate,
            "omission_rate": b.omission_rate,
        },
        "omission_rate_of_gold": b.omission_rate_gold,
    }


def report_to_dict(report: EvalReport) -> dict:
    return {
        "schema_version": 1,
        "document_count": report.document_count,
        "failed_count": report.failed_count,
        "warning_count": report.warning_count,
        "initial": {
            "precision": report.initial.precision,
            "recall": report.initial.recall,
            "f1": report.initial.f1,
            "errors": _breakdown_to_dict(report.initial.errors),
        },
        "final": {
            "precision": report.final.precision,
            "recall": report.final.recall,
            "f1": report.final.f1,
            "errors": _breakdown_to_dict(report.final.errors),
        },
        "per_type_f1": report.per_type_f1,
    }


def _fmt_rate(value: float | None) -> str:
    return f"{100 * value:6.2f}" if value is not None else "     -"


def format_report_table(report: EvalReport) -> str:
    """Plain-text summary: scores per stage, then error rates as
    proportions of predicted entities (initial vs final columns)."""
    lines = [
        f"documents: {report.document_count}  failed: {report.failed_count}  "
        f"warnings: {report.warning_count}",
        "",
        f"{'stage':<12}{'P':>8}{'R':>8}{'F1':>8}",
    ]
    for label, stage in (("initial", report.initial), ("final", report.final)):
        lines.append(
            f"{label:<12}{stage.precision:8.4f}{stage.recall:8.4f}{stage.f1:8.4f}"
        )
    lines += [
        "",
        "error rates (% of predicted entities)",
        f"{'':<24}{'initial':>8}{'final':>8}",
    ]
    rows = (
        ("Span Error Rate", "span_error_rate"),
        ("Type Error Rate", "type_error_rate"),
        ("Spurious Detection Rate", "spurious_rate"),
        ("Omission Rate", "omission_rate"),
    )
    for label, attr in rows:
        lines.append(
            f"{label:<24}"
            f"{_fmt_rate(getattr(report.initial.errors, attr)):>8}"
            f"{_fmt_rate(getattr(report.final.errors, attr)):>8}"
        )
    return "\n".join(lines)


def emit_report(traces: list, dataset: Dataset, out_dir: str | Path) -> EvalReport:
    """Build the report and write report.json plus report.txt."""
    report = build_report(traces, dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "report.txt").write_text(format_report_table(report) + "\n", encoding="utf-8")
    return report
