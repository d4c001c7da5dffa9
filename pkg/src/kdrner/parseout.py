"""Parsers for model free-text outputs.

All parse operations are total: nothing raises on bad input, and every
discarded item is accounted for by exactly one warning string, so callers
can audit losses precisely.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .corpus import EntityType, Mention
from .errors import DatasetError

# Optional list bullet, then `surface [TYPE]`; anything after the bracket
# is commentary and ignored. Surfaces containing "[" are unrepresentable
# in this grammar (documented limitation).
_MENTION_LINE = re.compile(
    r"""^\s*(?:[-*•]\s*|\d+[.)]\s*)?(?P<surface>[^\[\]]+?)\s*\[(?P<type>[^\[\]]+)\]"""
)

NONE_TOKEN = "NONE"
NO_ISSUES_TOKEN = "NO_ISSUES"


@dataclass(frozen=True)
class RawPair:
    """One parsed `surface [TYPE]` line, before grounding."""

    surface: str
    type_label: str
    line_no: int


class ReflectionKind(Enum):
    SPAN_ERROR = "SpanError"
    TYPE_ERROR = "TypeError"
    SPURIOUS = "Spurious"
    OMISSION = "Omission"


@dataclass(frozen=True)
class ReflectionFinding:
    """One diagnostic from the review pass over a prediction.

    suggestion, when present, is `surface [TYPE]` (replacement), `REMOVE`,
    or `ADD surface [TYPE]`.
    """

    kind: ReflectionKind
    target_surface: str
    justification: str
    suggestion: str | None = None


_SUGGESTION = re.compile(
    r"""^(?:REMOVE|(?:ADD\s+)?[^\[\]]+?\s*\[[^\[\]]+\])$"""
)


def parse_mentions(raw: str, type_set: list[EntityType]) -> tuple[list[RawPair], list[str]]:
    """Parse `surface [TYPE]` lines into RawPairs.

    A response that is exactly the NONE token means "no entities". Lines
    that do not match the grammar, unknown types, and exact duplicate
    (surface, type) pairs each produce one warning and are dropped.
    """
    if raw.strip() == NONE_TOKEN:
        return [], []
    known = {t.name for t in type_set}
    pairs: list[RawPair] = []
    warnings: list[str] = []
    seen: set[tuple[str, str]] = set()
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        m = _MENTION_LINE.match(line)
        if not m:
            warnings.append(f"line {line_no}: does not match 'surface [TYPE]' grammar")
            continue
        surface = m.group("surface").strip()
        type_label = m.group("type").strip()
        if not surface:
            warnings.append(f"line {line_no}: empty surface")
            continue
        if type_label not in known:
            warnings.append(f"line {line_no}: unknown type {type_label!r}")
            continue
        if (surface, type_label) in seen:
            warnings.append(f"line {line_no}: duplicate pair {surface!r} [{type_label}]")
            continue
        seen.add((surface, type_label))
        pairs.append(RawPair(surface=surface, type_label=type_label, line_no=line_no))
    return pairs, warnings


def ground(pairs: list[RawPair], text: str) -> tuple[list[Mention], list[str]]:
    """Bind parsed pairs to character spans in text.

    Each pair binds to the leftmost occurrence of its surface not already
    consumed by an earlier binding of the identical surface (the k-th
    repeat of a surface takes the k-th occurrence, overlapping occurrences
    counted). Case-sensitive exact match; unbindable pairs are dropped
    with a warning. Output is sorted by (start, end, type).
    """
    mentions: list[Mention] = []
    warnings: list[str] = []
    next_search: dict[str, int] = {}
    for pair in pairs:
        start = text.find(pair.surface, next_search.get(pair.surface, 0))
        if start < 0:
            warnings.append(
                f"line {pair.line_no}: surface {pair.surface!r} not found in text (occurrence exhausted)"
            )
            continue
        next_search[pair.surface] = start + 1
        try:
            entity_type = EntityType(pair.type_label)
        except DatasetError:
            warnings.append(f"line {pair.line_no}: type label {pair.type_label!r} is not usable")
            continue
        mentions.append(
            Mention(
                surface=pair.surface,
                start=start,
                end=start + len(pair.surface),
                entity_type=entity_type,
            )
        )
    mentions.sort(key=lambda m: (m.start, m.end, m.entity_type.name))
    return mentions, warnings


def parse_reflection(raw: str) -> tuple[list[ReflectionFinding], list[str]]:
    """Parse `FINDING: Kind | surface | justification | suggestion` lines.

    A response that is exactly NO_ISSUES yields no findings and no
    warnings. Unknown kinds and malformed lines warn and are dropped; the
    suggestion field is optional but must match its grammar when present.
    """
    if raw.strip() == NO_ISSUES_TOKEN:
        return [], []
    findings: list[ReflectionFinding] = []
    warnings: list[str] = []
    kinds = {k.value: k for k in ReflectionKind}
    for line_no, line in enumerate(raw.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if not stripped.startswith("FINDING:"):
            warnings.append(f"line {line_no}: not a FINDING line")
            continue
        fields = [f.strip() for f in stripped[len("FINDING:") :].split("|")]
        if len(fields) < 3:
            warnings.append(f"line {line_no}: FINDING needs kind | surface | justification")
            continue
        kind_label, surface, justification = fields[0], fields[1], fields[2]
        if kind_label not in kinds:
            warnings.append(f"line {line_no}: unknown finding kind {kind_label!r}")
            continue
        if not surface:
            warnings.append(f"line {line_no}: empty target surface")
            continue
        suggestion = fields[3] if len(fields) > 3 and fields[3] else None
        if suggestion is not None and not _SUGGESTION.match(suggestion):
            warnings.append(f"line {line_no}: suggestion {suggestion!r} does not match grammar")
            continue
        findings.append(
            ReflectionFinding(
                kind=kinds[kind_label],
                target_surface=surface,
                justification=justification,
                suggestion=suggestion,
            )
        )
    return findings, warnings
