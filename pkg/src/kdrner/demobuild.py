"""Static support-set construction with entity-level contrastive targets.

Every demonstration carries its document's gold pairs as positives plus
exactly one constructed negative per positive, drawn deterministically
from four realistic error kinds: altered boundaries, wrong type labels,
fabricated (spurious) mentions, and omissions. Builders are pure
functions over immutable inputs plus an explicit seeded generator.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .corpus import Document, EntityType
from .errors import DatasetError


class PairPolarity(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class NegativeKind(Enum):
    BOUNDARY_ALTERED = "boundary"
    WRONG_TYPE = "wrong-type"
    SPURIOUS = "spurious"
    OMITTED = "omission"


@dataclass(frozen=True)
class LabeledPair:
    """A (surface, type) pair flagged as a correct target or a constructed error."""

    surface: str
    entity_type: EntityType
    polarity: PairPolarity
    negative_kind: NegativeKind | None = None
    note: str | None = None

    def __post_init__(self):
        if (self.negative_kind is not None) != (self.polarity is PairPolarity.NEGATIVE):
            raise DatasetError("negative_kind must be present exactly for negative pairs")
        if "[" in self.surface or "]" in self.surface:
            raise DatasetError(f"surface contains reserved bracket: {self.surface!r}")
        if not self.surface:
            raise DatasetError("empty pair surface")


@dataclass(frozen=True)
class Demonstration:
    """One labeled example: input text plus ordered positive and negative pairs."""

    input_text: str
    pairs: tuple[LabeledPair, ...]
    seed: int

    def __post_init__(self):
        positives = {(p.surface, p.entity_type) for p in self.positives}
        for p in self.pairs:
            if p.polarity is PairPolarity.POSITIVE and p.surface not in self.input_text:
                raise DatasetError(f"positive surface {p.surface!r} does not occur in input text")
            if p.negative_kind is NegativeKind.SPURIOUS and p.surface in self.input_text:
                raise DatasetError(f"spurious surface {p.surface!r} occurs in input text")
            if (
                p.polarity is PairPolarity.NEGATIVE
                and p.negative_kind is not NegativeKind.OMITTED
                and (p.surface, p.entity_type) in positives
            ):
                raise DatasetError(f"negative pair duplicates a positive: {p.surface!r}")

    @property
    def positives(self) -> tuple[LabeledPair, ...]:
        return tuple(p for p in self.pairs if p.polarity is PairPolarity.POSITIVE)

    @property
    def negatives(self) -> tuple[LabeledPair, ...]:
        return tuple(p for p in self.pairs if p.polarity is PairPolarity.NEGATIVE)


def _derived_rng(seed: int, index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _words(text: str) -> list[str]:
    return text.split()


def _boundary_candidates(doc_text: str, surface: str) -> list[str]:
    """Strict sub-span and super-span alternatives for a surface occurring
    in doc_text, anchored at its leftmost occurrence. Super-spans extend by
    adjacent whitespace-delimited words; sub-spans trim words (or edge
    characters for single-word surfaces)."""
    start = doc_text.find(surface)
    if start < 0:
        raise DatasetError(f"surface {surface!r} does not occur in text")
    end = start + len(surface)

    candidates: list[str] = []
    words = _words(surface)
    if len(words) >= 2:
        for i in range(len(words)):
            for j in range(i + 1, len(words) + 1):
                if (i, j) != (0, len(words)):
                    candidates.append(" ".join(words[i:j]))
    elif len(surface) >= 2:
        candidates.extend([surface[1:], surface[:-1]])

    # Extend left: a whitespace gap, then the whole preceding word.
    gap = start
    while gap > 0 and doc_text[gap - 1].isspace():
        gap -= 1
    word = gap
    while word > 0 and not doc_text[word - 1].isspace():
        word -= 1
    if gap < start and word < gap:
        candidates.append(doc_text[word:end])
    # Extend right symmetrically.
    gap = end
    while gap < len(doc_text) and doc_text[gap].isspace():
        gap += 1
    word = gap
    while word < len(doc_text) and not doc_text[word].isspace():
        word += 1
    if gap > end and word > gap:
        candidates.append(doc_text[start:word])

    seen: set[str] = set()
    out = []
    for c in candidates:
        c = c.strip()
        if c and c != surface and "[" not in c and "]" not in c and c not in seen:
            seen.add(c)
            out.append(c)
    return out


def perturb_boundary(doc_text: str, pair: LabeledPair, rng: random.Random) -> LabeledPair:
    """Replace a positive pair's surface with a strict sub- or super-span of
    its leftmost occurrence; type unchanged. Raises when no strict
    alternative exists (single-word surface spanning the whole text)."""
    candidates = _boundary_candidates(doc_text, pair.surface)
    if not candidates:
        raise DatasetError(f"unperturbable surface: {pair.surface!r}")
    chosen = candidates[rng.randrange(len(candidates))]
    return LabeledPair(
        surface=chosen,
        entity_type=pair.entity_type,
        polarity=PairPolarity.NEGATIVE,
        negative_kind=NegativeKind.BOUNDARY_ALTERED,
        note=f"boundary altered from '{pair.surface}'",
    )


def perturb_type(
    pair: LabeledPair, type_set: list[EntityType], rng: random.Random
) -> LabeledPair:
    """Keep the surface, swap in a uniformly drawn different type."""
    alternatives = [t for t in type_set if t != pair.entity_type]
    if not alternatives:
        raise DatasetError("no alternative type")
    chosen = alternatives[rng.randrange(len(alternatives))]
    return LabeledPair(
        surface=pair.surface,
        entity_type=chosen,
        polarity=PairPolarity.NEGATIVE,
        negative_kind=NegativeKind.WRONG_TYPE,
        note=f"type changed from {pair.entity_type.name}",
    )


def fabricate_spurious(
    doc_text: str,
    type_set: list[EntityType],
    lexicon: list[str],
    rng: random.Random,
) -> LabeledPair:
    """Draw a lexicon surface absent from doc_text and give it a random type."""
    if not lexicon:
        raise DatasetError("empty spurious lexicon")
    candidates = [s for s in lexicon if s and s not in doc_text and "[" not in s and "]" not in s]
    if not candidates:
        raise DatasetError("no spurious candidate")
    surface = candidates[rng.randrange(len(candidates))]
    entity_type = type_set[rng.randrange(len(type_set))]
    return LabeledPair(
        surface=surface,
        entity_type=entity_type,
        polarity=PairPolarity.NEGATIVE,
        negative_kind=NegativeKind.SPURIOUS,
        note="not present in the input",
    )


def _mark_omitted(pair: LabeledPair) -> LabeledPair:
    return LabeledPair(
        surface=pair.surface,
        entity_type=pair.entity_type,
        polarity=PairPolarity.NEGATIVE,
        negative_kind=NegativeKind.OMITTED,
        note="dropped from the output",
    )


def build_demonstration(
    doc: Document,
    type_set: list[EntityType],
    seed: int,
    lexicon: list[str] | None = None,
    include_negatives: bool = True,
    kind_weights: dict[NegativeKind, float] | None = None,
) -> Demonstration:
    """Build one demonstration from an annotated document.

    Positives are the gold mentions in span order. With negatives enabled,
    each positive gets exactly one negative whose kind is drawn (uniformly
    by default, or per kind_weights) from the kinds admissible for that
    positive, using a generator derived from (seed, positive index). The
    result is reproducible for a fixed seed.
    """
    if not doc.gold:
        raise DatasetError(f"document {doc.id} has no gold mentions")
    positives = tuple(
        LabeledPair(
            surface=m.surface, entity_type=m.entity_type, polarity=PairPolarity.POSITIVE
        )
        for m in doc.gold
    )
    if not include_negatives:
        return Demonstration(input_text=doc.text, pairs=positives, seed=seed)

    positive_keys = {(p.surface, p.entity_type) for p in positives}
    lexicon = list(lexicon or [])
    negatives: list[LabeledPair] = []
    for index, pos in enumerate(positives):
        rng = _derived_rng(seed, index)
        boundary = [
            c
            for c in _boundary_candidates(doc.text, pos.surface)
            if (c, pos.entity_type) not in positive_keys
        ]
        alt_types = [
            t for t in type_set if t != pos.entity_type and (pos.surface, t) not in positive_keys
        ]
        spurious = [s for s in lexicon if s and s not in doc.text and "[" not in s and "]" not in s]

        admissible: list[NegativeKind] = []
        if boundary:
            admissible.append(NegativeKind.BOUNDARY_ALTERED)
        if alt_types:
            admissible.append(NegativeKind.WRONG_TYPE)
        if spurious:
            admissible.append(NegativeKind.SPURIOUS)
        admissible.append(NegativeKind.OMITTED)

        if kind_weights:
            weights = [kind_weights.get(k, 0.0) for k in admissible]
            if sum(weights) <= 0:
                weights = [1.0] * len(admissible)
            kind = rng.choices(admissible, weights=weights, k=1)[0]
        else:
            kind = admissible[rng.randrange(len(admissible))]

        if kind is NegativeKind.BOUNDARY_ALTERED:
            chosen = boundary[rng.randrange(len(boundary))]
            negatives.append(
                LabeledPair(
                    surface=chosen,
                    entity_type=pos.entity_type,
                    polarity=PairPolarity.NEGATIVE,
                    negative_kind=kind,
                    note=f"boundary altered from '{pos.surface}'",
                )
            )
        elif kind is NegativeKind.WRONG_TYPE:
            chosen_t = alt_types[rng.randrange(len(alt_types))]
            negatives.append(
                LabeledPair(
                    surface=pos.surface,
                    entity_type=chosen_t,
                    polarity=PairPolarity.NEGATIVE,
                    negative_kind=kind,
                    note=f"type changed from {pos.entity_type.name}",
                )
            )
        elif kind is NegativeKind.SPURIOUS:
            negatives.append(fabricate_spurious(doc.text, list(type_set), spurious, rng))
        else:
            negatives.append(_mark_omitted(pos))

    return Demonstration(input_text=doc.text, pairs=positives + tuple(negatives), seed=seed)


def default_support_size(type_set: list[EntityType]) -> int:
    """5 demonstrations, or 10 for type sets with more than 10 types."""
    return 10 if len(type_set) > 10 else 5


def build_support_set(
    documents: list[Document],
    type_set: list[EntityType],
    seed: int,
    count: int,
    include_negatives: bool = True,
    kind_weights: dict[NegativeKind, float] | None = None,
) -> list[Demonstration]:
    """Build demonstrations from the first `count` annotated documents.

    The spurious lexicon for each demonstration is the union of gold
    surfaces from the other selected documents, so fabricated mentions are
    plausible, domain-appropriate distractors.
    """
    annotated = [d for d in documents if d.gold]
    if len(annotated) < count:
        raise DatasetError(f"need {count} annotated documents, found {len(annotated)}")
    selected = annotated[:count]
    demos = []
    for i, doc in enumerate(selected):
        lexicon = sorted(
            {m.surface for other in selected if other.id != doc.id for m in other.gold or ()}
        )
        demos.append(
            build_demonstration(
                doc,
                type_set,
                seed=seed + i,
                lexicon=lexicon,
                include_negatives=include_negatives,
                kind_weights=kind_weights,
            )
        )
    return demos


def serialize_demonstration(demo: Demonstration) -> str:
    """Render a demonstration in the prompt grammar.

    Positives appear under "Correct entities:"; negatives, when present,
    under an explicitly labeled block so the model never mistakes them for
    targets. Omission negatives render as MISSING lines.
    """
    lines = [f"Input: {demo.input_text}", "Correct entities:"]
    for p in demo.positives:
        lines.append(f"- {p.surface} [{p.entity_type.name}]")
    negatives = demo.negatives
    if negatives:
        lines.append("Incorrect outputs (do not imitate):")
        for n in negatives:
            note = n.note or ""
            if n.negative_kind is NegativeKind.OMITTED:
                lines.append(
                    f"- MISSING: {n.surface} [{n.entity_type.name}] # omission: {note}"
                )
            else:
                lines.append(
                    f"- {n.surface} [{n.entity_type.name}] # {n.negative_kind.value}: {note}"
                )
    return "\n".join(lines)


def _pair_to_dict(pair: LabeledPair) -> dict:
    record = {
        "surface": pair.surface,
        "type": pair.entity_type.name,
        "polarity": pair.polarity.value,
    }
    if pair.negative_kind is not None:
        record["kind"] = pair.negative_kind.value
    if pair.note is not None:
        record["note"] = pair.note
    return record


def _pair_from_dict(record: dict) -> LabeledPair:
    return LabeledPair(
        surface=record["surface"],
        entity_type=EntityType(record["type"]),
        polarity=PairPolarity(record["polarity"]),
        negative_kind=NegativeKind(record["kind"]) if "kind" in record else None,
        note=record.get("note"),
    )


def save_demonstrations(demos: list[Demonstration], path: str | Path) -> None:
    """Persist a support set as JSONL, one demonstration per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for demo in demos:
            record = {
                "input_text": demo.input_text,
                "seed": demo.seed,
                "pairs": [_pair_to_dict(p) for p in demo.pairs],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_demonstrations(path: str | Path) -> list[Demonstration]:
    path = Path(path)
    demos = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                demos.append(
                    Demonstration(
                        input_text=record["input_text"],
                        pairs=tuple(_pair_from_dict(p) for p in record["pairs"]),
                        seed=int(record["seed"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed demonstration ({exc})") from exc
    return demos


def strip_negatives(demos: list[Demonstration]) -> list[Demonstration]:
    """Positive-only view of a support set (negatives ablated)."""
    return [
        Demonstration(input_text=d.input_text, pairs=d.positives, seed=d.seed) for d in demos
    ]
