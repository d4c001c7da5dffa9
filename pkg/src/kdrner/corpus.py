"""Data model for documents, entity types, and grounded mentions, plus
JSONL and CoNLL-BIO ingestion.

Character offsets are the canonical span representation throughout the
package: model outputs are free text, so grounding has to be character
based. Loaded datasets are immutable and safe to share across workers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DatasetError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntityType:
    """A short label such as "PER"; no whitespace, brackets, or newlines."""

    name: str

    def __post_init__(self):
        if not self.name:
            raise DatasetError("entity type name is empty")
        if any(c in self.name for c in "[]\n"):
            raise DatasetError(f"entity type name contains reserved character: {self.name!r}")
        if any(c.isspace() for c in self.name):
            raise DatasetError(f"entity type name contains whitespace: {self.name!r}")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TypeDefinition:
    """An entity type plus a natural-language description of its scope."""

    entity_type: EntityType
    description: str

    def __post_init__(self):
        if not self.description.strip():
            raise DatasetError(f"empty description for type {self.entity_type.name}")


@dataclass(frozen=True)
class Mention:
    """A grounded entity occurrence: surface string, half-open char span, type."""

    surface: str
    start: int
    end: int
    entity_type: EntityType

    def validate_against(self, text: str, doc_id: str = "?") -> None:
        if not (0 <= self.start < self.end <= len(text)):
            raise DatasetError(
                f"document {doc_id}: span [{self.start},{self.end}) out of bounds for text of length {len(text)}"
            )
        if text[self.start : self.end] != self.surface:
            raise DatasetError(
                f"document {doc_id}: span [{self.start},{self.end}) reads "
                f"{text[self.start:self.end]!r}, not {self.surface!r}"
            )


@dataclass(frozen=True)
class Document:
    """One input text with an optional gold annotation.

    gold is None for unlabeled documents and an empty tuple for labeled
    documents containing no entities. Gold mentions are normalized to
    (start, end) order; an exact duplicate (same span and type) is an
    ingestion error, while the same span under two types is preserved.
    """

    id: str
    text: str
    gold: tuple[Mention, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise DatasetError("document id is empty")
        if self.gold is None:
            return
        ordered = tuple(
            sorted(self.gold, key=lambda m: (m.start, m.end, m.entity_type.name))
        )
        object.__setattr__(self, "gold", ordered)
        seen: set[tuple[int, int, str]] = set()
        for m in ordered:
            m.validate_against(self.text, self.id)
            key = (m.start, m.end, m.entity_type.name)
            if key in seen:
                raise DatasetError(
                    f"document {self.id}: duplicate gold mention {m.surface!r} "
                    f"[{m.start},{m.end}) {m.entity_type.name}"
                )
            seen.add(key)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of documents under one entity type set."""

    documents: tuple[Document, ...]
    type_set: tuple[EntityType, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [d.id for d in self.documents]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate document ids: {dupes}")
        known = set(self.type_set)
        for doc in self.documents:
            for m in doc.gold or ():
                if m.entity_type not in known:
                    raise DatasetError(
                        f"document {doc.id}: mention type {m.entity_type.name} not in type set"
                    )

    def document(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.id == doc_id:
                return doc
        raise KeyError(doc_id)


def _derive_type_set(documents: list[Document]) -> tuple[EntityType, ...]:
    seen: dict[EntityType, None] = {}
    for doc in documents:
        for m in doc.gold or ():
            seen.setdefault(m.entity_type, None)
    return tuple(seen)


def load_jsonl(path: str | Path, type_set: list[EntityType] | None = None) -> Dataset:
    """Load a dataset from JSONL: one object per line with fields
    id, text, and optional entities [{surface, start, end, type}].

    When type_set is omitted it is derived from the gold mentions in
    first-appearance order.
    """
    path = Path(path)
    documents: list[Document] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict) or "id" not in record or "text" not in record:
                raise DatasetError(f"{path}:{lineno}: record must carry id and text fields")
            gold = None
            if "entities" in record:
                try:
                    gold = tuple(
                        Mention(
                            surface=e["surface"],
                            start=int(e["start"]),
                            end=int(e["end"]),
                            entity_type=EntityType(e["type"]),
                        )
                        for e in record["entities"]
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed entity record ({exc})") from exc
            documents.append(Document(id=str(record["id"]), text=record["text"], gold=gold))
    resolved = tuple(type_set) if type_set is not None else _derive_type_set(documents)
    return Dataset(documents=tuple(documents), type_set=resolved)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Write documents back out in the load_jsonl schema."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in dataset.documents:
            record: dict = {"id": doc.id, "text": doc.text}
            if doc.gold is not None:
                record["entities"] = [
                    {
                        "surface": m.surface,
                        "start": m.start,
                        "end": m.end,
                        "type": m.entity_type.name,
                    }
                    for m in doc.gold
                ]
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _bio_spans(tags: list[tuple[str, int]], warnings: list[str]) -> list[tuple[int, int, str]]:
    """Token-index spans (start, end inclusive, label) from a BIO tag column.

    A dangling I- (no preceding B-/I- of the same label) is promoted to B-
    and tallied as a warning.
    """
    spans: list[tuple[int, int, str]] = []
    current: list | None = None  # [start, end, label]
    for idx, (tag, lineno) in enumerate(tags):
        if tag == "O":
            if current:
                spans.append(tuple(current))
                current = None
            continue
        marker, label = tag.split("-", 1)
        if marker == "I" and current and current[2] == label:
            current[1] = idx
            continue
        if marker == "I":
            warnings.append(f"line {lineno}: dangling I-{label} treated as B-{label}")
        if current:
            spans.append(tuple(current))
        current = [idx, idx, label]
    if current:
        spans.append(tuple(current))
    return spans


def load_conll(path: str | Path) -> Dataset:
    """Load a CoNLL BIO file: token per line, tag in the last column, blank
    line between sentences. Tokens are joined with single spaces and
    character offsets are computed over that joined text.
    """
    path = Path(path)
    warnings: list[str] = []
    documents: list[Document] = []
    sentence: list[tuple[str, str, int]] = []  # (token, tag, lineno)

    def flush():
        if not sentence:
            return
        tokens = [tok for tok, _, _ in sentence]
        text = " ".join(tokens)
        offsets = []
        pos = 0
        for tok in tokens:
            offsets.append(pos)
            pos += len(tok) + 1
        gold = []
        for t_start, t_end, label in _bio_spans([(tag, ln) for _, tag, ln in sentence], warnings):
            start = offsets[t_start]
            end = offsets[t_end] + len(tokens[t_end])
            gold.append(
                Mention(surface=text[start:end], start=start, end=end, entity_type=EntityType(label))
            )
        doc_id = f"{path.stem}-{len(documents):05d}"
        documents.append(Document(id=doc_id, text=text, gold=tuple(gold)))
        sentence.clear()

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("-DOCSTART-"):
                flush()
                continue
            cols = line.split()
            if len(cols) < 2:
                raise DatasetError(f"{path}:{lineno}: expected token and tag columns")
            tag = cols[-1]
            if tag != "O" and not (
                len(tag) > 2 and tag[0] in "BI" and tag[1] == "-" and not any(c.isspace() for c in tag[2:])
            ):
                raise DatasetError(f"{path}:{lineno}: unreadable BIO tag {tag!r}")
            sentence.append((cols[0], tag, lineno))
    flush()

    for w in warnings:
        logger.warning("%s: %s", path.name, w)
    return Dataset(
        documents=tuple(documents),
        type_set=_derive_type_set(documents),
        warnings=tuple(warnings),
    )
