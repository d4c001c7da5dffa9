"""Prompt assembly from typed sections with deterministic layout.

Prompts are a fixed-order list of named sections, rendered as
"### <Section name>" headers separated by blank lines. Section order and
wording are pinned; the free-text parts live in a versioned template file
so they can be swapped without code changes. Every bundle carries a
stable fingerprint of its rendered text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .corpus import Document, TypeDefinition
from .demobuild import Demonstration, serialize_demonstration
from .errors import TemplateError

SECTION_SEPARATOR = "\n\n"
SECTION_HEADER_PREFIX = "### "


class SectionKind(Enum):
    TASK = "Task"
    TYPE_DEFS = "Type Definitions"
    DEMOS = "Demonstrations"
    KNOWLEDGE = "Knowledge"
    DISAMBIGUATION = "Disambiguation"
    INPUT = "Input"
    REFLECTION_GUIDE = "Reflection Guide"
    PRIOR_OUTPUT = "Prior Output"
    REFLECTION_REPORT = "Reflection Report"
    CORRECTION_GUIDE = "Correction Guide"


def _escape_header_lines(text: str) -> str:
    """Space-prefix any embedded line that could be mistaken for a section
    header, so rendering stays injective even over model output and user
    text."""
    if not (text.startswith(SECTION_HEADER_PREFIX) or f"\n{SECTION_HEADER_PREFIX}" in text):
        return text
    return "\n".join(
        (" " + line) if line.startswith(SECTION_HEADER_PREFIX) else line
        for line in text.splitlines()
    )


@dataclass(frozen=True)
class PromptSection:
    kind: SectionKind
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"empty text for section {self.kind.value}")
        object.__setattr__(self, "text", _escape_header_lines(self.text))

    def render(self) -> str:
        return f"{SECTION_HEADER_PREFIX}{self.kind.value}\n{self.text}"


@dataclass(frozen=True)
class PromptBundle:
    sections: tuple[PromptSection, ...]
    rendered: str
    fingerprint: str


def fingerprint_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def bundle_sections(sections: list[PromptSection]) -> PromptBundle:
    """Render sections into a bundle. Rendering must stay injective, so a
    section whose body could be mistaken for a header line is rejected."""
    for section in sections:
        if section.text.startswith(SECTION_HEADER_PREFIX) or f"\n{SECTION_HEADER_PREFIX}" in section.text:
            raise ValueError(
                f"section {section.kind.value} contains the reserved header token"
            )
    rendered = SECTION_SEPARATOR.join(s.render() for s in sections)
    return PromptBundle(
        sections=tuple(sections), rendered=rendered, fingerprint=fingerprint_text(rendered)
    )


# --- template file -------------------------------------------------------

_TEMPLATE_FIELDS = (
    "version",
    "task",
    "input_instruction",
    "planner_task",
    "disambiguation_task",
    "reflection_guide",
    "correction_task",
    "correction_guide",
)


@dataclass(frozen=True)
class PromptTemplates:
    """The static prompt texts, loaded from a block-structured text file."""

    version: str
    task: str
    input_instruction: str
    planner_task: str
    disambiguation_task: str
    reflection_guide: str
    correction_task: str
    correction_guide: str
    source_hash: str = ""


def parse_templates(text: str) -> PromptTemplates:
    blocks: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("[[") and stripped.endswith("]]"):
            current = stripped[2:-2].strip()
            blocks[current] = []
            continue
        if current is None:
            continue  # preamble comments
        blocks[current].append(line)
    cleaned = {name: "\n".join(lines).strip() for name, lines in blocks.items()}
    missing = [f for f in _TEMPLATE_FIELDS if not cleaned.get(f)]
    if missing:
        raise TemplateError(f"template file missing blocks: {', '.join(missing)}")
    return PromptTemplates(
        **{f: cleaned[f] for f in _TEMPLATE_FIELDS}, source_hash=fingerprint_text(text)
    )


def load_templates(path: str | Path | None = None) -> PromptTemplates:
    """Load templates from a file, or the packaged defaults when path is None."""
    if path is None:
        text = resources.files("kdrner").joinpath("templates/default.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_templates(text)


# --- section composers ---------------------------------------------------

def compose_type_section(defs: list[TypeDefinition]) -> PromptSection:
    """One `TYPE: description` line per definition, in input order."""
    if not defs:
        raise ValueError("no type definitions")
    seen = set()
    for d in defs:
        if d.entity_type in seen:
            raise ValueError(f"duplicate type definition: {d.entity_type.name}")
        seen.add(d.entity_type)
    lines = [f"{d.entity_type.name}: {d.description}" for d in defs]
    return PromptSection(kind=SectionKind.TYPE_DEFS, text="\n".join(lines))


def compose_demo_section(demos: list[Demonstration]) -> PromptSection:
    if not demos:
        raise ValueError("no demonstrations")
    blocks = [serialize_demonstration(d) for d in demos]
    return PromptSection(kind=SectionKind.DEMOS, text="\n\n".join(blocks))


def compose_knowledge_section(snippets: list) -> PromptSection | None:
    """One `[title] summary (source: url)` block per snippet; absent when
    there is nothing to show."""
    if not snippets:
        return None
    blocks = [f"[{s.title}] {s.summary} (source: {s.source_url})" for s in snippets]
    return PromptSection(kind=SectionKind.KNOWLEDGE, text="\n".join(blocks))


def compose_disambiguation_section(notes: list) -> PromptSection | None:
    if not notes:
        return None
    lines = [f"{n.surface}: {n.interpretation}" for n in notes]
    return PromptSection(kind=SectionKind.DISAMBIGUATION, text="\n".join(lines))


def _input_section(doc: Document, instruction: str | None = None) -> PromptSection:
    text = f"Text: {doc.text}"
    if instruction:
        text += f"\n\n{instruction}"
    return PromptSection(kind=SectionKind.INPUT, text=text)


# --- prompt assemblers ---------------------------------------------------

def assemble_initial_prompt(
    doc: Document,
    task_text: str,
    type_section: PromptSection | None,
    demo_section: PromptSection | None,
    knowledge_section: PromptSection | None = None,
    disambiguation_section: PromptSection | None = None,
    input_instruction: str = "",
) -> PromptBundle:
    """Fixed order: Task, Type Definitions, Demonstrations, Knowledge?,
    Disambiguation?, Input. Optional sections are omitted, never emitted
    empty."""
    if not task_text.strip():
        raise ValueError("missing Task section")
    if type_section is None:
        raise ValueError("missing Type Definitions section")
    if demo_section is None:
        raise ValueError("missing Demonstrations section")
    sections = [PromptSection(SectionKind.TASK, task_text), type_section, demo_section]
    if knowledge_section is not None:
        sections.append(knowledge_section)
    if disambiguation_section is not None:
        sections.append(disambiguation_section)
    sections.append(_input_section(doc, input_instruction))
    return bundle_sections(sections)


def assemble_planner_prompt(
    doc: Document, planner_task: str, type_section: PromptSection
) -> PromptBundle:
    return bundle_sections(
        [PromptSection(SectionKind.TASK, planner_task), type_section, _input_section(doc)]
    )


def assemble_disambiguation_prompt(
    doc: Document, disambiguation_task: str, mention_lines: str
) -> PromptBundle:
    task = disambiguation_task.replace("{mentions}", mention_lines)
    return bundle_sections([PromptSection(SectionKind.TASK, task), _input_section(doc)])


def assemble_reflection_prompt(
    doc: Document, raw_initial_output: str, guide: str
) -> PromptBundle:
    """Sections: Reflection Guide (the four error categories and the
    FINDING grammar), Input, Prior Output."""
    if not raw_initial_output.strip():
        raise ValueError("empty prior output")
    return bundle_sections(
        [
            PromptSection(SectionKind.REFLECTION_GUIDE, guide),
            _input_section(doc),
            PromptSection(SectionKind.PRIOR_OUTPUT, raw_initial_output),
        ]
    )


def assemble_correction_prompt(
    doc: Document,
    raw_initial_output: str,
    guide: str,
    report_text: str,
    correction_text: str,
    correction_guide: str,
) -> PromptBundle:
    """Sections: Task (correction variant), Input, Prior Output, Reflection
    Guide, Reflection Report, Correction Guide. The guide that produced the
    report rides along so the report's labels stay interpretable."""
    if not report_text.strip():
        report_text = "no issues found"
    return bundle_sections(
        [
            PromptSection(SectionKind.TASK, correction_text),
            _input_section(doc),
            PromptSection(SectionKind.PRIOR_OUTPUT, raw_initial_output),
            PromptSection(SectionKind.REFLECTION_GUIDE, guide),
            PromptSection(SectionKind.REFLECTION_REPORT, report_text),
            PromptSection(SectionKind.CORRECTION_GUIDE, correction_guide),
        ]
    )
