"""Two-stage pipeline orchestration.

Stage one builds the enriched prompt: a planner pass flags concepts that
need background knowledge (as Wikipedia queries) and mentions whose type
is ambiguous; retrieval and disambiguation turn those into prompt
sections. Stage two runs the initial inference, a structured review
against the four error categories, and one corrected re-emission.

Every per-document run yields a PipelineTrace recording each intermediate
artifact. No single unparseable model response aborts a trace: each stage
has a defined fallback plus a warning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .backend import ChatRequest
from .corpus import Dataset, Document, EntityType, Mention, TypeDefinition
from .demobuild import Demonstration
from .errors import KdrError
from .parseout import ReflectionFinding, ReflectionKind, ground, parse_mentions, parse_reflection
from .prompting import (
    PromptBundle,
    PromptTemplates,
    assemble_correction_prompt,
    assemble_disambiguation_prompt,
    assemble_initial_prompt,
    assemble_planner_prompt,
    assemble_reflection_prompt,
    compose_demo_section,
    compose_disambiguation_section,
    compose_knowledge_section,
    compose_type_section,
    load_templates,
)
from .wiki import CachedRetriever, KnowledgeSnippet, snippet_from_dict, snippet_to_dict

logger = logging.getLogger(__name__)

PLANNER_NONE_TOKEN = "NONE"


@dataclass(frozen=True)
class AmbiguousMention:
    surface: str
    candidate_types: tuple[EntityType, ...] | None = None


@dataclass(frozen=True)
class PlannerOutput:
    queries: tuple[str, ...] = ()
    ambiguous_mentions: tuple[AmbiguousMention, ...] = ()


@dataclass(frozen=True)
class DisambiguationNote:
    surface: str
    interpretation: str


@dataclass
class PipelineTrace:
    """Everything one document's run produced, in order."""

    doc_id: str
    planner: PlannerOutput = field(default_factory=PlannerOutput)
    snippets: list[KnowledgeSnippet] = field(default_factory=list)
    notes: list[DisambiguationNote] = field(default_factory=list)
    initial_raw: str = ""
    initial_pred: list[Mention] = field(default_factory=list)
    reflection_raw: str = ""
    findings: list[ReflectionFinding] = field(default_factory=list)
    final_raw: str = ""
    final_pred: list[Mention] = field(default_factory=list)
    prompts: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    failed: bool = False
    error: str | None = None


@dataclass(frozen=True)
class PipelineOptions:
    """Stage switches and planner caps. Disabling reflection removes both
    the review and the correction call; final equals initial."""

    reflection: bool = True
    retrieval: bool = True
    disambiguation: bool = True
    max_queries: int = 5
    max_ambiguous: int = 5

    def __post_init__(self):
        if self.max_queries <= 0 or self.max_ambiguous <= 0:
            raise ValueError("planner caps must be positive")


class Pipeline:
    """Per-run context: backend, templates, type definitions, support set,
    and the retrieval snapshot. `run(doc)` executes the full two-stage
    pass for one document."""

    def __init__(
        self,
        backend,
        type_definitions: list[TypeDefinition],
        demonstrations: list[Demonstration],
        retriever: CachedRetriever | None = None,
        templates: PromptTemplates | None = None,
        options: PipelineOptions | None = None,
        model_name: str = "scripted",
        temperature: float = 0.0,
        max_output_tokens: int = 1024,
    ):
        self.backend = backend
        self.templates = templates or load_templates()
        self.options = options or PipelineOptions()
        if self.options.retrieval and retriever is None:
            raise ValueError("retrieval is enabled but no retriever was configured")
        self.retriever = retriever
        self.type_definitions = list(type_definitions)
        self.type_set = [d.entity_type for d in type_definitions]
        self.type_section = compose_type_section(self.type_definitions)
        self.demo_section = compose_demo_section(list(demonstrations))
        self.model_name = model_name
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens

    def _complete(self, bundle: PromptBundle) -> str:
        request = ChatRequest(
            messages=[{"role": "user", "content": bundle.rendered}],
            model_name=self.model_name,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
        )
        return self.backend.complete(request).text

    # --- stage 1 ----------------------------------------------------------

    def plan(self, doc: Document) -> tuple[PlannerOutput, PromptBundle, list[str]]:
        """One planner call. Parses QUERY:/AMBIGUOUS: lines, drops ambiguous
        surfaces that do not occur in the text, and enforces both caps.
        An unparseable response degrades to an empty plan plus a warning."""
        bundle = assemble_planner_prompt(doc, self.templates.planner_task, self.type_section)
        raw = self._complete(bundle)
        warnings: list[str] = []

        queries: list[str] = []
        ambiguous: list[AmbiguousMention] = []
        known = {t.name: t for t in self.type_set}
        matched_any = raw.strip() == PLANNER_NONE_TOKEN
        for line in raw.splitlines():
            stripped = line.strip().lstrip("-*").strip()
            if stripped.startswith("QUERY:"):
                matched_any = True
                query = stripped[len("QUERY:") :].strip()
                if query and normalized_not_in(query, queries):
                    queries.append(query)
            elif stripped.startswith("AMBIGUOUS:"):
                matched_any = True
                body = stripped[len("AMBIGUOUS:") :].strip()
                surface, _, type_part = body.partition("|")
                surface = surface.strip()
                if not surface:
                    continue
                if surface not in doc.text:
                    warnings.append(f"planner: ambiguous surface {surface!r} not in text, dropped")
                    continue
                candidates = tuple(
                    known[t.strip()] for t in type_part.split(",") if t.strip() in known
                )
                ambiguous.append(
                    AmbiguousMention(surface=surface, candidate_types=candidates or None)
                )
        if not matched_any:
            warnings.append("planner: response unparseable, continuing without plan")
        output = PlannerOutput(
            queries=tuple(queries[: self.options.max_queries]),
            ambiguous_mentions=tuple(ambiguous[: self.options.max_ambiguous]),
        )
        return output, bundle, warnings

    def retrieve(self, planner: PlannerOutput) -> list[KnowledgeSnippet]:
        """Snapshot-backed lookup of every planner query; misses simply
        contribute nothing."""
        snippets = []
        for query in planner.queries:
            snippet = self.retriever.get(query)
            if snippet is not None:
                snippets.append(snippet)
        return snippets

    def disambiguate(
        self, doc: Document, ambiguous: list[AmbiguousMention]
    ) -> tuple[list[DisambiguationNote], PromptBundle | None, list[str]]:
        """One batched call covering all flagged mentions; none means no
        call at all. Mentions the model skips are dropped with a warning."""
        if not ambiguous:
            return [], None, []
        lines = []
        for m in ambiguous:
            if m.candidate_types:
                options = ", ".join(t.name for t in m.candidate_types)
                lines.append(f"- {m.surface} (possible types: {options})")
            else:
                lines.append(f"- {m.surface}")
        bundle = assemble_disambiguation_prompt(
            doc, self.templates.disambiguation_task, "\n".join(lines)
        )
        raw = self._complete(bundle)

        by_surface: dict[str, str] = {}
        for line in raw.splitlines():
            stripped = line.strip().lstrip("-*").strip()
            surface, sep, interpretation = stripped.partition(":")
            surface = surface.strip().strip("\"'")
            interpretation = interpretation.strip()
            if sep and surface and interpretation:
                by_surface.setdefault(surface, interpretation)
        notes = []
        warnings = []
        for m in ambiguous:
            if m.surface in by_surface:
                notes.append(
                    DisambiguationNote(surface=m.surface, interpretation=by_surface[m.surface])
                )
            else:
                warnings.append(f"disambiguation: no interpretation returned for {m.surface!r}")
        return notes, bundle, warnings

    # --- stage 2 ----------------------------------------------------------

    def infer_initial(
        self, doc: Document, bundle: PromptBundle
    ) -> tuple[str, list[Mention], list[str]]:
        raw = self._complete(bundle)
        pairs, parse_warnings = parse_mentions(raw, self.type_set)
        mentions, ground_warnings = ground(pairs, doc.text)
        return raw, mentions, [f"initial: {w}" for w in parse_warnings + ground_warnings]

    def reflect(
        self, doc: Document, initial_raw: str
    ) -> tuple[str, list[ReflectionFinding], PromptBundle, list[str]]:
        bundle = assemble_reflection_prompt(
            doc, initial_raw or "NONE", self.templates.reflection_guide
        )
        raw = self._complete(bundle)
        findings, warnings = parse_reflection(raw)
        return raw, findings, bundle, [f"reflection: {w}" for w in warnings]

    def correct(
        self,
        doc: Document,
        initial_raw: str,
        reflection_raw: str,
        initial_pred: list[Mention],
    ) -> tuple[str, list[Mention], PromptBundle, list[str]]:
        """Second-round prediction. A correction that parses to nothing
        (and is not an explicit NONE) falls back to the initial prediction
        rather than zeroing out the document."""
        bundle = assemble_correction_prompt(
            doc,
            initial_raw or "NONE",
            self.templates.reflection_guide,
            reflection_raw,
            self.templates.correction_task,
            self.templates.correction_guide,
        )
        raw = self._complete(bundle)
        pairs, parse_warnings = parse_mentions(raw, self.type_set)
        mentions, ground_warnings = ground(pairs, doc.text)
        warnings = [f"correction: {w}" for w in parse_warnings + ground_warnings]
        if not mentions and raw.strip() != "NONE":
            warnings.append(
                "correction: output unparseable, falling back to the initial prediction"
            )
            return raw, list(initial_pred), bundle, warnings
        return raw, mentions, bundle, warnings

    # --- full run ---------------------------------------------------------

    def run(self, doc: Document) -> PipelineTrace:
        trace = PipelineTrace(doc_id=doc.id)
        try:
            planner, bundle, warnings = self.plan(doc)
            trace.planner = planner
            trace.prompts["planner"] = bundle.fingerprint
            trace.warnings.extend(warnings)

            if self.options.retrieval:
                trace.snippets = self.retrieve(planner)

            if self.options.disambiguation:
                notes, bundle, warnings = self.disambiguate(
                    doc, list(planner.ambiguous_mentions)
                )
                trace.notes = notes
                if bundle is not None:
                    trace.prompts["disambiguation"] = bundle.fingerprint
                trace.warnings.extend(warnings)

            initial_bundle = assemble_initial_prompt(
                doc,
                task_text=self.templates.task,
                type_section=self.type_section,
                demo_section=self.demo_section,
                knowledge_section=compose_knowledge_section(trace.snippets),
                disambiguation_section=compose_disambiguation_section(trace.notes),
                input_instruction=self.templates.input_instruction,
            )
            trace.prompts["initial"] = initial_bundle.fingerprint
            raw, mentions, warnings = self.infer_initial(doc, initial_bundle)
            trace.initial_raw = raw
            trace.initial_pred = mentions
            trace.warnings.extend(warnings)

            if not self.options.reflection:
                trace.final_pred = list(trace.initial_pred)
                return trace

            raw, findings, bundle, warnings = self.reflect(doc, trace.initial_raw)
            trace.reflection_raw = raw
            trace.findings = findings
            trace.prompts["reflection"] = bundle.fingerprint
            trace.warnings.extend(warnings)

            raw, mentions, bundle, warnings = self.correct(
                doc, trace.initial_raw, trace.reflection_raw, trace.initial_pred
            )
            trace.final_raw = raw
            trace.final_pred = mentions
            trace.prompts["correction"] = bundle.fingerprint
            trace.warnings.extend(warnings)
            return trace
        except KdrError as exc:
            trace.failed = True
            trace.error = f"{type(exc).__name__}: {exc}"
            logger.warning("document %s failed: %s", doc.id, trace.error)
            return trace


def normalized_not_in(query: str, queries: list[str]) -> bool:
    key = " ".join(query.split()).casefold()
    return all(" ".join(q.split()).casefold() != key for q in queries)


def run_batch(pipeline: Pipeline, dataset: Dataset, skip_ids: set[str] | None = None) -> list[PipelineTrace]:
    """Run every document not in skip_ids; failures mark their own trace
    and the batch continues."""
    skip_ids = skip_ids or set()
    return [pipeline.run(doc) for doc in dataset.documents if doc.id not in skip_ids]


# --- trace persistence ----------------------------------------------------

def trace_to_dict(trace: PipelineTrace) -> dict:
    return {
        "doc_id": trace.doc_id,
        "failed": trace.failed,
        "error": trace.error,
        "planner": {
            "queries": list(trace.planner.queries),
            "ambiguous": [
                {
                    "surface": m.surface,
                    "candidate_types": [t.name for t in m.candidate_types]
                    if m.candidate_types
                    else None,
                }
                for m in trace.planner.ambiguous_mentions
            ],
        },
        "snippets": [snippet_to_dict(s) for s in trace.snippets],
        "notes": [{"surface": n.surface, "interpretation": n.interpretation} for n in trace.notes],
        "initial_raw": trace.initial_raw,
        "initial_pred": [_mention_to_dict(m) for m in trace.initial_pred],
        "reflection_raw": trace.reflection_raw,
        "findings": [
            {
                "kind": f.kind.value,
                "target_surface": f.target_surface,
                "justification": f.justification,
                "suggestion": f.suggestion,
            }
            for f in trace.findings
        ],
        "final_raw": trace.final_raw,
        "final_pred": [_mention_to_dict(m) for m in trace.final_pred],
        "prompts": dict(trace.prompts),
        "warnings": list(trace.warnings),
    }


def trace_from_dict(record: dict) -> PipelineTrace:
    planner = PlannerOutput(
        queries=tuple(record["planner"]["queries"]),
        ambiguous_mentions=tuple(
            AmbiguousMention(
                surface=m["surface"],
                candidate_types=tuple(EntityType(t) for t in m["candidate_types"])
                if m.get("candidate_types")
                else None,
            )
            for m in record["planner"]["ambiguous"]
        ),
    )
    return PipelineTrace(
        doc_id=record["doc_id"],
        planner=planner,
        snippets=[snippet_from_dict(s) for s in record["snippets"]],
        notes=[
            DisambiguationNote(surface=n["surface"], interpretation=n["interpretation"])
            for n in record["notes"]
        ],
        initial_raw=record["initial_raw"],
        initial_pred=[_mention_from_dict(m) for m in record["initial_pred"]],
        reflection_raw=record["reflection_raw"],
        findings=[
            ReflectionFinding(
                kind=ReflectionKind(f["kind"]),
                target_surface=f["target_surface"],
                justification=f["justification"],
                suggestion=f.get("suggestion"),
            )
            for f in record["findings"]
        ],
        final_raw=record["final_raw"],
        final_pred=[_mention_from_dict(m) for m in record["final_pred"]],
        prompts=dict(record["prompts"]),
        warnings=list(record["warnings"]),
        failed=record.get("failed", False),
        error=record.get("error"),
    )


def _mention_to_dict(m: Mention) -> dict:
    return {"surface": m.surface, "start": m.start, "end": m.end, "type": m.entity_type.name}


def _mention_from_dict(record: dict) -> Mention:
    return Mention(
        surface=record["surface"],
        start=record["start"],
        end=record["end"],
        entity_type=EntityType(record["type"]),
    )


def dump_trace(trace: PipelineTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True, indent=2, ensure_ascii=False)


def write_trace(trace: PipelineTrace, path: str | Path) -> None:
    Path(path).write_text(dump_trace(trace) + "\n", encoding="utf-8")


def read_trace(path: str | Path) -> PipelineTrace:
    return trace_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
