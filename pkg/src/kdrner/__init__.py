"""Knowledge-enriched, self-correcting in-context NER pipeline.

Public surface: the corpus data model and loaders, contrastive support-set
construction, prompt assembly, chat backends, Wikipedia snapshot retrieval,
output parsing/grounding, the two-stage pipeline, and the evaluation kit.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: E402
    Dataset,
    Document,
    EntityType,
    Mention,
    TypeDefinition,
    load_conll,
    load_jsonl,
    write_jsonl,
)

__all__ = [
    "Dataset",
    "Document",
    "EntityType",
    "Mention",
    "TypeDefinition",
    "load_conll",
    "load_jsonl",
    "write_jsonl",
    "__version__",
]
