"""Wikipedia lead-summary retrieval with a reproducible snapshot cache.

Retrieval is two MediaWiki Action API calls per query: a search for the
top hit, then the plain-text intro extract of that page. Results (and
confirmed misses) are cached; committing the cache file and running
offline makes knowledge sections reproducible and network-free.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from urllib.parse import quote

import requests

from . import __version__
from .errors import SnapshotIncompleteError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_API_URL = "https://en.wikipedia.org/w/api.php"
USER_AGENT = f"kdrner/{__version__} (entity-recognition background retrieval)"


def normalize_query(query: str) -> str:
    """Trim, collapse internal whitespace, case-fold."""
    return " ".join(query.split()).casefold()


@dataclass(frozen=True)
class KnowledgeSnippet:
    query: str
    title: str
    summary: str
    source_url: str
    retrieved_at: str
    disambiguation: bool = False


def snippet_to_dict(snippet: KnowledgeSnippet) -> dict:
    return {
        "query": snippet.query,
        "title": snippet.title,
        "summary": snippet.summary,
        "source_url": snippet.source_url,
        "retrieved_at": snippet.retrieved_at,
        "disambiguation": snippet.disambiguation,
    }


def snippet_from_dict(record: dict) -> KnowledgeSnippet:
    return KnowledgeSnippet(
        query=record["query"],
        title=record["title"],
        summary=record["summary"],
        source_url=record["source_url"],
        retrieved_at=record["retrieved_at"],
        disambiguation=bool(record.get("disambiguation", False)),
    )


class WikipediaClient:
    """Action API client: list=search for the top hit, then prop=extracts
    (intro only, plain text). Keeps a politeness gap between requests and
    counts every HTTP call."""

    def __init__(
        self,
        api_url: str = DEFAULT_API_URL,
        session: requests.Session | None = None,
        min_interval: float = 0.5,
        timeout: float = 10.0,
        max_attempts: int = 3,
        sleeper=time.sleep,
    ):
        self.api_url = api_url
        self.session = session or requests.Session()
        self.min_interval = min_interval
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.sleeper = sleeper
        self.request_count = 0
        self._last_request = 0.0
        self._lock = threading.Lock()

    def _get(self, params: dict) -> dict:
        params = {**params, "format": "json"}
        last_error = "unknown"
        for attempt in range(1, self.max_attempts + 1):
            with self._lock:
                gap = self.min_interval - (time.monotonic() - self._last_request)
                if gap > 0:
                    self.sleeper(gap)
                self._last_request = time.monotonic()
                self.request_count += 1
            try:
                resp = self.session.get(
                    self.api_url,
                    params=params,
                    headers={"User-Agent": USER_AGENT},
                    timeout=self.timeout,
                )
                if resp.status_code == 200:
                    return resp.json()
                last_error = f"HTTP {resp.status_code}"
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    raise TransportError(f"wiki API error ({last_error})", attempts=attempt)
            except (requests.Timeout, requests.ConnectionError, ValueError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            if attempt < self.max_attempts:
                self.sleeper(attempt)
        raise TransportError(
            f"wiki API failed after {self.max_attempts} attempts ({last_error})",
            attempts=self.max_attempts,
        )

    def retrieve_summary(self, query: str) -> KnowledgeSnippet | None:
        """Lead summary of the top search hit, or None when nothing is found
        (a confirmed miss, as opposed to a transport error)."""
        if not normalize_query(query):
            raise ValueError("empty query")
        search = self._get(
            {"action": "query", "list": "search", "srsearch": query, "srlimit": 1}
        )
        hits = search.get("query", {}).get("search", [])
        if not hits:
            return None
        title = hits[0]["title"]
        extract = self._get(
            {
                "action": "query",
                "prop": "extracts|info|pageprops",
                "exintro": 1,
                "explaintext": 1,
                "redirects": 1,
                "inprop": "url",
                "titles": title,
            }
        )
        pages = extract.get("query", {}).get("pages", {})
        if not pages:
            return None
        page = next(iter(pages.values()))
        summary = " ".join(page.get("extract", "").split())
        if not summary:
            return None
        resolved_title = page.get("title", title)
        url = page.get("canonicalurl") or (
            "https://en.wikipedia.org/wiki/" + quote(resolved_title.replace(" ", "_"))
        )
        return KnowledgeSnippet(
            query=query,
            title=resolved_title,
            summary=summary,
            source_url=url,
            retrieved_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            disambiguation="disambiguation" in page.get("pageprops", {}),
        )


@dataclass
class SnapshotCache:
    """Normalized query -> snippet (or None for a confirmed miss)."""

    entries: dict[str, KnowledgeSnippet | None] = field(default_factory=dict)
    cutoff: str | None = None
    created_at: str = ""

    def __post_init__(self):
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def lookup(self, query: str) -> tuple[bool, KnowledgeSnippet | None]:
        key = normalize_query(query)
        if key in self.entries:
            return True, self.entries[key]
        return False, None

    def store(self, query: str, snippet: KnowledgeSnippet | None) -> None:
        self.entries[normalize_query(query)] = snippet

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(
                json.dumps({"cutoff": self.cutoff, "created_at": self.created_at}) + "\n"
            )
            for key in sorted(self.entries):
                snippet = self.entries[key]
                record: dict = {"query_normalized": key, "hit": snippet is not None}
                if snippet is not None:
                    record["snippet"] = snippet_to_dict(snippet)
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SnapshotCache":
        path = Path(path)
        entries: dict[str, KnowledgeSnippet | None] = {}
        cutoff = None
        created_at = ""
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                if not line.strip():
                    continue
                record = json.loads(line)
                if lineno == 0 and "query_normalized" not in record:
                    cutoff = record.get("cutoff")
                    created_at = record.get("created_at", "")
                    continue
                snippet = snippet_from_dict(record["snippet"]) if record.get("hit") else None
                entries[record["query_normalized"]] = snippet
        return cls(entries=entries, cutoff=cutoff, created_at=created_at)


class CachedRetriever:
    """Snapshot-first retrieval. Cache hits (including cached misses) are
    answered without network; online mode fills gaps through the client,
    offline mode raises on them. Concurrent first fetches of one query are
    collapsed to a single flight."""

    def __init__(
        self,
        cache: SnapshotCache,
        client: WikipediaClient | None = None,
        offline: bool = False,
    ):
        if not offline and client is None:
            raise ValueError("online retrieval needs a client")
        self.cache = cache
        self.client = client
        self.offline = offline
        self._master = threading.Lock()
        self._in_flight: dict[str, threading.Lock] = {}

    def get(self, query: str) -> KnowledgeSnippet | None:
        key = normalize_query(query)
        if not key:
            raise ValueError("empty query")
        with self._master:
            if key in self.cache.entries:
                return self.cache.entries[key]
            if self.offline:
                raise SnapshotIncompleteError(query)
            gate = self._in_flight.setdefault(key, threading.Lock())
        with gate:
            with self._master:
                if key in self.cache.entries:
                    return self.cache.entries[key]
            snippet = self.client.retrieve_summary(query)
            with self._master:
                self.cache.entries[key] = snippet
                self._in_flight.pop(key, None)
            return snippet
