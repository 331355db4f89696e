"""Evidence construction pipeline: search, chunk, filter, rerank, select.

Stages mirror the collection procedure for retrieved-evidence corpora:

1. fan out the claim to the configured search engines (top 20 each) and
   deduplicate by URL, keeping per-engine ranks for audit only;
2. split each page into paragraph chunks of at most 200 words;
3. drop sentences that near-repeat the claim (RougeL F-measure > 0.8);
4. rerank surviving chunks against the claim;
5. select the top 4 pages by maximum chunk score, requiring at least two
   pages published before the claim when dates allow;
6. assemble one evidence piece per page from its top 3 chunks, trimmed to
   at most 300 words.

Pinned conventions the sources leave open (sentence segmenter, chunk
separator, concatenation order) are recorded in every pipeline trace.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from datetime import date
from html.parser import HTMLParser
from pathlib import Path
from typing import Optional, Protocol, Sequence

from ._net import post_json
from .errors import InvariantViolation, RerankBackendError, SearchBackendError
from .model import (
    ClaimRecord,
    EvidencePiece,
    canonical_json,
    fallback_id,
    word_count,
)
from .characteristics import word_set

logger = logging.getLogger(__name__)

MAX_CHUNK_WORDS = 200
MAX_EVIDENCE_WORDS = 300
TOP_RESULTS_PER_ENGINE = 20
TOP_CHUNKS_PER_PAGE = 3
PAGES_PER_CLAIM = 4
MIN_PRECLAIM_PAGES = 2
CLAIM_REPEAT_THRESHOLD = 0.8
CHUNK_SEPARATOR = " "

_PARAGRAPH_RE = re.compile(r"\n\s*\n")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")

#: Human-readable record of the pinned conventions, embedded in traces.
PIPELINE_CONVENTIONS = {
    "sentence_segmenter": "split after [.!?] followed by whitespace",
    "chunk_separator": repr(CHUNK_SEPARATOR),
    "chunk_concat_order": "descending rerank score",
    "rouge_variant": "LCS F-measure over word tokens",
}


@dataclass(frozen=True)
class SearchResult:
    """One deduplicated search hit; ranks are kept per engine but unused."""

    url: str
    title: str
    rank_per_engine: tuple[tuple[str, int], ...]
    fetched_text: str
    pub_date: Optional[date] = None


@dataclass(frozen=True)
class Chunk:
    """A paragraph-derived passage of at most 200 words."""

    page_url: str
    ordinal: int
    text: str
    word_count: int
    rerank_score: Optional[float] = None

    def __post_init__(self) -> None:
        if not 1 <= self.word_count <= MAX_CHUNK_WORDS:
            raise InvariantViolation(
                "word_count", f"outside [1, {MAX_CHUNK_WORDS}]: {self.word_count}"
            )


class SearchClient(Protocol):
    name: str

    def search(self, query: str) -> list[SearchResult]:
        ...


class RerankClient(Protocol):
    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        ...


# -- clients -----------------------------------------------------------------------

class _BlockTextExtractor(HTMLParser):
    _BLOCK_TAGS = {
        "p", "div", "br", "li", "ul", "ol", "h1", "h2", "h3", "h4", "h5",
        "h6", "table", "tr", "blockquote", "section", "article", "header",
        "footer", "pre",
    }

    def __init__(self) -> None:
        super().__init__()
        self.parts: list[str] = []
        self._suppress = 0

    def handle_starttag(self, tag, attrs):
        if tag in ("script", "style"):
            self._suppress += 1
        if tag in self._BLOCK_TAGS:
            self.parts.append("\n\n")

    def handle_endtag(self, tag):
        if tag in ("script", "style") and self._suppress:
            self._suppress -= 1
        if tag in self._BLOCK_TAGS:
            self.parts.append("\n\n")

    def handle_data(self, data):
        if not self._suppress:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    """Flatten HTML to text with blank lines at block-element boundaries."""
    parser = _BlockTextExtractor()
    parser.feed(html)
    return "".join(parser.parts)


class FixtureSearchClient:
    """Search over a local directory of text pages with a JSON manifest.

    The manifest is a list of objects with ``file``, ``url`` and optional
    ``title`` / ``pub_date`` fields. Pages are ranked by how many distinct
    query words they contain; pages sharing no word with the query do not
    match.
    """

    def __init__(self, corpus_dir: Path, name: str = "fixture"):
        self.name = name
        self._corpus_dir = Path(corpus_dir)
        manifest_path = self._corpus_dir / "manifest.json"
        self._manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    def search(self, query: str) -> list[SearchResult]:
        query_words = word_set(query)
        scored: list[tuple[int, str, dict, str]] = []
        for entry in self._manifest:
            text = (self._corpus_dir / entry["file"]).read_text(encoding="utf-8")
            overlap = len(query_words & word_set(text))
            if overlap > 0:
                scored.append((overlap, entry["url"], entry, text))
        scored.sort(key=lambda item: (-item[0], item[1]))
        results = []
        for rank, (_, url, entry, text) in enumerate(scored[:TOP_RESULTS_PER_ENGINE], start=1):
            pub_date = entry.get("pub_date")
            results.append(
                SearchResult(
                    url=url,
                    title=entry.get("title", ""),
                    rank_per_engine=((self.name, rank),),
                    fetched_text=text,
                    pub_date=date.fromisoformat(pub_date) if pub_date else None,
                )
            )
        return results


class HttpSearchClient:
    """Search backend speaking JSON over HTTP.

    Request: ``{"query": str, "top_k": int}``. Response: ``{"results":
    [{"url", "title", "text", "pub_date"?, "html"?}]}``. HTML bodies are
    flattened to text locally.
    """

    def __init__(self, endpoint: str, name: str, timeout: float = 30.0, retries: int = 2):
        self.name = name
        self._endpoint = endpoint
        self._timeout = timeout
        self._retries = retries

    def search(self, query: str) -> list[SearchResult]:
        data = post_json(
            self._endpoint,
            {"query": query, "top_k": TOP_RESULTS_PER_ENGINE},
            self._timeout,
            self._retries,
            SearchBackendError,
        )
        results = []
        for rank, item in enumerate(data.get("results", [])[:TOP_RESULTS_PER_ENGINE], start=1):
            text = item.get("text") or html_to_text(item.get("html", ""))
            pub_date = item.get("pub_date")
            results.append(
                SearchResult(
                    url=item["url"],
                    title=item.get("title", ""),
                    rank_per_engine=((self.name, rank),),
                    fetched_text=text,
                    pub_date=date.fromisoformat(pub_date) if pub_date else None,
                )
            )
        return results


class LexicalOverlapReranker:
    """Deterministic stand-in scorer: coverage of query words by the chunk."""

    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        query_words = word_set(query)
        if not query_words:
            return [0.0 for _ in texts]
        return [
            len(query_words & word_set(text)) / len(query_words) for text in texts
        ]


class HttpRerankClient:
    """Rerank backend speaking JSON over HTTP.

    Request: ``{"query": str, "documents": [str]}``; response:
    ``{"scores": [float]}`` aligned with the request order.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        self._endpoint = endpoint
        self._timeout = timeout
        self._retries = retries

    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        data = post_json(
            self._endpoint,
            {"query": query, "documents": list(texts)},
            self._timeout,
            self._retries,
            RerankBackendError,
        )
        scores = data.get("scores")
        if not isinstance(scores, list) or len(scores) != len(texts):
            raise RerankBackendError("malformed scores payload", retryable=False)
        return [float(s) for s in scores]


class ReplayReranker:
    """Serves recorded rerank scores from a JSON file keyed by (query, text)."""

    def __init__(self, store_path: Path):
        self._store = json.loads(Path(store_path).read_text(encoding="utf-8"))

    @staticmethod
    def key(query: str, text: str) -> str:
        return fallback_id(query, text)

    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        try:
            return [self._store[self.key(query, text)] for text in texts]
        except KeyError as exc:
            raise RerankBackendError(f"no recorded score for {exc}", retryable=False)


class RecordingReranker:
    """Wraps a live reranker and persists every score for later replay."""

    def __init__(self, inner: RerankClient, store_path: Path):
        self._inner = inner
        self._store_path = Path(store_path)
        self._store: dict[str, float] = {}
        if self._store_path.exists():
            self._store = json.loads(self._store_path.read_text(encoding="utf-8"))

    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        scores = self._inner.score(query, texts)
        for text, value in zip(texts, scores):
            self._store[ReplayReranker.key(query, text)] = value
        self._store_path.write_text(
            canonical_json(self._store), encoding="utf-8"
        )
        return scores


# -- pipeline stages ---------------------------------------------------------------

def search(
    claim: ClaimRecord, engines: Sequence[SearchClient]
) -> list[SearchResult]:
    """Fan the claim text out to every engine and deduplicate by URL.

    First occurrence wins for page content; per-engine ranks are merged.
    """
    if not engines:
        raise SearchBackendError("no search client configured", retryable=False)
    merged: dict[str, SearchResult] = {}
    for engine in engines:
        for result in engine.search(claim.text):
            existing = merged.get(result.url)
            if existing is None:
                merged[result.url] = result
            else:
                merged[result.url] = replace(
                    existing,
                    rank_per_engine=existing.rank_per_engine + result.rank_per_engine,
                )
    return list(merged.values())


def split_paragraphs(page_text: str) -> list[str]:
    return [part.strip() for part in _PARAGRAPH_RE.split(page_text) if part.strip()]


def chunk_page(page_text: str, page_url: str = "") -> list[Chunk]:
    """Paragraphs become chunks; oversized paragraphs split greedily."""
    chunks: list[Chunk] = []
    ordinal = 0
    for paragraph in split_paragraphs(page_text):
        tokens = paragraph.split()
        if len(tokens) <= MAX_CHUNK_WORDS:
            pieces = [paragraph]
        else:
            pieces = [
                " ".join(tokens[start : start + MAX_CHUNK_WORDS])
                for start in range(0, len(tokens), MAX_CHUNK_WORDS)
            ]
        for piece in pieces:
            chunks.append(
                Chunk(
                    page_url=page_url,
                    ordinal=ordinal,
                    text=piece,
                    word_count=word_count(piece),
                )
            )
            ordinal += 1
    return chunks


def split_sentences(text: str) -> list[str]:
    return [part for part in _SENTENCE_RE.split(text) if part.strip()]


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length via the standard DP recurrence."""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """RougeL F-measure between two texts over word tokens."""
    candidate_words = candidate.split()
    reference_words = reference.split()
    lcs = lcs_length(candidate_words, reference_words)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate_words)
    recall = lcs / len(reference_words)
    return 2 * precision * recall / (precision + recall)


def filter_claim_repeats(
    chunk: Chunk, claim: ClaimRecord, threshold: float = CLAIM_REPEAT_THRESHOLD
) -> Optional[Chunk]:
    """Remove sentences that near-repeat the claim; drop emptied chunks."""
    kept = [
        sentence
        for sentence in split_sentences(chunk.text)
        if rouge_l(sentence, claim.text) <= threshold
    ]
    if not kept:
        return None
    text = " ".join(kept)
    return replace(chunk, text=text, word_count=word_count(text))


def rerank(claim: ClaimRecord, chunks: Sequence[Chunk], client: RerankClient) -> list[Chunk]:
    """Score every chunk; order by score desc, ties by ordinal then URL."""
    if not chunks:
        return []
    scores = client.score(claim.text, [chunk.text for chunk in chunks])
    scored = [replace(chunk, rerank_score=score) for chunk, score in zip(chunks, scores)]
    scored.sort(key=lambda c: (-c.rerank_score, c.ordinal, c.page_url))
    return scored


@dataclass
class PageSelection:
    urls: list[str]
    shortfall: int = 0


def select_pages(
    claim: ClaimRecord,
    scored_chunks: Sequence[Chunk],
    pub_dates: dict[str, Optional[date]],
    k: int = PAGES_PER_CLAIM,
    min_preclaim: int = MIN_PRECLAIM_PAGES,
) -> PageSelection:
    """Top-k pages by maximum chunk score, honoring the pre-claim quota.

    When the plain top-k holds fewer than ``min_preclaim`` pages published
    before the claim, the lowest-scoring post-claim picks are swapped for the
    best remaining pre-claim pages. A remaining deficit (fewer pre-claim
    pages exist than required) is reported as ``shortfall``, never silently
    ignored. Claims without a date make the constraint inapplicable.
    """
    best_score: dict[str, float] = {}
    for chunk in scored_chunks:
        score = chunk.rerank_score if chunk.rerank_score is not None else 0.0
        if chunk.page_url not in best_score or score > best_score[chunk.page_url]:
            best_score[chunk.page_url] = score
    ordered = sorted(best_score, key=lambda url: (-best_score[url], url))

    def is_preclaim(url: str) -> bool:
        page_date = pub_dates.get(url)
        return (
            claim.claim_date is not None
            and page_date is not None
            and page_date < claim.claim_date
        )

    selection = ordered[:k]
    if claim.claim_date is None:
        return PageSelection(urls=selection, shortfall=0)

    preclaim_available = [url for url in ordered if is_preclaim(url)]
    needed = min(min_preclaim, len(preclaim_available))
    shortfall = min_preclaim - len(preclaim_available) if len(preclaim_available) < min_preclaim else 0

    selected_preclaim = [url for url in selection if is_preclaim(url)]
    if len(selected_preclaim) < needed:
        replacements = [url for url in preclaim_available if url not in selection]
        # Drop post-claim picks from the bottom of the ranking first.
        for url in reversed(selection):
            if len(selected_preclaim) >= needed or not replacements:
                break
            if not is_preclaim(url):
                selection.remove(url)
                incoming = replacements.pop(0)
                selection.append(incoming)
                selected_preclaim.append(incoming)
        selection.sort(key=lambda url: (-best_score[url], url))
    return PageSelection(urls=selection, shortfall=shortfall)


def assemble_evidence(
    claim: ClaimRecord,
    page_url: str,
    page_chunks: Sequence[Chunk],
    pub_date: Optional[date] = None,
    fact_check_domains: frozenset[str] = frozenset(),
) -> EvidencePiece:
    """Concatenate the page's top chunks into one evidence piece (≤ 300 words)."""
    ranked = sorted(
        page_chunks,
        key=lambda c: (-(c.rerank_score if c.rerank_score is not None else 0.0), c.ordinal),
    )
    take = min(TOP_CHUNKS_PER_PAGE, len(ranked))
    while take > 1 and sum(c.word_count for c in ranked[:take]) > MAX_EVIDENCE_WORDS:
        take -= 1
    text = CHUNK_SEPARATOR.join(chunk.text for chunk in ranked[:take])

    pub_after = None
    if pub_date is not None and claim.claim_date is not None:
        pub_after = pub_date > claim.claim_date
    is_fact_check = False
    if fact_check_domains:
        from .characteristics import normalize_domain, _domain_matches
        from .errors import MalformedUrl

        try:
            is_fact_check = _domain_matches(normalize_domain(page_url), fact_check_domains)
        except MalformedUrl:
            is_fact_check = False
    return EvidencePiece(
        id=fallback_id(claim.id, page_url, text),
        claim_id=claim.id,
        text=text,
        url=page_url,
        pub_date=pub_date,
        is_fact_check_source=is_fact_check,
        pub_after_claim=pub_after,
        relevance=None,
        stance=None,
    )


def run_pipeline(
    claim: ClaimRecord,
    engines: Sequence[SearchClient],
    reranker: RerankClient,
    fact_check_domains: frozenset[str] = frozenset(),
) -> tuple[list[EvidencePiece], dict]:
    """Full per-claim pipeline; returns evidence pieces plus an audit trace."""
    results = search(claim, engines)
    pub_dates = {result.url: result.pub_date for result in results}

    all_chunks: list[Chunk] = []
    dropped = 0
    for result in results:
        for chunk in chunk_page(result.fetched_text, page_url=result.url):
            filtered = filter_claim_repeats(chunk, claim)
            if filtered is None:
                dropped += 1
            else:
                all_chunks.append(filtered)

    scored = rerank(claim, all_chunks, reranker)
    selection = select_pages(claim, scored, pub_dates)
    evidences = []
    for url in selection.urls:
        page_chunks = [chunk for chunk in scored if chunk.page_url == url]
        if not page_chunks:
            continue
        evidences.append(
            assemble_evidence(
                claim,
                url,
                page_chunks,
                pub_date=pub_dates.get(url),
                fact_check_domains=fact_check_domains,
            )
        )

    trace = {
        "claim_id": claim.id,
        "conventions": PIPELINE_CONVENTIONS,
        "results": [
            {"url": r.url, "ranks": dict(r.rank_per_engine)} for r in results
        ],
        "chunks_kept": len(all_chunks),
        "chunks_dropped_as_claim_repeats": dropped,
        "selected_pages": selection.urls,
        "preclaim_shortfall": selection.shortfall,
    }
    return evidences, trace
