"""Evidence retrieval: query rewriting, corpus chunking and indexing, Okapi
BM25 and dense-cosine ranking over a local corpus, and pluggable web-search /
external-API clients.

A "token" here is a whitespace-delimited word. Scoring terms are lowercased;
chunk text keeps its original casing.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

from .core import Instruction, RetrievedContext, canonicalize
from .errors import IndexNotBuiltError, ProviderError, TransientProviderError
from .filtering import rule_filter
from .gateway import Gateway, RateLimiter
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

RETRIEVAL_PROVIDERS = ("local_bm25", "local_dense", "web_search", "external_api")
_INDEX_FORMAT = "sftgen-corpus-index"
_INDEX_VERSION = 1


@dataclass(frozen=True)
class SearchQuery:
    instruction_id: str
    text: str
    rewriter_template_id: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("search query text must be non-empty")


@dataclass(frozen=True)
class WebSearchConfig:
    base_url: str
    query_param: str = "q"
    api_key_env: str = ""
    result_path: str = "results"
    snippet_path: str = "snippet"
    url_path: str = "url"
    results_per_call: int = 5
    fetch_pages: bool = False
    fetch_timeout_s: float = 15.0
    max_page_bytes: int = 2_000_000


@dataclass(frozen=True)
class ExternalApiConfig:
    base_url: str
    query_param: str = "q"
    api_key_env: str = ""
    result_path: str = "results"
    text_path: str = "text"
    locator_path: str = "id"
    results_per_call: int = 5


@dataclass(frozen=True)
class RetrievalConfig:
    provider: str = "local_bm25"
    top_k: int = 5
    chunk_size_tokens: int = 256
    chunk_overlap_tokens: int = 32
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    web_search: WebSearchConfig | None = None
    external_api: ExternalApiConfig | None = None

    def __post_init__(self):
        if self.provider not in RETRIEVAL_PROVIDERS:
            raise ValueError(f"provider must be one of {RETRIEVAL_PROVIDERS}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 <= self.chunk_overlap_tokens < self.chunk_size_tokens:
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")
        if self.bm25_k1 <= 0:
            raise ValueError("bm25_k1 must be > 0")
        if not 0.0 <= self.bm25_b <= 1.0:
            raise ValueError("bm25_b must lie in [0, 1]")


def query_terms(text: str) -> list[str]:
    """Scoring tokens: canonicalized, lowercased, whitespace-split."""
    return canonicalize(text).lower().split()


def rewrite_query(instruction: Instruction, gateway: Gateway, template: PromptTemplate) -> SearchQuery:
    """Turn an instruction into a search-oriented query via the rewriter role.

    Falls back to the raw instruction text when the model replies with nothing,
    so retrieval can still proceed.
    """
    request = template.build_request({"instruction": instruction.text})
    response = gateway.complete(request)
    first_line = next((line.strip() for line in response.text.splitlines() if line.strip()), "")
    if not first_line:
        logger.warning("empty rewrite for instruction %s; using instruction text as query", instruction.id[:12])
        first_line = instruction.text
    return SearchQuery(instruction_id=instruction.id, text=first_line, rewriter_template_id=template.template_id)


def chunk_document(body: str, size: int, overlap: int) -> list[str]:
    """Sliding token windows of ``size`` with stride ``size - overlap``.

    Every token lands in at least one chunk; the final window may be shorter.
    """
    if size <= 0 or overlap < 0 or overlap >= size:
        raise ValueError("require size > overlap >= 0")
    tokens = body.split()
    if not tokens:
        return []
    stride = size - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + size, len(tokens))
        chunks.append(" ".join(tokens[start:end]))
        if end == len(tokens):
            break
        start += stride
    return chunks


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int


class CorpusIndex:
    """Immutable inverted index over fixed-size chunks of a document corpus."""

    def __init__(self, documents: list[dict], chunks: list[Chunk], chunk_size: int, chunk_overlap: int):
        self.documents = documents
        self.chunks = chunks
        self.chunk_size = chunk_size
        self.chunk_overlap = chunk_overlap
        self._by_id = {c.chunk_id: c for c in chunks}
        self.postings: dict[str, dict[str, int]] = {}
        self.df: dict[str, int] = {}
        total = 0
        for chunk in chunks:
            total += chunk.token_count
            for term in query_terms(chunk.text):
                bucket = self.postings.setdefault(term, {})
                bucket[chunk.chunk_id] = bucket.get(chunk.chunk_id, 0) + 1
        for term, bucket in self.postings.items():
            self.df[term] = len(bucket)
        self._total_tokens = total

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    @property
    def avgdl(self) -> float:
        return self._total_tokens / len(self.chunks) if self.chunks else 0.0

    def chunk(self, chunk_id: str) -> Chunk:
        try:
            return self._by_id[chunk_id]
        except KeyError:
            raise IndexNotBuiltError(f"chunk {chunk_id!r} not present in index") from None

    @classmethod
    def build(cls, documents: Sequence[dict], chunk_size: int = 256, chunk_overlap: int = 32) -> "CorpusIndex":
        docs = []
        chunks: list[Chunk] = []
        for doc in documents:
            doc_id = str(doc["doc_id"])
            body = str(doc.get("body", ""))
            docs.append({"doc_id": doc_id, "title": doc.get("title")})
            for seq, text in enumerate(chunk_document(body, chunk_size, chunk_overlap)):
                chunks.append(
                    Chunk(
                        chunk_id=f"{doc_id}#{seq:05d}",
                        doc_id=doc_id,
                        text=text,
                        token_count=len(text.split()),
                    )
                )
        return cls(docs, chunks, chunk_size, chunk_overlap)

    @classmethod
    def build_from_jsonl(cls, path: str | Path, chunk_size: int = 256, chunk_overlap: int = 32) -> "CorpusIndex":
        documents = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                documents.append(json.loads(line))
        return cls.build(documents, chunk_size, chunk_overlap)

    def save(self, path: str | Path) -> None:
        payload = {
            "format": _INDEX_FORMAT,
            "version": _INDEX_VERSION,
            "chunk_size": self.chunk_size,
            "chunk_overlap": self.chunk_overlap,
            "documents": self.documents,
            "chunks": [[c.chunk_id, c.doc_id, c.text, c.token_count] for c in self.chunks],
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusIndex":
        path = Path(path)
        if not path.is_file():
            raise IndexNotBuiltError(f"no index file at {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IndexNotBuiltError(f"index file {path} is not valid JSON") from exc
        if payload.get("format") != _INDEX_FORMAT or payload.get("version") != _INDEX_VERSION:
            raise IndexNotBuiltError(f"{path} is not a recognized corpus index")
        chunks = [Chunk(chunk_id=c[0], doc_id=c[1], text=c[2], token_count=c[3]) for c in payload["chunks"]]
        return cls(payload["documents"], chunks, payload["chunk_size"], payload["chunk_overlap"])


def bm25_idf(n_chunks: int, df: int) -> float:
    return math.log((n_chunks - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(
    terms: Sequence[str],
    chunk_id: str,
    index: CorpusIndex,
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 for one chunk. Terms are scored per occurrence in ``terms``;
    terms absent from the index contribute zero.
    """
    chunk = index.chunk(chunk_id)
    dl = chunk.token_count
    avgdl = index.avgdl
    score = 0.0
    for term in terms:
        bucket = index.postings.get(term)
        if not bucket:
            continue
        tf = bucket.get(chunk_id, 0)
        if tf == 0:
            continue
        idf = bm25_idf(index.n_chunks, index.df[term])
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
    return score


def _extract_path(obj, dotted: str):
    """Walk a dotted path through nested dicts/lists; None when it dead-ends."""
    current = obj
    for part in dotted.split("."):
        if not part:
            continue
        if isinstance(current, dict):
            current = current.get(part)
        elif isinstance(current, list) and part.isdigit():
            idx = int(part)
            current = current[idx] if idx < len(current) else None
        else:
            return None
        if current is None:
            return None
    return current


def _default_transport(url: str, params: dict, headers: dict, timeout: float):
    try:
        resp = requests.get(url, params=params, headers=headers, timeout=timeout)
    except (requests.Timeout, requests.ConnectionError) as exc:
        raise TransientProviderError(f"network failure: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientProviderError(f"HTTP {resp.status_code} from {url}")
    if resp.status_code >= 400:
        raise ProviderError(f"HTTP {resp.status_code} from {url}")
    return resp.json()


def _with_transport_retries(call: Callable, attempts: int = 3):
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            return call()
        except TransientProviderError as exc:
            last = exc
    raise ProviderError(f"search provider failed after {attempts} attempts: {last}")


@dataclass(frozen=True)
class SearchHit:
    snippet: str
    url: str


class WebSearchClient:
    """Search-engine client configured entirely by response paths.

    ``transport(url, params, headers, timeout) -> parsed JSON`` is injectable
    for tests; ``fetcher(url) -> html`` likewise.
    """

    def __init__(
        self,
        config: WebSearchConfig,
        transport: Callable | None = None,
        fetcher: Callable[[str], str] | None = None,
        limiter: RateLimiter | None = None,
    ):
        self.config = config
        self._transport = transport or _default_transport
        self._fetcher = fetcher
        self._limiter = limiter

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env or "", "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def search(self, query: str) -> list[SearchHit]:
        if self._limiter is not None:
            self._limiter.acquire()
        data = _with_transport_retries(
            lambda: self._transport(
                self.config.base_url, {self.config.query_param: query}, self._headers(), self.config.fetch_timeout_s
            )
        )
        results = _extract_path(data, self.config.result_path)
        if not isinstance(results, list):
            raise ProviderError(f"search response lacked a result list at {self.config.result_path!r}")
        hits = []
        for row in results[: self.config.results_per_call]:
            snippet = _extract_path(row, self.config.snippet_path)
            url = _extract_path(row, self.config.url_path)
            hits.append(SearchHit(snippet=str(snippet or ""), url=str(url or "")))
        return hits

    def fetch_page(self, url: str) -> str:
        """Fetch and strip a result page; failures degrade to empty text."""
        if not url:
            return ""
        if self._limiter is not None:
            self._limiter.acquire()
        try:
            if self._fetcher is not None:
                html = self._fetcher(url)
            else:
                resp = requests.get(url, timeout=self.config.fetch_timeout_s, stream=True)
                resp.raise_for_status()
                html = resp.raw.read(self.config.max_page_bytes, decode_content=True).decode(
                    resp.encoding or "utf-8", errors="replace"
                )
        except Exception as exc:  # page fetch is best-effort
            logger.warning("page fetch failed for %s: %s", url, exc)
            return ""
        return rule_filter(html)


class ExternalApiClient:
    """Generic structured-evidence API client mapped by response paths."""

    def __init__(self, config: ExternalApiConfig, transport: Callable | None = None, limiter: RateLimiter | None = None):
        self.config = config
        self._transport = transport or _default_transport
        self._limiter = limiter

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env or "", "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def search(self, query: str) -> list[tuple[str, str]]:
        """Returns (text, locator) rows in provider order."""
        if self._limiter is not None:
            self._limiter.acquire()
        data = _with_transport_retries(
            lambda: self._transport(self.config.base_url, {self.config.query_param: query}, self._headers(), 30.0)
        )
        results = _extract_path(data, self.config.result_path)
        if not isinstance(results, list):
            raise ProviderError(f"API response lacked a result list at {self.config.result_path!r}")
        rows = []
        for i, row in enumerate(results[: self.config.results_per_call]):
            text = _extract_path(row, self.config.text_path)
            locator = _extract_path(row, self.config.locator_path)
            rows.append((str(text or ""), str(locator or f"record:{i}")))
        return rows


class Retriever:
    """Rank-ordered evidence lookup for one provider kind.

    Results are at most ``top_k`` contexts sorted by descending score with
    ties broken by ascending chunk id / locator; an empty result list is a
    valid outcome, not an error.
    """

    def __init__(
        self,
        config: RetrievalConfig,
        index: CorpusIndex | None = None,
        embed_gateway: Gateway | None = None,
        web_client: WebSearchClient | None = None,
        api_client: ExternalApiClient | None = None,
    ):
        self.config = config
        self.index = index
        self.embed_gateway = embed_gateway
        self.web_client = web_client
        self.api_client = api_client
        self._chunk_vectors: dict[str, list[float]] | None = None

    def retrieve(self, query: SearchQuery) -> list[RetrievedContext]:
        provider = self.config.provider
        if provider == "local_bm25":
            return self._retrieve_bm25(query)
        if provider == "local_dense":
            return self._retrieve_dense(query)
        if provider == "web_search":
            return self._retrieve_web(query)
        return self._retrieve_api(query)

    def _require_index(self) -> CorpusIndex:
        if self.index is None:
            raise IndexNotBuiltError("local retrieval requires a built corpus index")
        return self.index

    def _retrieve_bm25(self, query: SearchQuery) -> list[RetrievedContext]:
        index = self._require_index()
        terms = query_terms(query.text)
        scores: dict[str, float] = {}
        k1, b = self.config.bm25_k1, self.config.bm25_b
        avgdl = index.avgdl
        for term in terms:
            bucket = index.postings.get(term)
            if not bucket:
                continue
            idf = bm25_idf(index.n_chunks, index.df[term])
            for chunk_id, tf in bucket.items():
                dl = index.chunk(chunk_id).token_count
                scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * tf * (k1 + 1.0) / (
                    tf + k1 * (1.0 - b + b * dl / avgdl)
                )
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[: self.config.top_k]
        return [
            RetrievedContext(
                instruction_id=query.instruction_id,
                chunk_text=index.chunk(chunk_id).text,
                source_kind="local_corpus",
                source_locator=chunk_id,
                score=score,
                rank=rank,
            )
            for rank, (chunk_id, score) in enumerate(ranked, start=1)
        ]

    def _ensure_chunk_vectors(self, index: CorpusIndex) -> dict[str, list[float]]:
        if self._chunk_vectors is None:
            if self.embed_gateway is None:
                raise IndexNotBuiltError("dense retrieval requires an embedding gateway")
            vectors: dict[str, list[float]] = {}
            batch = 128
            for start in range(0, len(index.chunks), batch):
                chunk_slice = index.chunks[start : start + batch]
                for chunk, vec in zip(chunk_slice, self.embed_gateway.embed([c.text for c in chunk_slice])):
                    vectors[chunk.chunk_id] = vec
            self._chunk_vectors = vectors
        return self._chunk_vectors

    def _retrieve_dense(self, query: SearchQuery) -> list[RetrievedContext]:
        index = self._require_index()
        if not index.chunks:
            return []
        if self.embed_gateway is None:
            raise IndexNotBuiltError("dense retrieval requires an embedding gateway")
        vectors = self._ensure_chunk_vectors(index)
        qvec = self.embed_gateway.embed([query.text])[0]
        ranked = sorted(
            ((self._cosine(qvec, vectors[c.chunk_id]), c.chunk_id) for c in index.chunks),
            key=lambda pair: (-pair[0], pair[1]),
        )[: self.config.top_k]
        return [
            RetrievedContext(
                instruction_id=query.instruction_id,
                chunk_text=index.chunk(chunk_id).text,
                source_kind="local_corpus",
                source_locator=chunk_id,
                # Stored scores must be non-negative; ranking used raw cosine.
                score=max(cos, 0.0),
                rank=rank,
            )
            for rank, (cos, chunk_id) in enumerate(ranked, start=1)
        ]

    @staticmethod
    def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
        dot = sum(x * y for x, y in zip(a, b))
        norm_a = math.sqrt(sum(x * x for x in a))
        norm_b = math.sqrt(sum(x * x for x in b))
        if norm_a == 0.0 or norm_b == 0.0:
            return 0.0
        return dot / (norm_a * norm_b)

    def _retrieve_web(self, query: SearchQuery) -> list[RetrievedContext]:
        if self.web_client is None:
            raise ProviderError("web_search retrieval requires a configured web client")
        hits = self.web_client.search(query.text)
        usable: list[tuple[str, str]] = []
        for position, hit in enumerate(hits, start=1):
            # Snippets are rule-cleaned once here; fetch_page returns already
            # cleaned text, so nothing gets entity-decoded twice.
            text = rule_filter(hit.snippet)
            if self.web_client.config.fetch_pages:
                page_text = self.web_client.fetch_page(hit.url)
                if page_text:
                    merged = f"{text} {page_text}".split()
                    text = " ".join(merged[: self.config.chunk_size_tokens])
            if text.strip():
                usable.append((text, hit.url or f"result:{position}"))
            if len(usable) == self.config.top_k:
                break
        return [
            RetrievedContext(
                instruction_id=query.instruction_id,
                chunk_text=text,
                source_kind="web_search",
                source_locator=locator,
                score=1.0 / rank,
                rank=rank,
                filter_status="rule_cleaned",
            )
            for rank, (text, locator) in enumerate(usable, start=1)
        ]

    def _retrieve_api(self, query: SearchQuery) -> list[RetrievedContext]:
        if self.api_client is None:
            raise ProviderError("external_api retrieval requires a configured API client")
        rows = [(text, locator) for text, locator in self.api_client.search(query.text) if text.strip()]
        return [
            RetrievedContext(
                instruction_id=query.instruction_id,
                chunk_text=text,
                source_kind="external_api",
                source_locator=locator,
                score=1.0 / rank,
                rank=rank,
            )
            for rank, (text, locator) in enumerate(rows[: self.config.top_k], start=1)
        ]
