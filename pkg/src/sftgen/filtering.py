"""Context pre-processing: rule-based noise stripping, LLM relevance
selection, and budgeted context assembly.

``rule_filter`` decodes character entities exactly once per pass; idempotence
at the context level is enforced by the filter_status flag (re-cleaning a
``rule_cleaned`` context is a no-op), not by re-running the text function.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from html.parser import HTMLParser

from .core import Instruction, RetrievedContext
from .gateway import Gateway
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

FILTER_MODES = ("rules_only", "rules_then_llm")

# Element classes that overwhelmingly carry ads, chrome, and user comments.
_DROP_REGIONS = frozenset({"script", "style", "nav", "footer", "header", "aside", "form"})

# Defense net for residual angle-bracket runs (decoded entities, mangled
# tags the parser passed through). May clip prose like "a<b and c>d"; that
# loss is accepted to guarantee tag-free output.
_RESIDUAL_TAG_RE = re.compile(r"</?[a-zA-Z][^<>]*(?:>|$)")


@dataclass(frozen=True)
class FilterConfig:
    mode: str = "rules_then_llm"
    max_keep: int = 3
    context_token_budget: int = 3000
    min_chunk_chars: int = 30

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ValueError(f"mode must be one of {FILTER_MODES}")
        if self.max_keep < 1:
            raise ValueError("max_keep must be >= 1")
        if self.context_token_budget <= 0:
            raise ValueError("context_token_budget must be positive")
        if self.min_chunk_chars < 0:
            raise ValueError("min_chunk_chars must be >= 0")


class _VisibleTextExtractor(HTMLParser):
    """Collects character data outside dropped regions; comments vanish."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._suppress_depth: dict[str, int] = {}
        self.parts: list[str] = []

    def _suppressed(self) -> bool:
        return any(depth > 0 for depth in self._suppress_depth.values())

    def handle_starttag(self, tag, attrs):
        if tag in _DROP_REGIONS:
            self._suppress_depth[tag] = self._suppress_depth.get(tag, 0) + 1

    def handle_endtag(self, tag):
        if tag in _DROP_REGIONS:
            self._suppress_depth[tag] = max(0, self._suppress_depth.get(tag, 0) - 1)

    def handle_startendtag(self, tag, attrs):
        # Self-closing region tags open and close in place: nothing to drop.
        pass

    def handle_data(self, data):
        if not self._suppressed() and data:
            self.parts.append(data)

    def handle_comment(self, data):
        pass


def rule_filter(raw: str) -> str:
    """Strip markup, drop script/style/nav/footer/header/aside/form regions and
    comments, decode entities once, and collapse whitespace.

    Malformed markup is handled tolerantly; a dangling open tag is stripped to
    the end of its token. Single-pass: feed each text through at most once.
    """
    extractor = _VisibleTextExtractor()
    extractor.feed(raw)
    extractor.close()
    text = " ".join(extractor.parts)
    text = _RESIDUAL_TAG_RE.sub(" ", text)
    return " ".join(text.split())


def rule_clean_context(context: RetrievedContext) -> RetrievedContext:
    """Status-gated cleaning: raw contexts get one rule_filter pass, anything
    already cleaned passes through unchanged."""
    if context.filter_status != "raw":
        return context
    return replace(context, chunk_text=rule_filter(context.chunk_text), filter_status="rule_cleaned")


def parse_index_list(text: str, n_chunks: int) -> list[int]:
    """1-based indices from a model reply, order-preserving, deduplicated,
    out-of-range entries dropped."""
    seen = set()
    indices = []
    for token in re.findall(r"\d+", text):
        value = int(token)
        if 1 <= value <= n_chunks and value not in seen:
            seen.add(value)
            indices.append(value)
    return indices


def llm_rank_chunks(
    instruction: Instruction,
    contexts: list[RetrievedContext],
    gateway: Gateway,
    template: PromptTemplate,
    max_keep: int,
) -> list[RetrievedContext]:
    """Ask the model which numbered chunks matter; keep at most max_keep in the
    returned order. Unparseable replies fall back to the top chunks by
    retrieval rank.
    """
    if not contexts:
        return []
    not_cleaned = [c for c in contexts if c.filter_status not in ("rule_cleaned", "kept")]
    if not_cleaned:
        raise ValueError("llm_rank_chunks expects rule-cleaned contexts")
    chunk_block = "\n".join(f"{i}. {c.chunk_text}" for i, c in enumerate(contexts, start=1))
    request = template.build_request(
        {"instruction": instruction.text, "chunk_block": chunk_block, "max_keep": max_keep}
    )
    response = gateway.complete(request)
    indices = parse_index_list(response.text, len(contexts))[:max_keep]
    if not indices:
        logger.warning(
            "unusable relevance reply for instruction %s (%r); keeping top %d by rank",
            instruction.id[:12],
            response.text[:60],
            max_keep,
        )
        ordered = sorted(contexts, key=lambda c: c.rank)[:max_keep]
        return [replace(c, filter_status="kept") for c in ordered]
    return [replace(contexts[i - 1], filter_status="kept") for i in indices]


def assemble_context(kept: list[RetrievedContext], budget_tokens: int) -> tuple[str, list[str]]:
    """Concatenate kept chunks in order under a whitespace-token budget.

    Each chunk is preceded by a ``[source: <locator>]`` header that counts
    against the budget. Stops at the first chunk that does not fit; a budget
    too small for even the first chunk yields ("", []).
    """
    if budget_tokens <= 0:
        raise ValueError("budget_tokens must be positive")
    parts: list[str] = []
    used_ids: list[str] = []
    total = 0
    for context in kept:
        header = f"[source: {context.source_locator}]"
        cost = len(header.split()) + len(context.chunk_text.split())
        if total + cost > budget_tokens:
            break
        parts.append(f"{header}\n{context.chunk_text}")
        used_ids.append(context.context_id)
        total += cost
    return "\n\n".join(parts), used_ids
