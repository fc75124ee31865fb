"""Model-updating data: capture the base model's answer, revise it minimally
against retrieved evidence, and emit preference triples.

Edit size is quantified as token-level Levenshtein distance divided by the
longer token count; triples whose ratio exceeds the cap are quarantined for
human review instead of entering the main dataset.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

from .core import Instruction, PreferenceTriple, canonicalize
from .errors import EmptyAnswerError, NoEvidenceError
from .gateway import Gateway
from .synthesis import append_jsonl_atomic
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

DEFAULT_MAX_EDIT_RATIO = 0.5


def capture_baseline(instruction: Instruction, base_gateway: Gateway, plain_template: PromptTemplate) -> str:
    """The base model's unassisted answer: the future rejected side."""
    response = base_gateway.complete(plain_template.build_request({"instruction": instruction.text}))
    text = response.text.strip()
    if not text:
        raise EmptyAnswerError(f"base model returned no text for {instruction.id[:12]}")
    return text


def revise_answer(
    instruction: Instruction,
    rejected: str,
    assembled_context: str,
    editor_gateway: Gateway,
    edit_template: PromptTemplate,
) -> str:
    """Evidence-guided minimal revision of the rejected answer."""
    if not rejected:
        raise ValueError("rejected answer must be non-empty")
    if not assembled_context:
        raise NoEvidenceError(f"no evidence available to revise {instruction.id[:12]}")
    request = edit_template.build_request(
        {"instruction": instruction.text, "rejected": rejected, "context": assembled_context}
    )
    response = editor_gateway.complete(request)
    text = response.text.strip()
    if not text:
        raise EmptyAnswerError(f"editor returned no text for {instruction.id[:12]}")
    return text


def edit_ratio(rejected: str, chosen: str) -> float:
    """Token-level Levenshtein distance over max token count, in [0, 1]."""
    a = canonicalize(rejected).split()
    b = canonicalize(chosen).split()
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return _levenshtein(a, b) / longest


def _levenshtein(a: list[str], b: list[str]) -> int:
    # Two-row DP over token sequences.
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, token_a in enumerate(a, start=1):
        cur = [i]
        for j, token_b in enumerate(b, start=1):
            cost = 0 if token_a == token_b else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def emit_triple(
    instruction: Instruction,
    rejected: str,
    chosen: str,
    context_ids: Sequence[str],
    max_ratio: float = DEFAULT_MAX_EDIT_RATIO,
    main_path: str | Path | None = None,
    quarantine_path: str | Path | None = None,
) -> PreferenceTriple:
    """Route a triple to the main dataset or the quarantine file.

    Main-file triples satisfy ratio <= max_ratio and chosen != rejected;
    everything else is quarantined with a flag explaining why.
    """
    ratio = edit_ratio(rejected, chosen)
    if canonicalize(chosen) == canonicalize(rejected):
        flag = "no_change_needed"
    elif ratio > max_ratio:
        flag = "edit_ratio_exceeded"
    else:
        flag = None
    triple = PreferenceTriple(
        instruction=instruction,
        rejected=rejected,
        chosen=chosen,
        edit_ratio=ratio,
        context_ids=tuple(context_ids),
        flag=flag,
    )
    if flag is None:
        if main_path is not None:
            append_jsonl_atomic(main_path, triple.to_json())
    else:
        logger.info("quarantining triple for %s: %s (ratio %.3f)", instruction.id[:12], flag, ratio)
        if quarantine_path is not None:
            append_jsonl_atomic(quarantine_path, triple.to_json())
    return triple
