"""Instruction-pool growth: sample a subset, prompt for new questions, filter.

Near-duplicates are rejected with a token-level longest-common-subsequence F1
score; exact canonical-text matches are rejected regardless of threshold.
Accepted candidates join the comparison set immediately, so duplicates inside
one batch also collapse.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .core import Instruction, InstructionPool, canonicalize
from .errors import ExpansionParseError
from .gateway import Gateway
from .seeds import SAMPLE_MODES, sample_subset
from .templates import PromptTemplate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpansionConfig:
    m: int
    rng_seed: int = 0
    n: int = 3
    k: int = 4
    dedup_threshold: float = 0.7
    min_len_chars: int = 10
    max_len_chars: int = 600
    sample_from: str = "full_pool"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k < 0 or self.m < 0:
            raise ValueError("k and m must be >= 0")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ValueError("dedup_threshold must lie in [0, 1]")
        if self.min_len_chars > self.max_len_chars:
            raise ValueError("min_len_chars must not exceed max_len_chars")
        if self.sample_from not in SAMPLE_MODES:
            raise ValueError(f"sample_from must be one of {SAMPLE_MODES}")


@dataclass
class IterationCounts:
    iteration: int
    generated: int = 0
    rejected_duplicate: int = 0
    rejected_length: int = 0
    rejected_parse: int = 0
    accepted: int = 0

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "generated": self.generated,
            "rejected_duplicate": self.rejected_duplicate,
            "rejected_length": self.rejected_length,
            "rejected_parse": self.rejected_parse,
            "accepted": self.accepted,
        }


@dataclass
class ExpansionReport:
    iterations: list[IterationCounts] = field(default_factory=list)

    def totals(self) -> dict:
        keys = ("generated", "rejected_duplicate", "rejected_length", "rejected_parse", "accepted")
        return {k: sum(getattr(it, k) for it in self.iterations) for k in keys}

    def to_json(self) -> dict:
        return {"iterations": [it.to_json() for it in self.iterations], "totals": self.totals()}


# List markers: "1." / "2)" / "(3)" / "[4]" / "10:" / "1 -" plus bullet chars.
# Digit runs are capped at 3 so years and other bare numbers in plain lines
# are never mistaken for markers.
_NUMBERED_RE = re.compile(r"^\s*\(?\[?(\d{1,3})[\]\)]?\s*[.:\-\)]*\s+(.*)$")
_BULLET_RE = re.compile(r"^\s*[-*•·]+\s+(.*)$")


def _strip_marker(line: str) -> tuple[bool, str]:
    """Returns (had_marker, content)."""
    m = _BULLET_RE.match(line)
    if m:
        return True, m.group(1).strip()
    m = _NUMBERED_RE.match(line)
    if m:
        return True, m.group(2).strip()
    return False, line.strip()


def parse_candidates(text: str, k: int) -> list[str]:
    """Extract up to k candidate strings from a numbered-list or line-per-item reply.

    When any line carries a list marker, only marked lines count (this drops
    preambles); otherwise every non-empty line is a candidate.
    """
    if k <= 0:
        return []
    parsed = [_strip_marker(line) for line in text.splitlines()]
    marked = [content for had, content in parsed if had and content]
    if marked:
        return marked[:k]
    bare = [content for _, content in parsed if content]
    return bare[:k]


def expand_once(
    subset: list[Instruction],
    k: int,
    gateway: Gateway,
    template: PromptTemplate,
) -> list[str]:
    """One expansion call: render the subset, ask for k new instructions, parse."""
    if not subset:
        raise ValueError("subset must be non-empty")
    if k == 0:
        return []
    seed_block = "\n".join(f"{i}. {inst.text}" for i, inst in enumerate(subset, start=1))
    request = template.build_request({"seed_block": seed_block, "k": k, "n": len(subset)})
    response = gateway.complete(request)
    candidates = parse_candidates(response.text, k)
    if not candidates:
        raise ExpansionParseError(f"no candidates parsed from response: {response.text[:120]!r}")
    return candidates


def similarity(a: str, b: str) -> float:
    """Token-level LCS F1 over canonicalized whitespace tokens, in [0, 1]."""
    ta = canonicalize(a).split()
    tb = canonicalize(b).split()
    if not ta or not tb:
        return 0.0
    if ta == tb:
        return 1.0
    lcs = _lcs_length(ta, tb)
    return 2.0 * lcs / (len(ta) + len(tb))


def _lcs_length(a: list[str], b: list[str]) -> int:
    # Two-row DP; trims the common prefix/suffix first to shrink the table.
    start = 0
    while start < len(a) and start < len(b) and a[start] == b[start]:
        start += 1
    end_a, end_b = len(a), len(b)
    while end_a > start and end_b > start and a[end_a - 1] == b[end_b - 1]:
        end_a -= 1
        end_b -= 1
    trimmed = start + (len(a) - end_a)
    a = a[start:end_a]
    b = b[start:end_b]
    if not a or not b:
        return trimmed
    prev = [0] * (len(b) + 1)
    for token_a in a:
        cur = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return trimmed + prev[-1]


def dedup_filter(candidates: list[str], pool: InstructionPool, threshold: float) -> list[str]:
    """Keep candidates whose max similarity against pool + earlier acceptances
    stays below threshold. Exact canonical matches are always rejected.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    comparison = [m.text for m in pool.members()]
    known_texts = pool.texts()
    accepted: list[str] = []
    for candidate in candidates:
        canonical = canonicalize(candidate)
        if not canonical or canonical in known_texts:
            continue
        n_tokens = len(canonical.split())
        too_similar = False
        for other in comparison:
            other_tokens = len(other.split())
            # LCS F1 cannot exceed 2*min/(sum); skip the DP when even that
            # upper bound stays under the threshold.
            upper = 2.0 * min(n_tokens, other_tokens) / (n_tokens + other_tokens)
            if upper < threshold:
                continue
            if similarity(canonical, other) >= threshold:
                too_similar = True
                break
        if too_similar:
            continue
        accepted.append(canonical)
        comparison.append(canonical)
        known_texts.add(canonical)
    return accepted


def derive_iteration_seed(base_seed: int, iteration: int) -> int:
    """Stable per-iteration PRNG seed so resumed runs redraw identical subsets."""
    digest = hashlib.sha256(f"{base_seed}:{iteration}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def run_expansion(
    pool: InstructionPool,
    config: ExpansionConfig,
    gateway: Gateway,
    template: PromptTemplate,
    *,
    stage: int = 1,
    start_iteration: int = 1,
    report: ExpansionReport | None = None,
    on_iteration=None,
) -> tuple[InstructionPool, ExpansionReport]:
    """Grow the pool over config.m iterations.

    The pool is mutated in place and returned together with the per-iteration
    report. ``start_iteration``/``report`` let a checkpointed run pick up where
    it stopped. ``on_iteration(t, pool, report)`` fires after each iteration.
    """
    if len(pool) == 0:
        raise ValueError("pool must contain at least one seed")
    report = report if report is not None else ExpansionReport()
    for t in range(start_iteration, config.m + 1):
        counts = IterationCounts(iteration=t)
        candidates: list[str] = []
        if config.k > 0:
            subset = sample_subset(
                pool, config.n, derive_iteration_seed(config.rng_seed, t), sample_from=config.sample_from
            )
            try:
                candidates = expand_once(subset, config.k, gateway, template)
            except ExpansionParseError:
                # The whole reply counts as one unusable candidate so the
                # conservation identity generated = accepted + rejections holds.
                counts.generated += 1
                counts.rejected_parse += 1
                logger.warning("expansion iteration %d produced no parseable candidates", t)
                candidates = []
        counts.generated += len(candidates)
        sized = []
        for candidate in candidates:
            canonical = canonicalize(candidate)
            if not config.min_len_chars <= len(canonical) <= config.max_len_chars:
                counts.rejected_length += 1
                continue
            sized.append(canonical)
        accepted = dedup_filter(sized, pool, config.dedup_threshold) if sized else []
        counts.rejected_duplicate += len(sized) - len(accepted)
        counts.accepted = len(accepted)
        if accepted:
            parent_ids = tuple(sorted(inst.id for inst in subset))
            for text in accepted:
                pool.add_expanded(
                    Instruction.create(text, origin="expanded", parent_ids=parent_ids, iteration=t, stage=stage)
                )
        report.iterations.append(counts)
        if on_iteration is not None:
            on_iteration(t, pool, report)
    return pool, report


def export_pool(pool: InstructionPool, path: str | Path) -> None:
    """Write the union view, one instruction per line, ordered by id.

    Atomic (temp-then-rename): the pool file doubles as expansion checkpoint
    state, so a crash mid-write must not corrupt it.
    """
    path = Path(path)
    lines = [json.dumps(m.to_json(), ensure_ascii=False, sort_keys=True) for m in pool.members()]
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    os.replace(tmp, path)


def load_pool_members(path: str | Path) -> list[Instruction]:
    members = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            members.append(Instruction.from_json(json.loads(line)))
    return members
