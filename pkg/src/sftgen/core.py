"""Domain records, content-addressed identifiers, and text canonicalization.

Every record type here is an immutable value object; identity is always a
SHA-256 digest of the canonical text, so retries and resumed runs can never
mint a second id for the same content.
"""
from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass

from .errors import DuplicateInstructionError

SEED_ORIGINS = ("human", "human_llm_collab")
INSTRUCTION_ORIGINS = ("seed", "expanded")
SOURCE_KINDS = ("local_corpus", "web_search", "external_api")
FILTER_STATUSES = ("raw", "rule_cleaned", "kept", "dropped")


def canonicalize(text: str) -> str:
    """NFC-normalize, trim, and collapse internal whitespace runs to one space.

    NFC rather than NFKC: byte-level variants of the same string merge, but
    compatibility/presentation forms stay distinct, which matters for scripts
    where aggressive folding can conflate different words. Idempotent.
    """
    return " ".join(unicodedata.normalize("NFC", text).split())


def content_hash(text: str) -> str:
    """64-hex-char SHA-256 digest of the UTF-8 bytes. Expects canonical input."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SeedQuery:
    """A curated domain question that bootstraps expansion."""

    id: str
    text: str
    origin: str
    stage: int
    category: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("seed text must be non-empty after canonicalization")
        if self.origin not in SEED_ORIGINS:
            raise ValueError(f"seed origin must be one of {SEED_ORIGINS}, got {self.origin!r}")
        if self.stage < 1:
            raise ValueError("stage must be a positive integer")

    @classmethod
    def create(cls, text: str, origin: str, stage: int, category: str | None = None) -> "SeedQuery":
        canonical = canonicalize(text)
        return cls(id=content_hash(canonical), text=canonical, origin=origin, stage=stage, category=category)

    def as_instruction(self) -> "Instruction":
        return Instruction(id=self.id, text=self.text, origin="seed", parent_ids=(), iteration=0, stage=self.stage)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "category": self.category,
            "origin": self.origin,
            "stage": self.stage,
        }


@dataclass(frozen=True)
class Instruction:
    """A member of the working instruction pool, seed-born or expanded."""

    id: str
    text: str
    origin: str
    parent_ids: tuple[str, ...]
    iteration: int
    stage: int

    def __post_init__(self):
        if not self.text:
            raise ValueError("instruction text must be non-empty")
        if self.origin not in INSTRUCTION_ORIGINS:
            raise ValueError(f"instruction origin must be one of {INSTRUCTION_ORIGINS}")
        seedlike = (self.origin == "seed", self.iteration == 0, not self.parent_ids)
        if any(seedlike) and not all(seedlike):
            raise ValueError(
                "origin=seed, iteration=0, and empty parent_ids must hold together "
                f"(got origin={self.origin}, iteration={self.iteration}, parents={len(self.parent_ids)})"
            )
        if self.origin == "expanded" and self.iteration < 1:
            raise ValueError("expanded instructions must carry iteration >= 1")
        if self.stage < 1:
            raise ValueError("stage must be a positive integer")

    @classmethod
    def create(
        cls,
        text: str,
        origin: str,
        parent_ids: tuple[str, ...] = (),
        iteration: int = 0,
        stage: int = 1,
    ) -> "Instruction":
        canonical = canonicalize(text)
        return cls(
            id=content_hash(canonical),
            text=canonical,
            origin=origin,
            parent_ids=tuple(parent_ids),
            iteration=iteration,
            stage=stage,
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "origin": self.origin,
            "parent_ids": list(self.parent_ids),
            "iteration": self.iteration,
            "stage": self.stage,
        }

    @classmethod
    def from_json(cls, row: dict) -> "Instruction":
        return cls(
            id=row["id"],
            text=row["text"],
            origin=row["origin"],
            parent_ids=tuple(row.get("parent_ids") or ()),
            iteration=int(row.get("iteration", 0)),
            stage=int(row.get("stage", 1)),
        )


class InstructionPool:
    """Seed set plus accepted expansions, duplicate-free by id and canonical text.

    Mutation is single-writer (the expansion loop); readers may share freely.
    """

    def __init__(self):
        self._seeds: dict[str, SeedQuery] = {}
        self._expanded: dict[str, Instruction] = {}
        self._texts: set[str] = set()

    def add_seed(self, seed: SeedQuery) -> None:
        self._guard(seed.id, seed.text)
        self._seeds[seed.id] = seed
        self._texts.add(seed.text)

    def add_expanded(self, instruction: Instruction) -> None:
        if instruction.origin != "expanded":
            raise ValueError("only expanded instructions may be added here")
        missing = [p for p in instruction.parent_ids if not self.has_id(p)]
        if missing:
            raise ValueError(f"parent ids not present in pool: {missing}")
        self._guard(instruction.id, instruction.text)
        self._expanded[instruction.id] = instruction
        self._texts.add(instruction.text)

    def _guard(self, member_id: str, text: str) -> None:
        if member_id in self._seeds or member_id in self._expanded:
            raise DuplicateInstructionError(f"id already in pool: {member_id}")
        if text in self._texts:
            raise DuplicateInstructionError(f"canonical text already in pool: {text[:60]!r}")

    def has_id(self, member_id: str) -> bool:
        return member_id in self._seeds or member_id in self._expanded

    def has_text(self, canonical_text: str) -> bool:
        return canonical_text in self._texts

    @property
    def seeds(self) -> tuple[SeedQuery, ...]:
        return tuple(self._seeds[i] for i in sorted(self._seeds))

    @property
    def expanded(self) -> tuple[Instruction, ...]:
        return tuple(self._expanded[i] for i in sorted(self._expanded))

    def members(self) -> tuple[Instruction, ...]:
        """Union view (seeds as instructions plus expansions), ordered by id."""
        by_id = {s.id: s.as_instruction() for s in self._seeds.values()}
        by_id.update(self._expanded)
        return tuple(by_id[i] for i in sorted(by_id))

    def ids(self) -> set[str]:
        return set(self._seeds) | set(self._expanded)

    def seed_ids(self) -> set[str]:
        return set(self._seeds)

    def expanded_ids(self) -> set[str]:
        return set(self._expanded)

    def texts(self) -> set[str]:
        return set(self._texts)

    def __len__(self) -> int:
        return len(self._seeds) + len(self._expanded)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstructionPool):
            return NotImplemented
        return self._seeds == other._seeds and self._expanded == other._expanded


@dataclass(frozen=True)
class RetrievedContext:
    """One evidence chunk tied to an instruction, with its filter lifecycle."""

    instruction_id: str
    chunk_text: str
    source_kind: str
    source_locator: str
    score: float
    rank: int
    filter_status: str = "raw"

    def __post_init__(self):
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"source_kind must be one of {SOURCE_KINDS}")
        if self.filter_status not in FILTER_STATUSES:
            raise ValueError(f"filter_status must be one of {FILTER_STATUSES}")
        if self.score < 0:
            raise ValueError("score must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    @property
    def context_id(self) -> str:
        # Deliberately excludes chunk_text so the id survives rule cleaning.
        return content_hash(f"{self.instruction_id}\n{self.source_kind}\n{self.source_locator}\n{self.rank}")

    def to_json(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "chunk_text": self.chunk_text,
            "source": {"kind": self.source_kind, "locator": self.source_locator},
            "score": self.score,
            "rank": self.rank,
            "filter_status": self.filter_status,
        }


@dataclass(frozen=True)
class Provenance:
    """How an answer came to be: provider, model, template, timing, tokens."""

    provider: str
    model: str
    template_id: str
    timestamp: float
    input_tokens: int = 0
    output_tokens: int = 0
    ungrounded: bool = False


@dataclass(frozen=True)
class SftRecord:
    """A validated (instruction, answer) training pair with full provenance."""

    instruction: Instruction
    answer: str
    context_ids: tuple[str, ...]
    provenance: Provenance

    def __post_init__(self):
        if not self.answer:
            raise ValueError("answer must be non-empty")


@dataclass(frozen=True)
class PreferenceTriple:
    """An (instruction, rejected, chosen) pair for preference training.

    flag is None for main-dataset triples; quarantined triples carry
    "no_change_needed" or "edit_ratio_exceeded".
    """

    instruction: Instruction
    rejected: str
    chosen: str
    edit_ratio: float
    context_ids: tuple[str, ...] = ()
    flag: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.edit_ratio <= 1.0:
            raise ValueError("edit_ratio must lie in [0, 1]")
        if self.flag is None and canonicalize(self.chosen) == canonicalize(self.rejected):
            raise ValueError("chosen must differ from rejected unless flagged no_change_needed")

    def to_json(self) -> dict:
        row = {
            "prompt": self.instruction.text,
            "rejected": self.rejected,
            "chosen": self.chosen,
            "edit_ratio": self.edit_ratio,
            "context_ids": list(self.context_ids),
        }
        if self.flag is not None:
            row["flag"] = self.flag
        return row
