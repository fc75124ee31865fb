"""Seed ingestion, deterministic sampling, and per-stage accounting.

Seed files are JSONL, one object per line:
``{"text": str, "category": str?, "origin": "human"|"human_llm_collab", "stage": int?}``

Sampling uses Python's Mersenne Twister (``random.Random(rng_seed)``) with
``Random.sample`` over the pool ordered by id, so a fixed seed reproduces the
same subset on any host.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from .core import Instruction, InstructionPool, SEED_ORIGINS, SeedQuery, canonicalize
from .errors import EmptySeedSetError, SeedParseError

import random

logger = logging.getLogger(__name__)

SAMPLE_MODES = ("seeds_only", "full_pool")


def load_seeds(path: str | Path, default_stage: int = 1) -> InstructionPool:
    """Parse a seed JSONL file into a pool, dropping exact canonical duplicates."""
    path = Path(path)
    raw = path.read_bytes()
    pool = InstructionPool()
    byte_offset = 0
    for line_no, line_bytes in enumerate(raw.split(b"\n"), start=1):
        line = line_bytes.decode("utf-8", errors="replace")
        start_offset = byte_offset
        byte_offset += len(line_bytes) + 1
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SeedParseError(str(path), line_no, start_offset, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(row, dict):
            raise SeedParseError(str(path), line_no, start_offset, "line is not a JSON object")
        text = canonicalize(str(row.get("text", "")))
        if not text:
            raise SeedParseError(str(path), line_no, start_offset, "seed text missing or empty")
        origin = row.get("origin")
        if origin not in SEED_ORIGINS:
            raise SeedParseError(
                str(path), line_no, start_offset, f"origin must be one of {SEED_ORIGINS}, got {origin!r}"
            )
        stage = row.get("stage", default_stage)
        if not isinstance(stage, int) or stage < 1:
            raise SeedParseError(str(path), line_no, start_offset, f"stage must be a positive integer, got {stage!r}")
        category = row.get("category")
        seed = SeedQuery.create(text=text, origin=origin, stage=stage, category=category)
        if pool.has_text(seed.text):
            logger.info("dropping duplicate seed at %s:%d: %r", path, line_no, seed.text[:80])
            continue
        pool.add_seed(seed)
    if len(pool) == 0:
        raise EmptySeedSetError(f"no valid seeds in {path}")
    return pool


def export_seeds(pool: InstructionPool, path: str | Path) -> None:
    """Echo the loaded seed set, one canonical record per line, ordered by id."""
    path = Path(path)
    lines = [json.dumps(s.to_json(), ensure_ascii=False, sort_keys=True) for s in pool.seeds]
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    os.replace(tmp, path)


def sample_subset(
    pool: InstructionPool,
    n: int,
    rng_seed: int,
    *,
    sample_from: str = "full_pool",
) -> list[Instruction]:
    """Uniform sample without replacement; clamps to the pool when n exceeds it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if sample_from not in SAMPLE_MODES:
        raise ValueError(f"sample_from must be one of {SAMPLE_MODES}")
    if sample_from == "seeds_only":
        members = [s.as_instruction() for s in pool.seeds]
    else:
        members = list(pool.members())
    if not members:
        raise ValueError("pool is empty")
    if n >= len(members):
        return members
    return random.Random(rng_seed).sample(members, n)


def seed_stats(pool: InstructionPool) -> dict:
    """Exact counts by stage, category, and origin; each partition sums to |pool|."""
    by_stage: dict[int, int] = {}
    by_category: dict[str, int] = {}
    by_origin: dict[str, int] = {}
    for seed in pool.seeds:
        by_stage[seed.stage] = by_stage.get(seed.stage, 0) + 1
        category = seed.category if seed.category is not None else ""
        by_category[category] = by_category.get(category, 0) + 1
        by_origin[seed.origin] = by_origin.get(seed.origin, 0) + 1
    return {"stage": by_stage, "category": by_category, "origin": by_origin, "total": len(pool.seeds)}
