"""Deterministic toy-run fixtures: seeds, corpus, and mock responders.

The responders are pure functions of the incoming request, so a single
collection run records a complete prompt-hash -> response script table; the
real test runs then execute against the frozen script with no responder
attached, proving every call was scripted.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

from sftgen.config import RunConfig, RunPaths
from sftgen.expansion import ExpansionConfig
from sftgen.filtering import FilterConfig
from sftgen.gateway import ChatRequest, ProviderConfig, prompt_hash, script_mock
from sftgen.pipeline import Runner
from sftgen.retrieval import RetrievalConfig

TOY_SEEDS = [
    {"text": "How is saffron rice prepared for a crowd?", "origin": "human", "category": "cooking"},
    {"text": "What makes mountain teahouse stops worth planning?", "origin": "human", "category": "travel"},
    {"text": "Why does my stew turn sour overnight?", "origin": "human", "category": "cooking"},
    {"text": "Which desert routes stay passable in winter?", "origin": "human_llm_collab", "category": "travel"},
    {"text": "How should flatbread dough rest before baking?", "origin": "human", "category": "cooking"},
    {"text": "Where can travelers watch carpet weaving demonstrations?", "origin": "human_llm_collab", "category": "travel"},
    {"text": "What herbs balance a heavy bean soup?", "origin": "human", "category": "cooking"},
    {"text": "When do pomegranate orchards open for visits?", "origin": "human", "category": "travel"},
    {"text": "How is yogurt drained for a thick dip?", "origin": "human_llm_collab", "category": "cooking"},
    {"text": "Which caravanserai ruins allow overnight stays?", "origin": "human", "category": "travel"},
]

TOY_CORPUS = [
    {
        "doc_id": "cookbook",
        "title": "Village cookbook",
        "body": (
            "saffron rice needs gentle steam and rested grains butter folds through the pot before serving "
            "flatbread dough rests under cloth for one hour herbs like fenugreek and parsley balance bean soup "
            "yogurt drains overnight in muslin for a thick dip sour stew usually means the pot stayed warm too long"
        ),
    },
    {
        "doc_id": "travelnotes",
        "title": "Road notes",
        "body": (
            "desert routes stay passable in winter when crews grade the gravel weekly mountain teahouse stops "
            "serve strong tea and dates carpet weaving demonstrations run each morning near the old bazaar "
            "pomegranate orchards open for visits during the autumn harvest caravanserai ruins host guided "
            "overnight stays with permits"
        ),
    },
    {
        "doc_id": "marketguide",
        "title": "Market guide",
        "body": (
            "spice stalls sell saffron threads dried limes and barberries porters carry crates of pomegranate "
            "before dawn the bazaar roof keeps summer heat off the copper workshops tea houses inside the market "
            "pour from samovars kept hot all day"
        ),
    },
    {
        "doc_id": "fieldfacts",
        "title": "Field facts",
        "body": (
            "crocus fields flower for three weeks and pickers work at sunrise grading saffron by color and aroma "
            "gravel crews repair desert washouts after each storm weaving sheds keep looms strung with wool dyed "
            "from walnut husks orchard keepers prune pomegranate trees in late winter"
        ),
    },
]

_VOCAB = [
    "saffron", "rice", "steam", "butter", "flatbread", "dough", "herbs", "fenugreek",
    "parsley", "bean", "soup", "yogurt", "stew", "desert", "routes", "winter",
    "gravel", "mountain", "teahouse", "dates", "carpet", "weaving", "bazaar",
    "pomegranate", "orchards", "harvest", "caravanserai", "permits", "crocus",
    "looms", "samovars", "copper",
]

_SCAFFOLDS = [
    "What makes {a} {b} popular with first-time visitors?",
    "How do locals combine {a} and {b} at home?",
    "Discuss {a} {b} {c} {d} briefly",
    "Outline {a} {b} {c} {d} for beginners",
    "Contrast {a} {b} {c} {d} carefully",
    "Evaluate {a} {b} {c} {d} in context",
    "Summarize {a} {b} {c} {d} for a guidebook",
    "Examine {a} {b} {c} {d} step by step",
]

EDIT_SEED_COUNT = 20
EDIT_SEEDS = [
    {"text": f"Edit seed question {i:02d} about current events in region {chr(65 + i % 5)}", "origin": "human"}
    for i in range(EDIT_SEED_COUNT)
]


def _pick(h: str, offset: int, pool: list[str]) -> str:
    return pool[int(h[offset : offset + 4], 16) % len(pool)]


def _pseudo_word(h: str, offset: int) -> str:
    return f"{_pick(h, offset, _VOCAB)}{h[offset]}"


def expansion_reply(request: ChatRequest) -> str:
    h = prompt_hash(request.user_prompt)
    lines = []
    for j in range(4):
        scaffold = _SCAFFOLDS[(j + int(h[j], 16)) % len(_SCAFFOLDS)]
        salt = h[4 * j : 4 * j + 12]
        line = scaffold.format(
            a=_pseudo_word(salt + h, 0),
            b=_pseudo_word(salt + h, 2),
            c=_pseudo_word(salt + h, 4),
            d=_pseudo_word(salt + h, 6),
        )
        lines.append(f"{j + 1}. {line}")
    return "\n".join(lines)


def rewrite_reply(request: ChatRequest) -> str:
    h = prompt_hash(request.user_prompt)
    return f"{_pick(h, 0, _VOCAB)} {_pick(h, 4, _VOCAB)}"


def rank_reply(request: ChatRequest) -> str:
    n = len(re.findall(r"(?m)^\d+\. ", request.user_prompt))
    n = min(n, 3)
    if n == 0:
        return "none"
    h = prompt_hash(request.user_prompt)
    order = list(range(1, n + 1))
    rotation = int(h[0], 16) % n
    order = order[rotation:] + order[:rotation]
    return ", ".join(str(i) for i in order)


def answer_reply(request: ChatRequest) -> str:
    h = prompt_hash(request.user_prompt)
    return (
        f"Based on the gathered evidence, {_pick(h, 0, _VOCAB)} pairs closely with "
        f"{_pick(h, 4, _VOCAB)} in everyday practice ({h[:8]})."
    )


_EDIT_INDEX_RE = re.compile(r"Edit seed question (\d+)")
_DRAFT_RE = re.compile(r"Draft answer:\n(.*?)\n\nEvidence:", re.DOTALL)


def plain_reply(request: ChatRequest) -> str:
    match = _EDIT_INDEX_RE.search(request.user_prompt)
    idx = int(match.group(1)) if match else 0
    h = prompt_hash(request.user_prompt)
    # Exactly ten tokens so a one-token edit gives ratio 0.1.
    return f"City {_pick(h, 0, _VOCAB)} holds rank {idx} among all {_pick(h, 4, _VOCAB)} options today"


def edit_reply(request: ChatRequest) -> str:
    match = _EDIT_INDEX_RE.search(request.user_prompt)
    idx = int(match.group(1)) if match else 0
    draft_match = _DRAFT_RE.search(request.user_prompt)
    draft = draft_match.group(1) if draft_match else "missing draft"
    if idx % 7 == 3:
        return draft  # nothing to correct
    if idx % 7 == 5:
        return "A completely rewritten response that shares nothing with the draft at all."
    tokens = draft.split()
    tokens[4] = f"updated{idx}"  # swap the rank token: one edit in ten
    return " ".join(tokens)


def rewriter_reply(request: ChatRequest) -> str:
    # The rewriter gateway serves both query rewriting and chunk ranking.
    if request.template_id == "rank":
        return rank_reply(request)
    return rewrite_reply(request)


GENERATE_RESPONDERS = {
    "expander": expansion_reply,
    "rewriter": rewriter_reply,
    "answerer": answer_reply,
}

EDIT_RESPONDERS = {
    "rewriter": rewriter_reply,
    "base": plain_reply,
    "editor": edit_reply,
}


def write_toy_inputs(base_dir: Path) -> tuple[Path, Path, Path]:
    base_dir.mkdir(parents=True, exist_ok=True)
    seeds_path = base_dir / "seeds.jsonl"
    seeds_path.write_text(
        "\n".join(json.dumps(r, ensure_ascii=False) for r in TOY_SEEDS) + "\n", encoding="utf-8"
    )
    corpus_path = base_dir / "corpus.jsonl"
    corpus_path.write_text(
        "\n".join(json.dumps(r, ensure_ascii=False) for r in TOY_CORPUS) + "\n", encoding="utf-8"
    )
    edit_seeds_path = base_dir / "edit_seeds.jsonl"
    edit_seeds_path.write_text(
        "\n".join(json.dumps(r, ensure_ascii=False) for r in EDIT_SEEDS) + "\n", encoding="utf-8"
    )
    return seeds_path, corpus_path, edit_seeds_path


def toy_config(
    seeds_path: Path,
    corpus_path: Path,
    out_dir: Path,
    providers: dict[str, ProviderConfig],
    *,
    edit_seeds_path: Path | None = None,
    parallelism: int = 2,
    m: int = 5,
) -> RunConfig:
    return RunConfig(
        run_id="toy",
        stage=1,
        expansion=ExpansionConfig(m=m, n=3, k=4, rng_seed=20240601, dedup_threshold=0.7),
        retrieval=RetrievalConfig(provider="local_bm25", top_k=3, chunk_size_tokens=32, chunk_overlap_tokens=8),
        filter=FilterConfig(mode="rules_then_llm", max_keep=3, context_token_budget=200, min_chunk_chars=10),
        providers=providers,
        paths=RunPaths(
            seeds=str(seeds_path),
            output_dir=str(out_dir),
            corpus=str(corpus_path),
            edit_seeds=str(edit_seeds_path) if edit_seeds_path else None,
        ),
        parallelism=parallelism,
        max_edit_ratio=0.5,
    )


def collect_scripts(responders: dict[str, object], run) -> dict[str, dict[str, str]]:
    """One recording pass: wrap each responder so every served reply lands in a
    per-role script table keyed by prompt hash."""
    tables: dict[str, dict[str, str]] = {role: {} for role in responders}

    def wrap(role, base):
        def respond(request):
            text = base(request)
            tables[role][prompt_hash(request.user_prompt)] = text
            return text

        return respond

    providers = {role: script_mock({}, responder=wrap(role, base)) for role, base in responders.items()}
    run(providers)
    return tables


def scripted_providers(tables: dict[str, dict[str, str]]) -> dict[str, ProviderConfig]:
    return {role: script_mock(dict(table)) for role, table in tables.items()}


def assert_fully_scripted(runner: Runner) -> None:
    for role, gateway in runner.gateways.items():
        unscripted = getattr(gateway.provider, "unscripted", [])
        assert not unscripted, f"role {role} saw unscripted prompts: {unscripted[:3]}"


def generate_script_tables(tmp_dir: Path) -> tuple[Path, Path, Path, dict]:
    """Build toy inputs and collect full generate-flow script tables."""
    seeds_path, corpus_path, edit_seeds_path = write_toy_inputs(tmp_dir / "inputs")

    def run(providers):
        config = toy_config(seeds_path, corpus_path, tmp_dir / "collect_out", providers)
        Runner(config).run()

    tables = collect_scripts(GENERATE_RESPONDERS, run)
    return seeds_path, corpus_path, edit_seeds_path, tables


def edit_script_tables(tmp_dir: Path) -> tuple[Path, Path, Path, dict]:
    seeds_path, corpus_path, edit_seeds_path = write_toy_inputs(tmp_dir / "inputs")

    def run(providers):
        config = toy_config(
            seeds_path, corpus_path, tmp_dir / "collect_edit_out", providers, edit_seeds_path=edit_seeds_path
        )
        Runner(config).run_edit()

    tables = collect_scripts(EDIT_RESPONDERS, run)
    return seeds_path, corpus_path, edit_seeds_path, tables


DATA_FILES_GENERATE = ("seeds.jsonl", "pool.jsonl", "contexts.jsonl", "dataset.stage1.jsonl")
DATA_FILES_EDIT = ("seeds.jsonl", "contexts.jsonl", "preferences.jsonl", "quarantine.jsonl")


def read_outputs(out_dir: Path, names: tuple[str, ...]) -> dict[str, bytes]:
    return {name: (out_dir / name).read_bytes() for name in names}
