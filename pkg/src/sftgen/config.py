"""Run configuration: TOML file parsing, flag overrides, canonical hashing.

The config hash covers every field that influences output bytes. Parallelism
and the output directory change where and how fast work happens, never what
gets produced, so they stay outside the hash and may differ on resume.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .expansion import ExpansionConfig
from .filtering import FilterConfig
from .gateway import ProviderConfig
from .retrieval import ExternalApiConfig, RetrievalConfig, WebSearchConfig

logger = logging.getLogger(__name__)

PROVIDER_ROLES = ("expander", "rewriter", "answerer", "base", "editor", "embedder")
PARALLELISM_CAP = 64


@dataclass(frozen=True)
class RunPaths:
    seeds: str = ""
    output_dir: str = ""
    corpus: str | None = None
    edit_seeds: str | None = None
    templates_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    stage: int
    expansion: ExpansionConfig
    retrieval: RetrievalConfig
    filter: FilterConfig
    providers: Mapping[str, ProviderConfig]
    paths: RunPaths
    parallelism: int = 1
    allow_ungrounded: bool = False
    max_edit_ratio: float = 0.5
    max_answer_chars: int = 8000
    temperatures: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage < 1:
            raise ConfigError("stage must be a positive integer")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    def require_roles(self, roles: tuple[str, ...]) -> None:
        missing = [r for r in roles if r not in self.providers]
        if missing:
            raise ConfigError(f"config is missing provider roles: {', '.join(missing)}")


def _build_provider(role: str, table: Mapping[str, Any]) -> ProviderConfig:
    known = {
        "kind",
        "model",
        "base_url",
        "api_key_env",
        "max_attempts",
        "backoff_base_ms",
        "requests_per_minute",
        "cache_dir",
        "timeout_s",
        "mock_script",
        "mock_transient_failures",
    }
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown keys in providers.{role}: {sorted(unknown)}")
    try:
        return ProviderConfig(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid providers.{role} table: {exc}") from exc


def _apply_overrides(data: dict, overrides: Mapping[str, Any]) -> dict:
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return data


def load_run_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse a TOML run config, apply dotted-key overrides, validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    data = _apply_overrides(data, overrides or {})
    return build_run_config(data, base_dir=path.parent)


def build_run_config(data: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    base_dir = base_dir or Path(".")

    def resolve(p: str | None) -> str | None:
        if p is None:
            return None
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else base_dir / candidate)

    expansion_table = dict(data.get("expansion") or {})
    if "m" not in expansion_table:
        raise ConfigError("expansion.m is required (number of expansion iterations; 0 disables expansion)")
    try:
        expansion = ExpansionConfig(**expansion_table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [expansion] table: {exc}") from exc

    retrieval_table = dict(data.get("retrieval") or {})
    web_table = retrieval_table.pop("web_search", None)
    api_table = retrieval_table.pop("external_api", None)
    try:
        retrieval = RetrievalConfig(
            **retrieval_table,
            web_search=WebSearchConfig(**web_table) if web_table else None,
            external_api=ExternalApiConfig(**api_table) if api_table else None,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [retrieval] table: {exc}") from exc

    try:
        filter_config = FilterConfig(**(data.get("filter") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [filter] table: {exc}") from exc

    providers_raw = data.get("providers") or {}
    unknown_roles = set(providers_raw) - set(PROVIDER_ROLES)
    if unknown_roles:
        raise ConfigError(f"unknown provider roles: {sorted(unknown_roles)} (valid: {PROVIDER_ROLES})")
    providers = {role: _build_provider(role, table) for role, table in providers_raw.items()}

    paths_raw = data.get("paths") or {}
    paths = RunPaths(
        seeds=resolve(paths_raw.get("seeds")) or "",
        output_dir=resolve(paths_raw.get("output_dir")) or "",
        corpus=resolve(paths_raw.get("corpus")),
        edit_seeds=resolve(paths_raw.get("edit_seeds")),
        templates_dir=resolve(paths_raw.get("templates_dir")),
    )

    parallelism = int(data.get("parallelism", 1))
    if parallelism > PARALLELISM_CAP:
        logger.warning("parallelism %d exceeds the hard cap; clamping to %d", parallelism, PARALLELISM_CAP)
        parallelism = PARALLELISM_CAP

    temperatures = {str(k): float(v) for k, v in (data.get("temperatures") or {}).items()}

    return RunConfig(
        run_id=str(data.get("run_id", "run")),
        stage=int(data.get("stage", 1)),
        expansion=expansion,
        retrieval=retrieval,
        filter=filter_config,
        providers=providers,
        paths=paths,
        parallelism=parallelism,
        allow_ungrounded=bool(data.get("allow_ungrounded", False)),
        max_edit_ratio=float(data.get("max_edit_ratio", 0.5)),
        max_answer_chars=int(data.get("max_answer_chars", 8000)),
        temperatures=temperatures,
    )


def _provider_fingerprint(config: ProviderConfig) -> dict:
    # mock_responder is a live callable (test-only) and cannot be serialized;
    # scripts themselves are part of the output contract, so they hash.
    return {
        "kind": config.kind,
        "model": config.model,
        "base_url": config.base_url,
        "api_key_env": config.api_key_env,
        "max_attempts": config.max_attempts,
        "mock_script": {k: list(v) if not isinstance(v, str) else v for k, v in (config.mock_script or {}).items()},
        "mock_transient_failures": config.mock_transient_failures,
    }


def config_to_dict(config: RunConfig) -> dict:
    """Canonical dict covering exactly the output-influencing fields."""
    return {
        "run_id": config.run_id,
        "stage": config.stage,
        "expansion": {
            "n": config.expansion.n,
            "k": config.expansion.k,
            "m": config.expansion.m,
            "dedup_threshold": config.expansion.dedup_threshold,
            "min_len_chars": config.expansion.min_len_chars,
            "max_len_chars": config.expansion.max_len_chars,
            "rng_seed": config.expansion.rng_seed,
            "sample_from": config.expansion.sample_from,
        },
        "retrieval": {
            "provider": config.retrieval.provider,
            "top_k": config.retrieval.top_k,
            "chunk_size_tokens": config.retrieval.chunk_size_tokens,
            "chunk_overlap_tokens": config.retrieval.chunk_overlap_tokens,
            "bm25_k1": config.retrieval.bm25_k1,
            "bm25_b": config.retrieval.bm25_b,
        },
        "filter": {
            "mode": config.filter.mode,
            "max_keep": config.filter.max_keep,
            "context_token_budget": config.filter.context_token_budget,
            "min_chunk_chars": config.filter.min_chunk_chars,
        },
        "providers": {role: _provider_fingerprint(p) for role, p in sorted(config.providers.items())},
        "paths": {"seeds": config.paths.seeds, "corpus": config.paths.corpus, "edit_seeds": config.paths.edit_seeds},
        "allow_ungrounded": config.allow_ungrounded,
        "max_edit_ratio": config.max_edit_ratio,
        "max_answer_chars": config.max_answer_chars,
        "temperatures": dict(sorted(config.temperatures.items())),
    }


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
